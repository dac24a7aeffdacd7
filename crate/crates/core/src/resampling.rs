//! Class-imbalance treatment: ADASYN oversampling of the minority class and
//! NearMiss-1 undersampling of the majority.
//!
//! Neighbour searches use Euclidean distance on z-scored features, with the
//! standardization fitted on the rows handed in (the training split). Ties
//! in distance are broken by row index, so results do not depend on the
//! number of worker threads.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PclvError, Result};
use crate::matrix::{Matrix, Standardizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    /// ADASYN followed by NearMiss.
    Sequential,
    AdasynOnly,
    NearMissOnly,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResampleConfig {
    pub adasyn_beta: f64,
    pub adasyn_k: usize,
    pub nearmiss_k: usize,
    pub nearmiss_target_ratio: f64,
    pub mode: ResampleMode,
    pub seed: u64,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        ResampleConfig {
            adasyn_beta: 1.0,
            adasyn_k: 5,
            nearmiss_k: 3,
            nearmiss_target_ratio: 1.0,
            mode: ResampleMode::Sequential,
            seed: 0,
        }
    }
}

impl ResampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.adasyn_k == 0 {
            return Err(PclvError::config("adasyn_k", "must be at least 1"));
        }
        if self.nearmiss_k == 0 {
            return Err(PclvError::config("nearmiss_k", "must be at least 1"));
        }
        if !(self.adasyn_beta > 0.0 && self.adasyn_beta <= 1.0) {
            return Err(PclvError::config(
                "adasyn_beta",
                format!("{} not in (0, 1]", self.adasyn_beta),
            ));
        }
        if !(self.nearmiss_target_ratio >= 1.0 && self.nearmiss_target_ratio.is_finite()) {
            return Err(PclvError::config(
                "nearmiss_target_ratio",
                format!("{} < 1", self.nearmiss_target_ratio),
            ));
        }
        Ok(())
    }
}

/// Output of a resampling step. Original rows keep their relative order.
#[derive(Debug, Clone, PartialEq)]
pub struct Resampled {
    pub x: Matrix,
    pub labels: Vec<bool>,
    /// For each appended synthetic row: (seed row, neighbour row) in the input.
    pub synthetic_origins: Vec<(usize, usize)>,
    /// Input row index of every output row; `None` for synthetic rows.
    pub source_rows: Vec<Option<usize>>,
}

impl Resampled {
    fn identity(x: &Matrix, labels: &[bool]) -> Self {
        Resampled {
            x: x.clone(),
            labels: labels.to_vec(),
            synthetic_origins: Vec::new(),
            source_rows: (0..labels.len()).map(Some).collect(),
        }
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l).count();
        (pos, self.labels.len() - pos)
    }
}

fn minority_label(labels: &[bool]) -> Result<Option<bool>> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(PclvError::input("resampling needs both classes present"));
    }
    Ok(match pos.cmp(&neg) {
        std::cmp::Ordering::Less => Some(true),
        std::cmp::Ordering::Greater => Some(false),
        std::cmp::Ordering::Equal => None,
    })
}

fn check_input(x: &Matrix, labels: &[bool]) -> Result<()> {
    if x.n_rows() != labels.len() {
        return Err(PclvError::input(format!(
            "{} rows but {} labels",
            x.n_rows(),
            labels.len()
        )));
    }
    if !x.all_finite() {
        return Err(PclvError::input("non-finite feature value"));
    }
    Ok(())
}

/// The `k` candidates nearest to `query`, ordered by (squared distance,
/// index). Partial sums abandon a candidate once it exceeds the current
/// k-th best.
pub fn k_nearest(
    z: &Matrix,
    query: &[f64],
    candidates: impl IntoIterator<Item = usize>,
    k: usize,
    exclude: Option<usize>,
) -> Vec<(f64, usize)> {
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    if k == 0 {
        return best;
    }
    for j in candidates {
        if Some(j) != exclude {
            offer(&mut best, k, query, z.row(j), j);
        }
    }
    best
}

fn offer(best: &mut Vec<(f64, usize)>, k: usize, query: &[f64], row: &[f64], j: usize) {
    let bound = if best.len() == k {
        best[k - 1].0
    } else {
        f64::INFINITY
    };
    let mut d2 = 0.0;
    for (a, b) in query.iter().zip(row) {
        let t = a - b;
        d2 += t * t;
        if d2 > bound {
            return;
        }
    }
    if best.len() == k && (d2, j) >= best[k - 1] {
        return;
    }
    let pos = best.partition_point(|&(d, i)| (d, i) < (d2, j));
    best.insert(pos, (d2, j));
    best.truncate(k);
}

const LEAF_SIZE: usize = 16;

enum KdNode {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Exact k-d tree over a set of candidate rows. Subtrees are skipped only
/// when the gap along the splitting column alone exceeds the current k-th
/// best distance, so answers equal [`k_nearest`] over the same candidates,
/// ties included.
pub struct NeighborIndex<'a> {
    z: &'a Matrix,
    rows: Vec<usize>,
    nodes: Vec<KdNode>,
}

impl<'a> NeighborIndex<'a> {
    pub fn new(z: &'a Matrix, candidates: &[usize]) -> Self {
        let mut index = NeighborIndex {
            z,
            rows: candidates.to_vec(),
            nodes: Vec::new(),
        };
        if !index.rows.is_empty() {
            index.build(0, candidates.len());
        }
        index
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(KdNode::Leaf { start, end });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let z = self.z;
        let slice = &mut self.rows[start..end];
        let (dim, spread) = (0..z.n_cols())
            .map(|c| {
                let (lo, hi) = slice.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    let v = z.get(i, c);
                    (lo.min(v), hi.max(v))
                });
                (c, hi - lo)
            })
            .fold((0, 0.0), |b, (c, s)| if s > b.1 { (c, s) } else { b });
        if spread == 0.0 {
            return id;
        }
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| {
            z.get(a, dim).total_cmp(&z.get(b, dim)).then(a.cmp(&b))
        });
        let value = z.get(slice[mid], dim);
        let left = self.build(start, start + mid);
        let right = self.build(start + mid, end);
        self.nodes[id] = KdNode::Split {
            dim,
            value,
            left,
            right,
        };
        id
    }

    pub fn query(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Vec<(f64, usize)> {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k > 0 && !self.nodes.is_empty() {
            self.search(0, query, k, exclude, &mut best);
        }
        best
    }

    fn search(
        &self,
        node: usize,
        query: &[f64],
        k: usize,
        exclude: Option<usize>,
        best: &mut Vec<(f64, usize)>,
    ) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &j in &self.rows[start..end] {
                    if Some(j) != exclude {
                        offer(best, k, query, self.z.row(j), j);
                    }
                }
            }
            KdNode::Split {
                dim,
                value,
                left,
                right,
            } => {
                // Left rows are <= value and right rows >= value on `dim`.
                let diff = query[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, exclude, best);
                if best.len() < k || diff * diff <= best[k - 1].0 {
                    self.search(far, query, k, exclude, best);
                }
            }
        }
    }
}

fn map_rows<T: Send>(idx: &[usize], f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        idx.par_iter().map(|&i| f(i)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        idx.iter().map(|&i| f(i)).collect()
    }
}

/// ADASYN oversampling.
///
/// Each minority row `i` gets density ratio `r_i = Δ_i / k`, where `Δ_i`
/// counts majority rows among its `k` nearest neighbours. The
/// `G = (m_maj - m_min) * beta` synthetic rows are shared out as
/// `g_i = round(G * r_i / Σr)` (uniformly when `Σr = 0`), each drawn on the
/// segment from `x_i` to a random one of its `k` nearest minority
/// neighbours.
pub fn adasyn(x: &Matrix, labels: &[bool], config: &ResampleConfig) -> Result<Resampled> {
    check_input(x, labels)?;
    config.validate()?;
    let scaler = Standardizer::fit(x);
    adasyn_scaled(x, labels, config, &scaler)
}

fn adasyn_scaled(
    x: &Matrix,
    labels: &[bool],
    config: &ResampleConfig,
    scaler: &Standardizer,
) -> Result<Resampled> {
    let Some(min_label) = minority_label(labels)? else {
        return Ok(Resampled::identity(x, labels));
    };
    let k = config.adasyn_k;
    if k >= x.n_rows() {
        return Err(PclvError::input(format!(
            "adasyn_k = {k} must be below the sample count {}",
            x.n_rows()
        )));
    }
    let minority: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == min_label).collect();
    let m_min = minority.len();
    let m_maj = labels.len() - m_min;
    let g_total = ((m_maj - m_min) as f64 * config.adasyn_beta).round();
    if g_total == 0.0 {
        return Ok(Resampled::identity(x, labels));
    }
    let z = scaler.transform(x);
    let n = x.n_rows();

    let everyone: Vec<usize> = (0..n).collect();
    let all_index = NeighborIndex::new(&z, &everyone);
    let ratios: Vec<f64> = map_rows(&minority, |i| {
        let nn = all_index.query(z.row(i), k, Some(i));
        nn.iter().filter(|&&(_, j)| labels[j] != min_label).count() as f64 / k as f64
    });
    let sum: f64 = ratios.iter().sum();
    let weights: Vec<f64> = if sum > 0.0 {
        ratios.iter().map(|r| r / sum).collect()
    } else {
        vec![1.0 / m_min as f64; m_min]
    };
    let counts: Vec<usize> = weights.iter().map(|w| (w * g_total).round() as usize).collect();

    let k_min = k.min(m_min - 1);
    let minority_index = NeighborIndex::new(&z, &minority);
    let minority_nn: Vec<Vec<usize>> = map_rows(&minority, |i| {
        minority_index
            .query(z.row(i), k_min, Some(i))
            .into_iter()
            .map(|(_, j)| j)
            .collect()
    });

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = x.clone();
    let mut out_labels = labels.to_vec();
    let mut origins = Vec::new();
    let mut row = vec![0.0; x.n_cols()];
    for (slot, &i) in minority.iter().enumerate() {
        let nn = &minority_nn[slot];
        for _ in 0..counts[slot] {
            let j = if nn.is_empty() {
                i
            } else {
                nn[rng.random_range(0..nn.len())]
            };
            let lambda: f64 = rng.random();
            let (xi, xj) = (x.row(i), x.row(j));
            for c in 0..row.len() {
                row[c] = xi[c] + lambda * (xj[c] - xi[c]);
            }
            out.push_row(&row);
            out_labels.push(min_label);
            origins.push((i, j));
        }
    }
    let mut source_rows: Vec<Option<usize>> = (0..n).map(Some).collect();
    source_rows.extend(std::iter::repeat_n(None, origins.len()));
    Ok(Resampled {
        x: out,
        labels: out_labels,
        synthetic_origins: origins,
        source_rows,
    })
}

/// NearMiss-1 undersampling: keeps the `ceil(ratio * m_min)` majority rows
/// with the smallest mean distance to their `nearmiss_k` nearest minority
/// rows (ties by row index). Minority rows are untouched.
pub fn nearmiss(x: &Matrix, labels: &[bool], config: &ResampleConfig) -> Result<Resampled> {
    check_input(x, labels)?;
    config.validate()?;
    let scaler = Standardizer::fit(x);
    nearmiss_scaled(x, labels, config, &scaler)
}

fn nearmiss_scaled(
    x: &Matrix,
    labels: &[bool],
    config: &ResampleConfig,
    scaler: &Standardizer,
) -> Result<Resampled> {
    let Some(min_label) = minority_label(labels)? else {
        return Ok(Resampled::identity(x, labels));
    };
    let minority: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == min_label).collect();
    let majority: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != min_label).collect();
    let keep = (config.nearmiss_target_ratio * minority.len() as f64).ceil() as usize;
    if majority.len() <= keep {
        return Ok(Resampled::identity(x, labels));
    }
    let z = scaler.transform(x);
    let k = config.nearmiss_k.min(minority.len());
    let index = NeighborIndex::new(&z, &minority);
    let scores: Vec<f64> = map_rows(&majority, |i| {
        let nn = index.query(z.row(i), k, None);
        nn.iter().map(|(d2, _)| d2.sqrt()).sum::<f64>() / k as f64
    });
    let mut order: Vec<usize> = (0..majority.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(majority[a].cmp(&majority[b])));
    let mut retained = vec![false; labels.len()];
    for &i in &minority {
        retained[i] = true;
    }
    for &slot in order.iter().take(keep) {
        retained[majority[slot]] = true;
    }
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| retained[i]).collect();
    Ok(Resampled {
        x: x.select_rows(&rows),
        labels: rows.iter().map(|&i| labels[i]).collect(),
        synthetic_origins: Vec::new(),
        source_rows: rows.into_iter().map(Some).collect(),
    })
}

/// Runs the configured resampling pipeline: ADASYN then NearMiss by default.
/// One standardization, fitted on the input rows, serves both stages.
pub fn balance(x: &Matrix, labels: &[bool], config: &ResampleConfig) -> Result<Resampled> {
    check_input(x, labels)?;
    config.validate()?;
    minority_label(labels)?;
    let scaler = Standardizer::fit(x);
    match config.mode {
        ResampleMode::None => Ok(Resampled::identity(x, labels)),
        ResampleMode::AdasynOnly => adasyn_scaled(x, labels, config, &scaler),
        ResampleMode::NearMissOnly => nearmiss_scaled(x, labels, config, &scaler),
        ResampleMode::Sequential => {
            let over = adasyn_scaled(x, labels, config, &scaler)?;
            let under = nearmiss_scaled(&over.x, &over.labels, config, &scaler)?;
            let source_rows = under
                .source_rows
                .iter()
                .map(|s| s.and_then(|r| over.source_rows[r]))
                .collect();
            let kept_synthetic: Vec<(usize, usize)> = under
                .source_rows
                .iter()
                .filter_map(|s| s.and_then(|r| r.checked_sub(x.n_rows())))
                .map(|k| over.synthetic_origins[k])
                .collect();
            Ok(Resampled {
                x: under.x,
                labels: under.labels,
                synthetic_origins: kept_synthetic,
                source_rows,
            })
        }
    }
}
