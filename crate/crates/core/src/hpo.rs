//! Bayesian hyperparameter search: a Gaussian-process surrogate with a
//! Matérn 5/2 kernel and expected-improvement acquisition, minimizing the
//! objective. Points live in the unit cube and are mapped onto the search
//! space only when evaluated.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::boosting::GbtParams;
use crate::error::{PclvError, Result};

pub const DEFAULT_N_INIT: usize = 10;
pub const DEFAULT_N_ITER: usize = 40;
pub const N_CANDIDATES: usize = 1024;
const JITTERS: [f64; 4] = [1e-6, 1e-5, 1e-4, 1e-3];
const GRID: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub scale: Scale,
    #[serde(default)]
    pub integer: bool,
}

impl Dimension {
    fn new(name: &str, lower: f64, upper: f64, scale: Scale, integer: bool) -> Self {
        Dimension {
            name: name.to_string(),
            lower,
            upper,
            scale,
            integer,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lower.is_finite() && self.upper.is_finite() && self.lower < self.upper) {
            return Err(PclvError::config(
                &self.name,
                format!("bounds [{}, {}] are not an interval", self.lower, self.upper),
            ));
        }
        if self.scale == Scale::Log && self.lower <= 0.0 {
            return Err(PclvError::config(&self.name, "log scale needs a positive lower bound"));
        }
        Ok(())
    }

    /// Unit-interval coordinate to parameter value.
    pub fn denormalize(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let v = match self.scale {
            Scale::Linear => self.lower + u * (self.upper - self.lower),
            Scale::Log => (self.lower.ln() + u * (self.upper.ln() - self.lower.ln())).exp(),
        };
        let v = if self.integer { v.round() } else { v };
        v.clamp(self.lower, self.upper)
    }

    pub fn normalize(&self, v: f64) -> f64 {
        let u = match self.scale {
            Scale::Linear => (v - self.lower) / (self.upper - self.lower),
            Scale::Log => (v.ln() - self.lower.ln()) / (self.upper.ln() - self.lower.ln()),
        };
        u.clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SearchSpace {
    pub dimensions: Vec<Dimension>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        use Scale::*;
        SearchSpace {
            dimensions: vec![
                Dimension::new("eta", 0.01, 0.3, Log, false),
                Dimension::new("max_depth", 2.0, 8.0, Linear, true),
                Dimension::new("min_child_weight", 0.1, 10.0, Log, false),
                Dimension::new("lambda", 0.1, 10.0, Log, false),
                Dimension::new("gamma", 0.0, 5.0, Linear, false),
                Dimension::new("subsample", 0.5, 1.0, Linear, false),
                Dimension::new("colsample", 0.5, 1.0, Linear, false),
                Dimension::new("n_rounds", 50.0, 500.0, Log, true),
            ],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.dimensions.is_empty() {
            return Err(PclvError::config("search_space", "no dimensions"));
        }
        if self.dimensions.len() > PRIMES.len() {
            return Err(PclvError::config(
                "search_space",
                format!("at most {} dimensions supported", PRIMES.len()),
            ));
        }
        for d in &self.dimensions {
            d.validate()?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dimensions.len()
    }

    pub fn names(&self) -> Vec<&str> {
        self.dimensions.iter().map(|d| d.name.as_str()).collect()
    }

    pub fn denormalize(&self, point: &[f64]) -> Vec<f64> {
        self.dimensions.iter().zip(point).map(|(d, &u)| d.denormalize(u)).collect()
    }

    pub fn normalize(&self, values: &[f64]) -> Vec<f64> {
        self.dimensions.iter().zip(values).map(|(d, &v)| d.normalize(v)).collect()
    }

    /// Overrides the named fields of `base` with `values`.
    pub fn to_gbt_params(&self, values: &[f64], base: &GbtParams) -> Result<GbtParams> {
        let mut p = base.clone();
        for (d, &v) in self.dimensions.iter().zip(values) {
            match d.name.as_str() {
                "eta" => p.eta = v,
                "max_depth" => p.max_depth = v as usize,
                "min_child_weight" => p.min_child_weight = v,
                "lambda" => p.lambda = v,
                "gamma" => p.gamma = v,
                "subsample" => p.subsample = v,
                "colsample" => p.colsample = v,
                "n_rounds" => p.n_rounds = v as usize,
                other => {
                    return Err(PclvError::config(
                        "search_space",
                        format!("unknown GBT parameter {other:?}"),
                    ))
                }
            }
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub point: Vec<f64>,
    pub value: f64,
}

/// `(f_best - mu) Φ(z) + sigma φ(z)` with `z = (f_best - mu) / sigma`.
pub fn expected_improvement(mu: f64, sigma: f64, f_best: f64) -> Result<f64> {
    if mu.is_nan() || sigma.is_nan() || f_best.is_nan() {
        return Err(PclvError::Numerical("NaN passed to expected improvement".into()));
    }
    if sigma < 0.0 {
        return Err(PclvError::Numerical(format!("negative sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(0.0);
    }
    let n = Normal::standard();
    let diff = f_best - mu;
    let z = diff / sigma;
    Ok((diff * n.cdf(z) + sigma * n.pdf(z)).max(0.0))
}

pub fn matern52(r: f64, s: f64, ell: f64) -> f64 {
    let a = 5f64.sqrt() * r / ell;
    s * s * (1.0 + a + a * a / 3.0) * (-a).exp()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// GP surrogate fitted to standardized observations.
#[derive(Debug, Clone)]
pub struct Gp {
    points: Vec<Vec<f64>>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    y_mean: f64,
    y_scale: f64,
    pub amplitude: f64,
    pub length_scale: f64,
    pub jitter: f64,
}

impl Gp {
    /// Chooses `(s, ell)` on a 16 x 16 log grid by marginal likelihood.
    pub fn fit(observations: &[Observation]) -> Result<Gp> {
        let Some(first) = observations.first() else {
            return Err(PclvError::input("surrogate needs at least one observation"));
        };
        let d = first.point.len();
        if observations.iter().any(|o| o.point.len() != d || !o.value.is_finite()) {
            return Err(PclvError::input("observations must share a dimension and be finite"));
        }
        let n = observations.len();
        let ys: Vec<f64> = observations.iter().map(|o| o.value).collect();
        let y_mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n as f64;
        let y_scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        let y = DVector::from_iterator(n, ys.iter().map(|v| (v - y_mean) / y_scale));
        let points: Vec<Vec<f64>> = observations.iter().map(|o| o.point.clone()).collect();
        let dists = DMatrix::from_fn(n, n, |i, j| dist(&points[i], &points[j]));

        let diag = (d as f64).sqrt().max(1.0);
        let mut best: Option<(f64, Gp)> = None;
        for &s in &logspace(0.1, 10.0, GRID) {
            for &ell in &logspace(0.01, 2.0 * diag, GRID) {
                let Some((chol, jitter)) = factor(&dists, s, ell) else {
                    continue;
                };
                let alpha = chol.solve(&y);
                let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
                let lml = -0.5 * y.dot(&alpha) - 0.5 * log_det;
                if !lml.is_finite() || best.as_ref().is_some_and(|(b, _)| lml <= *b) {
                    continue;
                }
                best = Some((
                    lml,
                    Gp {
                        points: points.clone(),
                        chol,
                        alpha,
                        y_mean,
                        y_scale,
                        amplitude: s,
                        length_scale: ell,
                        jitter,
                    },
                ));
            }
        }
        best.map(|(_, gp)| gp)
            .ok_or_else(|| PclvError::Numerical("kernel matrix not positive definite at any jitter".into()))
    }

    /// Posterior mean and standard deviation in objective units.
    pub fn predict(&self, q: &[f64]) -> (f64, f64) {
        let k = DVector::from_iterator(
            self.points.len(),
            self.points.iter().map(|p| matern52(dist(p, q), self.amplitude, self.length_scale)),
        );
        let mu = k.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&k).unwrap_or_else(|| k.clone());
        let var = (self.amplitude * self.amplitude - v.dot(&v)).max(0.0);
        (self.y_mean + self.y_scale * mu, self.y_scale * var.sqrt())
    }

    /// Prior standard deviation in objective units.
    pub fn prior_sigma(&self) -> f64 {
        self.amplitude * self.y_scale
    }
}

fn factor(dists: &DMatrix<f64>, s: f64, ell: f64) -> Option<(Cholesky<f64, Dyn>, f64)> {
    let base = dists.map(|r| matern52(r, s, ell));
    if base.iter().any(|v| !v.is_finite()) {
        return None;
    }
    JITTERS.iter().find_map(|&j| {
        let mut k = base.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += j;
        }
        Cholesky::new(k).map(|c| (c, j))
    })
}

pub fn gp_posterior(observations: &[Observation], query: &[f64]) -> Result<(f64, f64)> {
    Ok(Gp::fit(observations)?.predict(query))
}

const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Halton sequence with a random digit permutation per dimension
/// (zero kept fixed so the radical inverse stays finite).
pub struct ScrambledHalton {
    perms: Vec<Vec<u64>>,
    index: u64,
}

impl ScrambledHalton {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        let perms = PRIMES[..dim]
            .iter()
            .map(|&b| {
                let mut p: Vec<u64> = (1..b).collect();
                p.shuffle(rng);
                p.insert(0, 0);
                p
            })
            .collect();
        ScrambledHalton { perms, index: 0 }
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        self.index += 1;
        self.perms
            .iter()
            .zip(PRIMES)
            .map(|(perm, b)| {
                let mut i = self.index;
                let mut f = 1.0 / b as f64;
                let mut x = 0.0;
                while i > 0 {
                    x += f * perm[(i % b) as usize] as f64;
                    i /= b;
                    f /= b as f64;
                }
                x
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HpoConfig {
    pub n_init: usize,
    pub n_iter: usize,
    pub seed: u64,
}

impl Default for HpoConfig {
    fn default() -> Self {
        HpoConfig {
            n_init: DEFAULT_N_INIT,
            n_iter: DEFAULT_N_ITER,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub iteration: usize,
    pub values: Vec<f64>,
    pub point: Vec<f64>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HpoResult {
    pub best: Vec<f64>,
    pub best_objective: f64,
    pub history: Vec<Trial>,
}

impl HpoResult {
    /// Best objective seen after each trial.
    pub fn incumbent_trace(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.history
            .iter()
            .map(|t| {
                best = best.min(t.objective);
                best
            })
            .collect()
    }

    pub fn write_history_csv(&self, space: &SearchSpace, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| PclvError::io(path, e.into()))?;
        let mut header = vec!["iteration".to_string()];
        header.extend(space.names().iter().map(|s| s.to_string()));
        header.push("objective".into());
        w.write_record(&header).map_err(|e| PclvError::io(path, e.into()))?;
        for t in &self.history {
            let mut row = vec![t.iteration.to_string()];
            row.extend(t.values.iter().map(|v| v.to_string()));
            row.push(t.objective.to_string());
            w.write_record(&row).map_err(|e| PclvError::io(path, e.into()))?;
        }
        w.flush().map_err(|e| PclvError::io(path, e))
    }
}

/// Minimizes `eval` over `space`: `n_init` scrambled Halton points, then
/// `n_iter` points maximizing expected improvement over random candidates.
/// A NaN objective is recorded as +inf.
pub fn optimize<F>(mut eval: F, space: &SearchSpace, config: &HpoConfig) -> Result<HpoResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    space.validate()?;
    if config.n_init < 2 {
        return Err(PclvError::config("n_init", "must be at least 2"));
    }
    let dim = space.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut halton = ScrambledHalton::new(dim, &mut rng);
    let mut history: Vec<Trial> = Vec::new();

    let mut run = |raw: Vec<f64>, history: &mut Vec<Trial>| -> Result<()> {
        let values = space.denormalize(&raw);
        let point = space.normalize(&values);
        let v = eval(&values)?;
        let objective = if v.is_nan() { f64::INFINITY } else { v };
        log::debug!("hpo trial {}: {objective}", history.len());
        history.push(Trial {
            iteration: history.len(),
            values,
            point,
            objective,
        });
        Ok(())
    };

    for _ in 0..config.n_init {
        run(halton.next_point(), &mut history)?;
    }
    for _ in 0..config.n_iter {
        let candidates: Vec<Vec<f64>> = (0..N_CANDIDATES)
            .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
            .collect();
        let finite: Vec<Observation> = history
            .iter()
            .filter(|t| t.objective.is_finite())
            .map(|t| Observation {
                point: t.point.clone(),
                value: t.objective,
            })
            .collect();
        let next = if finite.is_empty() {
            candidates.into_iter().next().unwrap_or_else(|| vec![0.5; dim])
        } else {
            let gp = Gp::fit(&finite)?;
            let f_best = finite.iter().map(|o| o.value).fold(f64::INFINITY, f64::min);
            let mut best = (f64::NEG_INFINITY, 0);
            for (i, c) in candidates.iter().enumerate() {
                let (mu, sigma) = gp.predict(c);
                let ei = expected_improvement(mu, sigma, f_best)?;
                if ei > best.0 {
                    best = (ei, i);
                }
            }
            candidates[best.1].clone()
        };
        run(next, &mut history)?;
    }

    let best = history
        .iter()
        .min_by(|a, b| a.objective.total_cmp(&b.objective).then(a.iteration.cmp(&b.iteration)))
        .expect("n_init >= 2");
    Ok(HpoResult {
        best: best.values.clone(),
        best_objective: best.objective,
        history,
    })
}
