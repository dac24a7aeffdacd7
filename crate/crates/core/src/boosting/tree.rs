//! Regression trees grown level by level with exact greedy split search.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    /// Rows with `x[feature] < threshold` (or missing) go left.
    Split {
        feature: usize,
        threshold: f64,
        missing_left: bool,
        left: usize,
        right: usize,
        gain: f64,
        cover: f64,
    },
    Leaf {
        weight: f64,
        cover: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(weight: f64) -> Tree {
        Tree {
            nodes: vec![Node::Leaf { weight, cover: 0.0 }],
        }
    }

    /// Raw leaf weight reached by `row` (not scaled by the learning rate).
    pub fn leaf_value(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { weight, .. } => return *weight,
                Node::Split {
                    feature,
                    threshold,
                    missing_left,
                    left,
                    right,
                    ..
                } => {
                    let v = row[*feature];
                    at = if v.is_nan() {
                        if *missing_left {
                            *left
                        } else {
                            *right
                        }
                    } else if v < *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => {
                    1 + walk(nodes, *left).max(walk(nodes, *right))
                }
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn splits(&self) -> impl Iterator<Item = &Node> {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Split { .. }))
    }
}

/// Regularisation knobs for a single tree.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GrowParams {
    pub max_depth: usize,
    pub min_child_weight: f64,
    pub lambda: f64,
    pub gamma: f64,
}

/// Split gain with the complexity penalty subtracted.
#[inline]
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64, gamma: f64) -> f64 {
    let g = gl + gr;
    let h = hl + hr;
    0.5 * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - g * g / (h + lambda)) - gamma
}

#[inline]
pub fn leaf_weight(g: f64, h: f64, lambda: f64) -> f64 {
    let denom = h + lambda;
    if denom > 0.0 {
        -g / denom
    } else {
        0.0
    }
}

/// Column-major copy of the training features with each column's row
/// order presorted by (value, row index).
pub(crate) struct SortedColumns {
    pub n_rows: usize,
    pub order: Vec<Vec<u32>>,
    pub values: Vec<Vec<f64>>,
}

impl SortedColumns {
    pub fn new(x: &crate::matrix::Matrix) -> Self {
        let n_rows = x.n_rows();
        let build = |f: usize| {
            let mut idx: Vec<u32> = (0..n_rows as u32).collect();
            idx.sort_by(|&a, &b| {
                x.get(a as usize, f)
                    .total_cmp(&x.get(b as usize, f))
                    .then(a.cmp(&b))
            });
            let vals = idx.iter().map(|&r| x.get(r as usize, f)).collect();
            (idx, vals)
        };
        let cols: Vec<(Vec<u32>, Vec<f64>)> = {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                (0..x.n_cols()).into_par_iter().map(build).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..x.n_cols()).map(build).collect()
            }
        };
        let (order, values) = cols.into_iter().unzip();
        SortedColumns {
            n_rows,
            order,
            values,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    gl: f64,
    hl: f64,
}

/// Best split of every open node along one feature. Each column is scanned
/// once in sorted order; gradient sums accumulate left to right.
fn scan_feature(
    cols: &SortedColumns,
    feature: usize,
    node_of: &[i32],
    totals: &[(f64, f64)],
    grad: &[f64],
    hess: &[f64],
    p: &GrowParams,
) -> Vec<Option<Candidate>> {
    let n_open = totals.len();
    let mut gl = vec![0.0f64; n_open];
    let mut hl = vec![0.0f64; n_open];
    let mut last = vec![f64::NAN; n_open];
    let mut best: Vec<Option<Candidate>> = vec![None; n_open];
    let order = &cols.order[feature];
    let values = &cols.values[feature];
    for (k, &row) in order.iter().enumerate() {
        let node = node_of[row as usize];
        if node < 0 {
            continue;
        }
        let node = node as usize;
        let v = values[k];
        let prev = last[node];
        if !prev.is_nan() && v > prev {
            let (g, h) = totals[node];
            let (gl_n, hl_n) = (gl[node], hl[node]);
            let (gr_n, hr_n) = (g - gl_n, h - hl_n);
            if hl_n >= p.min_child_weight && hr_n >= p.min_child_weight {
                let gain = split_gain(gl_n, hl_n, gr_n, hr_n, p.lambda, p.gamma);
                if gain > 0.0 && best[node].is_none_or(|b| gain > b.gain) {
                    let mut threshold = prev + (v - prev) / 2.0;
                    if threshold <= prev || threshold > v {
                        threshold = v;
                    }
                    best[node] = Some(Candidate {
                        gain,
                        feature,
                        threshold,
                        gl: gl_n,
                        hl: hl_n,
                    });
                }
            }
        }
        gl[node] += grad[row as usize];
        hl[node] += hess[row as usize];
        last[node] = v;
    }
    best
}

/// Grows one tree on the rows whose `node_of` entry is 0. `node_of` is
/// consumed as scratch space.
pub(crate) fn grow_tree(
    cols: &SortedColumns,
    features: &[usize],
    rows: &[u32],
    grad: &[f64],
    hess: &[f64],
    p: &GrowParams,
    x: &crate::matrix::Matrix,
) -> Tree {
    let mut node_of = vec![-1i32; cols.n_rows];
    let (mut g0, mut h0) = (0.0, 0.0);
    for &r in rows {
        node_of[r as usize] = 0;
        g0 += grad[r as usize];
        h0 += hess[r as usize];
    }
    let mut nodes: Vec<Node> = vec![Node::Leaf {
        weight: 0.0,
        cover: h0,
    }];
    // Open nodes at the current level: tree node index and (G, H).
    let mut open: Vec<usize> = vec![0];
    let mut totals: Vec<(f64, f64)> = vec![(g0, h0)];
    let mut depth = 0;
    while !open.is_empty() {
        let mut best: Vec<Option<Candidate>> = vec![None; open.len()];
        if depth < p.max_depth {
            let scan = |&f: &usize| scan_feature(cols, f, &node_of, &totals, grad, hess, p);
            let per_feature: Vec<Vec<Option<Candidate>>> = {
                #[cfg(feature = "parallel")]
                {
                    use rayon::prelude::*;
                    features.par_iter().map(scan).collect()
                }
                #[cfg(not(feature = "parallel"))]
                {
                    features.iter().map(scan).collect()
                }
            };
            // `features` is ascending, so strict comparison keeps the lowest
            // feature index on ties.
            for cands in per_feature {
                for (slot, cand) in best.iter_mut().zip(cands) {
                    if let Some(c) = cand {
                        if slot.is_none_or(|b| c.gain > b.gain) {
                            *slot = Some(c);
                        }
                    }
                }
            }
        }

        let mut next_open = Vec::new();
        let mut next_totals = Vec::new();
        // Maps an open slot to its (left, right) slots in the next level.
        let mut child_slot: Vec<Option<(i32, i32)>> = vec![None; open.len()];
        for (slot, &tree_idx) in open.iter().enumerate() {
            let (g, h) = totals[slot];
            match best[slot] {
                Some(c) => {
                    let left = nodes.len();
                    let right = left + 1;
                    let (gr, hr) = (g - c.gl, h - c.hl);
                    nodes.push(Node::Leaf {
                        weight: 0.0,
                        cover: c.hl,
                    });
                    nodes.push(Node::Leaf {
                        weight: 0.0,
                        cover: hr,
                    });
                    nodes[tree_idx] = Node::Split {
                        feature: c.feature,
                        threshold: c.threshold,
                        missing_left: true,
                        left,
                        right,
                        gain: c.gain,
                        cover: h,
                    };
                    let ls = next_open.len() as i32;
                    next_open.push(left);
                    next_totals.push((c.gl, c.hl));
                    next_open.push(right);
                    next_totals.push((gr, hr));
                    child_slot[slot] = Some((ls, ls + 1));
                }
                None => {
                    nodes[tree_idx] = Node::Leaf {
                        weight: leaf_weight(g, h, p.lambda),
                        cover: h,
                    };
                }
            }
        }

        for &r in rows {
            let slot = node_of[r as usize];
            if slot < 0 {
                continue;
            }
            node_of[r as usize] = match child_slot[slot as usize] {
                None => -1,
                Some((l, rgt)) => match &nodes[open[slot as usize]] {
                    Node::Split {
                        feature, threshold, ..
                    } => {
                        let v = x.get(r as usize, *feature);
                        if v.is_nan() || v < *threshold {
                            l
                        } else {
                            rgt
                        }
                    }
                    Node::Leaf { .. } => unreachable!(),
                },
            };
        }
        open = next_open;
        totals = next_totals;
        depth += 1;
    }
    Tree { nodes }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gain_is_zero_for_uninformative_split() {
        // Equal mean gradients on both sides: no improvement.
        let g = split_gain(-2.0, 2.0, -2.0, 2.0, 0.0, 0.0);
        assert!(g.abs() < 1e-12);
    }

    #[test]
    fn hand_traced_tree() {
        let t = Tree {
            nodes: vec![
                Node::Split {
                    feature: 0,
                    threshold: 0.5,
                    missing_left: true,
                    left: 1,
                    right: 2,
                    gain: 1.0,
                    cover: 2.0,
                },
                Node::Leaf {
                    weight: -1.0,
                    cover: 1.0,
                },
                Node::Leaf {
                    weight: 2.0,
                    cover: 1.0,
                },
            ],
        };
        assert_eq!(t.leaf_value(&[0.0]), -1.0);
        assert_eq!(t.leaf_value(&[0.5]), 2.0);
        assert_eq!(t.leaf_value(&[f64::NAN]), -1.0);
        assert_eq!(t.depth(), 1);
    }
}
