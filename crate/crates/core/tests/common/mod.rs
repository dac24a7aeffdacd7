//! Independent reference implementations shared by the property and
//! acceptance suites.

#![allow(dead_code)]

use std::cmp::Ordering;

use pclv_core::boosting::{GbtParams, Node};
use pclv_core::Matrix;

/// Parameters under which one boosting round is a plain depth-1 stump on
/// `-y` gradients with unit hessians.
pub fn stump_params() -> GbtParams {
    GbtParams {
        eta: 1.0,
        max_depth: 1,
        min_child_weight: 1.0,
        lambda: 1.0,
        gamma: 0.0,
        subsample: 1.0,
        colsample: 1.0,
        n_rounds: 1,
        base_score: Some(0.0),
        seed: 0,
    }
}

/// `a / b` with `b > 0`, kept as an exact fraction.
#[derive(Debug, Clone, Copy)]
pub struct Frac {
    pub num: i128,
    pub den: i128,
}

impl Frac {
    fn cmp(self, o: Frac) -> Ordering {
        (self.num * o.den).cmp(&(o.num * self.den))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    pub left_weight: f64,
    pub right_weight: f64,
    pub gain: f64,
}

/// Exhaustive best split for integer targets with gradient `-y`, hessian 1
/// and lambda 1. Twice the gain is compared as an exact fraction, so ties
/// are real ties and resolve to the lowest feature then lowest threshold.
pub fn stump_oracle(x: &Matrix, y: &[i64]) -> Option<Stump> {
    let n = y.len();
    let g_total: i128 = y.iter().map(|&v| -(v as i128)).sum();
    let h_total = n as i128;
    let score = |g: i128, h: i128| Frac {
        num: g * g,
        den: h + 1,
    };
    let parent = score(g_total, h_total);
    let mut best: Option<(Frac, Stump)> = None;
    for f in 0..x.n_cols() {
        let mut values: Vec<f64> = x.column(f).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for w in values.windows(2) {
            let threshold = w[0] + (w[1] - w[0]) / 2.0;
            let (mut gl, mut hl) = (0i128, 0i128);
            for (i, &t) in y.iter().enumerate() {
                if x.get(i, f) < threshold {
                    gl -= t as i128;
                    hl += 1;
                }
            }
            let (gr, hr) = (g_total - gl, h_total - hl);
            let l = score(gl, hl);
            let r = score(gr, hr);
            // 2 * gain = l + r - parent, over the common denominator.
            let den = l.den * r.den * parent.den;
            let num = l.num * r.den * parent.den + r.num * l.den * parent.den
                - parent.num * l.den * r.den;
            let twice = Frac { num, den };
            if twice.num <= 0 {
                continue;
            }
            if best.as_ref().is_none_or(|(b, _)| twice.cmp(*b) == Ordering::Greater) {
                best = Some((
                    twice,
                    Stump {
                        feature: f,
                        threshold,
                        left_weight: -(gl as f64) / (hl as f64 + 1.0),
                        right_weight: -(gr as f64) / (hr as f64 + 1.0),
                        gain: twice.num as f64 / twice.den as f64 / 2.0,
                    },
                ));
            }
        }
    }
    best.map(|(_, s)| s)
}

/// Loss reduction of a split before the complexity penalty.
pub fn second_order_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64) -> f64 {
    let score = |g: f64, h: f64| g * g / (h + lambda);
    (score(gl, hl) + score(gr, hr) - score(gl + gr, hl + hr)) / 2.0
}

/// Reads a single-split tree back as a stump.
pub fn as_stump(nodes: &[Node]) -> Option<Stump> {
    match &nodes[0] {
        Node::Leaf { .. } => None,
        Node::Split {
            feature,
            threshold,
            left,
            right,
            gain,
            ..
        } => {
            let weight = |i: usize| match nodes[i] {
                Node::Leaf { weight, .. } => weight,
                Node::Split { .. } => panic!("depth-1 tree has a nested split"),
            };
            Some(Stump {
                feature: *feature,
                threshold: *threshold,
                left_weight: weight(*left),
                right_weight: weight(*right),
                gain: *gain,
            })
        }
    }
}

/// Average precision as the mean, over positives, of the precision among
/// all rows scoring at least as high as that positive.
pub fn average_precision_oracle(labels: &[bool], scores: &[f64]) -> f64 {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if !l {
            continue;
        }
        let mut tp = 0usize;
        let mut all = 0usize;
        for (j, &lj) in labels.iter().enumerate() {
            if scores[j] >= scores[i] {
                all += 1;
                if lj {
                    tp += 1;
                }
            }
        }
        total += tp as f64 / all as f64;
    }
    total / n_pos as f64
}

/// Discounted retained value `Σ_{t>=1} annual * (r / (1 + d))^t`, summed
/// term by term.
pub fn perpetuity_series(annual: f64, r: f64, d: f64) -> f64 {
    let q = r / (1.0 + d);
    let mut term = annual * q;
    let mut sum = 0.0f64;
    while term != 0.0 && term.abs() > 1e-18 * sum.abs() {
        sum += term;
        term *= q;
    }
    sum
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    let scale = want.abs().max(1e-12);
    (got - want).abs() / scale
}

/// Median/mean to lognormal `(mu, sigma)` by Newton iteration on
/// `sigma^2 / 2 = ln(mean / median)`, solved for sigma.
pub fn lognormal_oracle(median: f64, mean: f64) -> (f64, f64) {
    let mu = median.ln();
    let target = mean.ln() - mu;
    let mut s = 1.0f64;
    for _ in 0..100 {
        let f = 0.5 * s * s - target;
        s -= f / s;
    }
    (mu, s)
}

/// `k` nearest rows to `query` among `candidates` by brute force on the
/// given matrix, ties by row index.
pub fn brute_knn(z: &Matrix, query: &[f64], candidates: &[usize], k: usize, exclude: Option<usize>) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = candidates
        .iter()
        .filter(|&&c| Some(c) != exclude)
        .map(|&c| {
            let s: f64 = z.row(c).iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            (s, c)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|p| p.1).collect()
}

/// Population standard deviation.
pub fn pop_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()
}
