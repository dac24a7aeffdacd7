//! Gradient-boosted tree ensembles with second-order split finding.
//!
//! Supports squared-error regression and logistic classification. Each
//! round fits a tree to the gradients `g` and hessians `h` of the loss at
//! the current margin, with leaf weight `-G / (H + lambda)` and split gain
//!
//! ```text
//! 0.5 * [G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda) - (G_L+G_R)^2/(H_L+H_R+lambda)] - gamma
//! ```
//!
//! Split search is exact: every midpoint between consecutive distinct
//! feature values is a candidate.

mod model_file;
pub mod tree;

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PclvError, Result};
use crate::matrix::Matrix;
pub use model_file::{MODEL_FORMAT_VERSION, load_model, save_model};
pub use tree::{Node, Tree};
use tree::{GrowParams, SortedColumns};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    SquaredError,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbtParams {
    pub eta: f64,
    pub max_depth: usize,
    pub min_child_weight: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub subsample: f64,
    pub colsample: f64,
    pub n_rounds: usize,
    /// Initial margin. `None` uses the target mean for regression and the
    /// log-odds of the positive rate for classification.
    pub base_score: Option<f64>,
    pub seed: u64,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            eta: 0.1,
            max_depth: 6,
            min_child_weight: 1.0,
            lambda: 1.0,
            gamma: 0.0,
            subsample: 1.0,
            colsample: 1.0,
            n_rounds: 200,
            base_score: None,
            seed: 0,
        }
    }
}

impl GbtParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(PclvError::config(name, format!("{v} not in (0, 1]")))
            }
        };
        unit("eta", self.eta)?;
        unit("subsample", self.subsample)?;
        unit("colsample", self.colsample)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(PclvError::config("lambda", format!("{} < 0", self.lambda)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(PclvError::config("gamma", format!("{} < 0", self.gamma)));
        }
        if !(self.min_child_weight >= 0.0 && self.min_child_weight.is_finite()) {
            return Err(PclvError::config(
                "min_child_weight",
                format!("{} < 0", self.min_child_weight),
            ));
        }
        if let Some(b) = self.base_score {
            if !b.is_finite() {
                return Err(PclvError::config("base_score", "must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbtModel {
    pub objective: Objective,
    pub base_score: f64,
    pub eta: f64,
    pub n_features: usize,
    pub trees: Vec<Tree>,
}

#[inline]
pub fn sigmoid(m: f64) -> f64 {
    1.0 / (1.0 + (-m).exp())
}

impl GbtModel {
    /// An ensemble with no trees: every margin equals `base_score`.
    pub fn constant(objective: Objective, base_score: f64, n_features: usize) -> Self {
        GbtModel {
            objective,
            base_score,
            eta: 1.0,
            n_features,
            trees: Vec::new(),
        }
    }

    fn check_arity(&self, found: usize) -> Result<()> {
        if found != self.n_features {
            return Err(PclvError::Arity {
                expected: self.n_features,
                found,
            });
        }
        Ok(())
    }

    pub fn predict_margin_row(&self, row: &[f64]) -> Result<f64> {
        self.check_arity(row.len())?;
        Ok(self.margin_unchecked(row))
    }

    fn margin_unchecked(&self, row: &[f64]) -> f64 {
        self.trees
            .iter()
            .fold(self.base_score, |m, t| m + self.eta * t.leaf_value(row))
    }

    pub fn predict_margins(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.check_arity(x.n_cols())?;
        Ok(x.rows().map(|r| self.margin_unchecked(r)).collect())
    }

    /// Margins for regression; probabilities for logistic models.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        let mut out = self.predict_margins(x)?;
        if self.objective == Objective::Logistic {
            out.iter_mut().for_each(|m| *m = sigmoid(*m));
        }
        Ok(out)
    }

    pub fn predict_row(&self, row: &[f64]) -> Result<f64> {
        let m = self.predict_margin_row(row)?;
        Ok(match self.objective {
            Objective::SquaredError => m,
            Objective::Logistic => sigmoid(m),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_model(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_model(path)
    }
}

fn gradients(objective: Objective, y: &[f64], margin: &[f64], g: &mut [f64], h: &mut [f64]) {
    match objective {
        Objective::SquaredError => {
            for i in 0..y.len() {
                g[i] = margin[i] - y[i];
                h[i] = 1.0;
            }
        }
        Objective::Logistic => {
            for i in 0..y.len() {
                let p = sigmoid(margin[i]);
                g[i] = p - y[i];
                h[i] = p * (1.0 - p);
            }
        }
    }
}

fn default_base_score(objective: Objective, y: &[f64]) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    match objective {
        Objective::SquaredError => mean,
        Objective::Logistic => {
            let p = mean.clamp(1e-6, 1.0 - 1e-6);
            (p / (1.0 - p)).ln()
        }
    }
}

/// Fits an ensemble. Logistic targets must be 0 or 1.
pub fn train(x: &Matrix, y: &[f64], params: &GbtParams, objective: Objective) -> Result<GbtModel> {
    params.validate()?;
    if x.n_rows() < 2 {
        return Err(PclvError::input(format!(
            "training needs at least 2 rows, got {}",
            x.n_rows()
        )));
    }
    if y.len() != x.n_rows() {
        return Err(PclvError::input(format!(
            "{} targets for {} rows",
            y.len(),
            x.n_rows()
        )));
    }
    if !x.all_finite() {
        return Err(PclvError::input("non-finite feature value"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(PclvError::input("non-finite target value"));
    }
    if objective == Objective::Logistic && y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(PclvError::input("logistic targets must be 0 or 1"));
    }

    let n = x.n_rows();
    let p = x.n_cols();
    let base_score = params
        .base_score
        .unwrap_or_else(|| default_base_score(objective, y));
    let grow = GrowParams {
        max_depth: params.max_depth,
        min_child_weight: params.min_child_weight,
        lambda: params.lambda,
        gamma: params.gamma,
    };
    let cols = SortedColumns::new(x);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut margin = vec![base_score; n];
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];
    let n_sub = ((params.subsample * n as f64).round() as usize).clamp(1, n);
    let n_feat = ((params.colsample * p as f64).round() as usize).clamp(1, p);
    let all_rows: Vec<u32> = (0..n as u32).collect();
    let all_features: Vec<usize> = (0..p).collect();

    let mut trees = Vec::with_capacity(params.n_rounds);
    for _ in 0..params.n_rounds {
        gradients(objective, y, &margin, &mut g, &mut h);
        let rows: Vec<u32> = if n_sub < n {
            let mut r: Vec<u32> = sample(&mut rng, n, n_sub)
                .into_iter()
                .map(|i| i as u32)
                .collect();
            r.sort_unstable();
            r
        } else {
            all_rows.clone()
        };
        let features: Vec<usize> = if n_feat < p {
            let mut f = sample(&mut rng, p, n_feat).into_vec();
            f.sort_unstable();
            f
        } else {
            all_features.clone()
        };
        let tree = tree::grow_tree(&cols, &features, &rows, &g, &h, &grow, x);
        for (i, row) in x.rows().enumerate() {
            margin[i] += params.eta * tree.leaf_value(row);
        }
        trees.push(tree);
    }
    Ok(GbtModel {
        objective,
        base_score,
        eta: params.eta,
        n_features: p,
        trees,
    })
}

/// Convenience wrapper for boolean labels.
pub fn train_classifier(x: &Matrix, labels: &[bool], params: &GbtParams) -> Result<GbtModel> {
    let y: Vec<f64> = labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    train(x, &y, params, Objective::Logistic)
}
