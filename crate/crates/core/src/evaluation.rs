//! Customer-level k-fold cross-validation and the reported metrics.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::CustomerId;
use crate::error::{PclvError, Result};
use crate::matrix::Matrix;

/// Assignment of customers to `k` folds of near-equal size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    assignments: BTreeMap<CustomerId, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, customer: CustomerId) -> Option<usize> {
        self.assignments.get(&customer).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn assignments(&self) -> &BTreeMap<CustomerId, usize> {
        &self.assignments
    }
}

/// Shuffles the distinct customers and deals them round-robin into folds.
pub fn kfold(customers: &[CustomerId], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(PclvError::config("folds", format!("k = {k} must be at least 2")));
    }
    let mut ids = customers.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < k {
        return Err(PclvError::input(format!(
            "{} customers cannot fill {k} folds",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let assignments = ids
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c, i % k))
        .collect();
    Ok(FoldPlan {
        k,
        seed,
        assignments,
    })
}

fn check_pair(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(PclvError::input(format!("length mismatch: {a} vs {b}")));
    }
    if a == 0 {
        return Err(PclvError::input("empty input"));
    }
    Ok(())
}

/// Average precision over descending scores. Equal scores form one block
/// that enters the curve as a single step.
pub fn pr_auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    check_pair(labels.len(), scores.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(PclvError::input("NaN score"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(PclvError::input("PR-AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Threshold metrics. Ratios with a zero denominator are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
}

/// A row is predicted positive when its probability is at least `threshold`.
pub fn confusion_metrics(labels: &[bool], probs: &[f64], threshold: f64) -> Result<Confusion> {
    check_pair(labels.len(), probs.len())?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(PclvError::input(format!("threshold {threshold} not in (0, 1)")));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&l, &p) in labels.iter().zip(probs) {
        match (l, p >= threshold) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(Confusion {
        accuracy: (tp + tn) as f64 / labels.len() as f64,
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        precision: ratio(tp, tp + fp),
    })
}

pub fn rmse(targets: &[f64], preds: &[f64]) -> Result<f64> {
    check_pair(targets.len(), preds.len())?;
    let sse: f64 = targets.iter().zip(preds).map(|(t, p)| (t - p) * (t - p)).sum();
    Ok((sse / targets.len() as f64).sqrt())
}

pub fn mae(targets: &[f64], preds: &[f64]) -> Result<f64> {
    check_pair(targets.len(), preds.len())?;
    let sae: f64 = targets.iter().zip(preds).map(|(t, p)| (t - p).abs()).sum();
    Ok(sae / targets.len() as f64)
}

/// Coefficient of determination; `None` when the targets are constant.
pub fn r_squared(targets: &[f64], preds: &[f64]) -> Result<Option<f64>> {
    check_pair(targets.len(), preds.len())?;
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let sst: f64 = targets.iter().map(|t| (t - mean) * (t - mean)).sum();
    let sse: f64 = targets.iter().zip(preds).map(|(t, p)| (t - p) * (t - p)).sum();
    Ok((sst > 0.0).then(|| 1.0 - sse / sst))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    PrAuc,
    Accuracy,
    Sensitivity,
    Specificity,
    Precision,
    Rmse,
    Mae,
    R2,
}

impl Metric {
    pub const CLASSIFICATION: [Metric; 5] = [
        Metric::PrAuc,
        Metric::Accuracy,
        Metric::Sensitivity,
        Metric::Specificity,
        Metric::Precision,
    ];
    pub const REGRESSION: [Metric; 3] = [Metric::Rmse, Metric::Mae, Metric::R2];

    pub fn name(self) -> &'static str {
        match self {
            Metric::PrAuc => "pr_auc",
            Metric::Accuracy => "accuracy",
            Metric::Sensitivity => "sensitivity",
            Metric::Specificity => "specificity",
            Metric::Precision => "precision",
            Metric::Rmse => "rmse",
            Metric::Mae => "mae",
            Metric::R2 => "r2",
        }
    }
}

/// Evaluates one metric on a fold. Classification metrics read targets as
/// 0/1 labels and predictions as probabilities.
pub fn evaluate_metric(
    metric: Metric,
    targets: &[f64],
    preds: &[f64],
    threshold: f64,
) -> Result<Option<f64>> {
    let labels = || targets.iter().map(|&t| t >= 0.5).collect::<Vec<_>>();
    Ok(match metric {
        Metric::PrAuc => pr_auc(&labels(), preds).ok(),
        Metric::Accuracy => Some(confusion_metrics(&labels(), preds, threshold)?.accuracy),
        Metric::Sensitivity => confusion_metrics(&labels(), preds, threshold)?.sensitivity,
        Metric::Specificity => confusion_metrics(&labels(), preds, threshold)?.specificity,
        Metric::Precision => confusion_metrics(&labels(), preds, threshold)?.precision,
        Metric::Rmse => Some(rmse(targets, preds)?),
        Metric::Mae => Some(mae(targets, preds)?),
        Metric::R2 => r_squared(targets, preds)?,
    })
}

/// Per-fold values and summary of one metric. Folds where the metric is
/// undefined are `None` and listed in `absent_folds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub per_fold: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub absent_folds: Vec<usize>,
}

impl MetricSummary {
    pub fn from_folds(per_fold: Vec<Option<f64>>) -> Self {
        let present: Vec<f64> = per_fold.iter().flatten().copied().collect();
        let absent_folds = per_fold
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(i, _)| i)
            .collect();
        let (mean, sd) = if present.is_empty() {
            (None, None)
        } else {
            let n = present.len() as f64;
            let mean = present.iter().sum::<f64>() / n;
            let var = if present.len() > 1 {
                present.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (Some(mean), Some(var.sqrt()))
        };
        MetricSummary {
            per_fold,
            mean,
            sd,
            absent_folds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    pub fold_rows: Vec<usize>,
    pub threshold: f64,
    pub metrics: BTreeMap<String, MetricSummary>,
}

impl MetricReport {
    pub fn mean(&self, metric: Metric) -> Option<f64> {
        self.metrics.get(metric.name()).and_then(|m| m.mean)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|source| PclvError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text + "\n").map_err(|e| PclvError::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PclvError::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| PclvError::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Everything needed to fit and score one model. `fit` only ever receives
/// training-split rows; standardization and resampling belong inside it.
pub trait Recipe: Sync {
    type Model: Send;

    fn fit(&self, x: &Matrix, y: &[f64], fold: usize) -> Result<Self::Model>;

    /// Scores raw validation rows.
    fn score(&self, model: &Self::Model, x: &Matrix) -> Result<Vec<f64>>;
}

/// Rows of a modeling table, one or more per customer.
#[derive(Debug, Clone, Copy)]
pub struct CvData<'a> {
    pub customers: &'a [CustomerId],
    pub x: &'a Matrix,
    pub y: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub report: MetricReport,
    /// Out-of-fold predictions aligned with the input rows.
    pub oof: Vec<f64>,
}

pub fn cross_validate<R: Recipe>(
    data: CvData<'_>,
    recipe: &R,
    plan: &FoldPlan,
    metrics: &[Metric],
    threshold: f64,
) -> Result<CvOutcome> {
    let n = data.x.n_rows();
    if data.customers.len() != n || data.y.len() != n {
        return Err(PclvError::input("customers, rows and targets differ in length"));
    }
    let mut fold_rows: Vec<Vec<usize>> = vec![Vec::new(); plan.k];
    for (i, c) in data.customers.iter().enumerate() {
        let f = plan
            .fold_of(*c)
            .ok_or_else(|| PclvError::input(format!("customer {c} missing from fold plan")))?;
        fold_rows[f].push(i);
    }

    let run_fold = |fold: usize| -> Result<(Vec<usize>, Vec<f64>)> {
        let valid = &fold_rows[fold];
        let train: Vec<usize> = (0..plan.k)
            .filter(|&f| f != fold)
            .flat_map(|f| fold_rows[f].iter().copied())
            .collect();
        let mut train = train;
        train.sort_unstable();
        if train.is_empty() || valid.is_empty() {
            return Err(PclvError::input(format!("fold {fold} is empty")));
        }
        let tx = data.x.select_rows(&train);
        let ty: Vec<f64> = train.iter().map(|&i| data.y[i]).collect();
        let model = recipe.fit(&tx, &ty, fold)?;
        let vx = data.x.select_rows(valid);
        let preds = recipe.score(&model, &vx)?;
        if preds.len() != valid.len() {
            return Err(PclvError::input("recipe returned wrong number of scores"));
        }
        Ok((valid.clone(), preds))
    };

    let results: Vec<Result<(Vec<usize>, Vec<f64>)>> = {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            (0..plan.k).into_par_iter().map(run_fold).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            (0..plan.k).map(run_fold).collect()
        }
    };

    let mut oof = vec![f64::NAN; n];
    let mut per_metric: BTreeMap<Metric, Vec<Option<f64>>> = BTreeMap::new();
    for (fold, res) in results.into_iter().enumerate() {
        let (valid, preds) = res?;
        let targets: Vec<f64> = valid.iter().map(|&i| data.y[i]).collect();
        for (&i, &p) in valid.iter().zip(&preds) {
            oof[i] = p;
        }
        for &m in metrics {
            let v = evaluate_metric(m, &targets, &preds, threshold)?;
            if v.is_none() {
                log::warn!("fold {fold}: {} undefined", m.name());
            }
            per_metric.entry(m).or_default().push(v);
        }
    }
    let report = MetricReport {
        k: plan.k,
        fold_rows: fold_rows.iter().map(Vec::len).collect(),
        threshold,
        metrics: per_metric
            .into_iter()
            .map(|(m, v)| (m.name().to_string(), MetricSummary::from_folds(v)))
            .collect(),
    };
    Ok(CvOutcome { report, oof })
}
