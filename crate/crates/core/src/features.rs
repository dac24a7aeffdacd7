//! Churn labels and recency/frequency/monetary features over customer
//! ledgers.
//!
//! A month is *active* when the customer holds nonzero credit or produces
//! nonzero margin in it. A customer has churned at an observation month
//! when every month of the following `churn_horizon` is inactive.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{snapshot_at, CustomerId, MonthIndex, TransactionRecord, N_PSC};
use crate::error::{PclvError, Result};
use crate::matrix::Matrix;

/// Guard for the trend ratio's denominator.
pub const TREND_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSpec {
    pub windows: Vec<u32>,
    pub churn_horizon: u32,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            windows: vec![1, 3, 6, 12],
            churn_horizon: 6,
        }
    }
}

impl FeatureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() || self.windows[0] == 0 {
            return Err(PclvError::config("windows", "need at least one window of length >= 1"));
        }
        if self.windows.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PclvError::config("windows", "must be strictly increasing"));
        }
        if self.churn_horizon == 0 {
            return Err(PclvError::config("churn_horizon", "must be at least 1"));
        }
        Ok(())
    }

    pub fn max_window(&self) -> u32 {
        *self.windows.last().unwrap_or(&1)
    }

    pub fn arity(&self) -> usize {
        1 + 2 * self.windows.len() + N_PSC + 1
    }

    /// Column names in feature order.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["recency".to_string()];
        names.extend(self.windows.iter().map(|w| format!("frequency_{w}")));
        names.extend(self.windows.iter().map(|w| format!("monetary_{w}")));
        names.extend(
            crate::domain::PscCode::ALL
                .iter()
                .map(|p| format!("exposure_{}", p.token().to_lowercase())),
        );
        names.push("trend".to_string());
        names
    }

    /// Window pair used by the trend ratio: the second window (or the only
    /// one) over the longest.
    fn trend_windows(&self) -> (usize, usize) {
        let short = if self.windows.len() > 1 { 1 } else { 0 };
        (short, self.windows.len() - 1)
    }

    /// Latest observation month whose churn label is defined.
    pub fn last_labelled_month(&self, dataset_horizon: u32) -> Result<MonthIndex> {
        dataset_horizon
            .checked_sub(self.churn_horizon + 1)
            .filter(|&m| m + 1 >= self.max_window())
            .map(MonthIndex)
            .ok_or_else(|| {
                PclvError::config(
                    "churn_horizon",
                    format!(
                        "horizon {dataset_horizon} too short for window {} plus churn horizon {}",
                        self.max_window(),
                        self.churn_horizon
                    ),
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonthActivity {
    pub month: u32,
    pub credit: f64,
    pub margin: f64,
}

impl MonthActivity {
    pub fn active(&self) -> bool {
        self.credit != 0.0 || self.margin != 0.0
    }
}

/// Monthly credit and margin totals for one customer, sorted by month.
#[derive(Debug, Clone, PartialEq)]
pub struct CustomerHistory {
    pub customer: CustomerId,
    pub months: Vec<MonthActivity>,
}

impl CustomerHistory {
    fn active_months(&self) -> impl Iterator<Item = &MonthActivity> {
        self.months.iter().filter(|m| m.active())
    }
}

/// Groups aggregated transactions (sorted by customer, month) into histories.
pub fn histories(transactions: &[TransactionRecord]) -> Vec<CustomerHistory> {
    let mut out: Vec<CustomerHistory> = Vec::new();
    for t in transactions {
        if out.last().is_none_or(|h| h.customer != t.customer) {
            out.push(CustomerHistory {
                customer: t.customer,
                months: Vec::new(),
            });
        }
        let h = out.last_mut().unwrap();
        if h.months.last().is_none_or(|m| m.month != t.month.0) {
            h.months.push(MonthActivity {
                month: t.month.0,
                credit: 0.0,
                margin: 0.0,
            });
        }
        let m = h.months.last_mut().unwrap();
        m.credit += t.credit_amount.dollars();
        m.margin += t.contribution_margin.dollars();
    }
    out
}

/// True when the customer is inactive in every month of
/// `(obs_month, obs_month + horizon]`.
pub fn label_churn(
    history: &CustomerHistory,
    obs_month: MonthIndex,
    horizon: u32,
    dataset_horizon: u32,
) -> Result<bool> {
    let end = obs_month.0 + horizon;
    if end >= dataset_horizon {
        return Err(PclvError::input(format!(
            "churn label at month {} needs months up to {end}, dataset ends at {}",
            obs_month.0,
            dataset_horizon.saturating_sub(1)
        )));
    }
    Ok(!history
        .active_months()
        .any(|m| m.month > obs_month.0 && m.month <= end))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    /// Months since the last active month at or before observation.
    /// Customers never active get `obs_month + 1`.
    pub recency: f64,
    pub frequency: Vec<f64>,
    pub monetary: Vec<f64>,
    pub exposure: [f64; N_PSC],
    pub trend: f64,
}

impl FeatureVector {
    pub fn to_row(&self) -> Vec<f64> {
        let mut row = Vec::with_capacity(2 + 2 * self.frequency.len() + N_PSC);
        row.push(self.recency);
        row.extend(&self.frequency);
        row.extend(&self.monetary);
        row.extend(&self.exposure);
        row.push(self.trend);
        row
    }
}

/// RFM features at `obs_month`. `exposure` is the customer's PSC vector from
/// the month snapshot.
pub fn build_features(
    history: &CustomerHistory,
    obs_month: MonthIndex,
    spec: &FeatureSpec,
    exposure: &[f64; N_PSC],
) -> Result<FeatureVector> {
    let obs = obs_month.0;
    if obs + 1 < spec.max_window() {
        return Err(PclvError::input(format!(
            "observation month {obs} precedes the {}-month window",
            spec.max_window()
        )));
    }
    let mut frequency = vec![0.0; spec.windows.len()];
    let mut monetary = vec![0.0; spec.windows.len()];
    let mut last_active: Option<u32> = None;
    for m in history.months.iter().filter(|m| m.month <= obs) {
        if m.active() {
            last_active = last_active.max(Some(m.month));
        }
        let back = obs - m.month;
        for (k, &w) in spec.windows.iter().enumerate() {
            if back < w {
                if m.active() {
                    frequency[k] += 1.0;
                }
                monetary[k] += m.margin;
            }
        }
    }
    let (short, long) = spec.trend_windows();
    Ok(FeatureVector {
        recency: last_active.map_or(obs as f64 + 1.0, |m| (obs - m) as f64),
        trend: monetary[short] / monetary[long].max(TREND_EPS),
        frequency,
        monetary,
        exposure: *exposure,
    })
}

/// Feature matrix for every customer with a record at or before
/// `obs_month`, optionally with churn labels.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub obs_month: MonthIndex,
    pub customers: Vec<CustomerId>,
    pub x: Matrix,
    pub labels: Option<Vec<bool>>,
    pub names: Vec<String>,
}

pub fn feature_table(
    transactions: &[TransactionRecord],
    obs_month: MonthIndex,
    spec: &FeatureSpec,
    label: bool,
) -> Result<FeatureTable> {
    spec.validate()?;
    let dataset_horizon = crate::domain::horizon_of(transactions);
    let snap = snapshot_at(transactions, obs_month)?;
    let hist = histories(transactions);
    let mut x = Matrix::zeros(0, spec.arity());
    let mut labels = label.then(Vec::new);
    let mut customers = Vec::with_capacity(snap.len());
    let mut h = hist.iter().peekable();
    for (i, &id) in snap.customers.iter().enumerate() {
        while h.peek().is_some_and(|c| c.customer < id) {
            h.next();
        }
        let history = h
            .peek()
            .filter(|c| c.customer == id)
            .copied()
            .ok_or_else(|| PclvError::input(format!("customer {id} has no history")))?;
        let fv = build_features(history, obs_month, spec, &snap.exposure[i])?;
        x.push_row(&fv.to_row());
        if let Some(l) = labels.as_mut() {
            l.push(label_churn(history, obs_month, spec.churn_horizon, dataset_horizon)?);
        }
        customers.push(id);
    }
    Ok(FeatureTable {
        obs_month,
        customers,
        x,
        labels,
        names: spec.names(),
    })
}

/// Debug dump: customer id then the features in order.
pub fn write_features_csv(path: impl AsRef<Path>, table: &FeatureTable) -> Result<()> {
    let path = path.as_ref();
    let io = |e| PclvError::io(path, e);
    let mut w = std::io::BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "customer_id,{}", table.names.join(",")).map_err(io)?;
    for (id, row) in table.customers.iter().zip(table.x.rows()) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{id},{}", cells.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}
