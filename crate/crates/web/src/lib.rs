//! Browser bindings for the demo page in `www/`. Each export takes plain
//! numbers and returns a JSON string; the `*_json` functions hold the logic
//! so it can be tested natively.

use pclv_core::boosting::{self, GbtParams, Objective};
use pclv_core::domain::{CompetitorId, CustomerId};
use pclv_core::segmentation::build_report;
use pclv_core::valuation::{self, DiscountRate, ValuationRecord};
use pclv_core::Matrix;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Valuation {
    retention: f64,
    actual_clv: f64,
    pclv_by_competitor: Vec<f64>,
    pclv_total: f64,
    total_clv: f64,
}

pub fn value_json(
    cm_monthly: f64,
    churn_prob: f64,
    discount_rate: f64,
    pcm_annual: &[f64],
) -> Result<String, String> {
    let r = valuation::retention(churn_prob).map_err(|e| e.to_string())?;
    let d = DiscountRate::new(discount_rate).map_err(|e| e.to_string())?;
    let actual = valuation::actual_clv(cm_monthly, r, d);
    let per: Vec<(CompetitorId, f64)> = pcm_annual
        .iter()
        .enumerate()
        .map(|(i, &p)| (CompetitorId(i as u64), valuation::pclv_from_annual(p, r, d)))
        .collect();
    let rec = ValuationRecord::new(CustomerId(0), actual, &per);
    let out = Valuation {
        retention: r.value(),
        actual_clv: rec.actual_clv.dollars(),
        pclv_by_competitor: rec.pclv_by_competitor.iter().map(|(_, c)| c.dollars()).collect(),
        pclv_total: rec.pclv_total.dollars(),
        total_clv: rec.total_clv.dollars(),
    };
    Ok(serde_json::to_string(&out).expect("plain data"))
}

#[derive(Serialize)]
struct Fit {
    x: Vec<f64>,
    y: Vec<f64>,
    n_trees: usize,
}

/// Fits a squared-error ensemble to one feature and evaluates it on an even
/// grid spanning the data.
pub fn fit_json(
    xs: &[f64],
    ys: &[f64],
    n_rounds: usize,
    max_depth: usize,
    eta: f64,
    grid: usize,
) -> Result<String, String> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(format!("need matching non-empty x and y, got {} and {}", xs.len(), ys.len()));
    }
    let params = GbtParams {
        n_rounds,
        max_depth,
        eta,
        ..GbtParams::default()
    };
    let x = Matrix::new(xs.to_vec(), 1).map_err(|e| e.to_string())?;
    let model = boosting::train(&x, ys, &params, Objective::SquaredError).map_err(|e| e.to_string())?;
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let grid = grid.max(2);
    let gx: Vec<f64> = (0..grid)
        .map(|i| lo + (hi - lo) * i as f64 / (grid - 1) as f64)
        .collect();
    let gy = model
        .predict(&Matrix::new(gx.clone(), 1).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let out = Fit {
        x: gx,
        y: gy,
        n_trees: model.trees.len(),
    };
    Ok(serde_json::to_string(&out).expect("plain data"))
}

/// Tercile migration report for customers given as parallel arrays of
/// actual and potential CLV in dollars. Customers with zero potential are
/// treated as having shared no data.
pub fn report_json(actual: &[f64], pclv: &[f64]) -> Result<String, String> {
    if actual.len() != pclv.len() {
        return Err(format!("{} actual values but {} potential values", actual.len(), pclv.len()));
    }
    let records: Vec<ValuationRecord> = actual
        .iter()
        .zip(pclv)
        .enumerate()
        .map(|(i, (&a, &p))| {
            let per: &[(CompetitorId, f64)] = if p == 0.0 { &[] } else { &[(CompetitorId(0), p)] };
            ValuationRecord::new(CustomerId(i as u64), a, per)
        })
        .collect();
    let report = build_report(&records).map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&report).expect("plain data"))
}

#[wasm_bindgen]
pub fn value_customer(
    cm_monthly: f64,
    churn_prob: f64,
    discount_rate: f64,
    pcm_annual: Vec<f64>,
) -> Result<String, JsError> {
    value_json(cm_monthly, churn_prob, discount_rate, &pcm_annual).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn fit_curve(
    xs: Vec<f64>,
    ys: Vec<f64>,
    n_rounds: usize,
    max_depth: usize,
    eta: f64,
    grid: usize,
) -> Result<String, JsError> {
    fit_json(&xs, &ys, n_rounds, max_depth, eta, grid).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn migration_report(actual: Vec<f64>, pclv: Vec<f64>) -> Result<String, JsError> {
    report_json(&actual, &pclv).map_err(|e| JsError::new(&e))
}
