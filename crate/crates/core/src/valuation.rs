//! Customer valuation: actual CLV from the focal margin, potential CLV per
//! competitor from the transferred margin model, and their totals.
//!
//! Both CLV forms share one perpetuity kernel, `(margin_12m * r) / (1 + d - r)`,
//! with `r` the customer's retention probability and `d` the annual discount
//! rate. Actual CLV feeds it twelve times the current monthly margin; the
//! per-competitor potential feeds it the annualised potential margin.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boosting::GbtModel;
use crate::domain::{Cents, CompetitorId, CustomerId, N_PSC};
use crate::error::{PclvError, Result};

/// Annual discount rate, strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct DiscountRate(f64);

impl DiscountRate {
    pub fn new(d: f64) -> Result<Self> {
        if d > 0.0 && d.is_finite() {
            Ok(DiscountRate(d))
        } else {
            Err(PclvError::config("discount_rate", format!("{d} must be > 0")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for DiscountRate {
    fn default() -> Self {
        DiscountRate(0.1)
    }
}

impl TryFrom<f64> for DiscountRate {
    type Error = PclvError;
    fn try_from(d: f64) -> Result<Self> {
        DiscountRate::new(d)
    }
}

impl From<DiscountRate> for f64 {
    fn from(d: DiscountRate) -> f64 {
        d.0
    }
}

/// Retention probability in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct RetentionScore(f64);

impl RetentionScore {
    pub fn new(r: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&r) {
            Ok(RetentionScore(r))
        } else {
            Err(PclvError::input(format!("retention {r} not in [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Retention as the complement of the churn probability.
pub fn retention(churn_prob: f64) -> Result<RetentionScore> {
    if !(0.0..=1.0).contains(&churn_prob) {
        return Err(PclvError::input(format!(
            "churn probability {churn_prob} not in [0, 1]"
        )));
    }
    RetentionScore::new(1.0 - churn_prob)
}

fn perpetuity(annual_margin: f64, r: RetentionScore, d: DiscountRate) -> f64 {
    let r = r.value();
    (annual_margin * r) / (1.0 + d.value() - r)
}

/// Actual CLV from the current monthly contribution margin.
pub fn actual_clv(cm_monthly: f64, r: RetentionScore, d: DiscountRate) -> f64 {
    perpetuity(cm_monthly * 12.0, r, d)
}

/// Potential CLV from one competitor's annualised potential margin.
pub fn pclv_competitor(pcm: &AnnualPcm, r: RetentionScore, d: DiscountRate) -> f64 {
    pclv_from_annual(pcm.pcm_annual, r, d)
}

pub fn pclv_from_annual(pcm_annual: f64, r: RetentionScore, d: DiscountRate) -> f64 {
    perpetuity(pcm_annual, r, d)
}

pub fn pclv_total(per_competitor: &[f64]) -> f64 {
    per_competitor.iter().sum()
}

pub fn total_clv(actual: f64, pclv: f64) -> f64 {
    actual + pclv
}

/// Potential contribution margin over 12 months from migrating one
/// competitor's products.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnualPcm {
    pub customer: CustomerId,
    pub competitor: CompetitorId,
    pub pcm_annual: f64,
}

/// Margin-model feature layout: 8 focal PSC credit slots then 8 system slots.
pub fn margin_features(focal: &[f64; N_PSC], system: &[f64; N_PSC]) -> [f64; 2 * N_PSC] {
    let mut row = [0.0; 2 * N_PSC];
    row[..N_PSC].copy_from_slice(focal);
    row[N_PSC..].copy_from_slice(system);
    row
}

/// Monthly margin the model expects from the focal institution's exposure.
pub fn predict_pcm_focal(
    model: &GbtModel,
    focal: &[f64; N_PSC],
    system: &[f64; N_PSC],
) -> Result<f64> {
    model.predict_row(&margin_features(focal, system))
}

/// Annualised margin if the competitor's products moved to the focal
/// institution: the competitor exposure takes the focal slots.
pub fn predict_pcm_competitor(
    model: &GbtModel,
    customer: CustomerId,
    competitor: CompetitorId,
    ob: &BTreeMap<(CustomerId, CompetitorId), [f64; N_PSC]>,
    system: &[f64; N_PSC],
) -> Result<AnnualPcm> {
    let exposure = ob.get(&(customer, competitor)).ok_or_else(|| {
        PclvError::input(format!(
            "no Open Banking snapshot for customer {customer}, competitor {competitor}"
        ))
    })?;
    let monthly = predict_pcm_focal(model, exposure, system)?;
    Ok(AnnualPcm {
        customer,
        competitor,
        pcm_annual: 12.0 * monthly,
    })
}

/// Per-customer valuation in integer cents. Per-competitor values are
/// rounded individually, so totals are exact sums of what is written.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValuationRecord {
    pub customer: CustomerId,
    pub actual_clv: Cents,
    pub pclv_by_competitor: Vec<(CompetitorId, Cents)>,
    pub pclv_total: Cents,
    pub total_clv: Cents,
}

impl ValuationRecord {
    pub fn new(
        customer: CustomerId,
        actual_clv: f64,
        pclv_by_competitor: &[(CompetitorId, f64)],
    ) -> Self {
        let actual = Cents::from_dollars(actual_clv);
        let mut per: Vec<(CompetitorId, Cents)> = pclv_by_competitor
            .iter()
            .map(|&(n, v)| (n, Cents::from_dollars(v)))
            .collect();
        per.sort_by_key(|&(n, _)| n);
        let pclv_total: Cents = per.iter().map(|&(_, c)| c).sum();
        ValuationRecord {
            customer,
            actual_clv: actual,
            pclv_total,
            total_clv: actual + pclv_total,
            pclv_by_competitor: per,
        }
    }

    pub fn has_ob_data(&self) -> bool {
        !self.pclv_by_competitor.is_empty()
    }

    pub fn check_consistency(&self) -> Result<()> {
        let sum: Cents = self.pclv_by_competitor.iter().map(|&(_, c)| c).sum();
        if sum != self.pclv_total {
            return Err(PclvError::input(format!(
                "customer {}: pclv_total {} != sum of competitors {}",
                self.customer, self.pclv_total.0, sum.0
            )));
        }
        if self.actual_clv + self.pclv_total != self.total_clv {
            return Err(PclvError::input(format!(
                "customer {}: total_clv {} != actual {} + pclv {}",
                self.customer, self.total_clv.0, self.actual_clv.0, self.pclv_total.0
            )));
        }
        Ok(())
    }
}

/// Values one customer end to end.
pub fn value_customer(
    customer: CustomerId,
    cm_monthly: f64,
    r: RetentionScore,
    d: DiscountRate,
    pcms: &[AnnualPcm],
) -> ValuationRecord {
    let actual = actual_clv(cm_monthly, r, d);
    let per: Vec<(CompetitorId, f64)> = pcms
        .iter()
        .map(|p| (p.competitor, pclv_competitor(p, r, d)))
        .collect();
    ValuationRecord::new(customer, actual, &per)
}

const FIXED_COLUMNS: [&str; 4] = [
    "customer_id",
    "actual_clv_cents",
    "pclv_total_cents",
    "total_clv_cents",
];

fn competitor_column(n: CompetitorId) -> String {
    format!("pclv_competitor_{n}_cents")
}

/// Writes valuation.csv sorted by customer id. Competitor cells are empty
/// where the customer shared no data for that competitor.
pub fn write_valuation_csv(path: impl AsRef<Path>, records: &[ValuationRecord]) -> Result<()> {
    let path = path.as_ref();
    let io = |e| PclvError::io(path, e);
    let competitors: BTreeSet<CompetitorId> = records
        .iter()
        .flat_map(|r| r.pclv_by_competitor.iter().map(|&(n, _)| n))
        .collect();
    let mut sorted: Vec<&ValuationRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.customer);
    let mut w = std::io::BufWriter::new(File::create(path).map_err(io)?);
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(competitors.iter().map(|&n| competitor_column(n)));
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for r in sorted {
        write!(
            w,
            "{},{},{},{}",
            r.customer, r.actual_clv.0, r.pclv_total.0, r.total_clv.0
        )
        .map_err(io)?;
        let per: BTreeMap<CompetitorId, Cents> = r.pclv_by_competitor.iter().copied().collect();
        for n in &competitors {
            match per.get(n) {
                Some(c) => write!(w, ",{}", c.0).map_err(io)?,
                None => write!(w, ",").map_err(io)?,
            }
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads valuation.csv and re-checks each record's internal sums.
pub fn read_valuation_csv(path: impl AsRef<Path>) -> Result<Vec<ValuationRecord>> {
    let path = path.as_ref();
    let parse_err = |line: u64, message: String| PclvError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let file = File::open(path).map_err(|e| PclvError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().from_reader(std::io::BufReader::new(file));
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if header.len() < FIXED_COLUMNS.len()
        || header.iter().take(4).ne(FIXED_COLUMNS.iter().copied())
    {
        return Err(PclvError::Header {
            path: path.to_path_buf(),
            expected: FIXED_COLUMNS.join(","),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut competitors = Vec::new();
    for col in header.iter().skip(4) {
        let id = col
            .strip_prefix("pclv_competitor_")
            .and_then(|s| s.strip_suffix("_cents"))
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| parse_err(1, format!("unexpected column `{col}`")))?;
        competitors.push(CompetitorId(id));
    }
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let int = |i: usize| -> Result<i64> {
            rec[i]
                .parse()
                .map_err(|_| parse_err(line, format!("`{}` is not an integer", &rec[i])))
        };
        let mut per = Vec::new();
        for (k, &n) in competitors.iter().enumerate() {
            if !rec[4 + k].is_empty() {
                per.push((n, Cents(int(4 + k)?)));
            }
        }
        let r = ValuationRecord {
            customer: CustomerId(int(0)? as u64),
            actual_clv: Cents(int(1)?),
            pclv_total: Cents(int(2)?),
            total_clv: Cents(int(3)?),
            pclv_by_competitor: per,
        };
        r.check_consistency()
            .map_err(|e| parse_err(line, e.to_string()))?;
        out.push(r);
    }
    Ok(out)
}
