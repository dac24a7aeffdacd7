//! Synthetic market generator.
//!
//! Every customer gets a final-month margin level `m ~ LogNormal(mu, sigma)`,
//! truncated far out in the upper tail.
//! Focal exposures are solved backward from it so that
//!
//! ```text
//! m = Σ_c alpha_c * focal_c + beta * ln(1 + Σ_c system_c) + eps
//! ```
//!
//! holds exactly at the final month, with `system_c = focal_c * (1 + o_c)`.
//! Churn is drawn from a logistic model on a latent engagement score, and
//! churners show declining activity before going quiet at least six months
//! before the end of the horizon.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::{sample, sample_weighted};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boosting::sigmoid;
use crate::domain::{
    save_dataset, Cents, CompetitorId, CustomerId, Dataset, DatasetKind, MonthIndex, ObSnapshot,
    PscCode, SystemExposure, TransactionRecord, N_PSC,
};
use crate::error::{PclvError, Result};

pub const TARGET_MEDIAN_MARGIN: f64 = 137.12;
pub const TARGET_MEAN_MARGIN: f64 = 554.70;

/// Monthly margin per dollar of focal credit, by PSC tag.
pub const ALPHA: [f64; N_PSC] = [0.020, 0.008, 0.005, 0.015, 0.012, 0.025, 0.010, 0.006];
/// Margin per unit of `ln(1 + total system credit)`.
pub const BETA: f64 = 2.0;
const CHURN_SLOPE: f64 = 1.5;
const MONTH_NOISE_SD: f64 = 0.1;
/// Upper truncation of the log-margin draw, in standard deviations. Cuts
/// about 3 customers in 100,000 and lowers the mean by roughly 1%.
pub const MAX_MARGIN_Z: f64 = 4.0;

/// `(mu, sigma)` of the lognormal with the given median and mean.
pub fn solve_lognormal(median: f64, mean: f64) -> Result<(f64, f64)> {
    if !(median > 0.0 && mean > median) {
        return Err(PclvError::input(format!(
            "lognormal needs 0 < median < mean, got {median} and {mean}"
        )));
    }
    let mu = median.ln();
    Ok((mu, (2.0 * (mean.ln() - mu)).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketConfig {
    pub n_customers: usize,
    pub horizon_months: u32,
    pub churn_rate: f64,
    pub ob_adoption: f64,
    pub n_competitors: usize,
    pub margin_log_mu: f64,
    pub margin_log_sigma: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for MarketConfig {
    fn default() -> Self {
        MarketConfig {
            n_customers: 50_000,
            horizon_months: 36,
            churn_rate: 0.054,
            ob_adoption: 0.0032,
            n_competitors: 5,
            margin_log_mu: 4.9208,
            margin_log_sigma: 1.6719,
            noise_sd: 25.0,
            seed: 0,
        }
    }
}

impl MarketConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("churn_rate", self.churn_rate), ("ob_adoption", self.ob_adoption)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PclvError::config(name, format!("{v} not in [0, 1]")));
            }
        }
        if self.n_customers == 0 {
            return Err(PclvError::config("n_customers", "must be at least 1"));
        }
        if self.n_competitors == 0 {
            return Err(PclvError::config("n_competitors", "must be at least 1"));
        }
        if self.horizon_months < 13 {
            return Err(PclvError::config(
                "horizon_months",
                format!("{} < 13", self.horizon_months),
            ));
        }
        if !(self.margin_log_sigma > 0.0 && self.margin_log_sigma.is_finite()) {
            return Err(PclvError::config("margin_log_sigma", "must be positive"));
        }
        if !self.margin_log_mu.is_finite() {
            return Err(PclvError::config("margin_log_mu", "must be finite"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(PclvError::config("noise_sd", "must be non-negative"));
        }
        Ok(())
    }

    pub fn final_month(&self) -> u32 {
        self.horizon_months - 1
    }
}

/// Ground-truth coefficients behind the generated margins and churn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthTable {
    /// Keyed by PSC token.
    pub alpha: BTreeMap<String, f64>,
    pub beta: f64,
    pub churn_intercept: f64,
    pub churn_slope: f64,
    pub config: MarketConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedMarket {
    pub config: MarketConfig,
    pub transactions: Vec<TransactionRecord>,
    pub system_exposure: Vec<SystemExposure>,
    pub ob_snapshots: Vec<ObSnapshot>,
    pub true_churn: Vec<(CustomerId, bool)>,
    pub truth: TruthTable,
}

impl GeneratedMarket {
    /// Total final-month margin (dollars) of customers active in that month.
    pub fn final_month_margins(&self) -> Vec<f64> {
        let last = MonthIndex(self.config.final_month());
        let mut by_customer: BTreeMap<CustomerId, i64> = BTreeMap::new();
        for t in self.transactions.iter().filter(|t| t.month == last) {
            *by_customer.entry(t.customer).or_default() += t.contribution_margin.0;
        }
        by_customer.values().map(|&c| Cents(c).dollars()).collect()
    }
}

/// Intercept `a0` with `E[sigmoid(a0 + b z)] = rate` for `z ~ N(0, 1)`.
fn churn_intercept(rate: f64, slope: f64) -> f64 {
    if rate <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if rate >= 1.0 {
        return f64::INFINITY;
    }
    let n = 4001;
    let mean = |a0: f64| {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            let z = -8.0 + 16.0 * i as f64 / (n - 1) as f64;
            let w = (-0.5 * z * z).exp();
            num += w * sigmoid(a0 + slope * z);
            den += w;
        }
        num / den
    };
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Relative popularity of the products held besides the credit card.
const POPULARITY: [f64; N_PSC] = [0.0, 0.20, 0.15, 0.25, 0.15, 0.10, 0.10, 0.05];
/// Gamma shapes of the mix weights: the card carries most of the credit.
const CARD_SHAPE: f64 = 8.0;
const OTHER_SHAPE: f64 = 2.0;

/// A random PSC mix: a credit card plus up to two other products drawn by
/// popularity, with Dirichlet weights favouring the card.
fn draw_mix(rng: &mut ChaCha8Rng) -> Vec<(PscCode, f64)> {
    let u: f64 = rng.random();
    let extra = if u < 0.5 {
        0
    } else if u < 0.85 {
        1
    } else {
        2
    };
    let mut tags: Vec<usize> = sample_weighted(rng, N_PSC, |i| POPULARITY[i], extra)
        .expect("positive weights")
        .into_vec();
    tags.push(0);
    tags.sort_unstable();
    let card = Gamma::new(CARD_SHAPE, 1.0).expect("positive shape");
    let other = Gamma::new(OTHER_SHAPE, 1.0).expect("positive shape");
    let raw: Vec<f64> = tags
        .iter()
        .map(|&t| if t == 0 { card.sample(rng) } else { other.sample(rng) })
        .collect();
    let total: f64 = raw.iter().sum();
    tags.iter()
        .zip(raw)
        .map(|(&t, w)| (PscCode::from_tag(t).expect("tag < 8"), w / total))
        .collect()
}

/// Solves `a X + beta ln(1 + k X) = target` for `X >= 0`.
fn solve_scale(a: f64, k: f64, target: f64) -> f64 {
    let f = |x: f64| a * x + BETA * (k * x).ln_1p();
    if target <= 0.0 {
        return 0.0;
    }
    let mut hi = 1.0;
    while f(hi) < target {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Splits `total` cents across the weights, remainder on the last slot.
fn split_cents(total: i64, weights: &[f64]) -> Vec<i64> {
    let mut out: Vec<i64> = weights.iter().map(|w| (total as f64 * w).round() as i64).collect();
    let diff = total - out.iter().sum::<i64>();
    if let Some(last) = out.last_mut() {
        *last += diff;
    }
    out
}

struct Exposure {
    mix: Vec<(PscCode, f64)>,
    scale: f64,
}

fn draw_exposure(rng: &mut ChaCha8Rng, margin: f64) -> (Exposure, Vec<f64>) {
    let mix = draw_mix(rng);
    let overlay: Vec<f64> = mix.iter().map(|_| rng.random_range(0.2..1.5)).collect();
    let a: f64 = mix.iter().map(|(p, w)| ALPHA[p.tag()] * w).sum();
    let k: f64 = mix.iter().zip(&overlay).map(|((_, w), o)| w * (1.0 + o)).sum();
    let scale = solve_scale(a, k, margin);
    (Exposure { mix, scale }, overlay)
}

/// Draws `eps ~ N(0, sd)` conditioned on `m - eps > 0`.
fn draw_noise(rng: &mut ChaCha8Rng, sd: f64, m: f64) -> f64 {
    if sd == 0.0 {
        return 0.0;
    }
    loop {
        let z: f64 = StandardNormal.sample(rng);
        let eps = z * sd;
        if m - eps > 0.0 {
            return eps;
        }
    }
}

/// Lognormal margin level with the log-scale draw truncated at `MAX_MARGIN_Z`
/// standard deviations.
fn draw_margin(rng: &mut ChaCha8Rng, config: &MarketConfig) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z <= MAX_MARGIN_Z {
            return (config.margin_log_mu + config.margin_log_sigma * z).exp();
        }
    }
}

pub fn generate_market(config: &MarketConfig) -> Result<GeneratedMarket> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let month_noise = Normal::new(0.0, MONTH_NOISE_SD).expect("positive sd");
    let a0 = churn_intercept(config.churn_rate, CHURN_SLOPE);
    let last = config.final_month();
    let n = config.n_customers;

    let n_adopt = (config.ob_adoption * n as f64).round() as usize;
    let mut adopters = sample(&mut rng, n, n_adopt).into_vec();
    adopters.sort_unstable();
    let mut is_adopter = vec![false; n];
    for &i in &adopters {
        is_adopter[i] = true;
    }

    let mut transactions = Vec::new();
    let mut system_exposure = Vec::new();
    let mut ob_snapshots = Vec::new();
    let mut true_churn = Vec::with_capacity(n);

    for i in 0..n {
        let customer = CustomerId(i as u64);
        let m = draw_margin(&mut rng, config);
        let eps = draw_noise(&mut rng, config.noise_sd, m);
        let (exposure, overlay) = draw_exposure(&mut rng, m - eps);
        let z: f64 = StandardNormal.sample(&mut rng);
        let churned = rng.random::<f64>() < sigmoid(a0 + CHURN_SLOPE * z);
        true_churn.push((customer, churned));

        let start = if rng.random::<f64>() < 0.7 {
            0
        } else {
            rng.random_range(0..=last - 12)
        };
        let stop = if churned {
            rng.random_range(start.max(last - 11)..=last - 6)
        } else {
            last
        };
        // Non-churners with low engagement skip more months late on.
        let lapse = 0.02 + 0.15 * sigmoid(-CHURN_SLOPE * z);

        let weights: Vec<f64> = exposure.mix.iter().map(|p| p.1).collect();
        for t in start..=stop {
            let (p_active, level) = if churned && t + 5 >= stop {
                let j = (t + 5 - stop) as f64;
                (0.9 - 0.08 * j, 1.0 - 0.1 * j)
            } else if t + 12 >= last {
                (1.0 - lapse, 1.0)
            } else {
                (0.97, 1.0)
            };
            let forced = t == stop;
            if !forced && rng.random::<f64>() >= p_active {
                continue;
            }
            let wobble = if t == last {
                1.0
            } else {
                level * month_noise.sample(&mut rng).exp()
            };
            let total = Cents::from_dollars(m * wobble).0;
            let margins = split_cents(total, &weights);
            for ((psc, w), margin) in exposure.mix.iter().zip(margins) {
                transactions.push(TransactionRecord {
                    customer,
                    month: MonthIndex(t),
                    psc: *psc,
                    credit_amount: Cents::from_dollars(exposure.scale * w * wobble),
                    contribution_margin: Cents(margin),
                });
            }
        }
        for ((psc, w), o) in exposure.mix.iter().zip(&overlay) {
            system_exposure.push(SystemExposure {
                customer,
                psc: *psc,
                credit_amount: Cents::from_dollars(exposure.scale * w * (1.0 + o)),
            });
        }

        if is_adopter[i] {
            let k = rng.random_range(1..=config.n_competitors.min(3));
            let mut comps = sample(&mut rng, config.n_competitors, k).into_vec();
            comps.sort_unstable();
            for c in comps {
                let mc = draw_margin(&mut rng, config);
                let (comp, _) = draw_exposure(&mut rng, mc);
                let mut rows: Vec<ObSnapshot> = comp
                    .mix
                    .iter()
                    .map(|(psc, w)| ObSnapshot {
                        customer,
                        competitor: CompetitorId(c as u64 + 1),
                        psc: *psc,
                        credit_amount: Cents::from_dollars(comp.scale * w),
                    })
                    .collect();
                if rows.iter().all(|r| r.credit_amount.0 == 0) {
                    rows[0].credit_amount = Cents(1);
                }
                ob_snapshots.extend(rows);
            }
        }
    }

    transactions.sort_by_key(|t| (t.customer, t.month, t.psc));
    let truth = TruthTable {
        alpha: PscCode::ALL
            .iter()
            .map(|p| (p.token().to_string(), ALPHA[p.tag()]))
            .collect(),
        beta: BETA,
        churn_intercept: a0,
        churn_slope: CHURN_SLOPE,
        config: config.clone(),
    };
    Ok(GeneratedMarket {
        config: config.clone(),
        transactions,
        system_exposure,
        ob_snapshots,
        true_churn,
        truth,
    })
}

pub const LABELS_FILE: &str = "labels.csv";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub rows: usize,
    pub sha256: String,
}

pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let mut f = File::open(path).map_err(|e| PclvError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| PclvError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn entry(dir: &Path, file: &str, rows: usize) -> Result<ManifestEntry> {
    Ok(ManifestEntry {
        file: file.to_string(),
        rows,
        sha256: file_sha256(dir.join(file))?,
    })
}

/// Writes the three market CSVs, labels.csv and truth.json into `dir`.
pub fn write_market(market: &GeneratedMarket, dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| PclvError::io(dir, e))?;
    let datasets = [
        Dataset::Transactions(market.transactions.clone()),
        Dataset::SystemExposure(market.system_exposure.clone()),
        Dataset::ObSnapshot(market.ob_snapshots.clone()),
    ];
    let mut manifest = Vec::new();
    for d in &datasets {
        let name = d.kind().file_name();
        save_dataset(dir.join(name), d)?;
        manifest.push(entry(dir, name, d.len())?);
    }

    let path: PathBuf = dir.join(LABELS_FILE);
    let io = |e| PclvError::io(&path, e);
    let mut w = BufWriter::new(File::create(&path).map_err(io)?);
    writeln!(w, "customer_id,churned").map_err(io)?;
    for (c, churned) in &market.true_churn {
        writeln!(w, "{c},{}", u8::from(*churned)).map_err(io)?;
    }
    w.flush().map_err(io)?;
    drop(w);
    manifest.push(entry(dir, LABELS_FILE, market.true_churn.len())?);

    let path = dir.join(TRUTH_FILE);
    let json = serde_json::to_string_pretty(&market.truth).expect("plain data");
    std::fs::write(&path, json + "\n").map_err(|e| PclvError::io(&path, e))?;
    manifest.push(entry(dir, TRUTH_FILE, 1)?);
    Ok(manifest)
}

/// Reads labels.csv back.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<(CustomerId, bool)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| PclvError::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "customer_id,churned")) => {}
        other => {
            return Err(PclvError::Header {
                path: path.to_path_buf(),
                expected: "customer_id,churned".into(),
                found: other.map(|l| l.1.to_string()).unwrap_or_default(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let bad = |message: String| PclvError::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 1,
                message,
            };
            let (id, flag) = l.split_once(',').ok_or_else(|| bad("expected 2 fields".into()))?;
            let id = id.parse().map_err(|e| bad(format!("customer_id: {e}")))?;
            let flag = match flag {
                "0" => false,
                "1" => true,
                other => return Err(bad(format!("churned must be 0 or 1, got {other:?}"))),
            };
            Ok((CustomerId(id), flag))
        })
        .collect()
}

/// Datasets every market directory must contain.
pub fn market_files(dir: impl AsRef<Path>) -> Vec<PathBuf> {
    [
        DatasetKind::Transactions,
        DatasetKind::SystemExposure,
        DatasetKind::ObSnapshot,
    ]
    .iter()
    .map(|k| dir.as_ref().join(k.file_name()))
    .collect()
}
