//! End-to-end orchestration behind the `pclv` commands: generate a market,
//! train the churn and margin models, value every customer and write the
//! migration report.
//!
//! Module seeds derive from the single global seed by fixed offsets (see
//! [`seed_offset`]), so changing e.g. the fold seed never perturbs the
//! generated market.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boosting::{self, GbtModel, GbtParams, Objective};
use crate::datagen::{self, ManifestEntry, MarketConfig};
use crate::domain::{
    self, ob_exposure_map, snapshot_at, system_exposure_map, CompetitorId, CustomerId, MonthIndex,
    TransactionRecord, N_PSC,
};
use crate::error::{PclvError, Result};
use crate::evaluation::{cross_validate, kfold, CvData, CvOutcome, Metric, MetricReport, Recipe};
use crate::features::{feature_table, FeatureSpec, FeatureTable};
use crate::hpo::{optimize, HpoConfig, SearchSpace};
use crate::matrix::Matrix;
use crate::resampling::{balance, ResampleConfig};
use crate::segmentation::{build_report, rank_by_pclv, write_targets_csv, MigrationReport};
use crate::valuation::{
    margin_features, predict_pcm_competitor, retention, value_customer, write_valuation_csv,
    DiscountRate, ValuationRecord,
};

/// Offsets added to the global seed for each consumer of randomness.
pub mod seed_offset {
    pub const MARKET: u64 = 0;
    pub const FOLDS: u64 = 1;
    pub const RESAMPLE: u64 = 2;
    pub const CHURN_GBT: u64 = 3;
    pub const PCM_GBT: u64 = 4;
    pub const HPO: u64 = 5;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub model_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: "data".into(),
            model_dir: "models".into(),
            report_dir: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub params: GbtParams,
    pub hpo: HpoConfig,
    pub search_space: SearchSpace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportPopulation {
    /// Customers with at least one Open Banking snapshot.
    ObCustomers,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub market: MarketConfig,
    pub features: FeatureSpec,
    pub resample: ResampleConfig,
    pub churn: TaskConfig,
    pub pcm: TaskConfig,
    pub discount_rate: DiscountRate,
    pub folds: usize,
    /// Inner folds used to score each hyperparameter candidate.
    pub hpo_folds: usize,
    pub threshold: f64,
    pub report_population: ReportPopulation,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: Paths::default(),
            market: MarketConfig::default(),
            features: FeatureSpec::default(),
            resample: ResampleConfig::default(),
            churn: TaskConfig::default(),
            pcm: TaskConfig::default(),
            discount_rate: DiscountRate::default(),
            folds: 10,
            hpo_folds: 3,
            threshold: 0.5,
            report_population: ReportPopulation::ObCustomers,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Churn,
    Pcm,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Churn => "churn",
            Task::Pcm => "pcm",
        }
    }
}

pub const MODEL_FILE: &str = "model.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const PARAMS_FILE: &str = "params.json";
pub const HPO_HISTORY_FILE: &str = "hpo_history.csv";
pub const VALUATION_FILE: &str = "valuation.csv";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const TARGETS_FILE: &str = "targets.csv";

impl PipelineConfig {
    /// Reads a JSON config. Relative paths inside it resolve against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(PclvError::MissingInputs(vec![path.to_path_buf()]));
        }
        let text = std::fs::read_to_string(path).map_err(|e| PclvError::io(path, e))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text).map_err(|e| {
            PclvError::config("config", format!("{}: {e}", path.display()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.paths.data_dir,
            &mut cfg.paths.model_dir,
            &mut cfg.paths.report_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        self.features.validate()?;
        self.resample.validate()?;
        for task in [&self.churn, &self.pcm] {
            task.params.validate()?;
            task.search_space.validate()?;
            if task.hpo.n_init < 2 {
                return Err(PclvError::config("n_init", "must be at least 2"));
            }
        }
        if self.folds < 2 {
            return Err(PclvError::config("folds", "must be at least 2"));
        }
        if self.hpo_folds < 2 {
            return Err(PclvError::config("hpo_folds", "must be at least 2"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(PclvError::config("threshold", format!("{} not in (0, 1)", self.threshold)));
        }
        Ok(())
    }

    pub fn market_config(&self) -> MarketConfig {
        MarketConfig {
            seed: self.seed.wrapping_add(seed_offset::MARKET),
            ..self.market.clone()
        }
    }

    pub fn resample_config(&self) -> ResampleConfig {
        ResampleConfig {
            seed: self.seed.wrapping_add(seed_offset::RESAMPLE),
            ..self.resample.clone()
        }
    }

    pub fn task(&self, task: Task) -> &TaskConfig {
        match task {
            Task::Churn => &self.churn,
            Task::Pcm => &self.pcm,
        }
    }

    pub fn gbt_params(&self, task: Task) -> GbtParams {
        let offset = match task {
            Task::Churn => seed_offset::CHURN_GBT,
            Task::Pcm => seed_offset::PCM_GBT,
        };
        GbtParams {
            seed: self.seed.wrapping_add(offset),
            ..self.task(task).params.clone()
        }
    }

    pub fn fold_seed(&self) -> u64 {
        self.seed.wrapping_add(seed_offset::FOLDS)
    }

    pub fn task_dir(&self, task: Task) -> PathBuf {
        self.paths.model_dir.join(task.name())
    }
}

fn require(files: &[PathBuf]) -> Result<()> {
    let missing: Vec<PathBuf> = files.iter().filter(|p| !p.exists()).cloned().collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(PclvError::MissingInputs(missing))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PclvError::io(dir, e))
}

pub fn cmd_gen(cfg: &PipelineConfig) -> Result<Vec<ManifestEntry>> {
    let market = datagen::generate_market(&cfg.market_config())?;
    datagen::write_market(&market, &cfg.paths.data_dir)
}

/// Balance the training split, then fit a logistic GBT. Each fold gets its
/// own resampling and boosting seed.
#[derive(Debug, Clone)]
pub struct ChurnRecipe {
    pub params: GbtParams,
    pub resample: ResampleConfig,
}

impl ChurnRecipe {
    pub fn fit_all(&self, x: &Matrix, labels: &[bool], salt: u64) -> Result<GbtModel> {
        let resample = ResampleConfig {
            seed: self.resample.seed.wrapping_add(salt),
            ..self.resample.clone()
        };
        let balanced = balance(x, labels, &resample)?;
        let params = GbtParams {
            seed: self.params.seed.wrapping_add(salt),
            ..self.params.clone()
        };
        boosting::train_classifier(&balanced.x, &balanced.labels, &params)
    }
}

impl Recipe for ChurnRecipe {
    type Model = GbtModel;

    fn fit(&self, x: &Matrix, y: &[f64], fold: usize) -> Result<GbtModel> {
        let labels: Vec<bool> = y.iter().map(|&v| v > 0.5).collect();
        self.fit_all(x, &labels, fold as u64 + 1)
    }

    fn score(&self, model: &GbtModel, x: &Matrix) -> Result<Vec<f64>> {
        model.predict(x)
    }
}

#[derive(Debug, Clone)]
pub struct PcmRecipe {
    pub params: GbtParams,
}

impl Recipe for PcmRecipe {
    type Model = GbtModel;

    fn fit(&self, x: &Matrix, y: &[f64], fold: usize) -> Result<GbtModel> {
        let params = GbtParams {
            seed: self.params.seed.wrapping_add(fold as u64 + 1),
            ..self.params.clone()
        };
        boosting::train(x, y, &params, Objective::SquaredError)
    }

    fn score(&self, model: &GbtModel, x: &Matrix) -> Result<Vec<f64>> {
        model.predict(x)
    }
}

/// Churn training table: features at the last month whose label window is
/// fully observed.
pub fn churn_table(transactions: &[TransactionRecord], spec: &FeatureSpec) -> Result<FeatureTable> {
    let obs = spec.last_labelled_month(domain::horizon_of(transactions))?;
    feature_table(transactions, obs, spec, true)
}

/// Margin-model training table: customers active in the final month, with
/// focal and system exposures as features and that month's margin as target.
#[derive(Debug, Clone)]
pub struct PcmTable {
    pub customers: Vec<CustomerId>,
    pub x: Matrix,
    pub y: Vec<f64>,
}

pub fn pcm_table(
    transactions: &[TransactionRecord],
    system: &BTreeMap<CustomerId, [f64; N_PSC]>,
) -> Result<PcmTable> {
    let last = domain::horizon_of(transactions)
        .checked_sub(1)
        .ok_or_else(|| PclvError::input("no transactions"))?;
    let snap = snapshot_at(transactions, MonthIndex(last))?;
    let mut x = Matrix::zeros(0, 2 * N_PSC);
    let (mut customers, mut y) = (Vec::new(), Vec::new());
    for (i, &c) in snap.customers.iter().enumerate() {
        if !snap.active(i) {
            continue;
        }
        let sys = system.get(&c).copied().unwrap_or([0.0; N_PSC]);
        x.push_row(&margin_features(&snap.exposure[i], &sys));
        customers.push(c);
        y.push(snap.margin[i]);
    }
    Ok(PcmTable { customers, x, y })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: GbtParams,
    pub cv: CvOutcome,
    pub model: GbtModel,
    pub hpo: Option<crate::hpo::HpoResult>,
}

fn metrics_for(task: Task) -> &'static [Metric] {
    match task {
        Task::Churn => &Metric::CLASSIFICATION,
        Task::Pcm => &Metric::REGRESSION,
    }
}

/// HPO objective: `1 - PR-AUC` for churn, RMSE for margins.
fn objective(task: Task, report: &MetricReport) -> f64 {
    match task {
        Task::Churn => report.mean(Metric::PrAuc).map_or(f64::NAN, |v| 1.0 - v),
        Task::Pcm => report.mean(Metric::Rmse).unwrap_or(f64::NAN),
    }
}

/// Tunes (optionally), cross-validates and refits one model in memory.
pub fn train_task(
    cfg: &PipelineConfig,
    task: Task,
    customers: &[CustomerId],
    x: &Matrix,
    y: &[f64],
    skip_hpo: bool,
) -> Result<TrainOutcome> {
    let base = cfg.gbt_params(task);
    let data = CvData { customers, x, y };
    let run = |params: &GbtParams, k: usize, seed: u64| -> Result<CvOutcome> {
        let plan = kfold(&unique(customers), k, seed)?;
        match task {
            Task::Churn => cross_validate(
                data,
                &ChurnRecipe {
                    params: params.clone(),
                    resample: cfg.resample_config(),
                },
                &plan,
                metrics_for(task),
                cfg.threshold,
            ),
            Task::Pcm => cross_validate(
                data,
                &PcmRecipe {
                    params: params.clone(),
                },
                &plan,
                metrics_for(task),
                cfg.threshold,
            ),
        }
    };

    let (params, hpo) = if skip_hpo {
        (base, None)
    } else {
        let tc = cfg.task(task);
        let hpo_cfg = HpoConfig {
            seed: cfg.seed.wrapping_add(seed_offset::HPO),
            ..tc.hpo.clone()
        };
        let inner_seed = cfg.fold_seed().wrapping_add(seed_offset::HPO);
        let result = optimize(
            |values| {
                let p = tc.search_space.to_gbt_params(values, &base)?;
                let cv = run(&p, cfg.hpo_folds, inner_seed)?;
                let v = objective(task, &cv.report);
                log::info!("{} hpo: {values:?} -> {v}", task.name());
                Ok(v)
            },
            &tc.search_space,
            &hpo_cfg,
        )?;
        (tc.search_space.to_gbt_params(&result.best, &base)?, Some(result))
    };

    let cv = run(&params, cfg.folds, cfg.fold_seed())?;
    let model = match task {
        Task::Churn => {
            let labels: Vec<bool> = y.iter().map(|&v| v > 0.5).collect();
            ChurnRecipe {
                params: params.clone(),
                resample: cfg.resample_config(),
            }
            .fit_all(x, &labels, 0)?
        }
        Task::Pcm => boosting::train(x, y, &params, Objective::SquaredError)?,
    };
    Ok(TrainOutcome {
        params,
        cv,
        model,
        hpo,
    })
}

fn unique(customers: &[CustomerId]) -> Vec<CustomerId> {
    let mut u = customers.to_vec();
    u.sort_unstable();
    u.dedup();
    u
}

fn market_inputs(cfg: &PipelineConfig) -> Vec<PathBuf> {
    datagen::market_files(&cfg.paths.data_dir)
}

pub fn cmd_train(cfg: &PipelineConfig, task: Task, skip_hpo: bool) -> Result<TrainOutcome> {
    let inputs = market_inputs(cfg);
    require(&inputs)?;
    let tx = domain::load_transactions(&inputs[0])?;
    let (customers, x, y) = match task {
        Task::Churn => {
            let t = churn_table(&tx, &cfg.features)?;
            let labels = t.labels.expect("labelled table");
            let y: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();
            (t.customers, t.x, y)
        }
        Task::Pcm => {
            let system = domain::load_system_exposure(&inputs[1])?;
            let t = pcm_table(&tx, &system_exposure_map(&system))?;
            (t.customers, t.x, t.y)
        }
    };
    log::info!("{}: {} training rows", task.name(), x.n_rows());
    let out = train_task(cfg, task, &customers, &x, &y, skip_hpo)?;

    let dir = cfg.task_dir(task);
    create_dir(&dir)?;
    out.model.save(dir.join(MODEL_FILE))?;
    out.cv.report.write_json(dir.join(METRICS_FILE))?;
    let params_path = dir.join(PARAMS_FILE);
    let text = serde_json::to_string_pretty(&out.params).expect("plain data");
    std::fs::write(&params_path, text + "\n").map_err(|e| PclvError::io(&params_path, e))?;
    let history = dir.join(HPO_HISTORY_FILE);
    match &out.hpo {
        Some(h) => h.write_history_csv(&cfg.task(task).search_space, &history)?,
        None if history.exists() => {
            std::fs::remove_file(&history).map_err(|e| PclvError::io(&history, e))?
        }
        None => {}
    }
    Ok(out)
}

/// Values every customer in the ledger: retention from the churn model at
/// the final month, Actual CLV from that month's margin, and one PCLV term
/// per competitor the customer shared data for.
pub fn value_market(
    cfg: &PipelineConfig,
    transactions: &[TransactionRecord],
    system: &BTreeMap<CustomerId, [f64; N_PSC]>,
    ob: &BTreeMap<(CustomerId, CompetitorId), [f64; N_PSC]>,
    churn: &GbtModel,
    pcm: &GbtModel,
) -> Result<Vec<ValuationRecord>> {
    let last = MonthIndex(
        domain::horizon_of(transactions)
            .checked_sub(1)
            .ok_or_else(|| PclvError::input("no transactions"))?,
    );
    let snap = snapshot_at(transactions, last)?;
    let table = feature_table(transactions, last, &cfg.features, false)?;
    let churn_probs = churn.predict(&table.x)?;

    let mut competitors: BTreeMap<CustomerId, Vec<CompetitorId>> = BTreeMap::new();
    for &(c, n) in ob.keys() {
        competitors.entry(c).or_default().push(n);
    }
    for c in competitors.keys() {
        if snap.index_of(*c).is_none() {
            log::warn!("customer {c} has Open Banking data but no ledger; skipped");
        }
    }

    let d = cfg.discount_rate;
    let mut out = Vec::with_capacity(snap.len());
    for (i, &c) in snap.customers.iter().enumerate() {
        debug_assert_eq!(table.customers[i], c);
        let r = retention(churn_probs[i])?;
        let sys = system.get(&c).copied().unwrap_or([0.0; N_PSC]);
        let pcms = competitors
            .get(&c)
            .map(|ns| {
                ns.iter()
                    .map(|&n| predict_pcm_competitor(pcm, c, n, ob, &sys))
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?
            .unwrap_or_default();
        out.push(value_customer(c, snap.margin[i], r, d, &pcms));
    }
    Ok(out)
}

pub fn cmd_score(cfg: &PipelineConfig) -> Result<Vec<ValuationRecord>> {
    let mut inputs = market_inputs(cfg);
    inputs.push(cfg.task_dir(Task::Churn).join(MODEL_FILE));
    inputs.push(cfg.task_dir(Task::Pcm).join(MODEL_FILE));
    require(&inputs)?;
    let tx = domain::load_transactions(&inputs[0])?;
    let system_rows = domain::load_system_exposure(&inputs[1])?;
    let ob_rows = domain::load_ob_snapshots(&inputs[2])?;
    let churn = GbtModel::load(&inputs[3])?;
    let pcm = GbtModel::load(&inputs[4])?;
    let last = domain::horizon_of(&tx).saturating_sub(1);
    domain::warn_inconsistent_exposure(&snapshot_at(&tx, MonthIndex(last))?, &system_rows);
    let records = value_market(
        cfg,
        &tx,
        &system_exposure_map(&system_rows),
        &ob_exposure_map(&ob_rows),
        &churn,
        &pcm,
    )?;
    create_dir(&cfg.paths.report_dir)?;
    write_valuation_csv(cfg.paths.report_dir.join(VALUATION_FILE), &records)?;
    Ok(records)
}

pub fn report_population(
    records: Vec<ValuationRecord>,
    population: ReportPopulation,
) -> Vec<ValuationRecord> {
    match population {
        ReportPopulation::All => records,
        ReportPopulation::ObCustomers => records.into_iter().filter(|r| r.has_ob_data()).collect(),
    }
}

pub fn cmd_report(cfg: &PipelineConfig) -> Result<MigrationReport> {
    let path = cfg.paths.report_dir.join(VALUATION_FILE);
    require(std::slice::from_ref(&path))?;
    let records = report_population(
        crate::valuation::read_valuation_csv(&path)?,
        cfg.report_population,
    );
    let report = build_report(&records)?;
    let dir = &cfg.paths.report_dir;
    report.write_csv(dir.join(REPORT_CSV))?;
    report.write_json(dir.join(REPORT_JSON))?;
    write_targets_csv(dir.join(TARGETS_FILE), &rank_by_pclv(&records))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_json_defaults_and_unknown_keys() {
        let c: PipelineConfig = serde_json::from_str(r#"{"seed": 9, "market": {"n_customers": 10}}"#).unwrap();
        assert_eq!(c.folds, 10);
        assert_eq!(c.market_config().seed, 9);
        assert_eq!(c.resample_config().seed, 11);
        assert_eq!(c.gbt_params(Task::Pcm).seed, 13);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sed": 1}"#).is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"discount_rate": 0}"#).is_err());
    }

    #[test]
    fn missing_config_is_a_usage_error() {
        let err = PipelineConfig::load("/nonexistent/c.json").unwrap_err();
        assert!(err.is_usage());
        assert!(err.to_string().contains("/nonexistent/c.json"));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"paths": {"data_dir": "d"}}"#).unwrap();
        let c = PipelineConfig::load(&p).unwrap();
        assert_eq!(c.paths.data_dir, dir.path().join("d"));
    }

    #[test]
    fn train_without_market_lists_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            paths: Paths {
                data_dir: dir.path().join("data"),
                ..Paths::default()
            },
            ..PipelineConfig::default()
        };
        match cmd_train(&cfg, Task::Pcm, true) {
            Err(PclvError::MissingInputs(files)) => assert_eq!(files.len(), 3),
            other => panic!("{other:?}"),
        }
    }
}
