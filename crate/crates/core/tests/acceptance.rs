//! Acceptance criteria. One line per criterion:
//!
//! ```text
//! criterion 3 PASS churn pipeline quality ... (412.3 s / budget 600 s)
//! ```
//!
//! Set `PCLV_ACCEPTANCE=1,5,8` to run a subset.

mod common;

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::*;
use pclv_core::boosting::{self, GbtModel, GbtParams, Objective};
use pclv_core::datagen::{
    generate_market, solve_lognormal, GeneratedMarket, MarketConfig, TARGET_MEAN_MARGIN,
    TARGET_MEDIAN_MARGIN,
};
use pclv_core::domain::{system_exposure_map, Cents, CompetitorId, CustomerId};
use pclv_core::evaluation::{pr_auc, Metric};
use pclv_core::hpo::{optimize, Dimension, HpoConfig, Scale, SearchSpace};
use pclv_core::pipeline::{self, churn_table, pcm_table, train_task, PipelineConfig, Task};
use pclv_core::resampling::{balance, ResampleConfig};
use pclv_core::segmentation::{MigrationCell, MigrationReport, Segment};
use pclv_core::valuation::*;
use pclv_core::Matrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

fn market() -> &'static GeneratedMarket {
    static MARKET: OnceLock<GeneratedMarket> = OnceLock::new();
    MARKET.get_or_init(|| generate_market(&MarketConfig::default()).expect("default market"))
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol
}

fn dollars(d: i64) -> Cents {
    Cents(d * 100)
}

fn table1_cells() -> Vec<MigrationCell> {
    use Segment::*;
    // (from, to, total CLV, PCLV, actual CLV, customers) as printed.
    let rows = [
        (Upper, Upper, 67_958_298, 7_017_311, 60_940_879, 3_425),
        (Upper, Intermediate, 195_318, 40_851, 154_466, 75),
        (Upper, Lower, 0, 0, 0, 0),
        (Intermediate, Upper, 223_812, 101_601, 99_781, 73),
        (Intermediate, Intermediate, 9_136_310, 4_128_358, 5_007_952, 3_061),
        (Intermediate, Lower, 414_087, 196_102, 217_985, 367),
        (Lower, Upper, 0, 0, 0, 0),
        (Lower, Intermediate, 617_536, 527_582, 89_954, 371),
        (Lower, Lower, 2_008_339, 2_000_288, 8_051, 3_135),
    ];
    rows.iter()
        .map(|&(from, to, total, pclv, actual, n)| MigrationCell {
            from,
            to,
            n_customers: n,
            actual_clv_sum: dollars(actual),
            pclv_sum: dollars(pclv),
            total_clv_sum: dollars(total),
        })
        .collect()
}

fn criterion_1() -> Check {
    let report = MigrationReport::assemble(table1_cells()).map_err(|e| e.to_string())?;
    let u = &report.upside;
    let t = &report.totals;
    let sums_ok = u.upward.pclv_sum == dollars(629_183)
        && u.static_.pclv_sum == dollars(13_145_957)
        && u.downward.pclv_sum == dollars(236_953)
        && u.total_pclv == dollars(14_012_093)
        && u.total_actual_clv == dollars(66_519_068)
        && t.total_clv == dollars(80_553_700)
        && t.pclv == dollars(14_012_093)
        && t.actual_clv == dollars(66_519_068)
        && t.n_customers == 10_507;
    let pct_ok = within(u.overall_upside_pct, 21.06, 0.01)
        && within(u.upward.pct_of_actual, 0.95, 0.01)
        && within(u.static_.pct_of_actual, 19.76, 0.01)
        && within(u.downward.pct_of_actual, 0.36, 0.01)
        && within(u.upward.customer_share_pct, 4.23, 0.01)
        && within(u.static_.customer_share_pct, 91.56, 0.01)
        && within(u.downward.customer_share_pct, 4.20, 0.01);
    ensure(
        sums_ok && pct_ok,
        format!(
            "upward {} static {} downward {} total {} overall {:.4}% shares {:.4}/{:.4}/{:.4}%, {} cells flagged",
            u.upward.pclv_sum.0 / 100,
            u.static_.pclv_sum.0 / 100,
            u.downward.pclv_sum.0 / 100,
            u.total_pclv.0 / 100,
            u.overall_upside_pct,
            u.upward.customer_share_pct,
            u.static_.customer_share_pct,
            u.downward.customer_share_pct,
            report.inconsistent_cells.len()
        ),
    )
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut identity_breaks = 0;
    let hand = [
        actual_clv(100.0, RetentionScore::new(0.9).unwrap(), DiscountRate::new(0.1).unwrap()),
        pclv_from_annual(1200.0, RetentionScore::new(0.9).unwrap(), DiscountRate::new(0.1).unwrap()),
    ];
    for v in hand {
        worst = worst.max(rel_err(v, 5400.0));
    }
    for _ in 0..10_000 {
        let cm = rng.random_range(-1_000.0..100_000.0);
        let r = rng.random_range(0.0..=1.0);
        let d = rng.random_range(0.01..0.5);
        let churn = 1.0 - r;
        let rs = retention(churn).map_err(|e| e.to_string())?;
        let ds = DiscountRate::new(d).map_err(|e| e.to_string())?;
        worst = worst.max(rel_err(rs.value(), 1.0 - churn));

        let actual = actual_clv(cm, rs, ds);
        worst = worst.max(rel_err(actual, perpetuity_series(12.0 * cm, rs.value(), d)));

        let n_comp = rng.random_range(0..4);
        let per: Vec<f64> = (0..n_comp)
            .map(|n| {
                let pcm = AnnualPcm {
                    customer: CustomerId(0),
                    competitor: CompetitorId(n + 1),
                    pcm_annual: rng.random_range(0.0..500_000.0),
                };
                let got = pclv_competitor(&pcm, rs, ds);
                let want = perpetuity_series(pcm.pcm_annual, rs.value(), d);
                worst = worst.max(rel_err(got, want));
                got
            })
            .collect();
        let pclv = pclv_total(&per);
        let want_pclv: f64 = per.iter().sum();
        worst = worst.max(rel_err(pclv, want_pclv));
        worst = worst.max(rel_err(total_clv(actual, pclv), actual + want_pclv));

        let via_eq5 = pclv_from_annual(12.0 * cm, rs, ds);
        if rel_err(via_eq5, actual) > 1e-9 {
            identity_breaks += 1;
        }
    }
    ensure(
        worst <= 1e-9 && identity_breaks == 0,
        format!("max relative error {worst:.2e} over 10000 triples, {identity_breaks} identity breaks"),
    )
}

fn criterion_3() -> Check {
    let cfg = PipelineConfig::default();
    let m = market();
    let table = churn_table(&m.transactions, &cfg.features).map_err(|e| e.to_string())?;
    let labels = table.labels.clone().ok_or("unlabelled churn table")?;
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();
    let prevalence = y.iter().sum::<f64>() / y.len() as f64;
    let out = train_task(&cfg, Task::Churn, &table.customers, &table.x, &y, true)
        .map_err(|e| e.to_string())?;
    let mean = |metric: Metric| out.cv.report.mean(metric).unwrap_or(f64::NAN);
    let (ap, sens, spec) = (
        mean(Metric::PrAuc),
        mean(Metric::Sensitivity),
        mean(Metric::Specificity),
    );
    ensure(
        ap >= 0.90 && sens >= 0.85 && spec >= 0.85 && out.cv.report.k == 10,
        format!(
            "{} customers, churn {:.2}%: pr_auc {ap:.4} sensitivity {sens:.4} specificity {spec:.4}",
            y.len(),
            100.0 * prevalence
        ),
    )
}

fn criterion_4() -> Check {
    let cfg = PipelineConfig::default();
    let m = market();
    let table = pcm_table(&m.transactions, &system_exposure_map(&m.system_exposure))
        .map_err(|e| e.to_string())?;
    let out = train_task(&cfg, Task::Pcm, &table.customers, &table.x, &table.y, true)
        .map_err(|e| e.to_string())?;
    let r2 = out.cv.report.mean(Metric::R2).unwrap_or(f64::NAN);
    let rmse = out.cv.report.mean(Metric::Rmse).unwrap_or(f64::NAN);
    let sd = pop_sd(&table.y);
    let pooled = pclv_core::evaluation::rmse(&table.y, &out.cv.oof).map_err(|e| e.to_string())?;
    ensure(
        r2 >= 0.8 && rmse <= 0.2 * sd,
        format!(
            "{} customers: R2 {r2:.4}, RMSE {rmse:.2} = {:.4} of target sd {sd:.2} (pooled {:.4})",
            table.y.len(),
            rmse / sd,
            pooled / sd
        ),
    )
}

fn random_dataset(rng: &mut ChaCha8Rng) -> (Matrix, Vec<i64>) {
    let n = rng.random_range(2..=200);
    let p = rng.random_range(1..=4);
    let grid = rng.random_bool(0.5);
    let data: Vec<f64> = (0..n * p)
        .map(|_| {
            if grid {
                f64::from(rng.random_range(0..6))
            } else {
                rng.random_range(-100.0..100.0)
            }
        })
        .collect();
    let y = (0..n).map(|_| rng.random_range(-5..=5)).collect();
    (Matrix::new(data, p).unwrap(), y)
}

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (x, y) = random_dataset(&mut rng);
        let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        let model = boosting::train(&x, &yf, &stump_params(), Objective::SquaredError)
            .map_err(|e| e.to_string())?;
        let same = match (as_stump(&model.trees[0].nodes), stump_oracle(&x, &y)) {
            (None, None) => true,
            (Some(g), Some(w)) => {
                g.feature == w.feature
                    && g.threshold == w.threshold
                    && rel_err(g.gain, w.gain) < 1e-9
                    && rel_err(g.left_weight, w.left_weight) < 1e-12
                    && rel_err(g.right_weight, w.right_weight) < 1e-12
            }
            _ => false,
        };
        if !same {
            mismatches += 1;
        }
    }

    let mut rises = 0;
    for _ in 0..10 {
        let n = 200;
        let p = 3;
        let data: Vec<f64> = (0..n * p).map(|_| rng.random_range(-10.0..10.0)).collect();
        let x = Matrix::new(data, p).unwrap();
        let y: Vec<f64> = (0..n)
            .map(|i| x.get(i, 0).sin() * 5.0 + x.get(i, 1) + rng.random_range(-1.0..1.0))
            .collect();
        let params = GbtParams {
            eta: 0.3,
            max_depth: 3,
            gamma: 0.0,
            n_rounds: 200,
            ..GbtParams::default()
        };
        let model = boosting::train(&x, &y, &params, Objective::SquaredError)
            .map_err(|e| e.to_string())?;
        let mut prev = f64::INFINITY;
        for k in 0..=model.trees.len() {
            let mut m: GbtModel = model.clone();
            m.trees.truncate(k);
            let loss = pclv_core::evaluation::rmse(&y, &m.predict(&x).unwrap()).unwrap();
            if loss > prev * (1.0 + 1e-12) {
                rises += 1;
            }
            prev = loss;
        }
    }
    ensure(
        mismatches == 0 && rises == 0,
        format!("{mismatches} stump mismatches in 1000 datasets, {rises} loss increases over 10x200 rounds"),
    )
}

fn criterion_6() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cases = 0;
    let mut worst = 0.0f64;
    for n in 2..=8usize {
        let mut scores: Vec<f64> = (0..n).map(|i| i as f64 * 0.125 + 0.01).collect();
        for mask in 1..(1u32 << n) - 1 {
            let labels: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            for _ in 0..6 {
                scores.shuffle(&mut rng);
                let got = pr_auc(&labels, &scores).map_err(|e| e.to_string())?;
                worst = worst.max((got - average_precision_oracle(&labels, &scores)).abs());
                cases += 1;
            }
        }
    }
    ensure(
        worst < 1e-12,
        format!("{cases} labelings x orderings, max |AP - brute force| {worst:.1e}"),
    )
}

fn criterion_7() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 10_000;
    let p = 5;
    let n_pos = 540;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let pos = i < n_pos;
        let shift = if pos { 1.5 } else { 0.0 };
        let row: Vec<f64> = (0..p)
            .map(|_| {
                let u: f64 = rng.random_range(-1.0..1.0);
                let v: f64 = rng.random_range(-1.0..1.0);
                shift + u + v
            })
            .collect();
        rows.push(row);
        labels.push(pos);
    }
    let x = Matrix::from_rows(&rows).unwrap();
    let config = ResampleConfig::default();
    let out = balance(&x, &labels, &config).map_err(|e| e.to_string())?;
    let (pos, neg) = out.class_counts();
    let ratio = pos as f64 / neg as f64;

    // z-scores recomputed from scratch: population mean and sd per column.
    let mut z = x.clone();
    for c in 0..p {
        let col: Vec<f64> = x.column(c).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let sd = pop_sd(&col);
        for i in 0..n {
            z.row_mut(i)[c] = (x.get(i, c) - mean) / sd;
        }
    }
    let minority: Vec<usize> = (0..n).filter(|&i| labels[i]).collect();
    let mut synthetic = 0;
    let mut off_segment = 0;
    let mut origins = out.synthetic_origins.iter();
    for (row, src) in out.source_rows.iter().enumerate() {
        match src {
            Some(s) => {
                if out.x.row(row) != x.row(*s) {
                    return Err(format!("original row {s} altered"));
                }
            }
            None => {
                synthetic += 1;
                let &(i, j) = origins.next().ok_or("synthetic row without origin")?;
                let nn = brute_knn(&z, z.row(i), &minority, config.adasyn_k, Some(i));
                let (xi, xj, s) = (x.row(i), x.row(j), out.x.row(row));
                let lambda = (s[0] - xi[0]) / (xj[0] - xi[0]);
                let on_segment = (-1e-9..=1.0 + 1e-9).contains(&lambda)
                    && (0..p).all(|c| (s[c] - (xi[c] + lambda * (xj[c] - xi[c]))).abs() < 1e-9);
                if !nn.contains(&j) || !on_segment || !labels[i] {
                    off_segment += 1;
                }
            }
        }
    }
    ensure(
        (0.98..=1.02).contains(&ratio) && synthetic > 0 && off_segment == 0,
        format!("{pos}:{neg} after balancing (ratio {ratio:.4}), {synthetic} synthetic rows, {off_segment} off their k-NN segments"),
    )
}

fn criterion_8() -> Check {
    let optimum = 0.7316;
    let f = |x: f64| (x - optimum) * (x - optimum);
    let space = SearchSpace {
        dimensions: vec![Dimension {
            name: "x".into(),
            lower: -2.0,
            upper: 2.0,
            scale: Scale::Linear,
            integer: false,
        }],
    };
    let config = HpoConfig {
        n_init: 5,
        n_iter: 25,
        seed: 8,
    };
    let result = optimize(|v| Ok(f(v[0])), &space, &config).map_err(|e| e.to_string())?;
    let grid_best = (0..=100_000)
        .map(|i| -2.0 + 4.0 * i as f64 / 100_000.0)
        .min_by(|a, b| f(*a).total_cmp(&f(*b)))
        .unwrap();
    let trace = result.incumbent_trace();
    let monotone = trace.windows(2).all(|w| w[1] <= w[0]);
    let x = result.best[0];
    ensure(
        result.history.len() == 30 && (x - grid_best).abs() <= 0.05 && monotone,
        format!(
            "incumbent x {x:.5} vs grid optimum {grid_best:.5} after {} evaluations, trace monotone: {monotone}",
            result.history.len()
        ),
    )
}

fn pipeline_run(cfg: &PipelineConfig) -> std::result::Result<(Vec<u8>, Vec<u8>), String> {
    let e = |e: pclv_core::PclvError| e.to_string();
    pipeline::cmd_gen(cfg).map_err(e)?;
    let churn = pipeline::cmd_train(cfg, Task::Churn, true).map_err(e)?;
    let pcm = pipeline::cmd_train(cfg, Task::Pcm, false).map_err(e)?;
    for (task, outcome) in [(Task::Churn, &churn), (Task::Pcm, &pcm)] {
        let loaded = GbtModel::load(cfg.task_dir(task).join(pipeline::MODEL_FILE)).map_err(e)?;
        let tx = pclv_core::domain::load_transactions(cfg.paths.data_dir.join("transactions.csv"))
            .map_err(e)?;
        let x = match task {
            Task::Churn => churn_table(&tx, &cfg.features).map_err(e)?.x,
            Task::Pcm => {
                let sys = pclv_core::domain::load_system_exposure(
                    cfg.paths.data_dir.join("system_exposure.csv"),
                )
                .map_err(e)?;
                pcm_table(&tx, &system_exposure_map(&sys)).map_err(e)?.x
            }
        };
        let a = outcome.model.predict_margins(&x).map_err(e)?;
        let b = loaded.predict_margins(&x).map_err(e)?;
        if a.iter().zip(&b).any(|(p, q)| p.to_bits() != q.to_bits()) {
            return Err(format!("{} model changed after save/load", task.name()));
        }
    }
    pipeline::cmd_score(cfg).map_err(e)?;
    pipeline::cmd_report(cfg).map_err(e)?;
    let read = |name: &str| {
        std::fs::read(cfg.paths.report_dir.join(name)).map_err(|err| format!("{name}: {err}"))
    };
    Ok((read(pipeline::VALUATION_FILE)?, read(pipeline::REPORT_CSV)?))
}

fn criterion_9() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = PipelineConfig::default();
    cfg.paths.data_dir = dir.path().join("data");
    cfg.paths.model_dir = dir.path().join("models");
    cfg.paths.report_dir = dir.path().join("reports");
    cfg.market.n_customers = 5_000;
    cfg.market.ob_adoption = 0.05;
    cfg.pcm.hpo = HpoConfig {
        n_init: 3,
        n_iter: 2,
        seed: 0,
    };
    cfg.seed = 9;
    let first = pipeline_run(&cfg)?;
    let second = pipeline_run(&cfg)?;
    ensure(
        first == second,
        format!(
            "valuation.csv {} bytes and report.csv {} bytes identical across reruns: {}; model round trips bit-exact",
            first.0.len(),
            first.1.len(),
            first == second
        ),
    )
}

fn criterion_10() -> Check {
    let margins = market().final_month_margins();
    let mut sorted = margins.clone();
    sorted.sort_by(f64::total_cmp);
    let k = sorted.len();
    let median = if k % 2 == 1 {
        sorted[k / 2]
    } else {
        0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
    };
    let mean = margins.iter().sum::<f64>() / k as f64;
    let (mu, sigma) = solve_lognormal(TARGET_MEDIAN_MARGIN, TARGET_MEAN_MARGIN).map_err(|e| e.to_string())?;
    let (mu_o, sigma_o) = lognormal_oracle(137.12, 554.70);
    let defaults = MarketConfig::default();
    let params_ok = (mu - 4.9208).abs() < 1e-4
        && (sigma - 1.6719).abs() < 1e-4
        && (mu - mu_o).abs() < 1e-10
        && (sigma - sigma_o).abs() < 1e-10
        && (defaults.margin_log_mu - mu).abs() < 1e-4
        && (defaults.margin_log_sigma - sigma).abs() < 1e-4;
    ensure(
        params_ok
            && (median / 137.12 - 1.0).abs() <= 0.10
            && (mean / 554.70 - 1.0).abs() <= 0.15,
        format!(
            "{k} active customers: median {median:.2} ({:+.1}%), mean {mean:.2} ({:+.1}%); solved mu {mu:.6} sigma {sigma:.6}, oracle {mu_o:.6} {sigma_o:.6}",
            100.0 * (median / 137.12 - 1.0),
            100.0 * (mean / 554.70 - 1.0)
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let selected: Option<Vec<u32>> = std::env::var("PCLV_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(u32, &str, u64, fn() -> Check); 10] = [
        (1, "migration report arithmetic", 1, criterion_1),
        (2, "clv kernel", 5, criterion_2),
        (3, "churn pipeline quality", 600, criterion_3),
        (4, "margin regression quality", 300, criterion_4),
        (5, "boosting correctness", 120, criterion_5),
        (6, "PR-AUC oracle", 60, criterion_6),
        (7, "ADASYN/NearMiss", 60, criterion_7),
        (8, "HPO sanity", 30, criterion_8),
        (9, "determinism and persistence", 900, criterion_9),
        (10, "calibration", 60, criterion_10),
    ];
    let mut failed = Vec::new();
    for (id, name, budget, run) in criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        // The shared market is built outside the timed section.
        if matches!(id, 3 | 4 | 10) {
            market();
        }
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        let in_budget = elapsed <= Duration::from_secs(budget);
        let (pass, detail) = match result {
            Ok(d) => (in_budget, d),
            Err(d) => (false, d),
        };
        // Written to the raw stream so the lines survive libtest's capture.
        let _ = writeln!(
            std::io::stderr(),
            "criterion {id} {} {name}: {detail} ({:.1} s / budget {budget} s)",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
        if !pass {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
