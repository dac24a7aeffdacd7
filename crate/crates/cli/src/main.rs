use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use pclv_core::evaluation::Metric;
use pclv_core::pipeline::{self, PipelineConfig, Task};
use pclv_core::PclvError;

#[derive(Parser)]
#[command(name = "pclv", version, about = "Potential customer lifetime value pipeline")]
struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true, default_value = "pclv.json")]
    config: PathBuf,
    /// Overrides the global seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic market into the data directory.
    Gen,
    /// Train and cross-validate a model.
    Train {
        #[arg(value_enum)]
        task: TaskArg,
        /// Use the configured GBT parameters without tuning.
        #[arg(long)]
        skip_hpo: bool,
    },
    /// Value every customer and write valuation.csv.
    Score,
    /// Segment customers and write report.csv, report.json and targets.csv.
    Report,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Churn,
    Pcm,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Churn => Task::Churn,
            TaskArg::Pcm => Task::Pcm,
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Gen => {
            for e in pipeline::cmd_gen(&cfg)? {
                println!("{}\t{}\t{}", e.file, e.rows, e.sha256);
            }
        }
        Command::Train { task, skip_hpo } => {
            let task = Task::from(task);
            let out = pipeline::cmd_train(&cfg, task, skip_hpo)?;
            let metrics: &[Metric] = match task {
                Task::Churn => &Metric::CLASSIFICATION,
                Task::Pcm => &Metric::REGRESSION,
            };
            for &m in metrics {
                match out.cv.report.metrics.get(m.name()).and_then(|s| s.mean.zip(s.sd)) {
                    Some((mean, sd)) => println!("{}\t{mean:.4}\t±{sd:.4}", m.name()),
                    None => println!("{}\tundefined", m.name()),
                }
            }
            println!("model\t{}", cfg.task_dir(task).join(pipeline::MODEL_FILE).display());
        }
        Command::Score => {
            let records = pipeline::cmd_score(&cfg)?;
            let with_ob = records.iter().filter(|r| r.has_ob_data()).count();
            println!("customers\t{}", records.len());
            println!("with_ob_data\t{with_ob}");
            println!(
                "valuation\t{}",
                cfg.paths.report_dir.join(pipeline::VALUATION_FILE).display()
            );
        }
        Command::Report => {
            let report = pipeline::cmd_report(&cfg)?;
            let u = &report.upside;
            println!("upward\t{}\t{:.2}%", u.upward.pclv_sum.0, u.upward.customer_share_pct);
            println!("static\t{}\t{:.2}%", u.static_.pclv_sum.0, u.static_.customer_share_pct);
            println!("downward\t{}\t{:.2}%", u.downward.pclv_sum.0, u.downward.customer_share_pct);
            println!("overall_upside\t{:.2}%", u.overall_upside_pct);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PCLV_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<PclvError>().is_some_and(PclvError::is_usage);
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
