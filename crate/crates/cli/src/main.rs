use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use nbdnet::data;
use nbdnet::experiment::{self, nn_model_name, Artifacts, ExperimentConfig, BASELINE_MODEL};
use nbdnet::gibbs;
use nbdnet::metrics;
use nbdnet::nn::LossKind;
use nbdnet::predict::{self, Rounding};
use nbdnet::synthetic::{self, SyntheticConfig};

/// Pareto/NBD parameter estimation with MCMC labels and a neural surrogate.
///
/// Thread count for the sampler follows RAYON_NUM_THREADS; results do not
/// depend on it.
#[derive(Parser)]
#[command(name = "nbdnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed; stage seeds are derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss kinds, comma separated or repeated (e.g. nll_mse,ratio).
    #[arg(long, value_delimiter = ',')]
    loss: Vec<LossKind>,
    /// Customers with P(alive) below this are predicted inactive.
    #[arg(long)]
    threshold: Option<f64>,
    /// Integer forecast rule: nearest or floor.
    #[arg(long)]
    rounding: Option<Rounding>,
    /// Overflow bin of the purchase-count histogram.
    #[arg(long)]
    cap: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if !self.loss.is_empty() {
            cfg.losses = self.loss.clone();
        }
        if let Some(t) = self.threshold {
            cfg.threshold = t;
        }
        if let Some(r) = self.rounding {
            cfg.rounding = r;
        }
        if let Some(c) = self.cap {
            cfg.cap = c;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage end to end.
    Run(Common),
    /// Load the transaction log, split customers and write RFM summaries.
    Ingest(Common),
    /// Write a synthetic transaction log and its true rates.
    Simulate {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "synthetic")]
        out: PathBuf,
    },
    /// Fit the Gibbs sampler to both cohorts and write label CSVs.
    FitMcmc(Common),
    /// Train one network per loss on the train-cohort labels.
    TrainNn(Common),
    /// Write holdout forecasts for the baseline and each trained network.
    Predict(Common),
    /// Score forecasts. With --forecast, scores a single external CSV.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Forecast CSV to score (`customer_id,...,inactive_pred,...,count_pred`).
        #[arg(long, requires = "actual")]
        forecast: Option<PathBuf>,
        /// Calibration summaries CSV holding the actual holdout counts.
        #[arg(long)]
        actual: Option<PathBuf>,
        /// Forecast CSV to measure consistency against.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Model name used in the report.
        #[arg(long, default_value = "external")]
        name: String,
    },
}

fn models_for(cfg: &ExperimentConfig) -> Vec<String> {
    std::iter::once(BASELINE_MODEL.to_string())
        .chain(cfg.losses.iter().map(|&l| nn_model_name(l)))
        .collect()
}

fn print_reports(reports: &[metrics::MetricsReport]) {
    println!(
        "{:<16} {:>9} {:>9} {:>7} {:>11} {:>9}",
        "model", "inactive", "multi", "mae", "consistency", "purchases"
    );
    for r in reports {
        println!(
            "{:<16} {:>8.2}% {:>8.2}% {:>7.3} {:>11} {:>9}",
            r.model,
            100.0 * r.inactive_accuracy,
            100.0 * r.multi_accuracy,
            r.mae,
            r.consistency.map(|c| format!("{:.2}%", 100.0 * c)).unwrap_or_else(|| "-".into()),
            r.total_purchases
        );
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run(c) => {
            let cfg = c.resolve()?;
            let summary = experiment::run_experiment(&cfg)?;
            print_reports(&summary.reports);
            println!(
                "network training + prediction: {:.1}s (reference measurement: 21s)",
                summary.timing.nn_train_predict
            );
            println!("outputs in {}", cfg.out.display());
        }
        Command::Ingest(c) => {
            let info = experiment::stage_ingest(&c.resolve()?)?;
            println!(
                "split {} ({:.1} holdout weeks): {} train, {} test customers",
                info.split_date, info.holdout_weeks, info.train_customers, info.test_customers
            );
        }
        Command::Simulate { n, seed, out } => {
            let cfg = SyntheticConfig {
                n,
                seed,
                ..Default::default()
            };
            let cohort = synthetic::generate_cohort(&cfg)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let art = Artifacts::new(&out);
            data::write_transactions_csv(&cohort.log, art.transactions())?;
            gibbs::write_labels_csv(&cohort.ids, &cohort.true_params, art.truth())?;
            println!("{} transactions for {n} customers in {}", cohort.log.len(), out.display());
        }
        Command::FitMcmc(c) => {
            for (cohort, h) in experiment::stage_fit_mcmc(&c.resolve()?)? {
                println!("{cohort}: r={:.4} alpha={:.4} s={:.4} beta={:.4}", h.r, h.alpha, h.s, h.beta);
            }
        }
        Command::TrainNn(c) => {
            let cfg = c.resolve()?;
            for (loss, secs) in experiment::stage_train_nn(&cfg, &cfg.losses)? {
                println!("{loss}: {secs:.2}s");
            }
        }
        Command::Predict(c) => {
            let cfg = c.resolve()?;
            for name in experiment::stage_predict(&cfg, &cfg.losses)? {
                println!("{}", Artifacts::new(&cfg.out).forecast(&name).display());
            }
        }
        Command::Evaluate {
            common,
            forecast,
            actual,
            reference,
            name,
        } => {
            let cfg = common.resolve()?;
            let reports = match (forecast, actual) {
                (Some(f), Some(a)) => {
                    let (summaries, _) = data::read_summaries_csv(&a)?;
                    let forecasts = predict::read_forecasts_csv(&f)?;
                    let reference = reference.map(predict::read_forecasts_csv).transpose()?;
                    let report = metrics::evaluate(&name, &summaries, &forecasts, reference.as_deref(), cfg.cap)?;
                    if common.out.is_some() {
                        std::fs::create_dir_all(&cfg.out)?;
                        report.save_json(cfg.out.join(format!("{name}.json")))?;
                    }
                    vec![report]
                }
                (None, None) => experiment::stage_evaluate(&cfg, &models_for(&cfg))?,
                _ => bail!("--forecast and --actual must be given together"),
            };
            print_reports(&reports);
        }
    }
    Ok(())
}
