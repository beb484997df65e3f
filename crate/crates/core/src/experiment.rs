//! Config-driven pipeline: ingest, MCMC labels, network training per loss,
//! holdout forecasts and metric tables.
//!
//! Every stage reads the previous stage's files from the output directory,
//! so each can be rerun on its own. Stage seeds are derived from the global
//! seed, which makes a full `run` identical to running the stages in turn.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data::{self, CalibrationSummary, CohortSplit};
use crate::error::{Error, Result};
use crate::gibbs::{self, ChainConfig, HyperParams};
use crate::metrics::{self, MetricsReport};
use crate::model::IndividualParams;
use crate::nn::{self, LossKind, NetworkSpec, RatioMode, TrainedModel, TrainingConfig};
use crate::predict::{self, histogram_u32, Rounding};
use crate::synthetic::{self, SyntheticConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// Whitespace-separated CDNOW master file.
    #[default]
    Cdnow,
    /// `customer_id,date,spend[,units]`.
    Csv,
    /// Generated in-process from the `synthetic_*` keys.
    Synthetic,
}

/// Flat key-value experiment settings, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: Option<PathBuf>,
    pub format: DatasetFormat,
    pub merge_same_day: bool,
    pub train_fraction: f64,
    /// Calibration/holdout boundary; defaults to the middle of the log.
    pub split_date: Option<NaiveDate>,
    pub covariates: Vec<String>,
    pub out: PathBuf,
    pub seed: u64,

    pub sweeps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub prior_shape: f64,
    pub prior_rate: f64,

    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub dropout: f64,

    pub losses: Vec<LossKind>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub early_stop_patience: usize,
    pub validation_fraction: f64,
    pub ratio_mode: RatioMode,

    pub threshold: f64,
    pub rounding: Rounding,
    pub cap: usize,

    pub synthetic_n: usize,
    pub synthetic_r: f64,
    pub synthetic_alpha: f64,
    pub synthetic_s: f64,
    pub synthetic_beta: f64,
    pub synthetic_start: NaiveDate,
    pub synthetic_acquisition_days: i64,
    pub synthetic_total_days: i64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let chain = ChainConfig::default();
        let train = TrainingConfig::default();
        let net = NetworkSpec::with_inputs(3);
        let syn = SyntheticConfig::default();
        Self {
            dataset: None,
            format: DatasetFormat::Cdnow,
            merge_same_day: true,
            train_fraction: 0.6,
            split_date: None,
            covariates: Vec::new(),
            out: PathBuf::from("out"),
            seed: 0,
            sweeps: chain.sweeps,
            burn_in: chain.burn_in,
            thin: chain.thin,
            prior_shape: chain.prior_shape,
            prior_rate: chain.prior_rate,
            hidden_layers: net.hidden_layers,
            hidden_width: net.hidden_width,
            dropout: net.dropout_p,
            losses: LossKind::ALL.to_vec(),
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            adam_eps: train.adam_eps,
            early_stop_patience: train.early_stop_patience,
            validation_fraction: train.validation_fraction,
            ratio_mode: train.ratio_mode,
            threshold: 0.5,
            rounding: Rounding::Nearest,
            cap: 7,
            synthetic_n: syn.n,
            synthetic_r: syn.hyper.r,
            synthetic_alpha: syn.hyper.alpha,
            synthetic_s: syn.hyper.s,
            synthetic_beta: syn.hyper.beta,
            synthetic_start: syn.start,
            synthetic_acquisition_days: syn.acquisition_days,
            synthetic_total_days: syn.total_days,
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML; a relative `dataset` is resolved against `base`.
    pub fn from_toml_str(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let (Some(base), Some(ds)) = (base, cfg.dataset.as_mut()) {
            if ds.is_relative() {
                *ds = base.join(&*ds);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path.parent())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match self.format {
            DatasetFormat::Synthetic => {}
            _ => match &self.dataset {
                None => return Err(Error::Config("`dataset` is required for this format".into())),
                Some(p) if !p.exists() => {
                    return Err(Error::Config(format!("dataset {} does not exist", p.display())))
                }
                _ => {}
            },
        }
        if self.losses.is_empty() {
            return Err(Error::Config("at least one loss kind is required".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction {} outside (0, 1)", self.train_fraction)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.cap == 0 {
            return Err(Error::Config("cap must be positive".into()));
        }
        data::parse_covariates(&self.covariates)?;
        self.chain_config("train").validate()?;
        self.training_config(LossKind::Mse).validate()?;
        self.network_spec().validate()?;
        Ok(())
    }

    pub fn chain_config(&self, cohort: &str) -> ChainConfig {
        ChainConfig {
            sweeps: self.sweeps,
            burn_in: self.burn_in,
            thin: self.thin,
            seed: derive_seed(self.seed, &format!("mcmc-{cohort}")),
            prior_shape: self.prior_shape,
            prior_rate: self.prior_rate,
            keep_trace: true,
        }
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            input_dim: 3 + self.covariates.len(),
            hidden_layers: self.hidden_layers,
            hidden_width: self.hidden_width,
            dropout_p: self.dropout,
        }
    }

    pub fn training_config(&self, loss: LossKind) -> TrainingConfig {
        TrainingConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            seed: derive_seed(self.seed, &format!("nn-{loss}")),
            early_stop_patience: self.early_stop_patience,
            validation_fraction: self.validation_fraction,
            ratio_mode: self.ratio_mode,
        }
    }

    pub fn synthetic_config(&self) -> Result<SyntheticConfig> {
        Ok(SyntheticConfig {
            n: self.synthetic_n,
            hyper: HyperParams::new(self.synthetic_r, self.synthetic_alpha, self.synthetic_s, self.synthetic_beta)?,
            start: self.synthetic_start,
            acquisition_days: self.synthetic_acquisition_days,
            total_days: self.synthetic_total_days,
            seed: derive_seed(self.seed, "synthetic"),
        })
    }
}

/// Stage seed for `tag`: a splitmix64 finalizer over the global seed mixed
/// with an FNV-1a hash of the tag.
pub fn derive_seed(global: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = global ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// File layout under the output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub root: PathBuf,
}

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn transactions(&self) -> PathBuf {
        self.root.join("transactions.csv")
    }
    pub fn truth(&self) -> PathBuf {
        self.root.join("truth.csv")
    }
    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }
    pub fn calibration(&self, cohort: &str) -> PathBuf {
        self.root.join(format!("calibration_{cohort}.csv"))
    }
    pub fn labels(&self, cohort: &str) -> PathBuf {
        self.root.join(format!("labels_{cohort}.csv"))
    }
    pub fn trace(&self, cohort: &str) -> PathBuf {
        self.root.join(format!("trace_{cohort}.csv"))
    }
    pub fn model(&self, loss: LossKind) -> PathBuf {
        self.root.join("models").join(format!("{loss}.json"))
    }
    pub fn history(&self, loss: LossKind) -> PathBuf {
        self.root.join("history").join(format!("{loss}.csv"))
    }
    pub fn forecast(&self, model: &str) -> PathBuf {
        self.root.join("forecasts").join(format!("{model}.csv"))
    }
    pub fn report(&self, model: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{model}.json"))
    }
    pub fn metrics_table(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn histogram_table(&self) -> PathBuf {
        self.root.join("histogram.csv")
    }
    pub fn correlations(&self) -> PathBuf {
        self.root.join("correlations.csv")
    }
    pub fn timing(&self) -> PathBuf {
        self.root.join("timing.csv")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("MANIFEST")
    }

    fn ensure_dirs(&self) -> Result<()> {
        for sub in ["", "models", "history", "forecasts", "metrics"] {
            let d = self.root.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }
}

pub const BASELINE_MODEL: &str = "pareto_nbd";

pub fn nn_model_name(loss: LossKind) -> String {
    format!("nn_{loss}")
}

/// Calibration/holdout layout written by the ingest stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub start_date: NaiveDate,
    pub split_date: NaiveDate,
    pub end_date: NaiveDate,
    pub holdout_weeks: f64,
    pub train_customers: usize,
    pub test_customers: usize,
    pub covariates: Vec<String>,
}

impl SplitInfo {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: name,
            source: Box::new(other),
        },
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads (or generates) the transaction log, splits customers and writes
/// the calibration summaries of both cohorts.
pub fn stage_ingest(cfg: &ExperimentConfig) -> Result<SplitInfo> {
    stage("ingest", ingest_inner(cfg))
}

fn ingest_inner(cfg: &ExperimentConfig) -> Result<SplitInfo> {
    cfg.validate()?;
    let art = Artifacts::new(&cfg.out);
    art.ensure_dirs()?;
    let log = match cfg.format {
        DatasetFormat::Cdnow => data::ingest_cdnow(cfg.dataset.as_ref().expect("validated"))?,
        DatasetFormat::Csv => data::ingest_csv(cfg.dataset.as_ref().expect("validated"))?,
        DatasetFormat::Synthetic => {
            let cohort = synthetic::generate_cohort(&cfg.synthetic_config()?)?;
            gibbs::write_labels_csv(&cohort.ids, &cohort.true_params, art.truth())?;
            cohort.log
        }
    };
    let log = if cfg.merge_same_day { data::merge_same_day(&log) } else { log };
    data::write_transactions_csv(&log, art.transactions())?;

    let split_date = match cfg.split_date {
        Some(d) => d,
        None => data::mid_date(&log)?,
    };
    let partition = data::split_customers(&log, cfg.train_fraction, derive_seed(cfg.seed, "split"))?;
    let split = CohortSplit::new(partition, split_date, log.end_date())?;
    let covs = data::parse_covariates(&cfg.covariates)?;
    let cov_names: Vec<String> = covs.iter().map(|c| c.name().to_string()).collect();
    let train = data::summarize_rfm(&log, split_date, &split.train_ids, &covs)?;
    let test = data::summarize_rfm(&log, split_date, &split.test_ids, &covs)?;
    data::write_summaries_csv(&train, &cov_names, art.calibration("train"))?;
    data::write_summaries_csv(&test, &cov_names, art.calibration("test"))?;
    let info = SplitInfo {
        start_date: log.start_date(),
        split_date,
        end_date: log.end_date(),
        holdout_weeks: split.holdout_length_weeks,
        train_customers: train.len(),
        test_customers: test.len(),
        covariates: cov_names,
    };
    write_text(&art.split(), &serde_json::to_string_pretty(&info)?)?;
    log::info!(
        "ingest: {} records, split {}, {} train / {} test customers",
        log.len(),
        split_date,
        info.train_customers,
        info.test_customers
    );
    Ok(info)
}

fn read_cohort(art: &Artifacts, cohort: &str) -> Result<Vec<CalibrationSummary>> {
    Ok(data::read_summaries_csv(art.calibration(cohort))?.0)
}

/// Customers the sampler can fit (positive calibration length).
fn fittable(summaries: Vec<CalibrationSummary>) -> Vec<CalibrationSummary> {
    let before = summaries.len();
    let kept: Vec<_> = summaries.into_iter().filter(|s| s.t_cal > 0.0).collect();
    if kept.len() < before {
        log::warn!("{} customer(s) acquired on the split date excluded", before - kept.len());
    }
    kept
}

/// Posterior-mean `(lambda, mu)` for both cohorts. Train labels supervise
/// the network; test labels are the in-sample Pareto/NBD baseline.
pub fn stage_fit_mcmc(cfg: &ExperimentConfig) -> Result<BTreeMap<String, HyperParams>> {
    stage("fit-mcmc", fit_mcmc_inner(cfg))
}

fn fit_mcmc_inner(cfg: &ExperimentConfig) -> Result<BTreeMap<String, HyperParams>> {
    let art = Artifacts::new(&cfg.out);
    let mut out = BTreeMap::new();
    for cohort in ["train", "test"] {
        let summaries = fittable(read_cohort(&art, cohort)?);
        let post = gibbs::run_chain(&summaries, &cfg.chain_config(cohort))?;
        gibbs::write_labels_csv(&post.customer_ids, &post.params(), art.labels(cohort))?;
        gibbs::write_trace_csv(&post.trace, art.trace(cohort))?;
        let h = post.mean_hyper;
        log::info!(
            "fit-mcmc {cohort}: r={:.4} alpha={:.4} s={:.4} beta={:.4}",
            h.r,
            h.alpha,
            h.s,
            h.beta
        );
        out.insert(cohort.to_string(), h);
    }
    Ok(out)
}

/// Pairs summaries with labels by customer id, keeping summary order and
/// dropping customers without a label.
fn join_labels(
    summaries: Vec<CalibrationSummary>,
    ids: &[String],
    params: &[IndividualParams],
) -> Result<(Vec<CalibrationSummary>, Vec<IndividualParams>)> {
    let by_id: BTreeMap<&str, IndividualParams> = ids.iter().map(String::as_str).zip(params.iter().copied()).collect();
    let mut s_out = Vec::with_capacity(summaries.len());
    let mut p_out = Vec::with_capacity(summaries.len());
    for s in summaries {
        if let Some(p) = by_id.get(s.customer_id.as_str()) {
            p_out.push(*p);
            s_out.push(s);
        }
    }
    if s_out.is_empty() {
        return Err(Error::invalid("no customer has both a summary and a label"));
    }
    Ok((s_out, p_out))
}

/// Trains one network per loss on the train cohort. Returns seconds spent
/// per loss.
pub fn stage_train_nn(cfg: &ExperimentConfig, losses: &[LossKind]) -> Result<Vec<(LossKind, f64)>> {
    stage("train-nn", train_nn_inner(cfg, losses))
}

fn train_nn_inner(cfg: &ExperimentConfig, losses: &[LossKind]) -> Result<Vec<(LossKind, f64)>> {
    let art = Artifacts::new(&cfg.out);
    art.ensure_dirs()?;
    let summaries = read_cohort(&art, "train")?;
    let (ids, labels) = gibbs::read_labels_csv(art.labels("train"))?;
    let (summaries, labels) = join_labels(summaries, &ids, &labels)?;
    let spec = cfg.network_spec();
    let mut timings = Vec::new();
    for &loss in losses {
        let t0 = Instant::now();
        let (model, history) = nn::train(&summaries, &labels, &spec, &cfg.training_config(loss), loss)?;
        let secs = t0.elapsed().as_secs_f64();
        model.save(art.model(loss))?;
        history.write_csv(art.history(loss))?;
        log::info!(
            "train-nn {loss}: {} epochs (best {:?}) in {secs:.2}s",
            history.epochs.len(),
            history.best_epoch
        );
        timings.push((loss, secs));
    }
    Ok(timings)
}

/// Writes test-cohort forecasts for the baseline and each trained network.
pub fn stage_predict(cfg: &ExperimentConfig, losses: &[LossKind]) -> Result<Vec<String>> {
    stage("predict", predict_inner(cfg, losses))
}

fn predict_inner(cfg: &ExperimentConfig, losses: &[LossKind]) -> Result<Vec<String>> {
    let art = Artifacts::new(&cfg.out);
    art.ensure_dirs()?;
    let info = SplitInfo::load(art.split())?;
    let test = read_cohort(&art, "test")?;
    let h = info.holdout_weeks;
    let mut written = Vec::new();

    let (ids, params) = gibbs::read_labels_csv(art.labels("test"))?;
    let (base_s, base_p) = join_labels(test.clone(), &ids, &params)?;
    let f = predict::forecast_all(&base_s, &base_p, h, cfg.threshold, cfg.rounding)?;
    predict::write_forecasts_csv(&f, art.forecast(BASELINE_MODEL))?;
    written.push(BASELINE_MODEL.to_string());

    for &loss in losses {
        let model = TrainedModel::load(art.model(loss))?;
        let params = nn::predict_params(&test, &model)?;
        let f = predict::forecast_all(&test, &params, h, cfg.threshold, cfg.rounding)?;
        let name = nn_model_name(loss);
        predict::write_forecasts_csv(&f, art.forecast(&name))?;
        written.push(name);
    }
    Ok(written)
}

/// Scores every forecast against the test cohort's holdout counts and writes
/// the per-model JSON reports and the combined tables.
pub fn stage_evaluate(cfg: &ExperimentConfig, models: &[String]) -> Result<Vec<MetricsReport>> {
    stage("evaluate", evaluate_inner(cfg, models))
}

fn evaluate_inner(cfg: &ExperimentConfig, models: &[String]) -> Result<Vec<MetricsReport>> {
    let art = Artifacts::new(&cfg.out);
    art.ensure_dirs()?;
    let test = read_cohort(&art, "test")?;
    let baseline_path = art.forecast(BASELINE_MODEL);
    let baseline = if baseline_path.exists() {
        Some(predict::read_forecasts_csv(&baseline_path)?)
    } else {
        None
    };
    // the baseline omits customers it cannot fit, so score everyone on the
    // customers it covers
    let actual: Vec<CalibrationSummary> = match &baseline {
        Some(b) => {
            let ids: std::collections::BTreeSet<&str> = b.iter().map(|f| f.customer_id.as_str()).collect();
            test.into_iter().filter(|s| ids.contains(s.customer_id.as_str())).collect()
        }
        None => test,
    };
    let mut reports = Vec::new();
    for name in models {
        let forecasts = predict::read_forecasts_csv(art.forecast(name))?;
        let reference = if name == BASELINE_MODEL { None } else { baseline.as_deref() };
        let r = metrics::evaluate(name, &actual, &forecasts, reference, cfg.cap)?;
        r.save_json(art.report(name))?;
        reports.push(r);
    }
    write_tables(&art, &actual, &reports, cfg.cap)?;
    Ok(reports)
}

fn write_tables(art: &Artifacts, actual: &[CalibrationSummary], reports: &[MetricsReport], cap: usize) -> Result<()> {
    metrics::write_metrics_csv(reports, art.metrics_table())?;
    let counts: Vec<u32> = actual.iter().map(|s| s.holdout_count).collect();
    metrics::write_histogram_csv(Some(&histogram_u32(&counts, cap)?), reports, art.histogram_table())?;
    let with_consistency: Vec<MetricsReport> = reports.iter().filter(|r| r.consistency.is_some()).cloned().collect();
    if with_consistency.len() >= 3 {
        metrics::write_correlations_csv(&metrics::metric_correlations(&with_consistency)?, art.correlations())?;
    } else {
        log::warn!("fewer than 3 models with a consistency value; correlation table skipped");
    }
    Ok(())
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stages: Vec<(String, f64)>,
    /// Network training plus out-of-sample prediction, summed over losses.
    pub nn_train_predict: f64,
    pub nn_train_per_loss: Vec<(LossKind, f64)>,
}

impl Timing {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = String::from("stage,seconds\n");
        for (s, t) in &self.stages {
            let _ = writeln!(text, "{s},{t:.3}");
        }
        for (l, t) in &self.nn_train_per_loss {
            let _ = writeln!(text, "train-nn:{l},{t:.3}");
        }
        let _ = writeln!(text, "nn_train_predict,{:.3}", self.nn_train_predict);
        write_text(path.as_ref(), &text)
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub split: SplitInfo,
    pub hyper: BTreeMap<String, HyperParams>,
    pub reports: Vec<MetricsReport>,
    pub timing: Timing,
}

struct Manifest {
    path: PathBuf,
    lines: Vec<String>,
}

impl Manifest {
    fn record(&mut self, stage: &str, ok: bool, complete: Option<bool>) {
        self.lines.push(format!("{stage} {}", if ok { "ok" } else { "failed" }));
        let mut text = self.lines.join("\n");
        match complete {
            Some(c) => {
                let _ = write!(text, "\ncomplete {c}\n");
            }
            None => text.push('\n'),
        }
        if let Err(e) = write_text(&self.path, &text) {
            log::warn!("could not write manifest: {e}");
        }
    }
}

/// Runs all stages in order. On failure the outputs written so far are kept
/// and the MANIFEST marks the run incomplete.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let art = Artifacts::new(&cfg.out);
    art.ensure_dirs()?;
    let mut manifest = Manifest {
        path: art.manifest(),
        lines: vec![format!("seed {}", cfg.seed)],
    };
    let mut timing = Timing::default();
    macro_rules! timed {
        ($name:expr, $body:expr) => {{
            let t0 = Instant::now();
            match $body {
                Ok(v) => {
                    timing.stages.push(($name.to_string(), t0.elapsed().as_secs_f64()));
                    manifest.record($name, true, None);
                    v
                }
                Err(e) => {
                    manifest.record($name, false, Some(false));
                    return Err(e);
                }
            }
        }};
    }
    let split = timed!("ingest", stage_ingest(cfg));
    let hyper = timed!("fit-mcmc", stage_fit_mcmc(cfg));
    let per_loss = timed!("train-nn", stage_train_nn(cfg, &cfg.losses));
    let t_predict = Instant::now();
    let models = timed!("predict", stage_predict(cfg, &cfg.losses));
    let predict_secs = t_predict.elapsed().as_secs_f64();
    let reports = timed!("evaluate", stage_evaluate(cfg, &models));
    timing.nn_train_predict = per_loss.iter().map(|(_, t)| t).sum::<f64>() + predict_secs;
    timing.nn_train_per_loss = per_loss;
    timing.write_csv(art.timing())?;
    manifest.record("report", true, Some(true));
    Ok(RunSummary {
        split,
        hyper,
        reports,
        timing,
    })
}
