//! Data-augmented Gibbs sampler for the hierarchical Pareto/NBD model.
//!
//! Each customer carries a latent alive-at-T indicator and, when dead, a
//! dropout time `tau` in `(t_x, T]`. Conditional on those the individual
//! rates are conjugate:
//!
//! - `lambda | .  ~ Gamma(r + x, alpha + min(tau, T))`
//! - `mu | alive ~ Gamma(s, beta + T)`, `mu | dead at tau ~ Gamma(s + 1, beta + tau)`
//!
//! The population rates `alpha`, `beta` are conjugate under a `Gamma(a0, b0)`
//! hyperprior. The shapes `r`, `s` are slice-sampled on the log scale from
//! their conditional with the matching rate integrated out, then the rate
//! is drawn given the new shape.
//!
//! Every customer owns an independent ChaCha stream, so a run depends only
//! on the seed and the data, never on how many threads execute the sweep.

use std::path::Path;

use rand::distr::Open01;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::CalibrationSummary;
use crate::error::{Error, Result};
use crate::model::{self, IndividualParams};
use crate::slice::slice_sample;

/// Shapes and rates of the Gamma mixing distributions for `lambda` and `mu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub r: f64,
    pub alpha: f64,
    pub s: f64,
    pub beta: f64,
}

impl HyperParams {
    pub fn new(r: f64, alpha: f64, s: f64, beta: f64) -> Result<Self> {
        let hp = Self { r, alpha, s, beta };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("r", self.r), ("alpha", self.alpha), ("s", self.s), ("beta", self.beta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::domain(format!("hyperparameter {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub sweeps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Shape `a0` of the Gamma hyperprior on all four hyperparameters.
    pub prior_shape: f64,
    /// Rate `b0` of the Gamma hyperprior.
    pub prior_rate: f64,
    pub keep_trace: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            sweeps: 4000,
            burn_in: 1000,
            thin: 2,
            seed: 0,
            prior_shape: 1e-3,
            prior_rate: 1e-3,
            keep_trace: true,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sweeps == 0 || self.burn_in >= self.sweeps {
            return Err(Error::invalid(format!(
                "need sweeps > burn_in, got sweeps={} burn_in={}",
                self.sweeps, self.burn_in
            )));
        }
        if self.thin == 0 {
            return Err(Error::invalid("thin must be positive"));
        }
        if !(self.prior_shape > 0.0 && self.prior_rate > 0.0) {
            return Err(Error::invalid("hyperprior constants must be positive"));
        }
        Ok(())
    }
}

/// Latent lifetime state of one customer at the end of calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lifetime {
    Alive,
    DeadAt(f64),
}

impl Lifetime {
    /// Time over which purchases could have been observed.
    pub fn exposure(&self, s: &CalibrationSummary) -> f64 {
        match *self {
            Lifetime::Alive => s.t_cal,
            Lifetime::DeadAt(tau) => tau,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub customer_ids: Vec<String>,
    pub mean_lambda: Vec<f64>,
    pub mean_mu: Vec<f64>,
    pub mean_hyper: HyperParams,
    /// Thinned post-burn-in hyperparameter draws (empty unless requested).
    pub trace: Vec<HyperParams>,
    pub kept_draws: usize,
}

impl PosteriorSummary {
    pub fn params(&self) -> Vec<IndividualParams> {
        self.mean_lambda
            .iter()
            .zip(&self.mean_mu)
            .map(|(&l, &m)| IndividualParams::clamped(l, m))
            .collect()
    }
}

/// Alive indicator: true iff `u < P(alive)`.
pub fn draw_alive(s: &CalibrationSummary, p: &IndividualParams, u: f64) -> bool {
    u < model::ln_p_alive_unchecked(s, p).exp()
}

/// Inverse-CDF draw from the dropout-time density `∝ e^{-(lambda+mu) tau}`
/// on `(t_x, T)`. `u = 0` maps to `t_x`, `u = 1` to `T`.
pub fn draw_dropout_time(s: &CalibrationSummary, p: &IndividualParams, u: f64) -> Result<f64> {
    let span = s.t_cal - s.t_x;
    if !(span > 0.0) {
        return Err(Error::domain(format!(
            "dead draw with t_x = T = {} is impossible",
            s.t_cal
        )));
    }
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::invalid(format!("uniform draw {u} outside [0, 1]")));
    }
    let theta = p.lambda + p.mu;
    let z = theta * span;
    // offset = -ln(1 - u (1 - e^{-z})) / theta
    let offset = if z < 1e-10 {
        u * span
    } else {
        -(-u * -(-z).exp_m1()).ln_1p() / theta
    };
    Ok((s.t_x + offset).clamp(s.t_x, s.t_cal))
}

fn gamma_draw<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::domain(format!("Gamma({shape}, rate {rate}): {e}")))?;
    // Tiny shapes can round a draw to zero; keep rates strictly positive.
    Ok(g.sample(rng).max(f64::MIN_POSITIVE))
}

/// `lambda ~ Gamma(r + x, alpha + exposure)`.
pub fn draw_lambda<R: Rng + ?Sized>(
    s: &CalibrationSummary,
    hp: &HyperParams,
    exposure: f64,
    rng: &mut R,
) -> Result<f64> {
    if !(exposure > 0.0) {
        return Err(Error::domain(format!("exposure must be positive, got {exposure}")));
    }
    gamma_draw(hp.r + s.x as f64, hp.alpha + exposure, rng)
}

/// `mu ~ Gamma(s, beta + T)` when alive, `Gamma(s + 1, beta + tau)` when
/// dead at `tau`.
pub fn draw_mu<R: Rng + ?Sized>(
    s: &CalibrationSummary,
    hp: &HyperParams,
    lifetime: Lifetime,
    rng: &mut R,
) -> Result<f64> {
    match lifetime {
        Lifetime::Alive => gamma_draw(hp.s, hp.beta + s.t_cal, rng),
        Lifetime::DeadAt(tau) => {
            if !(tau > s.t_x && tau <= s.t_cal) {
                return Err(Error::domain(format!(
                    "dropout time {tau} outside (t_x, T] = ({}, {}]",
                    s.t_x, s.t_cal
                )));
            }
            gamma_draw(hp.s + 1.0, hp.beta + tau, rng)
        }
    }
}

/// One Gibbs block for a single customer: latent lifetime, then `lambda`,
/// then `mu`. Returns the sampled lifetime.
pub fn sweep_customer<R: Rng + ?Sized>(
    s: &CalibrationSummary,
    params: &mut IndividualParams,
    hp: &HyperParams,
    rng: &mut R,
) -> Result<Lifetime> {
    let u: f64 = rng.sample(Open01);
    let lifetime = if draw_alive(s, params, u) {
        Lifetime::Alive
    } else {
        let u: f64 = rng.sample(Open01);
        let tau = draw_dropout_time(s, params, u)?;
        // keep tau strictly above t_x after rounding
        Lifetime::DeadAt(if tau > s.t_x { tau } else { s.t_x.next_up() })
    };
    params.lambda = draw_lambda(s, hp, lifetime.exposure(s), rng)?;
    params.mu = draw_mu(s, hp, lifetime, rng)?;
    Ok(lifetime)
}

/// Sufficient statistics of a set of Gamma-distributed rates.
#[derive(Debug, Clone, Copy)]
struct RateStats {
    n: f64,
    sum: f64,
    sum_ln: f64,
}

impl RateStats {
    fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("no rates to update hyperparameters from"));
        }
        let mut sum = 0.0;
        let mut sum_ln = 0.0;
        for &v in values {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::domain(format!("rate {v} is not positive")));
            }
            sum += v;
            sum_ln += v.ln();
        }
        Ok(Self {
            n: values.len() as f64,
            sum,
            sum_ln,
        })
    }
}

/// Log density of `ln(shape)` given the rates, with the Gamma rate
/// integrated out against its `Gamma(a0, b0)` prior (Jacobian included).
pub fn ln_shape_marginal(log_shape: f64, n: usize, sum: f64, sum_ln: f64, a0: f64, b0: f64) -> f64 {
    let shape = log_shape.exp();
    if !(shape > 0.0 && shape.is_finite()) {
        return f64::NEG_INFINITY;
    }
    let n = n as f64;
    a0 * log_shape - b0 * shape + ln_gamma(a0 + n * shape) - n * ln_gamma(shape)
        + (shape - 1.0) * sum_ln
        - (a0 + n * shape) * (b0 + sum).ln()
}

fn update_pair<R: Rng + ?Sized>(
    shape: f64,
    stats: RateStats,
    a0: f64,
    b0: f64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let n = stats.n as usize;
    let log_shape = slice_sample(
        shape.ln(),
        |v| ln_shape_marginal(v, n, stats.sum, stats.sum_ln, a0, b0),
        1.0,
        64,
        rng,
    );
    let new_shape = log_shape.exp().max(f64::MIN_POSITIVE);
    let rate = gamma_draw(a0 + stats.n * new_shape, b0 + stats.sum, rng)?;
    Ok((new_shape, rate))
}

/// Draws new `(r, alpha, s, beta)` given the current individual rates.
pub fn update_hyperparams<R: Rng + ?Sized>(
    lambdas: &[f64],
    mus: &[f64],
    hp: &HyperParams,
    cfg: &ChainConfig,
    rng: &mut R,
) -> Result<HyperParams> {
    hp.validate()?;
    let ls = RateStats::from_values(lambdas)?;
    let ms = RateStats::from_values(mus)?;
    let (r, alpha) = update_pair(hp.r, ls, cfg.prior_shape, cfg.prior_rate, rng)?;
    let (s, beta) = update_pair(hp.s, ms, cfg.prior_shape, cfg.prior_rate, rng)?;
    Ok(HyperParams { r, alpha, s, beta })
}

/// Conjugate rate update alone: `alpha ~ Gamma(a0 + N r, b0 + Σ lambda)`.
pub fn draw_rate_given_shape<R: Rng + ?Sized>(
    shape: f64,
    values: &[f64],
    cfg: &ChainConfig,
    rng: &mut R,
) -> Result<f64> {
    let st = RateStats::from_values(values)?;
    gamma_draw(cfg.prior_shape + st.n * shape, cfg.prior_rate + st.sum, rng)
}

/// Log density, in `v = ln c`, of a joint rescaling `rate_i -> c rate_i`,
/// `pop_rate -> pop_rate / c` given the latent lifetimes.
///
/// `events` is the total Poisson count (purchases, or dropouts for `mu`),
/// `rate_exposure` is `Σ rate_i * exposure_i`. The Gamma prior terms are
/// invariant under the move apart from the hyperprior on the population rate.
fn ln_scale_density(v: f64, events: f64, rate_exposure: f64, pop_rate: f64, a0: f64, b0: f64) -> f64 {
    (events - a0) * v - rate_exposure * v.exp() - b0 * pop_rate * (-v).exp()
}

/// Draws the common scale factor `c` for a joint rescaling move.
///
/// The individual rates and their population Gamma rate are strongly
/// coupled through the latent lifetimes; moving them together along this
/// direction leaves the posterior invariant and keeps `(s, beta)` mixing.
pub fn draw_scale_factor<R: Rng + ?Sized>(
    events: f64,
    rate_exposure: f64,
    pop_rate: f64,
    cfg: &ChainConfig,
    rng: &mut R,
) -> f64 {
    let (a0, b0) = (cfg.prior_shape, cfg.prior_rate);
    slice_sample(
        0.0,
        |v| ln_scale_density(v, events, rate_exposure, pop_rate, a0, b0),
        0.5,
        64,
        rng,
    )
    .exp()
}

struct CustomerState {
    params: IndividualParams,
    lifetime: Lifetime,
    rng: ChaCha8Rng,
    sum_lambda: f64,
    sum_mu: f64,
}

/// Runs the systematic-scan sampler and averages thinned post-burn-in draws.
pub fn run_chain(summaries: &[CalibrationSummary], cfg: &ChainConfig) -> Result<PosteriorSummary> {
    cfg.validate()?;
    if summaries.is_empty() {
        return Err(Error::invalid("no customers to fit"));
    }
    for s in summaries {
        s.validate()?;
        if !(s.t_cal > 0.0) {
            return Err(Error::domain(format!(
                "customer `{}` has zero calibration length",
                s.customer_id
            )));
        }
    }

    let mut states: Vec<CustomerState> = summaries
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            CustomerState {
                params: IndividualParams {
                    lambda: (s.x as f64 + 1.0) / s.t_cal,
                    mu: 1.0 / s.t_cal,
                },
                lifetime: Lifetime::Alive,
                rng,
                sum_lambda: 0.0,
                sum_mu: 0.0,
            }
        })
        .collect();
    let mut hyper_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    hyper_rng.set_stream(0);

    let mut hp = HyperParams {
        r: 1.0,
        alpha: 1.0,
        s: 1.0,
        beta: 1.0,
    };
    let mut hyper_sum = [0.0f64; 4];
    let mut trace = Vec::new();
    let mut kept = 0usize;
    let mut lambdas = vec![0.0; summaries.len()];
    let mut mus = vec![0.0; summaries.len()];

    for sweep in 0..cfg.sweeps {
        states
            .par_iter_mut()
            .zip(summaries.par_iter())
            .try_for_each(|(st, s)| {
                st.lifetime = sweep_customer(s, &mut st.params, &hp, &mut st.rng)?;
                Ok::<_, Error>(())
            })?;

        let (mut purchases, mut lam_exposure, mut deaths, mut mu_exposure) = (0.0, 0.0, 0.0, 0.0);
        for (st, s) in states.iter().zip(summaries) {
            let e = st.lifetime.exposure(s);
            purchases += s.x as f64;
            lam_exposure += st.params.lambda * e;
            mu_exposure += st.params.mu * e;
            if matches!(st.lifetime, Lifetime::DeadAt(_)) {
                deaths += 1.0;
            }
        }
        let c_lambda = draw_scale_factor(purchases, lam_exposure, hp.alpha, cfg, &mut hyper_rng);
        let c_mu = draw_scale_factor(deaths, mu_exposure, hp.beta, cfg, &mut hyper_rng);
        hp.alpha /= c_lambda;
        hp.beta /= c_mu;
        for st in states.iter_mut() {
            st.params.lambda = (st.params.lambda * c_lambda).max(f64::MIN_POSITIVE);
            st.params.mu = (st.params.mu * c_mu).max(f64::MIN_POSITIVE);
        }

        for (i, st) in states.iter().enumerate() {
            lambdas[i] = st.params.lambda;
            mus[i] = st.params.mu;
        }
        hp = update_hyperparams(&lambdas, &mus, &hp, cfg, &mut hyper_rng)?;

        if sweep >= cfg.burn_in && (sweep - cfg.burn_in) % cfg.thin == 0 {
            kept += 1;
            for st in states.iter_mut() {
                st.sum_lambda += st.params.lambda;
                st.sum_mu += st.params.mu;
            }
            hyper_sum[0] += hp.r;
            hyper_sum[1] += hp.alpha;
            hyper_sum[2] += hp.s;
            hyper_sum[3] += hp.beta;
            if cfg.keep_trace {
                trace.push(hp);
            }
        }
        if sweep % 500 == 0 {
            log::debug!("sweep {sweep}: r={:.4} alpha={:.4} s={:.4} beta={:.4}", hp.r, hp.alpha, hp.s, hp.beta);
        }
    }

    let k = kept as f64;
    Ok(PosteriorSummary {
        customer_ids: summaries.iter().map(|s| s.customer_id.clone()).collect(),
        mean_lambda: states.iter().map(|st| st.sum_lambda / k).collect(),
        mean_mu: states.iter().map(|st| st.sum_mu / k).collect(),
        mean_hyper: HyperParams {
            r: hyper_sum[0] / k,
            alpha: hyper_sum[1] / k,
            s: hyper_sum[2] / k,
            beta: hyper_sum[3] / k,
        },
        trace,
        kept_draws: kept,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    customer_id: String,
    lambda: f64,
    mu: f64,
}

/// Writes `customer_id,lambda,mu`.
pub fn write_labels_csv(ids: &[String], params: &[IndividualParams], path: impl AsRef<Path>) -> Result<()> {
    if ids.len() != params.len() {
        return Err(Error::LengthMismatch(ids.len(), params.len()));
    }
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for (id, p) in ids.iter().zip(params) {
        w.serialize(LabelRow {
            customer_id: id.clone(),
            lambda: p.lambda,
            mu: p.mu,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a labels CSV; estimates are floored at [`model::MIN_RATE`].
pub fn read_labels_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<IndividualParams>)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut ids = Vec::new();
    let mut params = Vec::new();
    for row in r.deserialize::<LabelRow>() {
        let row = row?;
        ids.push(row.customer_id);
        params.push(IndividualParams::clamped(row.lambda, row.mu));
    }
    Ok((ids, params))
}

/// Writes the thinned hyperparameter trace as `draw,r,alpha,s,beta`.
pub fn write_trace_csv(trace: &[HyperParams], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["draw", "r", "alpha", "s", "beta"])?;
    for (i, hp) in trace.iter().enumerate() {
        w.write_record([
            i.to_string(),
            hp.r.to_string(),
            hp.alpha.to_string(),
            hp.s.to_string(),
            hp.beta.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
