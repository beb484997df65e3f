//! Ground-truth cohorts drawn from the Pareto/NBD generative model.

use chrono::{Duration, NaiveDate};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::{CalibrationSummary, TransactionLog, TransactionRecord};
use crate::error::{Error, Result};
use crate::gibbs::HyperParams;
use crate::model::IndividualParams;

/// `lambda_i ~ Gamma(r, rate alpha)`, `mu_i ~ Gamma(s, rate beta)`, independent.
pub fn sample_population(hp: &HyperParams, n: usize, seed: u64) -> Result<Vec<IndividualParams>> {
    hp.validate()?;
    if n == 0 {
        return Err(Error::invalid("population size must be at least 1"));
    }
    let lam = Gamma::new(hp.r, 1.0 / hp.alpha).map_err(|e| Error::domain(e.to_string()))?;
    let mu = Gamma::new(hp.s, 1.0 / hp.beta).map_err(|e| Error::domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| IndividualParams {
            lambda: lam.sample(&mut rng).max(f64::MIN_POSITIVE),
            mu: mu.sample(&mut rng).max(f64::MIN_POSITIVE),
        })
        .collect())
}

fn customer_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng
}

/// Repeat-purchase times (weeks after acquisition) for one customer observed
/// for `horizon` weeks, plus the dropout time.
pub fn simulate_customer<R: Rng + ?Sized>(lambda: f64, mu: f64, horizon: f64, rng: &mut R) -> Result<(Vec<f64>, f64)> {
    if !(lambda >= 0.0 && mu >= 0.0) || lambda.is_nan() || mu.is_nan() {
        return Err(Error::domain(format!("rates must be nonnegative, got ({lambda}, {mu})")));
    }
    let tau = if mu == f64::INFINITY {
        0.0
    } else {
        Exp::new(mu).map_err(|e| Error::domain(e.to_string()))?.sample(rng)
    };
    let active = tau.min(horizon);
    let mut times = Vec::new();
    if lambda > 0.0 && lambda.is_finite() {
        let gap = Exp::new(lambda).map_err(|e| Error::domain(e.to_string()))?;
        let mut t = gap.sample(rng);
        while t < active {
            times.push(t);
            t += gap.sample(rng);
        }
    }
    Ok((times, tau))
}

/// Continuous-time RFM summary for one simulated customer with calibration
/// length `t_cal`.
pub fn simulate_summary<R: Rng + ?Sized>(p: &IndividualParams, t_cal: f64, rng: &mut R) -> Result<CalibrationSummary> {
    let (times, _) = simulate_customer(p.lambda, p.mu, t_cal, rng)?;
    Ok(CalibrationSummary::new(
        times.len() as u32,
        times.last().copied().unwrap_or(0.0),
        t_cal,
    ))
}

pub fn customer_id(i: usize) -> String {
    format!("{:06}", i + 1)
}

/// Day-granularity transaction log: one purchase at acquisition, then
/// Poisson(lambda) repeats until the exponential dropout or `end`.
pub fn simulate_log(
    params: &[IndividualParams],
    acquisition: &[NaiveDate],
    end: NaiveDate,
    seed: u64,
) -> Result<TransactionLog> {
    if params.len() != acquisition.len() {
        return Err(Error::LengthMismatch(params.len(), acquisition.len()));
    }
    let Some(&start) = acquisition.iter().min() else {
        return Err(Error::invalid("no customers to simulate"));
    };
    let mut records = Vec::new();
    for (i, (p, &acq)) in params.iter().zip(acquisition).enumerate() {
        if acq > end {
            return Err(Error::invalid(format!("acquisition {acq} after end {end}")));
        }
        let mut rng = customer_rng(seed, i);
        let horizon_days = (end - acq).num_days();
        let (times, _) = simulate_customer(p.lambda, p.mu, horizon_days as f64 / 7.0, &mut rng)?;
        let id = customer_id(i);
        let mut purchase = |day: i64, rng: &mut ChaCha8Rng| {
            let units = 1 + (rng.random::<f64>() * 3.0) as u32;
            let spend = (units as f64 * (8.0 + 10.0 * rng.random::<f64>()) * 100.0).round() / 100.0;
            records.push(TransactionRecord {
                customer_id: id.clone(),
                date: acq + Duration::days(day),
                spend,
                units: Some(units),
            });
        };
        purchase(0, &mut rng);
        for t in times {
            let day = ((t * 7.0).floor() as i64).min(horizon_days);
            purchase(day, &mut rng);
        }
    }
    TransactionLog::new(records, start, end)
}

/// Layout of a simulated cohort in calendar time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n: usize,
    pub hyper: HyperParams,
    pub start: NaiveDate,
    /// Customers are acquired uniformly over the first `acquisition_days`.
    pub acquisition_days: i64,
    /// Length of the whole observation window.
    pub total_days: i64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            hyper: HyperParams {
                r: 0.5,
                alpha: 10.0,
                s: 0.4,
                beta: 20.0,
            },
            start: NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date"),
            acquisition_days: 84,
            total_days: 1456,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub hyper: HyperParams,
    pub ids: Vec<String>,
    pub true_params: Vec<IndividualParams>,
    pub acquisition: Vec<NaiveDate>,
    pub log: TransactionLog,
}

/// Draws a population and simulates its transactions.
pub fn generate_cohort(cfg: &SyntheticConfig) -> Result<SyntheticCohort> {
    if cfg.acquisition_days < 1 || cfg.total_days <= cfg.acquisition_days {
        return Err(Error::invalid("need 1 <= acquisition_days < total_days"));
    }
    let params = sample_population(&cfg.hyper, cfg.n, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let acquisition: Vec<NaiveDate> = (0..cfg.n)
        .map(|_| cfg.start + Duration::days(rng.random_range(0..cfg.acquisition_days)))
        .collect();
    let end = cfg.start + Duration::days(cfg.total_days);
    let log = simulate_log(&params, &acquisition, end, cfg.seed.wrapping_add(1))?;
    let log = TransactionLog::new(log.records().to_vec(), cfg.start, end)?;
    Ok(SyntheticCohort {
        hyper: cfg.hyper,
        ids: (0..cfg.n).map(customer_id).collect(),
        true_params: params,
        acquisition,
        log,
    })
}
