//! Individual-level Pareto/NBD quantities.
//!
//! A customer buys at Poisson rate `lambda` until an exponential dropout with
//! hazard `mu`. Given the RFM triple `(x, t_x, T)` the likelihood is
//!
//! ```text
//! L = lambda^x / (lambda + mu) * (mu e^{-(lambda+mu) t_x} + lambda e^{-(lambda+mu) T})
//! ```
//!
//! Everything is evaluated in the log domain; `e^{-(lambda+mu) T}` underflows
//! for realistic rates over multi-year horizons.

use serde::{Deserialize, Serialize};

use crate::data::CalibrationSummary;
use crate::error::{Error, Result};

/// Floor applied to estimated rates at API boundaries.
pub const MIN_RATE: f64 = 1e-10;

/// Purchase rate `lambda` and dropout hazard `mu`, both per week.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndividualParams {
    pub lambda: f64,
    pub mu: f64,
}

impl IndividualParams {
    pub fn new(lambda: f64, mu: f64) -> Result<Self> {
        let p = Self { lambda, mu };
        p.validate()?;
        Ok(p)
    }

    /// Applies the [`MIN_RATE`] floor; used when importing estimates.
    pub fn clamped(lambda: f64, mu: f64) -> Self {
        Self {
            lambda: lambda.max(MIN_RATE),
            mu: mu.max(MIN_RATE),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::domain(format!("lambda must be positive and finite, got {}", self.lambda)));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::domain(format!("mu must be positive and finite, got {}", self.mu)));
        }
        Ok(())
    }
}

fn check(s: &CalibrationSummary, p: &IndividualParams) -> Result<()> {
    p.validate()?;
    if !(s.t_x >= 0.0 && s.t_x <= s.t_cal && s.t_cal.is_finite()) {
        return Err(Error::domain(format!(
            "need 0 <= t_x <= T, got t_x={} T={}",
            s.t_x, s.t_cal
        )));
    }
    Ok(())
}

/// `ln(e^a + e^b)` with the larger exponent factored out.
pub(crate) fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(e^z - 1)` for `z >= 0`.
fn ln_expm1(z: f64) -> f64 {
    if z > 40.0 {
        z + (-(-z).exp()).ln_1p()
    } else {
        z.exp_m1().ln()
    }
}

/// The two log-terms of the likelihood bracket.
struct Bracket {
    /// `ln lambda - theta T`.
    alive: f64,
    /// `ln(mu e^{-theta t_x} + lambda e^{-theta T})`.
    total: f64,
}

impl Bracket {
    fn new(s: &CalibrationSummary, p: &IndividualParams) -> Self {
        let theta = p.lambda + p.mu;
        let dead = p.mu.ln() - theta * s.t_x;
        let alive = p.lambda.ln() - theta * s.t_cal;
        Self {
            alive,
            total: log_add_exp(dead, alive),
        }
    }

    /// Share of the bracket carried by the `lambda e^{-theta T}` term.
    fn alive_weight(&self) -> f64 {
        (self.alive - self.total).exp()
    }
}

/// Natural log of the individual-level likelihood.
pub fn log_likelihood(s: &CalibrationSummary, p: &IndividualParams) -> Result<f64> {
    check(s, p)?;
    Ok(log_likelihood_unchecked(s, p))
}

pub(crate) fn log_likelihood_unchecked(s: &CalibrationSummary, p: &IndividualParams) -> f64 {
    let b = Bracket::new(s, p);
    let x_term = if s.x == 0 { 0.0 } else { s.x as f64 * p.lambda.ln() };
    x_term - (p.lambda + p.mu).ln() + b.total
}

/// Partial derivatives of [`log_likelihood`] with respect to `(lambda, mu)`.
pub fn grad_log_likelihood(s: &CalibrationSummary, p: &IndividualParams) -> Result<(f64, f64)> {
    check(s, p)?;
    Ok(grad_log_likelihood_unchecked(s, p))
}

pub(crate) fn grad_log_likelihood_unchecked(s: &CalibrationSummary, p: &IndividualParams) -> (f64, f64) {
    let b = Bracket::new(s, p);
    let w_alive = b.alive_weight();
    let w_dead = 1.0 - w_alive;
    let inv_theta = 1.0 / (p.lambda + p.mu);
    let d_lambda = s.x as f64 / p.lambda - inv_theta - w_dead * s.t_x + w_alive * (1.0 / p.lambda - s.t_cal);
    let d_mu = -inv_theta + w_dead * (1.0 / p.mu - s.t_x) - w_alive * s.t_cal;
    (d_lambda, d_mu)
}

/// `ln P(alive at T | x, t_x, T, lambda, mu)`.
///
/// The dropout time has density proportional to `mu e^{-theta tau}` on
/// `(t_x, T]` and survival mass `e^{-theta T}` beyond, which gives
/// `P(alive) = 1 / (1 + mu/theta (e^{theta (T - t_x)} - 1))`.
pub fn ln_p_alive(s: &CalibrationSummary, p: &IndividualParams) -> Result<f64> {
    check(s, p)?;
    Ok(ln_p_alive_unchecked(s, p))
}

pub(crate) fn ln_p_alive_unchecked(s: &CalibrationSummary, p: &IndividualParams) -> f64 {
    let theta = p.lambda + p.mu;
    let gap = theta * (s.t_cal - s.t_x);
    if gap <= 0.0 {
        return 0.0;
    }
    let log_odds_dead = (p.mu / theta).ln() + ln_expm1(gap);
    // -ln(1 + e^z)
    -log_add_exp(0.0, log_odds_dead)
}

/// Probability that the customer is still alive at the end of calibration.
pub fn p_alive(s: &CalibrationSummary, p: &IndividualParams) -> Result<f64> {
    Ok(ln_p_alive(s, p)?.exp())
}

/// Expected purchases in `(T, T + h]` given the calibration history:
/// `P(alive) * lambda/mu * (1 - e^{-mu h})`.
pub fn expected_holdout_purchases(s: &CalibrationSummary, p: &IndividualParams, h: f64) -> Result<f64> {
    if !(h >= 0.0) || !h.is_finite() {
        return Err(Error::domain(format!("holdout length must be a finite h >= 0, got {h}")));
    }
    let alive = p_alive(s, p)?;
    Ok(alive * expected_purchases_while_alive(p, h))
}

/// `lambda/mu * (1 - e^{-mu h})`: expected Poisson count over an
/// exponentially censored horizon of length `h`.
pub fn expected_purchases_while_alive(p: &IndividualParams, h: f64) -> f64 {
    let mh = p.mu * h;
    if mh < 1e-8 {
        p.lambda * h
    } else {
        p.lambda * -(-mh).exp_m1() / p.mu
    }
}
