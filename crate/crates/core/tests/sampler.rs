mod common;

use common::{ks_critical_1pct, ks_statistic, mean_z, rel_err, summary};
use nbdnet::gibbs::{
    draw_alive, draw_dropout_time, draw_lambda, draw_mu, draw_rate_given_shape, ln_shape_marginal, run_chain,
    sweep_customer, update_hyperparams, ChainConfig, HyperParams, Lifetime,
};
use nbdnet::model::{p_alive, IndividualParams};
use nbdnet::synthetic::{sample_population, simulate_summary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DRAWS: usize = 100_000;
/// Two-sided 1% normal quantile.
const Z_1PCT: f64 = 2.576;

fn hp(r: f64, alpha: f64, s: f64, beta: f64) -> HyperParams {
    HyperParams { r, alpha, s, beta }
}

#[test]
fn alive_frequency_matches_p_alive() {
    let s = summary(3, 20.0, 40.0);
    let p = IndividualParams::new(0.2, 0.05).unwrap();
    let target = p_alive(&s, &p).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let hits = (0..DRAWS).filter(|_| draw_alive(&s, &p, rng.random())).count() as f64;
    let se = (target * (1.0 - target) / DRAWS as f64).sqrt();
    assert!((hits / DRAWS as f64 - target).abs() < 3.0 * se);
}

#[test]
fn alive_threshold_and_no_dropout_limit() {
    let s = summary(3, 20.0, 40.0);
    let p = IndividualParams::new(0.2, 0.05).unwrap();
    let pa = p_alive(&s, &p).unwrap();
    assert!(draw_alive(&s, &p, pa - 1e-9));
    assert!(!draw_alive(&s, &p, pa + 1e-9));
    let immortal = IndividualParams::new(0.2, 1e-300).unwrap();
    assert!(draw_alive(&s, &immortal, 1.0 - 1e-12));
}

#[test]
fn dropout_time_follows_truncated_exponential() {
    let s = summary(2, 10.0, 30.0);
    let p = IndividualParams::new(0.15, 0.05).unwrap();
    let theta = 0.2;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draws: Vec<f64> = (0..DRAWS)
        .map(|_| draw_dropout_time(&s, &p, rng.random()).unwrap())
        .collect();
    assert!(draws.iter().all(|&t| t > 10.0 && t < 30.0));
    let norm = 1.0 - (-theta * 20.0f64).exp();
    let d = ks_statistic(draws, |t| (1.0 - (-theta * (t - 10.0)).exp()) / norm);
    assert!(d < ks_critical_1pct(DRAWS), "KS {d}");
}

#[test]
fn dropout_time_endpoints_and_uniform_limit() {
    let s = summary(2, 10.0, 30.0);
    let p = IndividualParams::new(0.15, 0.05).unwrap();
    assert_eq!(draw_dropout_time(&s, &p, 0.0).unwrap(), 10.0);
    assert!((draw_dropout_time(&s, &p, 1.0).unwrap() - 30.0).abs() < 1e-12);
    let slow = IndividualParams::new(1e-14, 1e-14).unwrap();
    assert!((draw_dropout_time(&s, &slow, 0.5).unwrap() - 20.0).abs() < 1e-9);
    assert!(draw_dropout_time(&summary(1, 10.0, 10.0), &p, 0.5).is_err());
}

fn gamma_moment_check(draws: &[f64], mean: f64) {
    let z = mean_z(draws, mean);
    assert!(z.abs() < Z_1PCT, "z = {z}");
    let m = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!(rel_err(m, mean) < 0.02, "{m} vs {mean}");
}

#[test]
fn lambda_conditional_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s0 = summary(0, 0.0, 5.0);
    let d: Vec<f64> = (0..DRAWS)
        .map(|_| draw_lambda(&s0, &hp(1.0, 1.0, 1.0, 1.0), 1.0, &mut rng).unwrap())
        .collect();
    gamma_moment_check(&d, 0.5);
    let s10 = summary(10, 40.0, 52.0);
    let d: Vec<f64> = (0..DRAWS)
        .map(|_| draw_lambda(&s10, &hp(0.5, 10.0, 1.0, 1.0), 52.0, &mut rng).unwrap())
        .collect();
    gamma_moment_check(&d, 10.5 / 62.0);
}

#[test]
fn mu_conditional_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = summary(2, 3.0, 10.0);
    let h = hp(1.0, 1.0, 1.0, 0.0);
    let alive: Vec<f64> = (0..DRAWS)
        .map(|_| draw_mu(&s, &h, Lifetime::Alive, &mut rng).unwrap())
        .collect();
    gamma_moment_check(&alive, 0.1);
    let dead: Vec<f64> = (0..DRAWS)
        .map(|_| draw_mu(&s, &h, Lifetime::DeadAt(5.0), &mut rng).unwrap())
        .collect();
    gamma_moment_check(&dead, 2.0 / 5.0);
    assert!(draw_mu(&s, &h, Lifetime::DeadAt(2.0), &mut rng).is_err());
}

#[test]
fn rate_conditional_moment() {
    let cfg = ChainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d: Vec<f64> = (0..DRAWS)
        .map(|_| draw_rate_given_shape(1.0, &[1.0, 1.0], &cfg, &mut rng).unwrap())
        .collect();
    gamma_moment_check(&d, 2.001 / 2.001);
}

#[test]
fn rate_draw_scales_inversely_with_rates() {
    let cfg = ChainConfig {
        prior_rate: 1e-300,
        ..Default::default()
    };
    let lam = [0.3, 0.7, 1.1];
    let c = 4.0;
    let scaled: Vec<f64> = lam.iter().map(|v| v * c).collect();
    for seed in 0..20 {
        let a = draw_rate_given_shape(0.8, &lam, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = draw_rate_given_shape(0.8, &scaled, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert!(rel_err(b, a / c) < 1e-12);
    }
}

/// The chain over `r` (with `alpha` integrated out) must have the grid-
/// normalized marginal as its stationary distribution.
#[test]
fn shape_update_targets_its_conditional() {
    let cfg = ChainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let lambdas: Vec<f64> = sample_population(&hp(0.7, 4.0, 1.0, 1.0), 40, 9)
        .unwrap()
        .iter()
        .map(|p| p.lambda)
        .collect();
    let mus = vec![0.5; 40];
    let (n, sum, sum_ln) = (
        lambdas.len(),
        lambdas.iter().sum::<f64>(),
        lambdas.iter().map(|v| v.ln()).sum::<f64>(),
    );
    // grid over ln r
    let (lo, hi, cells) = (-6.0f64, 4.0f64, 4000usize);
    let step = (hi - lo) / cells as f64;
    let dens: Vec<f64> = (0..cells)
        .map(|i| ln_shape_marginal(lo + (i as f64 + 0.5) * step, n, sum, sum_ln, 1e-3, 1e-3))
        .collect();
    let top = dens.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = dens.iter().map(|d| (d - top).exp()).collect();
    let z: f64 = w.iter().sum();
    let grid_cdf = |v: f64| -> f64 {
        let k = (((v - lo) / step).floor().max(0.0) as usize).min(cells);
        w[..k].iter().sum::<f64>() / z
    };

    let mut h = hp(1.0, 1.0, 1.0, 1.0);
    let mut draws = Vec::new();
    for i in 0..40_000 {
        h = update_hyperparams(&lambdas, &mus, &h, &cfg, &mut rng).unwrap();
        if i >= 500 {
            draws.push(h.r.ln());
        }
    }
    draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = draws.len() as f64;
    let worst = [0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95]
        .iter()
        .map(|&q| {
            let v = draws[(q * m) as usize];
            (grid_cdf(v) - q).abs()
        })
        .fold(0.0, f64::max);
    assert!(worst < 0.02, "max quantile CDF gap {worst}");
}

#[test]
fn hyper_update_rejects_nonpositive_rates() {
    let cfg = ChainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(update_hyperparams(&[1.0, 0.0], &[1.0, 1.0], &hp(1.0, 1.0, 1.0, 1.0), &cfg, &mut rng).is_err());
    assert!(update_hyperparams(&[], &[], &hp(1.0, 1.0, 1.0, 1.0), &cfg, &mut rng).is_err());
}

/// With hyperparameters held fixed and a near-empty window, the customer
/// block barely moves `lambda` away from its prior.
#[test]
fn uninformative_customer_keeps_prior_mean() {
    let h = hp(2.0, 4.0, 1.0, 10.0);
    let s = summary(0, 0.0, 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut p = IndividualParams::new(1.0, 1.0).unwrap();
    let mut draws = Vec::with_capacity(DRAWS);
    for _ in 0..DRAWS {
        sweep_customer(&s, &mut p, &h, &mut rng).unwrap();
        draws.push(p.lambda);
    }
    let z = mean_z(&draws, 0.5);
    assert!(z.abs() < 4.0, "z = {z}");
}

/// Successive-conditional simulation: alternating the sampler's customer
/// block with regenerating data from the current rates must leave the
/// prior marginals of `lambda` and `mu` invariant.
#[test]
fn successive_conditional_simulation_preserves_prior() {
    let h = hp(2.0, 10.0, 1.5, 20.0);
    let t_cal = 52.0;
    let n = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut params = sample_population(&h, n, 8).unwrap();
    let mut data: Vec<_> = params
        .iter()
        .map(|p| simulate_summary(p, t_cal, &mut rng).unwrap())
        .collect();
    let iters = 3000;
    let batch = 100;
    let mut lam_batches = Vec::new();
    let mut mu_batches = Vec::new();
    let (mut lb, mut mb) = (0.0, 0.0);
    for it in 0..iters {
        for (p, s) in params.iter_mut().zip(&data) {
            sweep_customer(s, p, &h, &mut rng).unwrap();
        }
        for (s, p) in data.iter_mut().zip(&params) {
            *s = simulate_summary(p, t_cal, &mut rng).unwrap();
        }
        lb += params.iter().map(|p| p.lambda).sum::<f64>() / n as f64;
        mb += params.iter().map(|p| p.mu).sum::<f64>() / n as f64;
        if (it + 1) % batch == 0 {
            lam_batches.push(lb / batch as f64);
            mu_batches.push(mb / batch as f64);
            lb = 0.0;
            mb = 0.0;
        }
    }
    let zl = mean_z(&lam_batches, h.r / h.alpha);
    let zm = mean_z(&mu_batches, h.s / h.beta);
    assert!(zl.abs() < 4.0 && zm.abs() < 4.0, "z_lambda={zl} z_mu={zm}");
}

fn small_cohort() -> Vec<nbdnet::data::CalibrationSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    sample_population(&hp(0.5, 10.0, 0.4, 20.0), 150, 10)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut s = simulate_summary(p, rng.random_range(30.0..60.0), &mut rng).unwrap();
            s.customer_id = format!("c{i:03}");
            s
        })
        .collect()
}

#[test]
fn chain_is_seed_deterministic_and_thread_count_free() {
    let data = small_cohort();
    let cfg = ChainConfig {
        sweeps: 300,
        burn_in: 100,
        seed: 12,
        ..Default::default()
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_chain(&data, &cfg).unwrap())
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a, b);
    assert_eq!(a, run(1));
    assert!(a.mean_lambda.iter().chain(&a.mean_mu).all(|&v| v > 0.0 && v.is_finite()));
    assert_eq!(a.kept_draws, 100);
    assert_eq!(a.trace.len(), 100);
}

#[test]
fn chain_rejects_empty_and_zero_length_input() {
    assert!(run_chain(&[], &ChainConfig::default()).is_err());
    assert!(run_chain(&[summary(0, 0.0, 0.0)], &ChainConfig::default()).is_err());
}
