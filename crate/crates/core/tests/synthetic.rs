mod common;

use std::collections::BTreeSet;

use chrono::Duration;
use common::{ks_critical_1pct, ks_statistic, mean_sd};
use nbdnet::data::{mid_date, summarize_rfm, ingest_csv, write_transactions_csv};
use nbdnet::gibbs::{read_labels_csv, write_labels_csv, HyperParams};
use nbdnet::model::log_likelihood;
use nbdnet::synthetic::{generate_cohort, sample_population, simulate_customer, SyntheticConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn population_mean_matches_gamma_mean() {
    let hp = SyntheticConfig::default().hyper;
    let pop = sample_population(&hp, 100_000, 21).unwrap();
    let lam: Vec<f64> = pop.iter().map(|p| p.lambda).collect();
    let mu: Vec<f64> = pop.iter().map(|p| p.mu).collect();
    let (ml, _) = mean_sd(&lam);
    let (mm, _) = mean_sd(&mu);
    assert!((ml / (hp.r / hp.alpha) - 1.0).abs() < 0.01, "{ml}");
    assert!((mm / (hp.s / hp.beta) - 1.0).abs() < 0.015, "{mm}");
    assert_eq!(sample_population(&hp, 10, 21).unwrap(), pop[..10].to_vec());
    assert!(sample_population(&hp, 0, 21).is_err());
}

#[test]
fn unit_shape_gives_exponential_rates() {
    let hp = HyperParams {
        r: 1.0,
        alpha: 4.0,
        s: 1.0,
        beta: 30.0,
    };
    let pop = sample_population(&hp, 20_000, 5).unwrap();
    let d = ks_statistic(pop.iter().map(|p| p.lambda).collect(), |x| 1.0 - (-4.0 * x).exp());
    assert!(d < ks_critical_1pct(pop.len()), "{d}");
    let d = ks_statistic(pop.iter().map(|p| p.mu).collect(), |x| 1.0 - (-30.0 * x).exp());
    assert!(d < ks_critical_1pct(pop.len()), "{d}");
}

#[test]
fn mean_repeat_count_matches_expectation() {
    let (lambda, mu, horizon) = (0.3, 0.05, 40.0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 100_000;
    let counts: Vec<f64> = (0..n)
        .map(|_| simulate_customer(lambda, mu, horizon, &mut rng).unwrap().0.len() as f64)
        .collect();
    let (m, _) = mean_sd(&counts);
    let expected = lambda / mu * (1.0 - (-mu * horizon).exp());
    assert!((m / expected - 1.0).abs() < 0.01, "{m} vs {expected}");
}

#[test]
fn cohort_round_trip_through_summaries() {
    let cfg = SyntheticConfig {
        n: 5000,
        seed: 31,
        ..Default::default()
    };
    let cohort = generate_cohort(&cfg).unwrap();
    let again = generate_cohort(&cfg).unwrap();
    assert_eq!(cohort.log, again.log);
    assert_eq!(cohort.true_params, again.true_params);

    let end = cfg.start + Duration::days(cfg.total_days);
    for (id, recs) in cohort.log.by_customer() {
        let i: usize = id.parse::<usize>().unwrap() - 1;
        assert_eq!(recs[0].date, cohort.acquisition[i]);
        assert!(recs.iter().all(|r| r.date >= cohort.acquisition[i] && r.date <= end));
    }

    let dir = tempfile::tempdir().unwrap();
    write_transactions_csv(&cohort.log, dir.path().join("t.csv")).unwrap();
    let back = ingest_csv(dir.path().join("t.csv")).unwrap();
    assert_eq!(back.records(), cohort.log.records());
    write_labels_csv(&cohort.ids, &cohort.true_params, dir.path().join("truth.csv")).unwrap();
    let (ids, params) = read_labels_csv(dir.path().join("truth.csv")).unwrap();
    assert_eq!((ids, params), (cohort.ids.clone(), cohort.true_params.clone()));

    let split = mid_date(&cohort.log).unwrap();
    let all: BTreeSet<String> = cohort.ids.iter().cloned().collect();
    let summaries = summarize_rfm(&cohort.log, split, &all, &[]).unwrap();
    assert_eq!(summaries.len(), cfg.n);
    // observed repeats against lambda * E[min(tau, T)], customer by customer
    let mut diffs = Vec::with_capacity(cfg.n);
    for (s, p) in summaries.iter().zip(&cohort.true_params) {
        assert!(log_likelihood(s, p).unwrap().is_finite());
        let alive_weeks = (1.0 - (-p.mu * s.t_cal).exp()) / p.mu;
        diffs.push(s.x as f64 - p.lambda * alive_weeks);
    }
    let (m, sd) = mean_sd(&diffs);
    let z = m / (sd / (cfg.n as f64).sqrt());
    assert!(z.abs() < 3.0, "mean gap {m}, z {z}");
}
