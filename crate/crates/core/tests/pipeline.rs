mod common;

use std::collections::{BTreeSet, HashSet};
use std::io::Write;

use chrono::NaiveDate;
use nbdnet::data::{
    self, ingest_cdnow, ingest_csv, merge_same_day, mid_date, split_customers, summarize_rfm, CohortSplit,
    Covariate, TransactionLog, TransactionRecord,
};
use nbdnet::Error;
use proptest::prelude::*;

fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

fn write_file(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.path().join(name);
    std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
    p
}

#[test]
fn cdnow_hand_files() {
    let dir = tempfile::tempdir().unwrap();
    let two = write_file(&dir, "two.txt", "00001 19970305 1 9.99\n00001 19970101 2 29.33\n");
    let log = ingest_cdnow(&two).unwrap();
    assert_eq!(log.len(), 2);
    assert_eq!(log.records()[0].date, date(1997, 1, 1));
    assert_eq!(log.records()[1].units, Some(1));
    assert_eq!((log.start_date(), log.end_date()), (date(1997, 1, 1), date(1997, 3, 5)));

    let empty = write_file(&dir, "empty.txt", "");
    assert!(matches!(ingest_cdnow(&empty), Err(Error::NoRecords(_))));

    let bad = write_file(&dir, "bad.txt", "1 19970101 1 5.0\n2 19970101 x 5.0\n");
    match ingest_cdnow(&bad) {
        Err(e @ Error::MalformedRow { line: 2, .. }) => assert!(e.to_string().contains("line 2"), "{e}"),
        other => panic!("{other:?}"),
    }
    let missing = dir.path().join("nope.txt");
    assert!(ingest_cdnow(&missing).is_err());
}

#[test]
fn generic_csv_and_writer_agree() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_file(
        &dir,
        "t.csv",
        "customer_id,date,spend\nb,2020-01-10,5.5\na,2020-01-01,3\na,2020-01-01,4\n",
    );
    let log = ingest_csv(&p).unwrap();
    assert_eq!(log.customer_ids(), vec!["a", "b"]);
    assert!(!log.has_units());
    let merged = merge_same_day(&log);
    assert_eq!(merged.len(), 2);
    assert_eq!(merged.records()[0].spend, 7.0);

    let out = dir.path().join("round.csv");
    data::write_transactions_csv(&log, &out).unwrap();
    assert_eq!(ingest_csv(&out).unwrap(), log);

    let units = ingest_csv(write_file(&dir, "u.csv", "customer_id,date,spend,units\na,2020-01-01,3,2\n")).unwrap();
    assert!(units.has_units());
    let bad = write_file(&dir, "bad.csv", "customer_id,date,spend\na,2020-13-01,3\n");
    assert!(matches!(ingest_csv(&bad), Err(Error::MalformedRow { .. })));
}

#[test]
fn rfm_day_count_example() {
    let start = date(2001, 3, 1);
    let day = |d: i64| start + chrono::Duration::days(d);
    let records = [0, 14, 35, 80]
        .iter()
        .map(|&d| TransactionRecord {
            customer_id: "c".into(),
            date: day(d),
            spend: 1.0,
            units: None,
        })
        .collect();
    let log = TransactionLog::new(records, start, day(100)).unwrap();
    let ids: BTreeSet<String> = ["c".to_string()].into();
    let s = &summarize_rfm(&log, day(70), &ids, &[]).unwrap()[0];
    assert_eq!((s.x, s.t_x, s.t_cal, s.holdout_count), (2, 5.0, 10.0, 1));
}

#[test]
fn cohort_split_rejects_overlap_and_empty_holdout() {
    let p = data::CustomerPartition {
        train_ids: ["a".to_string(), "b".to_string()].into(),
        test_ids: ["b".to_string()].into(),
    };
    assert!(CohortSplit::new(p, date(2000, 1, 1), date(2000, 2, 1)).is_err());
    let p = data::CustomerPartition {
        train_ids: ["a".to_string()].into(),
        test_ids: ["b".to_string()].into(),
    };
    assert!(CohortSplit::new(p.clone(), date(2000, 2, 1), date(2000, 2, 1)).is_err());
    let c = CohortSplit::new(p, date(2000, 1, 1), date(2000, 1, 15)).unwrap();
    assert_eq!(c.holdout_length_weeks, 2.0);
}

/// Independent one-pass reading of the CDNOW file used as the oracle for the
/// regression values below.
struct CdnowOracle {
    rows: usize,
    customers: usize,
    distinct_days: usize,
    min: NaiveDate,
    max: NaiveDate,
    mean_spend: f64,
}

fn cdnow_oracle(path: &std::path::Path) -> CdnowOracle {
    let text = std::fs::read_to_string(path).unwrap();
    let mut rows = 0;
    let mut customers = HashSet::new();
    let mut days = HashSet::new();
    let mut spend = 0.0;
    let mut dates = Vec::new();
    for line in text.lines() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            continue;
        }
        let Ok(d) = NaiveDate::parse_from_str(f[1], "%Y%m%d") else { continue };
        rows += 1;
        customers.insert(f[0].to_string());
        days.insert((f[0].to_string(), d));
        spend += f[3].parse::<f64>().unwrap();
        dates.push(d);
    }
    CdnowOracle {
        rows,
        customers: customers.len(),
        distinct_days: days.len(),
        min: *dates.iter().min().unwrap(),
        max: *dates.iter().max().unwrap(),
        mean_spend: spend / customers.len() as f64,
    }
}

#[test]
fn cdnow_regression_values() {
    let Some(path) = common::cdnow_path() else {
        eprintln!("warning: CDNOW master file not found; skipping");
        return;
    };
    let oracle = cdnow_oracle(&path);
    let log = ingest_cdnow(&path).unwrap();
    assert_eq!((log.len(), oracle.rows), (69_659, 69_659));
    assert_eq!(log.customer_ids().len(), 23_570);
    assert_eq!(oracle.customers, 23_570);
    assert_eq!((log.start_date(), log.end_date()), (oracle.min, oracle.max));
    assert_eq!((log.start_date(), log.end_date()), (date(1997, 1, 1), date(1998, 6, 30)));

    let merged = merge_same_day(&log);
    assert_eq!(merged.len(), oracle.distinct_days);
    assert_eq!(merged.len(), 67_591);

    // 545-day span, midpoint 272 days after the start
    assert_eq!(mid_date(&log).unwrap(), date(1997, 1, 1) + chrono::Duration::days(272));
    assert_eq!(mid_date(&log).unwrap(), date(1997, 9, 30));

    let total: f64 = log.records().iter().map(|r| r.spend).sum();
    let mean = total / 23_570.0;
    assert!((mean - oracle.mean_spend).abs() < 1e-9);
    assert!((mean - 106.08).abs() < 0.01, "{mean}");

    let part = split_customers(&log, 0.6, 2024).unwrap();
    assert_eq!((part.train_ids.len(), part.test_ids.len()), (14_142, 9_428));
    assert_eq!(split_customers(&log, 0.6, 2024).unwrap(), part);

    let split = mid_date(&log).unwrap();
    let summaries = summarize_rfm(&merged, split, &part.test_ids, &[Covariate::TotalUnits, Covariate::TotalSpend]).unwrap();
    // CDNOW is a single acquisition cohort (first quarter of 1997), all kept
    assert_eq!(summaries.len(), 9_428);
    let purchases: u64 = summaries.iter().map(|s| s.x as u64 + 1 + s.holdout_count as u64).sum();
    let oracle_purchases = merged.records().iter().filter(|r| part.test_ids.contains(&r.customer_id)).count();
    assert_eq!(purchases, oracle_purchases as u64);
}

fn arb_log() -> impl Strategy<Value = Vec<TransactionRecord>> {
    proptest::collection::vec((0u8..12, 0i64..200, 0u32..5000), 1..80).prop_map(|rows| {
        rows.into_iter()
            .map(|(c, d, cents)| TransactionRecord {
                customer_id: format!("c{c}"),
                date: date(2010, 1, 1) + chrono::Duration::days(d),
                spend: cents as f64 / 100.0,
                units: Some(1),
            })
            .collect()
    })
}

fn window(records: Vec<TransactionRecord>) -> TransactionLog {
    TransactionLog::new(records, date(2010, 1, 1), date(2010, 1, 1) + chrono::Duration::days(199)).unwrap()
}

proptest! {
    #[test]
    fn summaries_account_for_every_merged_purchase(records in arb_log(), split_day in 0i64..199) {
        let log = window(records);
        let merged = merge_same_day(&log);
        let split = date(2010, 1, 1) + chrono::Duration::days(split_day);
        let ids: BTreeSet<String> = log.customer_ids().into_iter().map(String::from).collect();
        let summaries = summarize_rfm(&log, split, &ids, &[Covariate::TotalSpend]).unwrap();
        let kept: HashSet<&str> = summaries.iter().map(|s| s.customer_id.as_str()).collect();
        let expected = merged.records().iter().filter(|r| kept.contains(r.customer_id.as_str())).count();
        let got: usize = summaries.iter().map(|s| s.x as usize + 1 + s.holdout_count as usize).sum();
        prop_assert_eq!(got, expected);
        for s in &summaries {
            prop_assert!(0.0 <= s.t_x && s.t_x <= s.t_cal);
            prop_assert_eq!(s.x == 0, s.t_x == 0.0);
        }
        // dropped customers have no purchase on or before the split
        for r in merged.records() {
            if !kept.contains(r.customer_id.as_str()) {
                prop_assert!(r.date > split);
            }
        }
    }

    #[test]
    fn summaries_ignore_record_order(records in arb_log(), split_day in 0i64..199, rot in 0usize..80) {
        let mut shuffled = records.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let split = date(2010, 1, 1) + chrono::Duration::days(split_day);
        let a = window(records);
        let b = window(shuffled);
        let ids: BTreeSet<String> = a.customer_ids().into_iter().map(String::from).collect();
        let covs = [Covariate::TotalUnits, Covariate::MeanSpend];
        prop_assert_eq!(summarize_rfm(&a, split, &ids, &covs).unwrap(), summarize_rfm(&b, split, &ids, &covs).unwrap());
    }

    #[test]
    fn merge_never_grows_and_keeps_spend(records in arb_log()) {
        let log = window(records);
        let merged = merge_same_day(&log);
        prop_assert!(merged.len() <= log.len());
        let a: f64 = log.records().iter().map(|r| r.spend).sum();
        let b: f64 = merged.records().iter().map(|r| r.spend).sum();
        prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
        prop_assert_eq!(merge_same_day(&merged), merged);
    }

    #[test]
    fn split_is_a_seeded_partition(records in arb_log(), frac in 0.05f64..0.95, seed in any::<u64>()) {
        let log = window(records);
        let n = log.customer_ids().len();
        match split_customers(&log, frac, seed) {
            Ok(p) => {
                prop_assert_eq!(p.train_ids.len(), (frac * n as f64).round() as usize);
                prop_assert!(p.train_ids.is_disjoint(&p.test_ids));
                prop_assert_eq!(p.train_ids.len() + p.test_ids.len(), n);
                prop_assert_eq!(split_customers(&log, frac, seed).unwrap(), p);
            }
            Err(_) => {
                let t = (frac * n as f64).round() as usize;
                prop_assert!(n < 2 || t == 0 || t == n);
            }
        }
    }
}
