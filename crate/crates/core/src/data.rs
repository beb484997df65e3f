//! Transaction ingestion and calibration/holdout RFM summaries.
//!
//! Time is measured in weeks stored as `days / 7.0`. A customer's clock
//! starts at their first purchase; `x` counts repeat purchase days in the
//! calibration period, `t_x` is the time of the last one and `t_cal` is the
//! distance from the first purchase to the split date.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransactionRecord {
    pub customer_id: String,
    pub date: NaiveDate,
    pub spend: f64,
    /// Item count; `None` for datasets that do not record it.
    pub units: Option<u32>,
}

/// Records sorted by `(customer_id, date)` with the observation window.
#[derive(Debug, Clone, PartialEq)]
pub struct TransactionLog {
    records: Vec<TransactionRecord>,
    start_date: NaiveDate,
    end_date: NaiveDate,
}

impl TransactionLog {
    /// Builds a log over an explicit window, sorting the records.
    pub fn new(
        mut records: Vec<TransactionRecord>,
        start_date: NaiveDate,
        end_date: NaiveDate,
    ) -> Result<Self> {
        if start_date > end_date {
            return Err(Error::invalid(format!(
                "start date {start_date} after end date {end_date}"
            )));
        }
        for r in &records {
            if r.date < start_date || r.date > end_date {
                return Err(Error::invalid(format!(
                    "record for {} on {} outside [{start_date}, {end_date}]",
                    r.customer_id, r.date
                )));
            }
            if !(r.spend >= 0.0) || !r.spend.is_finite() {
                return Err(Error::invalid(format!(
                    "record for {} on {} has invalid spend {}",
                    r.customer_id, r.date, r.spend
                )));
            }
        }
        records.sort_by(|a, b| {
            a.customer_id
                .cmp(&b.customer_id)
                .then(a.date.cmp(&b.date))
                .then(a.spend.total_cmp(&b.spend))
                .then(a.units.cmp(&b.units))
        });
        Ok(Self {
            records,
            start_date,
            end_date,
        })
    }

    /// Builds a log whose window is the observed min/max date.
    pub fn from_records(records: Vec<TransactionRecord>) -> Result<Self> {
        let start = records.iter().map(|r| r.date).min();
        let end = records.iter().map(|r| r.date).max();
        match (start, end) {
            (Some(s), Some(e)) => Self::new(records, s, e),
            _ => Err(Error::invalid("no records")),
        }
    }

    pub fn records(&self) -> &[TransactionRecord] {
        &self.records
    }

    pub fn start_date(&self) -> NaiveDate {
        self.start_date
    }

    pub fn end_date(&self) -> NaiveDate {
        self.end_date
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// True when every record carries a unit count.
    pub fn has_units(&self) -> bool {
        self.records.iter().all(|r| r.units.is_some())
    }

    /// Sorted distinct customer ids.
    pub fn customer_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = Vec::new();
        for r in &self.records {
            if ids.last() != Some(&r.customer_id.as_str()) {
                ids.push(&r.customer_id);
            }
        }
        ids
    }

    /// Contiguous record slices per customer.
    pub fn by_customer(&self) -> BTreeMap<&str, &[TransactionRecord]> {
        let mut out = BTreeMap::new();
        let mut start = 0;
        for i in 1..=self.records.len() {
            if i == self.records.len() || self.records[i].customer_id != self.records[start].customer_id
            {
                out.insert(self.records[start].customer_id.as_str(), &self.records[start..i]);
                start = i;
            }
        }
        out
    }
}

fn parse_cdnow_date(token: &str) -> Option<NaiveDate> {
    if token.len() != 8 || !token.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    NaiveDate::parse_from_str(token, "%Y%m%d").ok()
}

/// Reads the CDNOW master format: whitespace-separated
/// `id date(YYYYMMDD) units spend`, one purchase per line.
///
/// A single leading header line (date column not numeric) is skipped.
pub fn ingest_cdnow(path: impl AsRef<Path>) -> Result<TransactionLog> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let malformed = |message: String| Error::MalformedRow {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        if fields.len() != 4 {
            if records.is_empty() && line_no == 1 && fields.len() >= 2 && parse_cdnow_date(fields[1]).is_none() {
                continue;
            }
            return Err(malformed(format!("expected 4 fields, found {}", fields.len())));
        }
        let date = match parse_cdnow_date(fields[1]) {
            Some(d) => d,
            None if line_no == 1 => continue,
            None => return Err(malformed(format!("bad date `{}`", fields[1]))),
        };
        let units: u32 = fields[2]
            .parse()
            .map_err(|_| malformed(format!("bad unit count `{}`", fields[2])))?;
        let spend: f64 = fields[3]
            .parse()
            .map_err(|_| malformed(format!("bad spend `{}`", fields[3])))?;
        if !(spend >= 0.0) || !spend.is_finite() {
            return Err(malformed(format!("negative or non-finite spend `{}`", fields[3])));
        }
        records.push(TransactionRecord {
            customer_id: fields[0].to_string(),
            date,
            spend,
            units: Some(units),
        });
    }
    if records.is_empty() {
        return Err(Error::NoRecords(path.to_path_buf()));
    }
    TransactionLog::from_records(records)
}

#[derive(Debug, Deserialize, Serialize)]
struct CsvTransaction {
    customer_id: String,
    date: NaiveDate,
    spend: f64,
    #[serde(default)]
    units: Option<u32>,
}

/// Reads a transactions CSV with header `customer_id,date,spend[,units]`
/// and ISO-8601 dates.
pub fn ingest_csv(path: impl AsRef<Path>) -> Result<TransactionLog> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::invalid(format!("{}: {other:?}", path.display())),
        })?;
    let mut records = Vec::new();
    for row in reader.deserialize::<CsvTransaction>() {
        let row = row.map_err(|e| Error::MalformedRow {
            path: path.to_path_buf(),
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        records.push(TransactionRecord {
            customer_id: row.customer_id,
            date: row.date,
            spend: row.spend,
            units: row.units,
        });
    }
    if records.is_empty() {
        return Err(Error::NoRecords(path.to_path_buf()));
    }
    TransactionLog::from_records(records)
}

/// Writes the generic transactions CSV (units column only when every
/// record has one).
pub fn write_transactions_csv(log: &TransactionLog, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let units = log.has_units();
    if units {
        w.write_record(["customer_id", "date", "spend", "units"])?;
    } else {
        w.write_record(["customer_id", "date", "spend"])?;
    }
    for r in log.records() {
        let date = r.date.format("%Y-%m-%d").to_string();
        let spend = r.spend.to_string();
        if units {
            let u = r.units.unwrap_or(0).to_string();
            w.write_record([r.customer_id.as_str(), &date, &spend, &u])?;
        } else {
            w.write_record([r.customer_id.as_str(), &date, &spend])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Collapses purchases by the same customer on the same day into one record
/// with summed spend and units.
pub fn merge_same_day(log: &TransactionLog) -> TransactionLog {
    let mut merged: Vec<TransactionRecord> = Vec::with_capacity(log.len());
    for r in log.records() {
        match merged.last_mut() {
            Some(last) if last.customer_id == r.customer_id && last.date == r.date => {
                last.spend += r.spend;
                last.units = match (last.units, r.units) {
                    (Some(a), Some(b)) => Some(a + b),
                    _ => None,
                };
            }
            _ => merged.push(r.clone()),
        }
    }
    TransactionLog {
        records: merged,
        start_date: log.start_date,
        end_date: log.end_date,
    }
}

/// Disjoint train/test customer sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CustomerPartition {
    pub train_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
}

/// Seeded random partition with `round(train_fraction * N)` training customers.
pub fn split_customers(
    log: &TransactionLog,
    train_fraction: f64,
    seed: u64,
) -> Result<CustomerPartition> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut ids: Vec<String> = log.customer_ids().into_iter().map(str::to_owned).collect();
    let n = ids.len();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 customers, found {n}")));
    }
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} leaves one side empty for {n} customers"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let test_ids = ids.split_off(n_train).into_iter().collect();
    Ok(CustomerPartition {
        train_ids: ids.into_iter().collect(),
        test_ids,
    })
}

/// Calendar date at the integer midpoint of the log's day span (rounded down).
pub fn mid_date(log: &TransactionLog) -> Result<NaiveDate> {
    mid_date_between(log.start_date, log.end_date)
}

pub fn mid_date_between(start: NaiveDate, end: NaiveDate) -> Result<NaiveDate> {
    let span = (end - start).num_days();
    if span <= 0 {
        return Err(Error::invalid(format!(
            "degenerate window {start}..{end}: no midpoint"
        )));
    }
    Ok(start + chrono::Duration::days(span / 2))
}

/// Partition plus the calibration/holdout boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortSplit {
    pub train_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
    pub split_date: NaiveDate,
    pub holdout_length_weeks: f64,
}

impl CohortSplit {
    pub fn new(partition: CustomerPartition, split_date: NaiveDate, end_date: NaiveDate) -> Result<Self> {
        if let Some(id) = partition.train_ids.intersection(&partition.test_ids).next() {
            return Err(Error::invalid(format!("customer {id} in both train and test")));
        }
        let h = days_to_weeks((end_date - split_date).num_days());
        if h <= 0.0 {
            return Err(Error::invalid(format!(
                "split date {split_date} leaves no holdout before {end_date}"
            )));
        }
        Ok(Self {
            train_ids: partition.train_ids,
            test_ids: partition.test_ids,
            split_date,
            holdout_length_weeks: h,
        })
    }
}

pub fn days_to_weeks(days: i64) -> f64 {
    days as f64 / 7.0
}

/// Per-customer RFM triple with holdout ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub customer_id: String,
    /// Repeat purchases in the calibration period.
    pub x: u32,
    /// Weeks from first to last calibration purchase.
    pub t_x: f64,
    /// Weeks from first purchase to the split date.
    pub t_cal: f64,
    pub covariates: Vec<f64>,
    /// Purchases strictly after the split date.
    pub holdout_count: u32,
}

impl CalibrationSummary {
    /// Summary with no covariates or holdout data; handy for model-level code.
    pub fn new(x: u32, t_x: f64, t_cal: f64) -> Self {
        Self {
            customer_id: String::new(),
            x,
            t_x,
            t_cal,
            covariates: Vec::new(),
            holdout_count: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_x >= 0.0 && self.t_x <= self.t_cal) || !self.t_cal.is_finite() {
            return Err(Error::domain(format!(
                "customer `{}`: need 0 <= t_x <= T, got t_x={} T={}",
                self.customer_id, self.t_x, self.t_cal
            )));
        }
        if self.x == 0 && self.t_x != 0.0 {
            return Err(Error::domain(format!(
                "customer `{}`: x = 0 requires t_x = 0, got {}",
                self.customer_id, self.t_x
            )));
        }
        Ok(())
    }

    /// True when no purchase was observed in the holdout.
    pub fn actually_inactive(&self) -> bool {
        self.holdout_count == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariate {
    TotalUnits,
    TotalSpend,
    MeanSpend,
}

impl Covariate {
    pub fn name(self) -> &'static str {
        match self {
            Covariate::TotalUnits => "total_units",
            Covariate::TotalSpend => "total_spend",
            Covariate::MeanSpend => "mean_spend",
        }
    }

    fn compute(self, calibration: &[TransactionRecord]) -> Result<f64> {
        Ok(match self {
            Covariate::TotalUnits => {
                let mut total = 0u64;
                for r in calibration {
                    total += r.units.ok_or_else(|| Error::MissingUnits(self.name().into()))? as u64;
                }
                total as f64
            }
            Covariate::TotalSpend => calibration.iter().map(|r| r.spend).sum(),
            Covariate::MeanSpend => {
                calibration.iter().map(|r| r.spend).sum::<f64>() / calibration.len() as f64
            }
        })
    }
}

impl FromStr for Covariate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "total_units" | "units" => Ok(Covariate::TotalUnits),
            "total_spend" | "spend" => Ok(Covariate::TotalSpend),
            "mean_spend" => Ok(Covariate::MeanSpend),
            other => Err(Error::UnknownCovariate(other.to_string())),
        }
    }
}

pub fn parse_covariates<S: AsRef<str>>(names: &[S]) -> Result<Vec<Covariate>> {
    names.iter().map(|n| n.as_ref().parse()).collect()
}

fn check_covariates(log: &TransactionLog, covariates: &[Covariate]) -> Result<()> {
    if covariates.contains(&Covariate::TotalUnits) && !log.has_units() {
        return Err(Error::MissingUnits(Covariate::TotalUnits.name().into()));
    }
    Ok(())
}

/// RFM summaries for `ids` in sorted-id order.
///
/// Purchases on the same day count once. Customers without a purchase on or
/// before the split date are dropped with a warning.
pub fn summarize_rfm(
    log: &TransactionLog,
    split_date: NaiveDate,
    ids: &BTreeSet<String>,
    covariates: &[Covariate],
) -> Result<Vec<CalibrationSummary>> {
    check_covariates(log, covariates)?;
    let groups = log.by_customer();
    let mut out = Vec::with_capacity(ids.len());
    let mut dropped = 0usize;
    for id in ids {
        let Some(records) = groups.get(id.as_str()) else {
            dropped += 1;
            log::warn!("customer {id} has no transactions; excluded");
            continue;
        };
        let calibration: Vec<&TransactionRecord> =
            records.iter().filter(|r| r.date <= split_date).collect();
        let Some(first) = calibration.first().map(|r| r.date) else {
            dropped += 1;
            log::debug!("customer {id} acquired after split date; excluded");
            continue;
        };
        let last = calibration.last().map(|r| r.date).unwrap_or(first);
        let mut cal_days = calibration.iter().map(|r| r.date).collect::<Vec<_>>();
        cal_days.dedup();
        let mut hold_days: Vec<NaiveDate> =
            records.iter().filter(|r| r.date > split_date).map(|r| r.date).collect();
        hold_days.dedup();
        let cal_records: Vec<TransactionRecord> = calibration.into_iter().cloned().collect();
        let covs = covariates
            .iter()
            .map(|c| c.compute(&cal_records))
            .collect::<Result<Vec<_>>>()?;
        out.push(CalibrationSummary {
            customer_id: id.clone(),
            x: (cal_days.len() - 1) as u32,
            t_x: days_to_weeks((last - first).num_days()),
            t_cal: days_to_weeks((split_date - first).num_days()),
            covariates: covs,
            holdout_count: hold_days.len() as u32,
        });
    }
    if dropped > 0 {
        log::warn!("{dropped} customer(s) without calibration-period purchases excluded from cohort");
    }
    Ok(out)
}

/// Calibration-period covariate vectors for `ids` (sorted-id order, same
/// cohort rule as [`summarize_rfm`]).
pub fn extract_covariates(
    log: &TransactionLog,
    split_date: NaiveDate,
    ids: &BTreeSet<String>,
    names: &[&str],
) -> Result<Vec<Vec<f64>>> {
    let covs = parse_covariates(names)?;
    Ok(summarize_rfm(log, split_date, ids, &covs)?
        .into_iter()
        .map(|s| s.covariates)
        .collect())
}

/// Writes `customer_id,x,t_x,T,holdout_count[,cov_*...]`.
pub fn write_summaries_csv(
    summaries: &[CalibrationSummary],
    covariate_names: &[String],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "customer_id".to_string(),
        "x".into(),
        "t_x".into(),
        "T".into(),
        "holdout_count".into(),
    ];
    header.extend(covariate_names.iter().map(|n| format!("cov_{n}")));
    w.write_record(&header)?;
    for s in summaries {
        if s.covariates.len() != covariate_names.len() {
            return Err(Error::DimensionMismatch {
                expected: covariate_names.len(),
                actual: s.covariates.len(),
            });
        }
        let mut row = vec![
            s.customer_id.clone(),
            s.x.to_string(),
            s.t_x.to_string(),
            s.t_cal.to_string(),
            s.holdout_count.to_string(),
        ];
        row.extend(s.covariates.iter().map(|c| c.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a summaries CSV; returns the rows and the covariate names (without
/// the `cov_` prefix).
pub fn read_summaries_csv(path: impl AsRef<Path>) -> Result<(Vec<CalibrationSummary>, Vec<String>)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let expected = ["customer_id", "x", "t_x", "T", "holdout_count"];
    if headers.len() < expected.len() || expected.iter().zip(headers.iter()).any(|(a, b)| *a != b) {
        return Err(Error::MalformedRow {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header starting with {}", expected.join(",")),
        });
    }
    let cov_names: Vec<String> = headers
        .iter()
        .skip(expected.len())
        .map(|h| h.strip_prefix("cov_").unwrap_or(h).to_string())
        .collect();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let bad = |what: &str| Error::MalformedRow {
            path: path.to_path_buf(),
            line,
            message: format!("bad {what}"),
        };
        let f = |i: usize, what: &str| -> Result<f64> {
            rec.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| bad(what))
        };
        let s = CalibrationSummary {
            customer_id: rec.get(0).ok_or_else(|| bad("customer_id"))?.to_string(),
            x: rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| bad("x"))?,
            t_x: f(2, "t_x")?,
            t_cal: f(3, "T")?,
            holdout_count: rec.get(4).and_then(|v| v.parse().ok()).ok_or_else(|| bad("holdout_count"))?,
            covariates: (0..cov_names.len())
                .map(|j| f(expected.len() + j, "covariate"))
                .collect::<Result<_>>()?,
        };
        s.validate()?;
        out.push(s);
    }
    Ok((out, cov_names))
}
