//! Classification and count metrics for holdout forecasts.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::CalibrationSummary;
use crate::error::{Error, Result};
use crate::predict::{histogram_u32, CountHistogram, CustomerForecast};

/// Rows are the actual class, columns the predicted one; positive = active.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    /// Builds the matrix from per-customer `(actual_active, predicted_active)`.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut cm = Self::default();
        for (actual, predicted) in pairs {
            match (actual, predicted) {
                (true, true) => cm.tp += 1,
                (true, false) => cm.fn_ += 1,
                (false, true) => cm.fp += 1,
                (false, false) => cm.tn += 1,
            }
        }
        cm
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::invalid("accuracy of an empty confusion matrix"));
    }
    Ok((cm.tp + cm.tn) as f64 / cm.total() as f64)
}

fn check_lengths(a: &[u32], b: &[u32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::invalid("metric over zero customers"));
    }
    Ok(())
}

/// Share of customers whose integer forecast equals the actual count.
pub fn multi_accuracy(y: &[u32], y_hat: &[u32]) -> Result<f64> {
    check_lengths(y, y_hat)?;
    let hits = y.iter().zip(y_hat).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / y.len() as f64)
}

pub fn mae_metric(y: &[u32], y_hat: &[u32]) -> Result<f64> {
    check_lengths(y, y_hat)?;
    let total: f64 = y.iter().zip(y_hat).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
    Ok(total / y.len() as f64)
}

/// Share of customers on which two models make the same integer forecast.
pub fn consistency(y_a: &[u32], y_b: &[u32]) -> Result<f64> {
    multi_accuracy(y_a, y_b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub customers: usize,
    pub confusion: ConfusionMatrix,
    pub inactive_accuracy: f64,
    pub multi_accuracy: f64,
    pub mae: f64,
    /// Agreement with the reference model's integer forecasts, if one was given.
    pub consistency: Option<f64>,
    /// Sum of integer forecasts.
    pub total_purchases: u64,
    /// Sum of continuous expected purchases.
    pub total_expected: f64,
    pub actual_total: u64,
    pub histogram: CountHistogram,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn align<'a>(
    summaries: &[CalibrationSummary],
    forecasts: &'a [CustomerForecast],
    what: &str,
) -> Result<Vec<&'a CustomerForecast>> {
    let by_id: HashMap<&str, &CustomerForecast> = forecasts.iter().map(|f| (f.customer_id.as_str(), f)).collect();
    if by_id.len() != forecasts.len() {
        return Err(Error::invalid(format!("duplicate customer ids in {what} forecasts")));
    }
    summaries
        .iter()
        .map(|s| {
            by_id
                .get(s.customer_id.as_str())
                .copied()
                .ok_or_else(|| Error::invalid(format!("customer {} missing from {what} forecasts", s.customer_id)))
        })
        .collect()
}

/// Scores `forecasts` against the holdout counts in `actual`, matching
/// customers by id. With a `reference`, consistency against its integer
/// forecasts is reported too.
pub fn evaluate(
    model: &str,
    actual: &[CalibrationSummary],
    forecasts: &[CustomerForecast],
    reference: Option<&[CustomerForecast]>,
    cap: usize,
) -> Result<MetricsReport> {
    if actual.is_empty() {
        return Err(Error::invalid("no customers to evaluate"));
    }
    let aligned = align(actual, forecasts, model)?;
    let y: Vec<u32> = actual.iter().map(|s| s.holdout_count).collect();
    let y_hat: Vec<u32> = aligned.iter().map(|f| f.count_pred).collect();
    let confusion = ConfusionMatrix::from_pairs(
        actual
            .iter()
            .zip(&aligned)
            .map(|(s, f)| (!s.actually_inactive(), !f.inactive_pred)),
    );
    let consistency = match reference {
        Some(r) => {
            let r: Vec<u32> = align(actual, r, "reference")?.iter().map(|f| f.count_pred).collect();
            Some(self::consistency(&r, &y_hat)?)
        }
        None => None,
    };
    Ok(MetricsReport {
        model: model.to_string(),
        customers: actual.len(),
        confusion,
        inactive_accuracy: accuracy(&confusion)?,
        multi_accuracy: multi_accuracy(&y, &y_hat)?,
        mae: mae_metric(&y, &y_hat)?,
        consistency,
        total_purchases: y_hat.iter().map(|&v| v as u64).sum(),
        total_expected: aligned.iter().map(|f| f.expected).sum(),
        actual_total: y.iter().map(|&v| v as u64).sum(),
        histogram: histogram_u32(&y_hat, cap)?,
    })
}

/// One row per report, in the Table-4 column layout.
pub fn write_metrics_csv(reports: &[MetricsReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "model",
        "inactive_accuracy",
        "multi_accuracy",
        "mae",
        "consistency",
        "total_purchases",
        "total_expected",
    ])?;
    for r in reports {
        w.write_record([
            r.model.clone(),
            r.inactive_accuracy.to_string(),
            r.multi_accuracy.to_string(),
            r.mae.to_string(),
            r.consistency.map(|c| c.to_string()).unwrap_or_default(),
            r.total_purchases.to_string(),
            r.total_expected.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Customer counts per repeat-purchase bin; `actual` first when given.
pub fn write_histogram_csv(
    actual: Option<&CountHistogram>,
    reports: &[MetricsReport],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let Some(first) = actual.or(reports.first().map(|r| &r.histogram)) else {
        return Err(Error::invalid("no histograms to write"));
    };
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["model".to_string()];
    header.extend(first.labels());
    w.write_record(&header)?;
    let rows = actual
        .map(|h| ("actual", h))
        .into_iter()
        .chain(reports.iter().map(|r| (r.model.as_str(), &r.histogram)));
    for (name, h) in rows {
        if h.cap != first.cap {
            return Err(Error::invalid("histograms with different caps"));
        }
        let mut rec = vec![name.to_string()];
        rec.extend(h.counts.iter().map(|c| c.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub const CORRELATION_METRICS: [&str; 4] = ["multi_accuracy", "mae", "total_purchases", "consistency"];

/// Pearson correlations across models. An entry is `None` when either
/// column has zero variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub metrics: Vec<String>,
    pub models: usize,
    pub values: Vec<Vec<Option<f64>>>,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::invalid("correlation needs at least two points"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Ok(None);
    }
    Ok(Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)))
}

pub fn metric_correlations(reports: &[MetricsReport]) -> Result<CorrelationMatrix> {
    if reports.len() < 3 {
        return Err(Error::invalid(format!("need at least 3 models, got {}", reports.len())));
    }
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); 4];
    for r in reports {
        let Some(c) = r.consistency else {
            return Err(Error::invalid(format!("model {} has no consistency value", r.model)));
        };
        columns[0].push(r.multi_accuracy);
        columns[1].push(r.mae);
        columns[2].push(r.total_purchases as f64);
        columns[3].push(c);
    }
    let mut values = vec![vec![None; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            values[i][j] = if i == j && pearson(&columns[i], &columns[i])?.is_some() {
                Some(1.0)
            } else {
                pearson(&columns[i], &columns[j])?
            };
        }
    }
    Ok(CorrelationMatrix {
        metrics: CORRELATION_METRICS.iter().map(|s| s.to_string()).collect(),
        models: reports.len(),
        values,
    })
}

/// Square CSV; undefined entries are written as `NA`. A trailing comment
/// notes how few models the correlations rest on.
pub fn write_correlations_csv(m: &CorrelationMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path)?;
    let mut header = vec!["metric".to_string()];
    header.extend(m.metrics.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in m.metrics.iter().zip(&m.values) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())));
        w.write_record(&rec)?;
    }
    w.write_record([format!("# pearson over {} models; small-sample estimate", m.models)])?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
