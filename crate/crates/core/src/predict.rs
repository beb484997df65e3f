//! Holdout forecasts: inactive status, expected and integer repeat purchases,
//! and per-count customer histograms.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::CalibrationSummary;
use crate::error::{Error, Result};
use crate::model::{self, IndividualParams};

/// How expected purchases become an integer forecast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    /// Round half away from zero.
    #[default]
    Nearest,
    Floor,
}

impl Rounding {
    pub fn apply(self, expected: f64) -> u32 {
        let v = match self {
            Rounding::Nearest => expected.round(),
            Rounding::Floor => expected.floor(),
        };
        v.clamp(0.0, u32::MAX as f64) as u32
    }
}

impl FromStr for Rounding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "nearest" | "round" => Ok(Rounding::Nearest),
            "floor" => Ok(Rounding::Floor),
            other => Err(Error::invalid(format!("unknown rounding mode `{other}` (nearest|floor)"))),
        }
    }
}

impl fmt::Display for Rounding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rounding::Nearest => "nearest",
            Rounding::Floor => "floor",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomerForecast {
    pub customer_id: String,
    pub p_alive: f64,
    pub inactive_pred: bool,
    pub expected: f64,
    pub count_pred: u32,
}

/// Forecast for one customer over a holdout of `h` weeks. The customer is
/// predicted inactive when `p_alive < threshold`.
pub fn forecast(
    s: &CalibrationSummary,
    p: &IndividualParams,
    h: f64,
    threshold: f64,
    rounding: Rounding,
) -> Result<CustomerForecast> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold {threshold} outside [0, 1]")));
    }
    let p_alive = model::p_alive(s, p)?;
    let expected = model::expected_holdout_purchases(s, p, h)?;
    Ok(CustomerForecast {
        customer_id: s.customer_id.clone(),
        p_alive,
        inactive_pred: p_alive < threshold,
        expected,
        count_pred: rounding.apply(expected),
    })
}

/// Forecasts for a cohort; `params` is aligned with `summaries`.
pub fn forecast_all(
    summaries: &[CalibrationSummary],
    params: &[IndividualParams],
    h: f64,
    threshold: f64,
    rounding: Rounding,
) -> Result<Vec<CustomerForecast>> {
    if summaries.len() != params.len() {
        return Err(Error::LengthMismatch(summaries.len(), params.len()));
    }
    summaries
        .iter()
        .zip(params)
        .map(|(s, p)| forecast(s, p, h, threshold, rounding))
        .collect()
}

pub fn write_forecasts_csv(forecasts: &[CustomerForecast], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["customer_id", "p_alive", "inactive_pred", "expected", "count_pred"])?;
    for f in forecasts {
        w.write_record([
            f.customer_id.clone(),
            f.p_alive.to_string(),
            u8::from(f.inactive_pred).to_string(),
            f.expected.to_string(),
            f.count_pred.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn parse_bool(v: &str) -> Option<bool> {
    match v.trim() {
        "1" | "true" | "TRUE" | "True" => Some(true),
        "0" | "false" | "FALSE" | "False" => Some(false),
        _ => None,
    }
}

/// Reads a forecast CSV. `expected` may be omitted by external models, in
/// which case it is taken to equal `count_pred`.
pub fn read_forecasts_csv(path: impl AsRef<Path>) -> Result<Vec<CustomerForecast>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(id), Some(inactive), Some(count)) = (col("customer_id"), col("inactive_pred"), col("count_pred")) else {
        return Err(Error::MalformedRow {
            path: path.to_path_buf(),
            line: 1,
            message: "need customer_id, inactive_pred and count_pred columns".into(),
        });
    };
    let p_alive_col = col("p_alive");
    let expected_col = col("expected");
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let bad = |message: String| Error::MalformedRow {
            path: path.to_path_buf(),
            line,
            message,
        };
        let field = |c: usize| row.get(c).unwrap_or("").trim();
        let count_pred: u32 = field(count)
            .parse()
            .map_err(|_| bad(format!("bad count_pred `{}`", field(count))))?;
        let inactive_pred = parse_bool(field(inactive)).ok_or_else(|| bad(format!("bad inactive_pred `{}`", field(inactive))))?;
        let num = |c: Option<usize>, default: f64| -> Result<f64> {
            match c.map(field) {
                None | Some("") => Ok(default),
                Some(v) => v.parse().map_err(|_| bad(format!("bad number `{v}`"))),
            }
        };
        out.push(CustomerForecast {
            customer_id: field(id).to_string(),
            p_alive: num(p_alive_col, f64::NAN)?,
            inactive_pred,
            expected: num(expected_col, count_pred as f64)?,
            count_pred,
        });
    }
    Ok(out)
}

/// Customers per repeat-purchase count, with a final `cap+` overflow bin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountHistogram {
    pub cap: usize,
    /// `counts[k]` for `k < cap`, then the overflow bin at index `cap`.
    pub counts: Vec<u64>,
}

impl CountHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.cap)
            .map(|k| k.to_string())
            .chain(std::iter::once(format!("{}+", self.cap)))
            .collect()
    }
}

pub fn histogram(counts: &[i64], cap: usize) -> Result<CountHistogram> {
    if cap == 0 {
        return Err(Error::invalid("histogram cap must be positive"));
    }
    let mut bins = vec![0u64; cap + 1];
    for &c in counts {
        if c < 0 {
            return Err(Error::invalid(format!("negative count {c}")));
        }
        bins[(c as usize).min(cap)] += 1;
    }
    Ok(CountHistogram { cap, counts: bins })
}

pub fn histogram_u32(counts: &[u32], cap: usize) -> Result<CountHistogram> {
    histogram(&counts.iter().map(|&c| c as i64).collect::<Vec<_>>(), cap)
}
