//! Error metrics, payment-time entropy and grouped reports.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ElementType, HOURS_PER_DAY};
use crate::error::{IgtError, Result};

fn check_pair(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Err(IgtError::Invalid("metric over an empty sample".into()));
    }
    if y.len() != y_hat.len() {
        return Err(IgtError::Invalid(format!(
            "{} labels but {} predictions",
            y.len(),
            y_hat.len()
        )));
    }
    Ok(())
}

/// Mean absolute error in hours.
pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Mean absolute percentage error, as a fraction.
pub fn mape(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    if y.contains(&0.0) {
        return Err(IgtError::Invalid("MAPE undefined for a zero label".into()));
    }
    Ok(y.iter()
        .zip(y_hat)
        .map(|(a, b)| ((a - b) / a).abs())
        .sum::<f64>()
        / y.len() as f64)
}

/// Total absolute error over total label mass, as a fraction.
pub fn mare(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    let total: f64 = y.iter().sum();
    if total == 0.0 {
        return Err(IgtError::Invalid(
            "MARE undefined for zero label mass".into(),
        ));
    }
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / total)
}

/// Shannon entropy (nats) of an empirical distribution given as counts.
pub fn entropy(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            p * (n as f64 / c as f64).ln()
        })
        .sum()
}

/// One-hour label bin.
pub fn label_bin(hours: f64) -> i64 {
    hours.floor() as i64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HourEntropy {
    pub hour: usize,
    /// `None` for a slot with no orders.
    pub entropy_nats: Option<f64>,
    pub count: usize,
}

/// Entropy of the one-hour-binned label distribution per payment hour.
pub fn entropy_by_payment_time(hours_of_day: &[usize], labels: &[f64]) -> Result<Vec<HourEntropy>> {
    if hours_of_day.len() != labels.len() {
        return Err(IgtError::Invalid(
            "hours and labels differ in length".into(),
        ));
    }
    let mut bins: Vec<BTreeMap<i64, usize>> = vec![BTreeMap::new(); HOURS_PER_DAY];
    for (&h, &y) in hours_of_day.iter().zip(labels) {
        if h >= HOURS_PER_DAY {
            return Err(IgtError::Invalid(format!("hour {h} out of range")));
        }
        *bins[h].entry(label_bin(y)).or_default() += 1;
    }
    Ok(bins
        .iter()
        .enumerate()
        .map(|(hour, b)| {
            let counts: Vec<usize> = b.values().copied().collect();
            let count = counts.iter().sum();
            HourEntropy {
                hour,
                entropy_nats: (count > 0).then(|| entropy(&counts)),
                count,
            }
        })
        .collect())
}

/// Count-weighted mean of per-hour entropies over occupied slots.
pub fn mean_entropy(rows: &[HourEntropy]) -> Option<f64> {
    let n: usize = rows
        .iter()
        .filter(|r| r.entropy_nats.is_some())
        .map(|r| r.count)
        .sum();
    (n > 0).then(|| {
        rows.iter()
            .filter_map(|r| r.entropy_nats.map(|e| e * r.count as f64))
            .sum::<f64>()
            / n as f64
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub mape: f64,
    pub mare: f64,
    pub count: usize,
}

impl Metrics {
    pub fn compute(y: &[f64], y_hat: &[f64]) -> Result<Self> {
        Ok(Self {
            mae: mae(y, y_hat)?,
            mape: mape(y, y_hat)?,
            mare: mare(y, y_hat)?,
            count: y.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub key: String,
    pub count: usize,
    /// Absent for an empty group.
    pub metrics: Option<Metrics>,
    pub low_confidence: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: Metrics,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<GroupMetrics>,
}

/// Order-count bins for one element type; `bounds` are the inclusive upper
/// edges after the unseen bin, the last bin is open.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub kind: ElementType,
    pub bounds: Vec<usize>,
    pub min_count: usize,
}

pub const DEFAULT_MIN_BIN: usize = 50;

impl BinSpec {
    pub fn standard(kind: ElementType) -> Self {
        let bounds = match kind {
            ElementType::Retailer => vec![100, 500],
            _ => vec![500, 1000],
        };
        Self {
            kind,
            bounds,
            min_count: DEFAULT_MIN_BIN,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.bounds.len() + 2
    }

    pub fn bin_of(&self, n: usize) -> usize {
        if n == 0 {
            return 0;
        }
        1 + self.bounds.iter().take_while(|&&b| n > b).count()
    }

    pub fn labels(&self) -> Vec<String> {
        let mut out = vec!["unseen".to_string()];
        let mut lo = 0;
        for &b in &self.bounds {
            out.push(format!("({lo},{b}]"));
            lo = b;
        }
        out.push(format!("({lo},inf)"));
        out
    }
}

fn group_metrics(
    labels: Vec<String>,
    members: Vec<Vec<usize>>,
    y: &[f64],
    y_hat: &[f64],
    min_count: usize,
) -> Result<Vec<GroupMetrics>> {
    labels
        .into_iter()
        .zip(members)
        .map(|(key, idx)| {
            let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let ps: Vec<f64> = idx.iter().map(|&i| y_hat[i]).collect();
            let metrics = if idx.is_empty() {
                None
            } else {
                Some(Metrics::compute(&ys, &ps)?)
            };
            Ok(GroupMetrics {
                key,
                count: idx.len(),
                metrics,
                low_confidence: idx.len() < min_count,
            })
        })
        .collect()
}

/// Per-bin metrics for evaluated orders `orders` (dataset indices) with
/// predictions `y_hat`; element order counts come from `train` only.
pub fn binned_report(
    ds: &Dataset,
    train: std::ops::Range<usize>,
    orders: &[usize],
    y_hat: &[f64],
    spec: &BinSpec,
) -> Result<MetricsReport> {
    let mut counts = vec![0usize; ds.interner(spec.kind).len()];
    for o in &ds.orders()[train] {
        counts[o.element(spec.kind)] += 1;
    }
    let y: Vec<f64> = orders
        .iter()
        .map(|&i| ds.orders()[i].delivery_hours)
        .collect();
    let mut members = vec![Vec::new(); spec.n_bins()];
    for (pos, &i) in orders.iter().enumerate() {
        let n = counts[ds.orders()[i].element(spec.kind)];
        members[spec.bin_of(n)].push(pos);
    }
    Ok(MetricsReport {
        overall: Metrics::compute(&y, y_hat)?,
        groups: group_metrics(spec.labels(), members, &y, y_hat, spec.min_count)?,
    })
}

/// Per-payment-hour metrics (24 groups).
pub fn hourly_report(ds: &Dataset, orders: &[usize], y_hat: &[f64]) -> Result<MetricsReport> {
    let y: Vec<f64> = orders
        .iter()
        .map(|&i| ds.orders()[i].delivery_hours)
        .collect();
    let mut members = vec![Vec::new(); HOURS_PER_DAY];
    for (pos, &i) in orders.iter().enumerate() {
        members[ds.orders()[i].hour()].push(pos);
    }
    let labels = (0..HOURS_PER_DAY).map(|h| format!("{h:02}")).collect();
    Ok(MetricsReport {
        overall: Metrics::compute(&y, y_hat)?,
        groups: group_metrics(labels, members, &y, y_hat, 0)?,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v}"))
}

/// `group_key,count,mae_hours,mape_pct,mare_pct`; empty groups leave the
/// metric cells blank.
pub fn write_groups_csv<W: Write>(report: &MetricsReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["group_key", "count", "mae_hours", "mape_pct", "mare_pct"])?;
    for g in &report.groups {
        let m = g.metrics.as_ref();
        w.write_record([
            g.key.clone(),
            g.count.to_string(),
            fmt_opt(m.map(|m| m.mae)),
            fmt_opt(m.map(|m| m.mape * 100.0)),
            fmt_opt(m.map(|m| m.mare * 100.0)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `hour,entropy_nats,count`
pub fn write_entropy_csv<W: Write>(rows: &[HourEntropy], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["hour", "entropy_nats", "count"])?;
    for r in rows {
        w.write_record([
            r.hour.to_string(),
            fmt_opt(r.entropy_nats),
            r.count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
