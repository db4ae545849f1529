//! Run metrics and their CSV form.
//!
//! A log is an ordered list of `(iteration, metric, value)` rows; the CSV
//! emission is that list verbatim under a header row, so `parse(emit(log))
//! == log` and identical runs produce byte-identical files. Injection
//! events are ordinary rows under the `injection_scale` metric.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::path::Path;

pub const INJECTION_METRIC: &str = "injection_scale";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub iteration: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn new() -> Self {
        MetricsLog::default()
    }

    /// Appends a row; iterations must be strictly increasing per metric.
    pub fn push(&mut self, iteration: u64, metric: &str, value: f64) {
        debug_assert!(!metric.contains(',') && !metric.contains('\n'));
        if let Some(last) = self.rows.iter().rev().find(|r| r.metric == metric) {
            assert!(
                last.iteration < iteration,
                "metric {metric} iteration {iteration} not after {}",
                last.iteration
            );
        }
        self.rows.push(MetricRow { iteration, metric: metric.to_string(), value });
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// All `(iteration, value)` points of one metric, in order.
    pub fn series(&self, metric: &str) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.metric == metric)
            .map(|r| (r.iteration, r.value))
            .collect()
    }

    pub fn last_value(&self, metric: &str) -> Option<f64> {
        self.rows.iter().rev().find(|r| r.metric == metric).map(|r| r.value)
    }

    pub fn value_at(&self, metric: &str, iteration: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.iteration == iteration)
            .map(|r| r.value)
    }

    pub fn injection_events(&self) -> Vec<(u64, f64)> {
        self.series(INJECTION_METRIC)
    }

    /// Merges per-worker partial logs into one canonically ordered log
    /// (by iteration, then metric name). Each (iteration, metric) pair
    /// must be unique across the parts.
    pub fn merge(parts: Vec<MetricsLog>) -> MetricsLog {
        let mut rows: Vec<MetricRow> = parts.into_iter().flat_map(|p| p.rows).collect();
        rows.sort_by(|a, b| (a.iteration, &a.metric).cmp(&(b.iteration, &b.metric)));
        let mut seen: HashMap<(u64, String), ()> = HashMap::new();
        for r in &rows {
            assert!(
                seen.insert((r.iteration, r.metric.clone()), ()).is_none(),
                "duplicate metric row ({}, {})",
                r.iteration,
                r.metric
            );
        }
        MetricsLog { rows }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,metric,value\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.iteration, r.metric, r.value));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<MetricsLog> {
        let mut lines = text.lines();
        match lines.next() {
            Some("iteration,metric,value") => {}
            other => {
                return Err(Error::InvalidArgument(format!(
                    "bad metrics CSV header: {other:?}"
                )))
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut parts = line.splitn(3, ',');
            let (it, metric, value) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "metrics CSV line {}: expected 3 fields",
                        i + 2
                    )))
                }
            };
            let iteration = it.parse::<u64>().map_err(|_| {
                Error::InvalidArgument(format!("metrics CSV line {}: bad iteration '{it}'", i + 2))
            })?;
            let value = value.parse::<f64>().map_err(|_| {
                Error::InvalidArgument(format!("metrics CSV line {}: bad value '{value}'", i + 2))
            })?;
            rows.push(MetricRow { iteration, metric: metric.to_string(), value });
        }
        Ok(MetricsLog { rows })
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<MetricsLog> {
        let text = std::fs::read_to_string(path)?;
        MetricsLog::from_csv(&text)
    }
}
