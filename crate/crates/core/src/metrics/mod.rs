//! Posterior-quality metrics.

mod c2st;
mod mmd;
mod sbc;

use serde::{Deserialize, Serialize};

pub use c2st::{c2st, C2stConfig};
pub use mmd::{median_bandwidth, mmd2_unbiased};
pub use sbc::{avg_chi2, ks_test, rank_of, sbc_ranks, uniformity_test, Chi2Summary, SbcResult};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Ad(#[from] crate::ad::AdError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    #[serde(default)]
    pub uncertainty: Option<f64>,
    /// Settings the value depends on (classifier size, bandwidth, bins).
    #[serde(default)]
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn new(metric: &str, value: f64) -> Self {
        Self { metric: metric.into(), value, uncertainty: None, config: serde_json::Value::Null }
    }

    pub fn with_uncertainty(mut self, u: f64) -> Self {
        self.uncertainty = Some(u);
        self
    }

    pub fn with_config(mut self, config: serde_json::Value) -> Self {
        self.config = config;
        self
    }

    pub fn json_line(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }
}

/// `metric,value,uncertainty` rows with a header.
pub fn reports_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("metric,value,uncertainty\n");
    for r in reports {
        let u = r.uncertainty.map(|u| u.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", r.metric, r.value, u));
    }
    out
}

pub(crate) fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>], min: usize) -> Result<usize, MetricError> {
    if a.len() < min || b.len() < min {
        return Err(MetricError::Input(format!("need at least {min} samples per set")));
    }
    let d = a[0].len();
    if d == 0 || a.iter().chain(b).any(|r| r.len() != d) {
        return Err(MetricError::Input("samples must share a positive dimension".into()));
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_json() {
        let r = MetricReport::new("c2st", 0.51).with_uncertainty(0.01);
        assert_eq!(reports_csv(&[r.clone()]), "metric,value,uncertainty\nc2st,0.51,0.01\n");
        let back: MetricReport = serde_json::from_str(&r.json_line()).unwrap();
        assert_eq!(back, r);
    }
}
