use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::error::{Error, Result};

/// Scalar metrics of one model, as stored in the metrics sidecar.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ntp_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_count: Option<f64>,
    /// Human resemblance to the L1 group, in percent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resemblance_l1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resemblance_l2: Option<f64>,
    /// Any further per-model numbers.
    #[serde(flatten)]
    pub extra: BTreeMap<String, f64>,
}

/// `{model_name: {ntp_loss, param_count, resemblance_l1, resemblance_l2, ...}}`
pub type MetricsSidecar = BTreeMap<String, ModelMetrics>;

pub fn load_metrics(path: impl AsRef<Path>) -> Result<MetricsSidecar> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })
}

pub fn write_metrics(metrics: &MetricsSidecar, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(metrics).expect("metrics serialize");
    bytes.push(b'\n');
    write_atomic(path.as_ref(), &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extra_fields_survive() {
        let text = r#"{"llama-7b":{"ntp_loss":0.2408,"param_count":7e9,"resemblance_l1":53.04,"mmlu":35.1}}"#;
        let m: MetricsSidecar = serde_json::from_str(text).unwrap();
        let e = &m["llama-7b"];
        assert_eq!(e.ntp_loss, Some(0.2408));
        assert_eq!(e.resemblance_l2, None);
        assert_eq!(e.extra["mmlu"], 35.1);
        let again: MetricsSidecar = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(again, m);
    }
}
