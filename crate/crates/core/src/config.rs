//! Run configuration: strict JSON with a schema version.

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{LabError, Result};
use crate::guidance::GuidanceConfig;
use crate::nets::NetConfig;
use crate::objectives::{AdaptiveWeight, Objective, TimeSamplerConfig};
use crate::optim::OptimConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    /// Round to the storage precision (identity for f64).
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }
}

fn default_log_every() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub dataset: DatasetSpec,
    pub net: NetConfig,
    pub objective: Objective,
    #[serde(default)]
    pub guidance: Option<GuidanceConfig>,
    #[serde(default)]
    pub optimizer: OptimConfig,
    #[serde(default)]
    pub time_sampler: TimeSamplerConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub adaptive_weight: AdaptiveWeight,
    /// Metrics row every this many steps.
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    /// Intermediate checkpoint period; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Fill the `wall_ms` metrics column. Off by default so that metrics
    /// files are reproducible byte for byte.
    #[serde(default)]
    pub record_wall_time: bool,
}

fn at(path: &str, e: LabError) -> LabError {
    match e {
        LabError::Contract(msg) => LabError::Config { path: path.into(), msg },
        other => other,
    }
}

fn bad(path: &str, msg: impl Into<String>) -> LabError {
    LabError::Config { path: path.into(), msg: msg.into() }
}

impl RunConfig {
    /// Parse and validate; errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            LabError::Config { path, msg: e.into_inner().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(bad(
                "schema_version",
                format!("unsupported schema version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        self.dataset.validate().map_err(|e| at("dataset", e))?;
        self.net.validate().map_err(|e| at("net", e))?;
        self.optimizer.validate().map_err(|e| at("optimizer", e))?;
        self.time_sampler.validate().map_err(|e| at("time_sampler", e))?;
        self.adaptive_weight.validate().map_err(|e| at("adaptive_weight", e))?;
        if self.net.data_dim != self.dataset.dim {
            return Err(bad("net.data_dim", format!("{} != dataset.dim {}", self.net.data_dim, self.dataset.dim)));
        }
        if self.net.num_classes != self.dataset.num_classes() {
            return Err(bad(
                "net.num_classes",
                format!("{} but the dataset has {} labeled classes", self.net.num_classes, self.dataset.num_classes()),
            ));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be >= 1"));
        }
        if self.log_every == 0 {
            return Err(bad("log_every", "must be >= 1"));
        }
        if self.objective == Objective::ImfAuxhead && self.net.aux_head_depth == 0 {
            return Err(bad("net.aux_head_depth", "imf_auxhead needs aux_head_depth >= 1"));
        }
        if let Some(g) = &self.guidance {
            g.validate().map_err(|e| at("guidance", e))?;
            if self.objective != Objective::ImfBoundary {
                return Err(bad("objective", "guided training is implemented for imf_boundary"));
            }
            if !self.net.omega_conditioning {
                return Err(bad("net.omega_conditioning", "guidance needs omega conditioning"));
            }
            if self.net.num_classes == 0 {
                return Err(bad("dataset.labeled", "guidance needs class labels"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "dataset": {"kind": {"type": "gaussian", "spec": {"mu": [2.0], "sigma_x": 0.0}}, "dim": 1},
        "net": {"arch": "mlp", "depth": 2, "width": 16, "data_dim": 1},
        "objective": "imf_boundary",
        "steps": 10,
        "batch_size": 8,
        "seed": 1
    }"#;

    #[test]
    fn minimal_parses_with_defaults() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.optimizer.betas, [0.9, 0.95]);
        assert_eq!(c.adaptive_weight, AdaptiveWeight { p: 1.0, c: 1e-3 });
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_field_reports_path() {
        let text = MINIMAL.replace("\"width\": 16", "\"width\": 16, \"wdth\": 3");
        match RunConfig::from_json(&text).unwrap_err() {
            LabError::Config { path, msg } => {
                assert_eq!(path, "net.wdth");
                assert!(msg.contains("wdth"), "{msg}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn type_error_reports_path() {
        let text = MINIMAL.replace("\"depth\": 2", "\"depth\": \"two\"");
        match RunConfig::from_json(&text).unwrap_err() {
            LabError::Config { path, .. } => assert_eq!(path, "net.depth"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn semantic_errors() {
        let wrong_version = MINIMAL.replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(matches!(RunConfig::from_json(&wrong_version), Err(LabError::Config { path, .. }) if path == "schema_version"));
        let dim = MINIMAL.replace("\"data_dim\": 1", "\"data_dim\": 2");
        assert!(matches!(RunConfig::from_json(&dim), Err(LabError::Config { path, .. }) if path == "net.data_dim"));
        let depth = MINIMAL.replace("\"depth\": 2", "\"depth\": 0");
        assert!(matches!(RunConfig::from_json(&depth), Err(LabError::Config { path, .. }) if path == "net"));
    }
}
