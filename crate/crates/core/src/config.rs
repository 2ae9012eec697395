//! One JSON document tying together model parameters, actuation tables,
//! controller settings and plant options. Every field has an embedded
//! default carrying the published constants, so the tool runs with no
//! config file at all.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuation::{EmptyTable, FillTable, SetpointGrid};
use crate::control::{OcpConfig, RbcRuleSet};
use crate::lm::{LmParams, LmState};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Multiplicative plant-model mismatch applied to the realized actuator
/// flows, emulating an imperfect physical response. Off by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantConfig {
    /// Relative amplitude of the perturbation (0 disables it).
    pub perturbation_amplitude: f64,
    pub perturbation_seed: u64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            perturbation_amplitude: 0.0,
            perturbation_seed: 7,
        }
    }
}

/// Full application configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub model: LmParams,
    pub grid: SetpointGrid,
    pub fill_table: FillTable,
    pub empty_table: EmptyTable,
    pub ocp: OcpConfig,
    pub rbc: RbcRuleSet,
    pub plant: PlantConfig,
    pub initial: LmState,
}

impl AppConfig {
    pub fn from_json(raw: &str) -> Result<Self, ConfigError> {
        let config: AppConfig = serde_json::from_str(raw).map_err(|e| ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path)?;
        Self::from_json(&raw)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        // Re-run the table constructors so documents deserialized straight
        // into the structs get the same checks (row counts, finiteness,
        // ordered discontinuity points).
        FillTable::new(self.fill_table.rows().to_vec(), &self.grid)
            .map_err(|e| ConfigError::Invalid(format!("fill table: {e}")))?;
        EmptyTable::new(self.empty_table.rows().to_vec(), &self.grid)
            .map_err(|e| ConfigError::Invalid(format!("empty table: {e}")))?;
        self.ocp
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.rbc
            .validate(&self.grid)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.plant.perturbation_amplitude.is_finite()
            && (0.0..1.0).contains(&self.plant.perturbation_amplitude))
        {
            return Err(ConfigError::Invalid(format!(
                "perturbation_amplitude must be in [0, 1), got {}",
                self.plant.perturbation_amplitude
            )));
        }
        self.initial
            .validate(&self.model)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Canonical pretty-printed form; field order is fixed by the struct
    /// definitions, so the output is stable across runs.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        AppConfig::default().validate().unwrap();
    }

    #[test]
    fn json_roundtrip_is_semantically_identical() {
        let config = AppConfig::default();
        let dumped = config.canonical_json();
        let reloaded = AppConfig::from_json(&dumped).unwrap();
        assert_eq!(config, reloaded);
        let a: serde_json::Value = serde_json::from_str(&dumped).unwrap();
        let b: serde_json::Value = serde_json::from_str(&reloaded.canonical_json()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let raw = r#"{ "model": {}, "mystery_knob": 3 }"#;
        let err = AppConfig::from_json(raw).unwrap_err();
        match err {
            ConfigError::Parse { line, message, .. } => {
                assert_eq!(line, 1);
                assert!(message.contains("mystery_knob"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn partial_overrides_keep_defaults() {
        let raw = r#"{ "ocp": { "horizon": 6 } }"#;
        let config = AppConfig::from_json(raw).unwrap();
        assert_eq!(config.ocp.horizon, 6);
        assert_eq!(config.ocp.dt_s, 300.0);
        assert_eq!(config.model.sur_cap, 6.0);
    }

    #[test]
    fn bad_rule_opening_is_rejected() {
        let raw = r#"{ "rbc": { "fill_bands": [ { "q_in5_upper": 2.0, "opening_pct": 37.0 } ] } }"#;
        let err = AppConfig::from_json(raw).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }
}
