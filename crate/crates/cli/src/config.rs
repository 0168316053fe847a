//! Run configuration: selector thresholds, scene generation, and trainer
//! settings under one roof, loadable from JSON or flat `key=value` lines.

use dthcp::hgps::HgpsConfig;
use dthcp::synth::SynthConfig;
use dthcp::trainer::TrainerConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; per-scene seeds and head initialization derive from it.
    pub seed: u64,
    /// Number of scenes `synth` emits.
    pub scenes: usize,
    pub hgps: HgpsConfig,
    pub synth: SynthConfig,
    pub trainer: TrainerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 8,
            hgps: HgpsConfig::default(),
            synth: SynthConfig::default(),
            trainer: TrainerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.hgps.validate().map_err(CliError::from)?;
        self.synth.validate().map_err(CliError::from)?;
        self.trainer.validate().map_err(CliError::from)?;
        Ok(())
    }

    /// Accepts a JSON document (first non-space byte `{`) or flat
    /// `key=value` lines with dotted paths (`hgps.tau_low=0.25`). Values
    /// parse as JSON when possible, else as strings; `#` starts a comment.
    pub fn from_str(text: &str) -> Result<Self, CliError> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') {
            return serde_json::from_str(text)
                .map_err(|e| CliError::user(format!("bad JSON config: {e}")));
        }
        let mut root = serde_json::Map::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::user(format!("config line {} is not key=value", lineno + 1))
            })?;
            let parsed: serde_json::Value = serde_json::from_str(value.trim())
                .unwrap_or_else(|_| serde_json::Value::String(value.trim().to_string()));
            insert_path(&mut root, key.trim(), parsed)?;
        }
        serde_json::from_value(serde_json::Value::Object(root))
            .map_err(|e| CliError::user(format!("bad config: {e}")))
    }

    pub fn from_file<P: AsRef<Path>>(path: P) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(&path).map_err(|e| {
            CliError::user(format!("cannot read config {}: {e}", path.as_ref().display()))
        })?;
        Self::from_str(&text)
    }
}

fn insert_path(
    root: &mut serde_json::Map<String, serde_json::Value>,
    path: &str,
    value: serde_json::Value,
) -> Result<(), CliError> {
    let mut parts = path.split('.').peekable();
    let mut node = root;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            node.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(serde_json::Map::new()));
        node = entry
            .as_object_mut()
            .ok_or_else(|| CliError::user(format!("config key '{path}' nests into a scalar")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_json_and_key_value() {
        let json = r#"{ "seed": 7, "hgps": { "tau_low": 0.25 } }"#;
        let cfg = RunConfig::from_str(json).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.hgps.tau_low, 0.25);

        let flat = "seed=9\nscenes=3\nhgps.tau_high=0.75 # comment\nsynth.singles_range=[1,1]\n";
        let cfg = RunConfig::from_str(flat).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.scenes, 3);
        assert_eq!(cfg.hgps.tau_high, 0.75);
        assert_eq!(cfg.synth.singles_range, (1, 1));
        // untouched fields keep defaults
        assert_eq!(cfg.hgps.tau_low, HgpsConfig::default().tau_low);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(RunConfig::from_str("seed 9").is_err());
        assert!(RunConfig::from_str("{ bad json").is_err());
        assert!(RunConfig::from_str("hgps=3\nhgps.tau_low=0.2").is_err());
    }
}
