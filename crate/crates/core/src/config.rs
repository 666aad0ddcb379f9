//! Flat key-value run configuration and the desk-scale preset.
//!
//! A config file is TOML with top-level keys only. Every key names a field of
//! [`NastConfig`] or [`TrainConfig`]; `seed` sets both seeds.

use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use crate::augment::AugmentSpec;
use crate::error::{NastError, Result};
use crate::featureio::SyntheticSpec;
use crate::model::NastConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: NastConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Every resolved key, as written to run manifests.
    pub fn flat(&self) -> Result<Map<String, Value>> {
        let mut out = Map::new();
        for v in [serde_json::to_value(&self.model)?, serde_json::to_value(&self.train)?] {
            if let Value::Object(m) = v {
                out.extend(m);
            }
        }
        Ok(out)
    }

    /// Applies `key = value` overrides to a copy of `self`.
    pub fn with_overrides(&self, overrides: &Map<String, Value>) -> Result<RunConfig> {
        let mut model = serde_json::to_value(&self.model)?;
        let mut train = serde_json::to_value(&self.train)?;
        for (key, value) in overrides {
            let mut hit = false;
            for target in [&mut model, &mut train] {
                let obj = target.as_object_mut().unwrap();
                if obj.contains_key(key) {
                    obj.insert(key.clone(), value.clone());
                    hit = true;
                }
            }
            if !hit {
                return Err(NastError::InvalidParameter(format!("unknown config key {key:?}")));
            }
        }
        let parse_err = |what: &str, e: serde_json::Error| NastError::InvalidParameter(format!("{what} config: {e}"));
        let cfg = RunConfig {
            model: serde_json::from_value(model).map_err(|e| parse_err("model", e))?,
            train: serde_json::from_value(train).map_err(|e| parse_err("train", e))?,
        };
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Parses flat TOML text as overrides on top of `self`.
    pub fn with_toml(&self, text: &str) -> Result<RunConfig> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| NastError::InvalidParameter(format!("config file: {e}")))?;
        let json = serde_json::to_value(&table)?;
        match json {
            Value::Object(m) => {
                if let Some((k, _)) = m.iter().find(|(_, v)| v.is_object()) {
                    return Err(NastError::InvalidParameter(format!(
                        "config file must be flat; section or table under {k:?}"
                    )));
                }
                self.with_overrides(&m)
            }
            _ => unreachable!("a TOML document is a table"),
        }
    }

    pub fn with_toml_file(&self, path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| NastError::io(path, e))?;
        self.with_toml(&text)
    }
}

/// The `seed` key of a flat TOML config file, if present. Other keys are not
/// checked here.
pub fn seed_from_toml_file(path: impl AsRef<Path>) -> Result<Option<u64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| NastError::io(path, e))?;
    let table: toml::Table =
        toml::from_str(&text).map_err(|e| NastError::InvalidParameter(format!("config file: {e}")))?;
    match table.get("seed") {
        None => Ok(None),
        Some(toml::Value::Integer(s)) if *s >= 0 => Ok(Some(*s as u64)),
        Some(v) => Err(NastError::InvalidParameter(format!("config seed must be a non-negative integer, got {v}"))),
    }
}

/// The desk-scale configuration: 8 phonemes, 2 speakers, 200 utterances of
/// 16-dimensional features, 8 units, 2000 steps, seed 7.
pub fn preset_desk() -> (SyntheticSpec, NastConfig, TrainConfig) {
    let seed = 7;
    let synth = SyntheticSpec {
        num_utterances: 200,
        num_phonemes: 8,
        num_speakers: 2,
        feature_dim: 16,
        seed,
        ..SyntheticSpec::default()
    };
    let model = NastConfig {
        tau_decay_steps: 2000,
        seed,
        ..NastConfig::new(16, 8)
    };
    let train = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 16,
        max_steps: 2000,
        augment_specs: vec![
            AugmentSpec::feature_noise(0.1, 0.5).expect("valid range"),
            AugmentSpec::feature_warp(0.9, 1.1).expect("valid range"),
        ],
        checkpoint_every: 500,
        seed,
        ..TrainConfig::default()
    };
    (synth, model, train)
}
