//! Flat JSON run configuration: every trainer key plus paths, evaluation
//! settings, ablation arms and synthetic-data parameters.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use xc_core::TrainConfig;

use crate::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Exact,
    Anns,
    Both,
}

/// Settings outside the trainer itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunExtras {
    /// Training split (XC text or binary cache). Synthetic data when absent.
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// XC text file with one row per label.
    pub label_features_path: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Fit TF-IDF weights on the training split and apply them to both.
    pub tfidf: bool,
    /// Restrict to this many randomly drawn labels (0 keeps all).
    pub label_subset: usize,
    pub ks: Vec<usize>,
    pub eval_mode: EvalMode,
    pub propensity_a: f64,
    pub propensity_b: f64,
    /// Ablation arms: strategy names or `full-loss`.
    pub arms: Vec<String>,
    pub synth_n_points: usize,
    pub synth_n_features: usize,
    pub synth_n_labels: usize,
    pub synth_labels_per_point: usize,
    pub synth_noise: f64,
    pub synth_seed: u64,
    /// Also write binary caches from `gen-synth`.
    pub binary_cache: bool,
    pub recall_k: usize,
    pub recall_queries: usize,
}

impl Default for RunExtras {
    fn default() -> Self {
        Self {
            train_path: None,
            test_path: None,
            label_features_path: None,
            checkpoint: None,
            tfidf: false,
            label_subset: 0,
            ks: vec![1, 3, 5],
            eval_mode: EvalMode::Exact,
            propensity_a: xc_core::eval::DEFAULT_PROPENSITY_A,
            propensity_b: xc_core::eval::DEFAULT_PROPENSITY_B,
            arms: vec!["random-only".into(), "stale-hard".into(), "mixture".into()],
            synth_n_points: 2000,
            synth_n_features: 512,
            synth_n_labels: 500,
            synth_labels_per_point: 5,
            synth_noise: 0.05,
            synth_seed: 1,
            binary_cache: false,
            recall_k: 10,
            recall_queries: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub extras: RunExtras,
}

fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("--set expects key=value, got `{raw}`")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError(format!("--set has an empty key in `{raw}`")).into());
    }
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.to_string(), value))
}

fn extras_keys() -> Vec<String> {
    match serde_json::to_value(RunExtras::default()).expect("extras serialize") {
        Value::Object(m) => m.keys().cloned().collect(),
        _ => unreachable!("extras serialize to an object"),
    }
}

impl RunConfig {
    /// Every accepted key.
    pub fn keys() -> Vec<String> {
        let mut k = TrainConfig::keys();
        k.extend(extras_keys());
        k.sort();
        k
    }

    /// Reads the optional config file, applies `--set` overrides in order and
    /// rejects unknown keys.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut map = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError(format!("cannot read config {}: {e}", p.display())))?;
                match serde_json::from_str::<Value>(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => return Err(ConfigError(format!("config {} is not a JSON object", p.display())).into()),
                    Err(e) => return Err(ConfigError(format!("config {} is not valid JSON: {e}", p.display())).into()),
                }
            }
            None => Map::new(),
        };
        for raw in overrides {
            let (k, v) = parse_override(raw)?;
            map.insert(k, v);
        }
        Self::from_map(map)
    }

    pub fn from_map(map: Map<String, Value>) -> Result<Self> {
        let train_keys = TrainConfig::keys();
        let extra_keys = extras_keys();
        let mut train = Map::new();
        let mut extras = Map::new();
        for (k, v) in map {
            if train_keys.contains(&k) {
                train.insert(k, v);
            } else if extra_keys.contains(&k) {
                extras.insert(k, v);
            } else {
                return Err(ConfigError(format!(
                    "unknown config key `{k}` (accepted: {})",
                    Self::keys().join(", ")
                ))
                .into());
            }
        }
        let train: TrainConfig = serde_json::from_value(Value::Object(train))
            .map_err(|e| ConfigError(format!("bad trainer setting: {e}")))?;
        let extras: RunExtras =
            serde_json::from_value(Value::Object(extras)).map_err(|e| ConfigError(format!("bad run setting: {e}")))?;
        if extras.ks.is_empty() || extras.ks.contains(&0) {
            return Err(ConfigError("ks must be a non-empty list of positive cut-offs".into()).into());
        }
        Ok(Self { train, extras })
    }

    /// Resolved configuration as one flat JSON object.
    pub fn to_json(&self) -> Value {
        let mut map = match serde_json::to_value(&self.train).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        if let Value::Object(m) = serde_json::to_value(&self.extras).expect("extras serialize") {
            map.extend(m);
        }
        Value::Object(map)
    }

    /// Fails with a data error naming the first input path that does not exist.
    pub fn check_inputs(&self, need_checkpoint: bool) -> Result<()> {
        let e = &self.extras;
        if need_checkpoint && e.checkpoint.is_none() {
            return Err(ConfigError("this command needs `checkpoint`".into()).into());
        }
        for p in [&e.train_path, &e.test_path, &e.label_features_path, &e.checkpoint]
            .into_iter()
            .flatten()
        {
            if !p.is_file() {
                return Err(anyhow::Error::new(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("input file {} does not exist", p.display()),
                )));
            }
        }
        Ok(())
    }
}

/// Creates the output directory.
pub fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_unknown_keys() {
        let c = RunConfig::load(
            None,
            &["epochs=3".into(), "strategy=random-only".into(), "ks=[1,2]".into()],
        )
        .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.extras.ks, vec![1, 2]);
        let err = RunConfig::load(None, &["epoch=3".into()]).unwrap_err();
        assert!(err.downcast_ref::<ConfigError>().is_some());
        assert!(RunConfig::load(None, &["noequals".into()]).is_err());
        assert!(RunConfig::load(None, &["ks=[]".into()]).is_err());
        let back = RunConfig::from_map(c.to_json().as_object().unwrap().clone()).unwrap();
        assert_eq!(back, c);
        assert!(RunConfig::keys().contains(&"train_path".to_string()));
    }

    #[test]
    fn string_fallback_for_paths() {
        let c = RunConfig::load(None, &["train_path=data/train.txt".into()]).unwrap();
        assert_eq!(c.extras.train_path.unwrap(), PathBuf::from("data/train.txt"));
    }
}
