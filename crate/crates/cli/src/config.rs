//! Flat JSON run configuration: model and schedule keys side by side with data
//! paths and the output directory.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::{Map, Value};
use topicvae::engine::config_hash;
use topicvae::models::{ModelConfig, Variant};
use topicvae::training::TrainSchedule;

use crate::error::{io_err, CliError, Result};

const MODEL_KEYS: &[&str] = &[
    "variant",
    "K",
    "T",
    "alpha",
    "gamma",
    "s1",
    "s2",
    "hidden",
    "kl_estimator",
    "batch_norm",
];
const SCHEDULE_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "seed",
    "corpus_update_period",
    "temperature",
    "temperature_final",
    "kl_warmup_epochs",
    "patience",
    "lr",
    "hyper_lr",
    "checkpoint_every",
    "valid_samples",
];
const DATA_KEYS: &[&str] = &[
    "vocab",
    "train",
    "valid",
    "test",
    "valid_fraction",
    "out_dir",
    "eval_samples",
];

fn d_valid_fraction() -> f64 {
    0.1
}
fn d_out_dir() -> PathBuf {
    PathBuf::from("run")
}
fn d_eval_samples() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub vocab: PathBuf,
    pub train: PathBuf,
    #[serde(default)]
    pub valid: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Share of the training file held out for validation when `valid` is unset.
    #[serde(default = "d_valid_fraction")]
    pub valid_fraction: f64,
    #[serde(default = "d_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "d_eval_samples")]
    pub eval_samples: usize,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Everything except `vocab_size`, which comes from the vocabulary file.
    pub model: Value,
    pub schedule: TrainSchedule,
    pub data: DataConfig,
    /// The config after command-line overrides, minus `out_dir`.
    pub normalized: Value,
}

fn pick(map: &Map<String, Value>, keys: &[&str]) -> Value {
    Value::Object(
        map.iter()
            .filter(|(k, _)| keys.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
    )
}

fn invalid(e: serde_json::Error) -> CliError {
    CliError::Config(e.to_string())
}

impl RunConfig {
    pub fn load(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let value: Value = serde_json::from_str(&text).map_err(invalid)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::from_value(value, seed)?;
        cfg.data.resolve(base);
        if let Some(out) = out {
            cfg.data.out_dir = out.to_path_buf();
        }
        Ok(cfg)
    }

    pub fn from_value(value: Value, seed: Option<u64>) -> Result<Self> {
        let Value::Object(mut map) = value else {
            return Err(CliError::Config("config must be a JSON object".into()));
        };
        if let Some(key) = map.keys().find(|k| {
            ![MODEL_KEYS, SCHEDULE_KEYS, DATA_KEYS]
                .iter()
                .any(|set| set.contains(&k.as_str()))
        }) {
            return Err(CliError::UnknownKey(key.clone()));
        }
        if let Some(seed) = seed {
            map.insert("seed".into(), seed.into());
        }
        let schedule: TrainSchedule = serde_json::from_value(pick(&map, SCHEDULE_KEYS)).map_err(invalid)?;
        schedule.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let data: DataConfig = serde_json::from_value(pick(&map, DATA_KEYS)).map_err(invalid)?;
        if !(0.0..1.0).contains(&data.valid_fraction) {
            return Err(CliError::Config(format!(
                "valid_fraction must be in [0, 1), got {}",
                data.valid_fraction
            )));
        }
        let model = pick(&map, MODEL_KEYS);
        // Catch model errors before any data is read.
        model_config(&model, 2)?;
        map.remove("out_dir");
        Ok(Self {
            model,
            schedule,
            data,
            normalized: Value::Object(map),
        })
    }

    pub fn hash(&self) -> String {
        config_hash(&self.normalized)
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        model_config(&self.model, vocab_size)
    }
}

impl DataConfig {
    /// Relative data paths are taken relative to the config file.
    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.vocab);
        join(&mut self.train);
        if let Some(p) = self.valid.as_mut() {
            join(p);
        }
        if let Some(p) = self.test.as_mut() {
            join(p);
        }
    }
}

/// Builds and validates a model config. The command line additionally
/// requires non-degenerate truncations.
fn model_config(model: &Value, vocab_size: usize) -> Result<ModelConfig> {
    let mut with_v = model.clone();
    with_v["vocab_size"] = vocab_size.into();
    let config: ModelConfig = serde_json::from_value(with_v).map_err(invalid)?;
    config.validate()?;
    if config.k < 2 {
        return Err(CliError::Config(format!("K must be at least 2, got {}", config.k)));
    }
    if config.variant == Variant::Hier && config.t.is_some_and(|t| t < 2) {
        return Err(CliError::Config(format!(
            "T must be at least 2, got {}",
            config.t.unwrap_or(0)
        )));
    }
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn base() -> Value {
        json!({"variant": "prod", "K": 10, "vocab": "v.txt", "train": "t.bow"})
    }

    #[test]
    fn unknown_keys_are_named() {
        let mut v = base();
        v["lerning_rate"] = json!(0.1);
        let err = RunConfig::from_value(v, None).unwrap_err();
        assert_eq!(err.to_string(), "unknown config key 'lerning_rate'");
    }

    #[test]
    fn hier_needs_t_and_truncations_need_two() {
        let mut v = base();
        v["variant"] = json!("hier");
        let err = RunConfig::from_value(v.clone(), None).unwrap_err();
        assert!(err.to_string().contains("T required for hier"), "{err}");
        v["T"] = json!(1);
        assert!(RunConfig::from_value(v, None)
            .unwrap_err()
            .to_string()
            .contains("T must be at least 2"));
        let mut v = base();
        v["K"] = json!(1);
        assert!(RunConfig::from_value(v, None)
            .unwrap_err()
            .to_string()
            .contains("K must be at least 2"));
    }

    #[test]
    fn seed_override_changes_hash_but_out_dir_does_not() {
        let a = RunConfig::from_value(base(), None).unwrap();
        let mut v = base();
        v["out_dir"] = json!("elsewhere");
        let b = RunConfig::from_value(v, None).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::from_value(base(), Some(4)).unwrap();
        assert_eq!(c.schedule.seed, 4);
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn schedule_defaults_apply() {
        let c = RunConfig::from_value(base(), None).unwrap();
        assert_eq!(c.schedule, TrainSchedule::default());
        assert_eq!(c.data.valid_fraction, 0.1);
    }
}
