//! Flat `key=value` run configuration with `#` comments.

use std::path::Path;

use sdflow_core::{DType, ModelConfig};
use sdflow_train::TrainConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}: expected key=value, got `{text}`")]
    Syntax { path: String, line: usize, text: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {detail}")]
    Value { key: String, value: String, detail: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Model, training and numeric settings of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dtype: DType,
}

const MODEL_KEYS: &[&str] = &[
    "scale",
    "flow_steps",
    "cond_flow_steps",
    "hf_blocks",
    "deg_blocks",
    "coupling_width",
    "cond_features",
    "cond_growth",
    "estimator_layers",
    "dm_blocks",
    "content_features",
    "deg_features",
    "mog_components",
    "mog_mean_std",
    "lr_patch",
    "disc_features",
];

const TRAIN_KEYS: &[&str] = &[
    "iters_pretrain",
    "iters_forward",
    "iters_finetune",
    "lr_model",
    "lr_disc",
    "milestones",
    "accumulation",
    "clip_norm",
    "seed",
    "hr_patch",
    "batch",
    "flips",
    "alpha",
    "beta1",
    "beta2",
    "lambda",
    "tau_pixel",
    "tau_perceptual",
];

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { path: origin.into(), line: i + 1, text: raw.into() })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    parse_pairs(&text, &path.display().to_string())
}

fn value_err(key: &str, value: &str, detail: impl ToString) -> ConfigError {
    ConfigError::Value { key: key.into(), value: value.into(), detail: detail.to_string() }
}

fn set_model(m: &mut ModelConfig, key: &str, value: &str) -> Result<(), ConfigError> {
    let int = || value.parse::<usize>().map_err(|e| value_err(key, value, e));
    match key {
        "scale" => m.scale = int()?,
        "flow_steps" => m.flow_steps = int()?,
        "cond_flow_steps" => m.cond_flow_steps = int()?,
        "hf_blocks" => m.hf_blocks = int()?,
        "deg_blocks" => m.deg_blocks = int()?,
        "coupling_width" => m.coupling_width = int()?,
        "cond_features" => m.cond_features = int()?,
        "cond_growth" => m.cond_growth = int()?,
        "estimator_layers" => m.estimator_layers = int()?,
        "dm_blocks" => m.dm_blocks = int()?,
        "content_features" => m.content_features = int()?,
        "deg_features" => m.deg_features = int()?,
        "mog_components" => m.mog_components = int()?,
        "mog_mean_std" => m.mog_mean_std = value.parse().map_err(|e| value_err(key, value, e))?,
        "lr_patch" => m.lr_patch = int()?,
        "disc_features" => m.disc_features = int()?,
        other => return Err(ConfigError::UnknownKey(other.into())),
    }
    Ok(())
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let model = ModelConfig::preset(name).map_err(|e| value_err("preset", name, e))?;
        let train = TrainConfig::preset(name).map_err(|e| value_err("preset", name, e))?;
        Ok(RunConfig { preset: name.into(), model, train, dtype: DType::F32 })
    }

    /// Applies `preset` first, then the other pairs in order; later pairs win.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, ConfigError> {
        let preset = pairs.iter().rev().find(|(k, _)| k == "preset").map_or("desk", |(_, v)| v.as_str());
        let mut cfg = Self::preset(preset)?;
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if key == "dtype" {
            self.dtype = value.parse().map_err(|e: String| value_err(key, value, e))?;
        } else if MODEL_KEYS.contains(&key) {
            set_model(&mut self.model, key, value)?;
        } else if TRAIN_KEYS.contains(&key) {
            self.train.set(key, value).map_err(|e| value_err(key, value, e))?;
        } else {
            return Err(ConfigError::UnknownKey(key.into()));
        }
        Ok(())
    }

    /// Every key with its value in this configuration, one `key=value` per line.
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let w = &t.weights;
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut lines = vec![format!("preset={}", self.preset), format!("dtype={}", self.dtype)];
        let model_values = [
            m.scale.to_string(),
            m.flow_steps.to_string(),
            m.cond_flow_steps.to_string(),
            m.hf_blocks.to_string(),
            m.deg_blocks.to_string(),
            m.coupling_width.to_string(),
            m.cond_features.to_string(),
            m.cond_growth.to_string(),
            m.estimator_layers.to_string(),
            m.dm_blocks.to_string(),
            m.content_features.to_string(),
            m.deg_features.to_string(),
            m.mog_components.to_string(),
            m.mog_mean_std.to_string(),
            m.lr_patch.to_string(),
            m.disc_features.to_string(),
        ];
        let train_values = [
            t.iters_pretrain.to_string(),
            t.iters_forward.to_string(),
            t.iters_finetune.to_string(),
            t.lr_model.to_string(),
            t.lr_disc.to_string(),
            join(&t.milestones),
            t.accumulation.to_string(),
            t.clip_norm.to_string(),
            t.seed.to_string(),
            t.hr_patch.to_string(),
            t.batch.to_string(),
            t.flips.to_string(),
            w.alpha.to_string(),
            w.beta1.to_string(),
            w.beta2.to_string(),
            join(&w.lambda),
            w.tau_pixel.to_string(),
            w.tau_perceptual.to_string(),
        ];
        for (k, v) in MODEL_KEYS.iter().zip(model_values).chain(TRAIN_KEYS.iter().zip(train_values)) {
            lines.push(format!("{k}={v}"));
        }
        lines.join("\n")
    }
}

/// Help text listing every key with its desk default.
pub fn keys_help() -> String {
    let desk = RunConfig::preset("desk").expect("desk preset exists");
    let mut s = String::from("Configuration keys (desk defaults; `preset` may be toy, desk or paper):\n");
    for line in desk.render().lines() {
        s.push_str("  ");
        s.push_str(line);
        s.push('\n');
    }
    s
}
