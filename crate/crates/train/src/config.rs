//! Training hyperparameters, phases and the step-decay schedule.

use serde::{Deserialize, Serialize};
use sdflow_core::objectives::LossWeights;
use sdflow_data::BatchConfig;

use crate::error::{Result, TrainError};

/// Optimization phase of an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    /// Likelihoods and content loss.
    Pretrain,
    /// Adds the latent-domain loss.
    Forward,
    /// Adds the generation-side losses and image discriminators.
    Finetune,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::Pretrain => 1,
            Phase::Forward => 2,
            Phase::Finetune => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iters_pretrain: usize,
    pub iters_forward: usize,
    pub iters_finetune: usize,
    pub lr_model: f64,
    pub lr_disc: f64,
    /// Fractions of the total iteration count at which both rates halve.
    pub milestones: Vec<f64>,
    /// Micro-batches accumulated per update.
    pub accumulation: usize,
    /// Global gradient-norm clip on flow parameters.
    pub clip_norm: f64,
    pub seed: u64,
    pub hr_patch: usize,
    pub batch: usize,
    pub flips: bool,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// 1k/4k/1k iterations on 64/16 patches, batch 8.
    pub fn desk() -> Self {
        TrainConfig {
            iters_pretrain: 1000,
            iters_forward: 4000,
            iters_finetune: 1000,
            lr_model: 1e-4,
            lr_disc: 1e-5,
            milestones: vec![0.5, 0.75, 0.9, 0.95],
            accumulation: 1,
            clip_norm: 50.0,
            seed: 0,
            hr_patch: 64,
            batch: 8,
            flips: true,
            weights: LossWeights::default(),
        }
    }

    /// Schedule of the full-size runs: 50k/200k/50k on 192/48 patches, batch 32.
    pub fn paper() -> Self {
        TrainConfig { iters_pretrain: 50_000, iters_forward: 200_000, iters_finetune: 50_000, hr_patch: 192, batch: 32, ..Self::desk() }
    }

    /// Few iterations on 16/4 patches, for the toy model in tests.
    pub fn toy() -> Self {
        TrainConfig { iters_pretrain: 4, iters_forward: 4, iters_finetune: 4, hr_patch: 16, batch: 2, ..Self::desk() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(TrainError::Config(format!("unknown preset `{other}` (expected toy, desk or paper)"))),
        }
    }

    pub fn total(&self) -> usize {
        self.iters_pretrain + self.iters_forward + self.iters_finetune
    }

    /// Phase of the 0-based iteration `iter`.
    pub fn phase_at(&self, iter: usize) -> Phase {
        if iter < self.iters_pretrain {
            Phase::Pretrain
        } else if iter < self.iters_pretrain + self.iters_forward {
            Phase::Forward
        } else {
            Phase::Finetune
        }
    }

    /// Multiplier of both base rates at `iter`: halved once per milestone reached.
    pub fn lr_factor(&self, iter: usize) -> f64 {
        let total = self.total() as f64;
        let passed = self.milestones.iter().filter(|&&m| iter as f64 >= m * total).count();
        0.5f64.powi(passed as i32)
    }

    pub fn batch_config(&self) -> BatchConfig {
        BatchConfig { hr_patch: self.hr_patch, batch: self.batch, flips: self.flips, dequantize: true }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.total() == 0 {
            return bad("at least one iteration is required".into());
        }
        if !(self.lr_model > 0.0 && self.lr_model.is_finite() && self.lr_disc > 0.0 && self.lr_disc.is_finite()) {
            return bad(format!("learning rates must be positive, got {} and {}", self.lr_model, self.lr_disc));
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad(format!("milestones must be fractions in [0, 1], got {:?}", self.milestones));
        }
        if self.accumulation == 0 || self.batch == 0 || self.hr_patch == 0 {
            return bad("accumulation, batch and hr_patch must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        self.weights.validate()?;
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value.parse().map_err(|_| TrainError::Config(format!("cannot parse `{value}` for `{key}`")))
        }
        let w = &mut self.weights;
        match key {
            "iters_pretrain" => self.iters_pretrain = parse(key, value)?,
            "iters_forward" => self.iters_forward = parse(key, value)?,
            "iters_finetune" => self.iters_finetune = parse(key, value)?,
            "lr_model" => self.lr_model = parse(key, value)?,
            "lr_disc" => self.lr_disc = parse(key, value)?,
            "milestones" => {
                self.milestones = if value.trim().is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_>>()?
                }
            }
            "accumulation" => self.accumulation = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "hr_patch" => self.hr_patch = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "flips" => self.flips = parse(key, value)?,
            "alpha" => w.alpha = parse(key, value)?,
            "beta1" => w.beta1 = parse(key, value)?,
            "beta2" => w.beta2 = parse(key, value)?,
            "tau_pixel" => w.tau_pixel = parse(key, value)?,
            "tau_perceptual" => w.tau_perceptual = parse(key, value)?,
            "lambda" => {
                let v: Vec<f64> = value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_>>()?;
                w.lambda = v.try_into().map_err(|_| TrainError::Config("lambda takes 6 comma-separated weights".into()))?;
            }
            other => return Err(TrainError::Config(format!("unknown training key `{other}`"))),
        }
        Ok(())
    }
}
