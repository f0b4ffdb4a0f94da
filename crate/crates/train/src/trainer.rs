//! The alternating three-phase optimization loop.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sdflow_core::objectives::{backward_losses, domain_loss_disc, forward_losses, lsgan_disc};
use sdflow_core::{DType, Graph, ModelConfig, ParamGroup, ParamStore, Real, SdFlow};
use sdflow_data::{Corpus, UnpairedSampler};

use crate::adam::{Adam, GradBuffer};
use crate::checkpoint::Checkpoint;
use crate::config::{Phase, TrainConfig};
use crate::error::{CheckpointError, Result, TrainError};
use crate::log::{LossLog, LossRecord};

const META_ENTRY: &str = "meta.json";
const SAMPLER_RNG_ENTRY: &str = "rng.sampler";
const TRAINER_RNG_ENTRY: &str = "rng.trainer";
/// Seed offsets separating the data stream from the loss sampling.
const SAMPLER_SEED_OFFSET: u64 = 0x5a;
const TRAINER_SEED_OFFSET: u64 = 0xa5;

/// Everything needed to rebuild a model or resume training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dtype: String,
    /// Completed updates.
    pub iteration: usize,
}

impl CheckpointMeta {
    pub fn read(ck: &Checkpoint) -> std::result::Result<Self, CheckpointError> {
        serde_json::from_slice(ck.bytes(META_ENTRY)?).map_err(|e| CheckpointError::Malformed(format!("{META_ENTRY}: {e}")))
    }

    pub fn dtype(&self) -> std::result::Result<DType, CheckpointError> {
        self.dtype.parse().map_err(CheckpointError::Malformed)
    }
}

fn rng_bytes(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = rng.get_seed().to_vec();
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

fn rng_from_bytes(name: &str, b: &[u8]) -> std::result::Result<ChaCha8Rng, CheckpointError> {
    if b.len() != 56 {
        return Err(CheckpointError::Mismatch { entry: name.into(), detail: format!("RNG state needs 56 bytes, found {}", b.len()) });
    }
    let mut rng = ChaCha8Rng::from_seed(b[..32].try_into().expect("32 bytes"));
    rng.set_stream(u64::from_le_bytes(b[32..40].try_into().expect("8 bytes")));
    rng.set_word_pos(u128::from_le_bytes(b[40..56].try_into().expect("16 bytes")));
    Ok(rng)
}

/// Builds the architecture of `config` and loads its parameters from `ck`.
pub fn load_model<T: Real>(ck: &Checkpoint, config: &ModelConfig) -> Result<(SdFlow, ParamStore<T>)> {
    let (model, mut store) = SdFlow::build::<T>(config, 0)?;
    ck.restore_params(&mut store)?;
    Ok((model, store))
}

/// Where and how often [`Trainer::run`] persists state.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub checkpoint: Option<PathBuf>,
    /// Also checkpoint every this many updates; 0 only at the end.
    pub checkpoint_every: usize,
    /// Stop after this many updates in total, or at the end of the schedule.
    pub until: Option<usize>,
}

pub struct Trainer<T: Real> {
    pub model: SdFlow,
    pub store: ParamStore<T>,
    pub config: TrainConfig,
    flow_opt: Adam,
    disc_opt: Adam,
    sampler: UnpairedSampler,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl<T: Real> Trainer<T> {
    fn check(model: &ModelConfig, config: &TrainConfig, corpus: &Corpus) -> Result<()> {
        config.validate()?;
        model.validate()?;
        if corpus.scale != model.scale {
            return Err(TrainError::Config(format!("corpus scale {} differs from model scale {}", corpus.scale, model.scale)));
        }
        if config.hr_patch != model.lr_patch * model.scale {
            return Err(TrainError::Config(format!(
                "HR patch {} must equal lr_patch {} times scale {}",
                config.hr_patch, model.lr_patch, model.scale
            )));
        }
        Ok(())
    }

    fn assemble(model: SdFlow, store: ParamStore<T>, config: TrainConfig, corpus: Corpus) -> Result<Self> {
        let sampler = UnpairedSampler::new(corpus, config.batch_config(), config.seed.wrapping_add(SAMPLER_SEED_OFFSET))?;
        let flow_opt = Adam::new(&store, ParamGroup::Flow);
        let disc_opt = Adam::new(&store, ParamGroup::Discriminator);
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(TRAINER_SEED_OFFSET));
        Ok(Trainer { model, store, config, flow_opt, disc_opt, sampler, rng, iteration: 0 })
    }

    /// Fresh model with data-dependent ActNorm init on the first batch.
    pub fn new(model_config: &ModelConfig, config: TrainConfig, corpus: Corpus) -> Result<Self> {
        Self::check(model_config, &config, &corpus)?;
        let (model, store) = SdFlow::build::<T>(model_config, config.seed)?;
        let mut t = Self::assemble(model, store, config, corpus)?;
        let batch = t.sampler.next_batch::<T>();
        t.model.data_init(&mut t.store, &batch.x, &batch.y)?;
        Ok(t)
    }

    /// Restores a trainer from a checkpoint; `corpus` must be the one it was trained on.
    pub fn resume(ck: &Checkpoint, corpus: Corpus) -> Result<Self> {
        let meta = CheckpointMeta::read(ck)?;
        Self::check(&meta.model, &meta.train, &corpus)?;
        let (model, store) = load_model::<T>(ck, &meta.model)?;
        let mut t = Self::assemble(model, store, meta.train, corpus)?;
        t.flow_opt.restore(ck, "adam.flow", &t.store)?;
        t.disc_opt.restore(ck, "adam.disc", &t.store)?;
        t.sampler.rng = rng_from_bytes(SAMPLER_RNG_ENTRY, ck.bytes(SAMPLER_RNG_ENTRY)?)?;
        t.rng = rng_from_bytes(TRAINER_RNG_ENTRY, ck.bytes(TRAINER_RNG_ENTRY)?)?;
        t.iteration = meta.iteration;
        Ok(t)
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Updates taken by the flow and discriminator optimizers.
    pub fn optimizer_steps(&self) -> (u64, u64) {
        (self.flow_opt.steps(), self.disc_opt.steps())
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.total()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let meta = CheckpointMeta { model: self.model.config.clone(), train: self.config.clone(), dtype: T::DTYPE.to_string(), iteration: self.iteration };
        ck.insert_bytes(META_ENTRY, &serde_json::to_vec(&meta).expect("config serializes"));
        ck.insert_bytes(SAMPLER_RNG_ENTRY, &rng_bytes(&self.sampler.rng));
        ck.insert_bytes(TRAINER_RNG_ENTRY, &rng_bytes(&self.rng));
        ck.insert_params(&self.store);
        self.flow_opt.save(&mut ck, "adam.flow", &self.store);
        self.disc_opt.save(&mut ck, "adam.disc", &self.store);
        ck
    }

    /// One optimizer update: accumulated forward (and in the last phase
    /// generation-side) flow gradients, then a separate discriminator update.
    pub fn step(&mut self) -> Result<LossRecord> {
        let it = self.iteration;
        let phase = self.config.phase_at(it);
        let acc = self.config.accumulation;
        let inv = 1.0 / acc as f64;
        let weights = self.config.weights.clone();
        let mut flow_grads = GradBuffer::zeros(&self.store, self.flow_opt.ids());
        let mut disc_grads = GradBuffer::zeros(&self.store, self.disc_opt.ids());
        let factor = self.config.lr_factor(it);
        let mut rec = LossRecord {
            iter: it,
            phase: phase.number(),
            nll_x: 0.0,
            nll_y: 0.0,
            content: 0.0,
            domain: None,
            ds_pixel: None,
            ds_perceptual: None,
            ds_adversarial: None,
            sr_pixel: None,
            sr_perceptual: None,
            sr_adversarial: None,
            disc: None,
            total: 0.0,
            grad_norm: 0.0,
            lr_model: self.config.lr_model * factor,
            lr_disc: self.config.lr_disc * factor,
        };
        let add = |slot: &mut Option<f64>, v: f64| *slot = Some(slot.unwrap_or(0.0) + inv * v);

        for _ in 0..acc {
            let batch = self.sampler.next_batch::<T>();
            let (zc_hr, zc_lr) = {
                let mut g = Graph::for_groups(&self.store, &[ParamGroup::Flow]);
                let x = g.input(batch.x.clone());
                let y = g.input(batch.y.clone());
                let f = forward_losses(&mut g, &self.model, x, y, &weights, phase >= Phase::Forward)?;
                let val = |id| g.value(id).item().as_f64();
                rec.nll_x += inv * val(f.nll_x);
                rec.nll_y += inv * val(f.nll_y);
                rec.content += inv * val(f.content.total);
                rec.total += inv * val(f.total);
                if let Some(d) = f.domain {
                    add(&mut rec.domain, val(d.total));
                }
                flow_grads.accumulate(&g.backward(f.total), self.flow_opt.ids(), inv);
                (g.value(f.hr.z_c).clone(), g.value(f.lr.z_c).clone())
            };

            let fakes = if phase == Phase::Finetune {
                let mut g = Graph::for_groups(&self.store, &[ParamGroup::Flow]);
                let x = g.input(batch.x.clone());
                let y = g.input(batch.y.clone());
                let b = backward_losses(&mut g, &self.store, &self.model, x, y, &weights, &mut self.rng)?;
                let total = g.add(b.ds_loss, b.sr_loss);
                let val = |id| g.value(id).item().as_f64();
                add(&mut rec.ds_pixel, val(b.ds_pixel));
                add(&mut rec.ds_perceptual, val(b.ds_perceptual));
                add(&mut rec.ds_adversarial, val(b.ds_adversarial));
                add(&mut rec.sr_pixel, val(b.sr_pixel));
                add(&mut rec.sr_perceptual, val(b.sr_perceptual));
                add(&mut rec.sr_adversarial, val(b.sr_adversarial));
                rec.total += inv * val(total);
                flow_grads.accumulate(&g.backward(total), self.flow_opt.ids(), inv);
                Some((g.value(b.ds_fake).clone(), g.value(b.sr_fake).clone()))
            } else {
                None
            };

            if phase >= Phase::Forward {
                let mut g = Graph::for_groups(&self.store, &[ParamGroup::Discriminator]);
                let (h, l) = (g.input(zc_hr), g.input(zc_lr));
                let mut loss = domain_loss_disc(&mut g, &self.model.d_content, h, l);
                if let Some((ds_fake, sr_fake)) = fakes {
                    let (x, y) = (g.input(batch.x), g.input(batch.y));
                    let (df, sf) = (g.input(ds_fake), g.input(sr_fake));
                    let a = lsgan_disc(&mut g, &self.model.d_lr, x, df);
                    let b = lsgan_disc(&mut g, &self.model.d_sr, y, sf);
                    loss = g.add(loss, a);
                    loss = g.add(loss, b);
                }
                add(&mut rec.disc, g.value(loss).item().as_f64());
                disc_grads.accumulate(&g.backward(loss), self.disc_opt.ids(), inv);
            }
        }

        rec.grad_norm = flow_grads.norm();
        let finite = rec.total.is_finite() && rec.disc.is_none_or(f64::is_finite) && flow_grads.is_finite() && disc_grads.is_finite();
        if !finite {
            return Err(TrainError::Diverged { iteration: it, detail: format!("flow loss {} with gradient norm {}", rec.total, rec.grad_norm) });
        }
        if rec.grad_norm > self.config.clip_norm {
            flow_grads.scale(self.config.clip_norm / rec.grad_norm);
        }
        self.flow_opt.step(&mut self.store, &flow_grads, rec.lr_model);
        if phase >= Phase::Forward {
            self.disc_opt.step(&mut self.store, &disc_grads, rec.lr_disc);
        }
        self.iteration += 1;
        Ok(rec)
    }

    /// Steps until the schedule (or `opts.until`) ends, logging every
    /// update. On divergence the last finite state is checkpointed before
    /// the error is returned.
    pub fn run(&mut self, log: &mut LossLog, opts: &RunOptions, mut progress: impl FnMut(&LossRecord)) -> Result<()> {
        let end = opts.until.unwrap_or(usize::MAX).min(self.config.total());
        while self.iteration < end {
            let rec = match self.step() {
                Ok(r) => r,
                Err(e) => {
                    if let (TrainError::Diverged { .. }, Some(path)) = (&e, &opts.checkpoint) {
                        self.checkpoint().save(path)?;
                    }
                    return Err(e);
                }
            };
            log.write(&rec)?;
            progress(&rec);
            if let Some(path) = &opts.checkpoint {
                if opts.checkpoint_every > 0 && self.iteration % opts.checkpoint_every == 0 {
                    self.checkpoint().save(path)?;
                }
            }
        }
        if let Some(path) = &opts.checkpoint {
            self.checkpoint().save(path)?;
        }
        Ok(())
    }

    /// Saves to `path`; convenience for callers without a [`RunOptions`].
    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.checkpoint().save(path)?)
    }
}
