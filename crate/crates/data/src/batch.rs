//! Unpaired patch batches with disjoint provenance.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdflow_core::{Real, Tensor};

use crate::corpus::{Corpus, Sample};
use crate::error::{DataError, Result};
use crate::image::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchConfig {
    /// HR patch side; the LR patch side is `hr_patch / scale`.
    pub hr_patch: usize,
    pub batch: usize,
    /// Random horizontal and vertical flips.
    pub flips: bool,
    /// Uniform dequantization noise; off gives exact `v / 255`.
    pub dequantize: bool,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig { hr_patch: 64, batch: 8, flips: true, dequantize: true }
    }
}

/// LR patches `x` (B, 3, p/s, p/s) and HR patches `y` (B, 3, p, p), with
/// the source id of every patch.
#[derive(Debug, Clone)]
pub struct UnpairedBatch<T> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    pub x_ids: Vec<String>,
    pub y_ids: Vec<String>,
}

impl<T> UnpairedBatch<T> {
    /// True if no LR patch shares a source with an HR patch.
    pub fn is_disjoint(&self) -> bool {
        let ys: BTreeSet<&String> = self.y_ids.iter().collect();
        !self.x_ids.iter().any(|id| ys.contains(id))
    }
}

/// Endless stream of unpaired batches. The RNG is public so that a
/// trainer can checkpoint and restore the stream position.
#[derive(Debug, Clone)]
pub struct UnpairedSampler {
    corpus: Corpus,
    config: BatchConfig,
    pub rng: ChaCha8Rng,
}

impl UnpairedSampler {
    pub fn new(corpus: Corpus, config: BatchConfig, seed: u64) -> Result<Self> {
        let s = corpus.scale;
        if config.batch == 0 || config.hr_patch == 0 || config.hr_patch % s != 0 {
            return Err(DataError::Config(format!("HR patch {} must be a positive multiple of scale {s} and batch must be positive", config.hr_patch)));
        }
        if corpus.hr.is_empty() || corpus.lr.is_empty() {
            return Err(DataError::Config("corpus needs both HR and LR images".into()));
        }
        let lp = config.hr_patch / s;
        if let Some(small) = corpus.hr.iter().find(|x| x.image.width < config.hr_patch || x.image.height < config.hr_patch) {
            return Err(DataError::Config(format!("HR image {} is smaller than the {} patch", small.id, config.hr_patch)));
        }
        if let Some(small) = corpus.lr.iter().find(|x| x.image.width < lp || x.image.height < lp) {
            return Err(DataError::Config(format!("LR image {} is smaller than the {lp} patch", small.id)));
        }
        // LR sources are drawn first; a batch can always be completed when
        // HR sources outnumber the LR draws or the sides share no source.
        let hr_ids: BTreeSet<&str> = corpus.hr.iter().map(|x| x.id.as_str()).collect();
        let lr_ids: BTreeSet<&str> = corpus.lr.iter().map(|x| x.id.as_str()).collect();
        if hr_ids.intersection(&lr_ids).next().is_some() && hr_ids.len() <= config.batch {
            return Err(DataError::Config(format!(
                "{} HR sources cannot keep batches of {} disjoint from their LR sources",
                hr_ids.len(),
                config.batch
            )));
        }
        Ok(UnpairedSampler { corpus, config, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn config(&self) -> BatchConfig {
        self.config
    }

    fn patch(&mut self, sample: &Sample, side: usize) -> RgbImage {
        let img = &sample.image;
        let x0 = self.rng.random_range(0..=img.width - side);
        let y0 = self.rng.random_range(0..=img.height - side);
        let mut p = img.crop(x0, y0, side, side).expect("crop lies inside the image");
        if self.config.flips {
            if self.rng.random_bool(0.5) {
                p = p.flip_horizontal();
            }
            if self.rng.random_bool(0.5) {
                p = p.flip_vertical();
            }
        }
        p
    }

    fn to_tensor<R: Real>(&mut self, patches: &[RgbImage]) -> Tensor<R> {
        let dq = self.config.dequantize;
        let items: Vec<Tensor<R>> = patches.iter().map(|p| p.dequantize(if dq { Some(&mut self.rng) } else { None })).collect();
        Tensor::stack(&items).expect("patches share a shape")
    }

    pub fn next_batch<R: Real>(&mut self) -> UnpairedBatch<R> {
        let (b, p) = (self.config.batch, self.config.hr_patch);
        let lp = p / self.corpus.scale;
        let lr_pick: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..self.corpus.lr.len())).collect();
        let x_ids: Vec<String> = lr_pick.iter().map(|&i| self.corpus.lr[i].id.clone()).collect();
        let taken: BTreeSet<&String> = x_ids.iter().collect();
        let eligible: Vec<usize> = (0..self.corpus.hr.len()).filter(|&i| !taken.contains(&self.corpus.hr[i].id)).collect();
        let hr_pick: Vec<usize> = (0..b).map(|_| eligible[self.rng.random_range(0..eligible.len())]).collect();
        let y_ids = hr_pick.iter().map(|&i| self.corpus.hr[i].id.clone()).collect();

        let lr_samples: Vec<Sample> = lr_pick.iter().map(|&i| self.corpus.lr[i].clone()).collect();
        let hr_samples: Vec<Sample> = hr_pick.iter().map(|&i| self.corpus.hr[i].clone()).collect();
        let xs: Vec<RgbImage> = lr_samples.iter().map(|s| self.patch(s, lp)).collect();
        let ys: Vec<RgbImage> = hr_samples.iter().map(|s| self.patch(s, p)).collect();
        let x = self.to_tensor(&xs);
        let y = self.to_tensor(&ys);
        UnpairedBatch { x, y, x_ids, y_ids }
    }
}
