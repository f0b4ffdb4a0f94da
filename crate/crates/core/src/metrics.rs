//! Image-quality and distribution metrics on the BT.601 luma channel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::rgb_to_y;
use crate::model::FEATURE_PROXY_SEED;
use crate::nets::FeatureProxy;
use crate::params::{ParamBuilder, ParamGroup, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Minimum images per set for [`FeatureSpace::fd_proxy`].
pub const FD_MIN_IMAGES: usize = 16;

fn check_pair<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("metric operands differ in shape: {} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

/// PSNR in dB over the luma of all images in the batch. Identical inputs
/// give `f64::INFINITY`.
pub fn psnr_y<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_pair(a, b)?;
    let (ya, yb) = (rgb_to_y(a)?, rgb_to_y(b)?);
    let mse = ya.data().iter().zip(yb.data()).map(|(p, q)| (p.as_f64() - q.as_f64()).powi(2)).sum::<f64>() / ya.numel() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of one plane.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|t| k[t] * p[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11x11 Gaussian windows (σ = 1.5) of the luma,
/// dynamic range 1, averaged over the batch.
pub fn ssim_y<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_pair(a, b)?;
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::shape(format!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {s}")));
    }
    let (ya, yb) = (rgb_to_y(a)?, rgb_to_y(b)?);
    let k = gaussian_window();
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..s.n {
        let pa: Vec<f64> = ya.sample(n).iter().map(|v| v.as_f64()).collect();
        let pb: Vec<f64> = yb.sample(n).iter().map(|v| v.as_f64()).collect();
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { pa.iter().zip(&pb).map(|(&x, &y)| f(x, y)).collect() };
        let mu_a = filter_valid(&pa, s.h, s.w, &k);
        let mu_b = filter_valid(&pb, s.h, s.w, &k);
        let e_aa = filter_valid(&prod(&|x, _| x * x), s.h, s.w, &k);
        let e_bb = filter_valid(&prod(&|_, y| y * y), s.h, s.w, &k);
        let e_ab = filter_valid(&prod(&|x, y| x * y), s.h, s.w, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean over unordered pairs of the mean absolute pixel difference, ×255.
pub fn diversity<T: Real>(samples: &[Tensor<T>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Param(format!("diversity needs at least 2 samples, got {}", samples.len())));
    }
    for s in &samples[1..] {
        check_pair(&samples[0], s)?;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let (a, b) = (samples[i].data(), samples[j].data());
            total += a.iter().zip(b).map(|(p, q)| (p.as_f64() - q.as_f64()).abs()).sum::<f64>() / a.len() as f64;
            pairs += 1;
        }
    }
    Ok(255.0 * total / pairs as f64)
}

/// The frozen feature proxy with its own parameters, for set-level distances.
#[derive(Debug, Clone)]
pub struct FeatureSpace {
    proxy: FeatureProxy,
    store: ParamStore<f64>,
}

impl Default for FeatureSpace {
    fn default() -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(FEATURE_PROXY_SEED);
        let proxy = FeatureProxy::new(&mut ParamBuilder::new(&mut store, &mut rng, ParamGroup::Frozen).scope("proxy"));
        FeatureSpace { proxy, store }
    }
}

impl FeatureSpace {
    /// Globally pooled features, one vector per image (batches are flattened).
    pub fn features<T: Real>(&self, images: &[Tensor<T>]) -> Vec<Vec<f64>> {
        images.iter().flat_map(|t| self.proxy.pooled(&self.store, &t.cast::<f64>())).collect()
    }

    /// Fréchet distance between diagonal Gaussians fitted to the pooled
    /// features of two image sets: `|μa - μb|² + Σ (σa - σb)²`.
    pub fn fd_proxy<T: Real>(&self, set_a: &[Tensor<T>], set_b: &[Tensor<T>]) -> Result<f64> {
        let (fa, fb) = (self.features(set_a), self.features(set_b));
        if fa.len() < FD_MIN_IMAGES || fb.len() < FD_MIN_IMAGES {
            return Err(Error::Param(format!("fd_proxy needs at least {FD_MIN_IMAGES} images per set, got {} and {}", fa.len(), fb.len())));
        }
        Ok(frechet_diagonal(&fa, &fb))
    }
}

fn moments(f: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = f[0].len();
    let n = f.len() as f64;
    let mu: Vec<f64> = (0..d).map(|k| f.iter().map(|v| v[k]).sum::<f64>() / n).collect();
    let var: Vec<f64> = (0..d).map(|k| f.iter().map(|v| (v[k] - mu[k]).powi(2)).sum::<f64>() / n).collect();
    (mu, var)
}

/// Diagonal-covariance Fréchet distance between two feature sets.
pub fn frechet_diagonal(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (ma, va) = moments(a);
    let (mb, vb) = moments(b);
    ma.iter()
        .zip(&mb)
        .zip(va.iter().zip(&vb))
        .map(|((p, q), (u, v))| (p - q).powi(2) + (u.sqrt() - v.sqrt()).powi(2))
        .sum()
}
