//! Base densities: standard normal for the high-frequency latent and a
//! diagonal mixture of Gaussians with uniform weights for the degradation latent.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// `0.5 * ln(2 pi)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_nan() || tau < 0.0 || tau.is_infinite() {
        return Err(Error::Param(format!("temperature must be a finite value >= 0, got {tau}")));
    }
    Ok(())
}

/// Per-sample `sum(-(z^2 + ln 2 pi) / 2)`, shape (N, 1, 1, 1).
pub fn std_normal_logp<T: Real>(g: &mut Graph<'_, T>, z: NodeId) -> NodeId {
    let d = g.shape(z).per_sample() as f64;
    let sq = g.square(z);
    let s = g.sum_per_sample(sq);
    let s = g.scale(s, -0.5);
    g.add_scalar(s, -HALF_LN_2PI * d)
}

/// I.i.d. `N(0, tau^2)` draws; exact zeros at `tau = 0`.
pub fn std_normal_sample<T: Real>(shape: Shape, tau: f64, rng: &mut impl Rng) -> Result<Tensor<T>> {
    check_tau(tau)?;
    if tau == 0.0 {
        return Ok(Tensor::zeros(shape));
    }
    Ok(Tensor::randn(shape, tau, rng))
}

/// Mixture of `N` diagonal Gaussians with weights `1/N`. Means and log-scales
/// are per element over a fixed latent shape (C, H, W); latents of other
/// spatial sizes index the parameters periodically.
#[derive(Debug, Clone)]
pub struct MogPrior {
    pub means: ParamId,
    pub log_scales: ParamId,
    pub components: usize,
}

impl MogPrior {
    /// Means drawn from `N(0, mean_std^2)`, log-scales zero.
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, components: usize, latent: (usize, usize, usize), mean_std: f64) -> Self {
        assert!(components >= 1, "mixture needs at least one component");
        let shape = Shape::new(components, latent.0, latent.1, latent.2);
        let mu = Tensor::randn(shape, mean_std, b.rng());
        let means = b.add("means", mu);
        let log_scales = b.add("log_scales", Tensor::zeros(shape));
        MogPrior { means, log_scales, components }
    }

    /// Per-sample mixture log-density of `z`, shape (N, 1, 1, 1).
    pub fn logp<T: Real>(&self, g: &mut Graph<'_, T>, z: NodeId) -> NodeId {
        let mu = g.param(self.means);
        let ls = g.param(self.log_scales);
        g.mog_logp(z, mu, ls)
    }

    /// One sample per batch item. The component is drawn uniformly unless
    /// `component` fixes it; `tau` scales only the within-component noise.
    /// Returns the samples and the components used.
    pub fn sample<T: Real>(
        &self,
        store: &ParamStore<T>,
        shape: Shape,
        tau: f64,
        component: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        check_tau(tau)?;
        let mu = store.get(self.means);
        let ls = store.get(self.log_scales);
        let ps = mu.shape();
        if shape.c != ps.c {
            return Err(Error::shape(format!("mixture has {} channels, requested {shape}", ps.c)));
        }
        if let Some(k) = component.filter(|&k| k >= self.components) {
            return Err(Error::Param(format!("component {k} out of range 0..{}", self.components)));
        }
        let mut out = Tensor::zeros(shape);
        let mut picked = Vec::with_capacity(shape.n);
        for n in 0..shape.n {
            let k = component.unwrap_or_else(|| rng.random_range(0..self.components));
            picked.push(k);
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        let (ph, pw) = (h % ps.h, w % ps.w);
                        let m = mu.at(k, c, ph, pw).as_f64();
                        let v = if tau == 0.0 {
                            m
                        } else {
                            let e: f64 = StandardNormal.sample(rng);
                            m + tau * ls.at(k, c, ph, pw).as_f64().exp() * e
                        };
                        out.set(n, c, h, w, T::from_f64(v));
                    }
                }
            }
        }
        Ok((out, picked))
    }
}

impl<T: Real> Graph<'_, T> {
    /// Mixture log-density `logsumexp_k [ -ln K + sum_e ln N(z_e | mu_ke, exp(ls_ke)^2) ]`
    /// per sample. `mu` and `ls` have shape (K, C, Hp, Wp); `z` has shape
    /// (N, C, H, W) and indexes parameters at `(h mod Hp, w mod Wp)`.
    pub fn mog_logp(&mut self, z: NodeId, mu: NodeId, ls: NodeId) -> NodeId {
        let zs = self.shape(z);
        let ps = self.shape(mu);
        assert_eq!(ps, self.shape(ls), "mog_logp: means and log-scales differ in shape");
        assert_eq!(zs.c, ps.c, "mog_logp: channel mismatch {zs} vs {ps}");
        let index = param_index(zs, ps);
        let (lp, out) = mog_terms(self.value(z), self.value(mu), self.value(ls), &index);
        let y = Tensor::from_f64(Shape::new(zs.n, 1, 1, 1), &out).unwrap();
        self.push(y, &[z, mu, ls], move |ctx| {
            let (zv, mv, lv) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
            let k_n = ps.n;
            let pe = ps.per_sample();
            let d = zs.per_sample();
            let g = ctx.grad.to_f64_vec();
            let mut gz = vec![0.0; zs.numel()];
            let mut gm = vec![0.0; ps.numel()];
            let mut gl = vec![0.0; ps.numel()];
            for n in 0..zs.n {
                for k in 0..k_n {
                    let r = g[n] * (lp[n * k_n + k] - out[n]).exp();
                    if r == 0.0 {
                        continue;
                    }
                    for (e, &pi) in index.iter().enumerate() {
                        let p = k * pe + pi;
                        let inv_var = (-2.0 * lv[p].as_f64()).exp();
                        let diff = zv[n * d + e].as_f64() - mv[p].as_f64();
                        let u = diff * inv_var;
                        gz[n * d + e] -= r * u;
                        gm[p] += r * u;
                        gl[p] += r * (diff * u - 1.0);
                    }
                }
            }
            let t = |s: Shape, v: &[f64]| Some(Tensor::from_f64(s, v).unwrap());
            vec![t(zs, &gz), t(ps, &gm), t(ps, &gl)]
        })
    }
}

/// For each per-sample element of a latent of shape `zs`, the flat offset of
/// its parameter within one component of shape `ps`.
fn param_index(zs: Shape, ps: Shape) -> Vec<usize> {
    let mut idx = Vec::with_capacity(zs.per_sample());
    for c in 0..zs.c {
        for h in 0..zs.h {
            for w in 0..zs.w {
                idx.push((c * ps.h + h % ps.h) * ps.w + w % ps.w);
            }
        }
    }
    idx
}

/// Component log-terms (N x K, row-major) and their log-sum-exp per sample.
fn mog_terms<T: Real>(z: &Tensor<T>, mu: &Tensor<T>, ls: &Tensor<T>, index: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let (zs, ps) = (z.shape(), mu.shape());
    let (k_n, pe) = (ps.n, ps.per_sample());
    let log_w = -(k_n as f64).ln();
    let mut lp = vec![0.0; zs.n * k_n];
    let mut out = vec![0.0; zs.n];
    for n in 0..zs.n {
        let zn = z.sample(n);
        for k in 0..k_n {
            let mut acc = log_w;
            for (e, &pi) in index.iter().enumerate() {
                let l = ls.data()[k * pe + pi].as_f64();
                let u = (zn[e].as_f64() - mu.data()[k * pe + pi].as_f64()) * (-l).exp();
                acc -= 0.5 * u * u + l + HALF_LN_2PI;
            }
            lp[n * k_n + k] = acc;
        }
        let row = &lp[n * k_n..(n + 1) * k_n];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        out[n] = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    }
    (lp, out)
}
