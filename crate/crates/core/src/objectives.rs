//! Training objectives: likelihood, content, latent-domain and generation-side
//! losses, plus least-squares discriminator losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::imaging::{bicubic_downscale_node, bicubic_upscale_node, lowpass_node};
use crate::model::SdFlow;
use crate::nets::Discriminator;
use crate::params::ParamStore;
use crate::real::Real;
use crate::sr_flow::HrLatents;
use crate::ds_flow::LrLatents;

/// Loss weights. `lambda` orders the generation-side terms as
/// (DS pixel, DS perceptual, DS adversarial, SR pixel, SR perceptual, SR adversarial).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda: [f64; 6],
    pub tau_pixel: f64,
    pub tau_perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.05,
            beta1: 0.05,
            beta2: 0.5,
            lambda: [0.5, 0.5, 0.1, 0.5, 0.5, 0.1],
            tau_pixel: 0.0,
            tau_perceptual: 0.8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta1, self.beta2, self.tau_pixel, self.tau_perceptual];
        if all.iter().chain(self.lambda.iter()).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Param("loss weights and temperatures must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Mean absolute difference.
pub fn l1<T: Real>(g: &mut Graph<'_, T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    same_shape(g, a, b)?;
    let d = g.sub(a, b);
    let d = g.abs(d);
    Ok(g.mean_all(d))
}

/// Mean squared difference from a constant target.
pub fn mse_to<T: Real>(g: &mut Graph<'_, T>, a: NodeId, target: f64) -> NodeId {
    let d = g.add_scalar(a, -target);
    let d = g.square(d);
    g.mean_all(d)
}

fn mean_square<T: Real>(g: &mut Graph<'_, T>, a: NodeId) -> NodeId {
    mse_to(g, a, 0.0)
}

fn same_shape<T: Real>(g: &Graph<'_, T>, a: NodeId, b: NodeId) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(format!("loss operands differ in shape: {} vs {}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

/// Weighted sum of scalar nodes; zero weights are skipped.
pub fn weighted_sum<T: Real>(g: &mut Graph<'_, T>, terms: &[(f64, NodeId)]) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for &(w, t) in terms {
        if w == 0.0 {
            continue;
        }
        let s = if w == 1.0 { t } else { g.scale(t, w) };
        acc = Some(match acc {
            Some(a) => g.add(a, s),
            None => s,
        });
    }
    acc.unwrap_or_else(|| g.input(crate::tensor::Tensor::scalar(T::zero())))
}

/// Batch-mean negative log-likelihood per dimension (nats) from per-sample values.
pub fn nll_per_dim<T: Real>(g: &mut Graph<'_, T>, per_sample: NodeId, dims: usize) -> NodeId {
    let m = g.mean_all(per_sample);
    g.scale(m, 1.0 / dims as f64)
}

/// Terms of the content loss.
#[derive(Debug, Clone, Copy)]
pub struct ContentTerms {
    pub total: NodeId,
    pub hr_pixel: NodeId,
    pub lr_pixel: NodeId,
    pub hr_feature: NodeId,
    pub lr_feature: NodeId,
}

/// Decodes both content latents with a zero degradation latent and compares
/// them, low-pass filtered and in proxy feature space, with the bicubic
/// downscale of `y` and with `x` respectively.
pub fn content_loss<T: Real>(
    g: &mut Graph<'_, T>,
    model: &SdFlow,
    z_c_hr: NodeId,
    z_c_lr: NodeId,
    x: NodeId,
    y: NodeId,
    alpha: f64,
) -> Result<ContentTerms> {
    let s = model.scale();
    let dec_hr = model.ds.content_decode(g, z_c_hr)?;
    let dec_lr = model.ds.content_decode(g, z_c_lr)?;
    let target_hr = bicubic_downscale_node(g, y, s)?;
    same_shape(g, dec_hr, target_hr)?;
    same_shape(g, dec_lr, x)?;

    let pixel = |g: &mut Graph<'_, T>, a: NodeId, b: NodeId| -> Result<NodeId> {
        let la = lowpass_node(g, a, s);
        let lb = lowpass_node(g, b, s);
        l1(g, la, lb)
    };
    let hr_pixel = pixel(g, dec_hr, target_hr)?;
    let lr_pixel = pixel(g, dec_lr, x)?;
    let (hr_feature, lr_feature) = if alpha == 0.0 {
        let zero = g.input(crate::tensor::Tensor::scalar(T::zero()));
        (zero, zero)
    } else {
        (feature_l1(g, model, dec_hr, target_hr)?, feature_l1(g, model, dec_lr, x)?)
    };
    let total = weighted_sum(g, &[(1.0, hr_pixel), (1.0, lr_pixel), (alpha, hr_feature), (alpha, lr_feature)]);
    Ok(ContentTerms { total, hr_pixel, lr_pixel, hr_feature, lr_feature })
}

/// L1 between frozen proxy features of two image batches.
pub fn feature_l1<T: Real>(g: &mut Graph<'_, T>, model: &SdFlow, a: NodeId, b: NodeId) -> Result<NodeId> {
    same_shape(g, a, b)?;
    let fa = model.proxy.apply(g, a);
    let fb = model.proxy.apply(g, b);
    l1(g, fa, fb)
}

/// Least-squares discriminator loss: `real` toward 1, `fake` toward 0.
/// Inputs should be detached by the caller when only the discriminator trains.
pub fn lsgan_disc<T: Real>(g: &mut Graph<'_, T>, d: &Discriminator, real: NodeId, fake: NodeId) -> NodeId {
    let dr = d.apply(g, real);
    let df = d.apply(g, fake);
    let lr = mse_to(g, dr, 1.0);
    let lf = mean_square(g, df);
    g.add(lr, lf)
}

/// Least-squares generator loss: `fake` toward 1.
pub fn lsgan_gen<T: Real>(g: &mut Graph<'_, T>, d: &Discriminator, fake: NodeId) -> NodeId {
    let df = d.apply(g, fake);
    mse_to(g, df, 1.0)
}

/// Content-domain discriminator loss: HR content toward 0, LR content toward 1.
pub fn domain_loss_disc<T: Real>(g: &mut Graph<'_, T>, d: &Discriminator, z_c_hr: NodeId, z_c_lr: NodeId) -> NodeId {
    let dh = d.apply(g, z_c_hr);
    let dl = d.apply(g, z_c_lr);
    let a = mean_square(g, dh);
    let b = mse_to(g, dl, 1.0);
    g.add(a, b)
}

/// Terms of the flow-side domain loss.
#[derive(Debug, Clone, Copy)]
pub struct DomainTerms {
    pub total: NodeId,
    pub adversarial: NodeId,
    pub content_l2: NodeId,
    pub residual_l2: NodeId,
}

/// Flow-side domain loss: swapped least-squares targets, an L2 penalty on
/// both content latents, and an L2 penalty pulling the LR network output
/// toward a stop-gradient copy of the LR content.
pub fn domain_loss_gen<T: Real>(
    g: &mut Graph<'_, T>,
    d: &Discriminator,
    z_c_hr: NodeId,
    z_c_lr: NodeId,
    z_lr: NodeId,
    beta1: f64,
    beta2: f64,
) -> Result<DomainTerms> {
    same_shape(g, z_lr, z_c_lr)?;
    let dh = d.apply(g, z_c_hr);
    let dl = d.apply(g, z_c_lr);
    let a = mse_to(g, dh, 1.0);
    let b = mean_square(g, dl);
    let adversarial = g.add(a, b);
    let nh = mean_square(g, z_c_hr);
    let nl = mean_square(g, z_c_lr);
    let content_l2 = g.add(nh, nl);
    let sg = g.detach(z_c_lr);
    let r = g.sub(z_lr, sg);
    let residual_l2 = mean_square(g, r);
    let total = weighted_sum(g, &[(1.0, adversarial), (beta1, content_l2), (beta2, residual_l2)]);
    Ok(DomainTerms { total, adversarial, content_l2, residual_l2 })
}

/// Forward-loss terms for one unpaired batch.
#[derive(Debug, Clone, Copy)]
pub struct ForwardTerms {
    /// Per-dimension NLL of the LR batch.
    pub nll_x: NodeId,
    /// Per-dimension NLL of the HR batch.
    pub nll_y: NodeId,
    pub content: ContentTerms,
    pub domain: Option<DomainTerms>,
    pub total: NodeId,
    pub hr: HrLatents,
    pub lr: LrLatents,
}

/// Likelihood and content terms, plus the domain terms when `with_domain`.
pub fn forward_losses<T: Real>(
    g: &mut Graph<'_, T>,
    model: &SdFlow,
    x: NodeId,
    y: NodeId,
    weights: &LossWeights,
    with_domain: bool,
) -> Result<ForwardTerms> {
    let (nx, lr) = model.ds.nll_x(g, x)?;
    let (ny, hr) = model.sr.nll_y(g, y)?;
    let nll_x = nll_per_dim(g, nx, g.shape(x).per_sample());
    let nll_y = nll_per_dim(g, ny, g.shape(y).per_sample());
    let content = content_loss(g, model, hr.z_c, lr.z_c, x, y, weights.alpha)?;
    let domain = if with_domain {
        Some(domain_loss_gen(g, &model.d_content, hr.z_c, lr.z_c, lr.z_lr, weights.beta1, weights.beta2)?)
    } else {
        None
    };
    let mut terms = vec![(1.0, nll_x), (1.0, nll_y), (1.0, content.total)];
    if let Some(d) = domain {
        terms.push((1.0, d.total));
    }
    let total = weighted_sum(g, &terms);
    Ok(ForwardTerms { nll_x, nll_y, content, domain, total, hr, lr })
}

/// Generation-side terms for one unpaired batch.
#[derive(Debug, Clone, Copy)]
pub struct BackwardTerms {
    pub ds_pixel: NodeId,
    pub ds_perceptual: NodeId,
    pub ds_adversarial: NodeId,
    pub sr_pixel: NodeId,
    pub sr_perceptual: NodeId,
    pub sr_adversarial: NodeId,
    /// λ-weighted downscaling total.
    pub ds_loss: NodeId,
    /// λ-weighted super-resolution total.
    pub sr_loss: NodeId,
    /// Downscaled HR batch at the perceptual temperature (discriminator fake).
    pub ds_fake: NodeId,
    /// Super-resolved LR batch at the perceptual temperature (discriminator fake).
    pub sr_fake: NodeId,
}

/// Generates from both directions and scores the outputs.
///
/// SR side: the LR content is decoded at `tau_pixel` and its low-pass
/// filtered bicubic downscale compared with the low-passed LR input; at
/// `tau_perceptual` it is compared in feature space with the bicubic upscale
/// of the input and scored by the SR discriminator. The DS side mirrors this
/// with the bicubic downscale of the HR input as reference.
pub fn backward_losses<T: Real>(
    g: &mut Graph<'_, T>,
    store: &ParamStore<T>,
    model: &SdFlow,
    x: NodeId,
    y: NodeId,
    weights: &LossWeights,
    rng: &mut impl Rng,
) -> Result<BackwardTerms> {
    let s = model.scale();
    let lam = weights.lambda;

    let z_c_lr = model.ds.content(g, x);
    let sr_px = model.sr.sr_generate(g, z_c_lr, weights.tau_pixel, rng)?;
    let sr_fake = model.sr.sr_generate(g, z_c_lr, weights.tau_perceptual, rng)?;
    let down = bicubic_downscale_node(g, sr_px, s)?;
    let a = lowpass_node(g, down, s);
    let b = lowpass_node(g, x, s);
    let sr_pixel = l1(g, a, b)?;
    let up = bicubic_upscale_node(g, x, s);
    let sr_perceptual = feature_l1(g, model, sr_fake, up)?;
    let sr_adversarial = lsgan_gen(g, &model.d_sr, sr_fake);

    let z_c_hr = model.hr_content(g, y)?;
    let ds_px = model.ds.degrade(g, store, z_c_hr, weights.tau_pixel, None, rng)?;
    let ds_fake = model.ds.degrade(g, store, z_c_hr, weights.tau_perceptual, None, rng)?;
    let reference = bicubic_downscale_node(g, y, s)?;
    let a = lowpass_node(g, ds_px, s);
    let b = lowpass_node(g, reference, s);
    let ds_pixel = l1(g, a, b)?;
    let ds_perceptual = feature_l1(g, model, ds_fake, reference)?;
    let ds_adversarial = lsgan_gen(g, &model.d_lr, ds_fake);

    let ds_loss = weighted_sum(g, &[(lam[0], ds_pixel), (lam[1], ds_perceptual), (lam[2], ds_adversarial)]);
    let sr_loss = weighted_sum(g, &[(lam[3], sr_pixel), (lam[4], sr_perceptual), (lam[5], sr_adversarial)]);
    Ok(BackwardTerms { ds_pixel, ds_perceptual, ds_adversarial, sr_pixel, sr_perceptual, sr_adversarial, ds_loss, sr_loss, ds_fake, sr_fake })
}
