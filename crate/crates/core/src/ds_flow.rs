//! Downscaling direction: the LR flow factors an LR image into content and
//! degradation latents by subtraction; the Deg flow maps the degradation
//! latent, conditioned on content, onto a mixture-of-Gaussians base.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{squeeze, FlowLayer, FlowSequence};
use crate::model::ModelConfig;
use crate::nets::{CondExtractor, LrContentExtractor};
use crate::params::{ParamBuilder, ParamStore};
use crate::priors::MogPrior;
use crate::real::Real;
use crate::tensor::Shape;

/// Channels of the squeezed LR representation.
pub const SQUEEZED_CHANNELS: usize = 12;

/// Output of [`DsFlow::lr_forward`].
#[derive(Debug, Clone, Copy)]
pub struct LrLatents {
    /// Content latent, (N, 3, H', W').
    pub z_c: NodeId,
    /// Degradation latent `z_lr - z_c`, (N, 3, H', W').
    pub z_d: NodeId,
    /// Output of the invertible network, (N, 3, H', W').
    pub z_lr: NodeId,
    /// Per-sample log-determinant of the invertible network.
    pub logdet: NodeId,
}

#[derive(Debug, Clone)]
pub struct DsFlow {
    inn: FlowSequence,
    content: LrContentExtractor,
    deg_cond: CondExtractor,
    deg_steps: FlowSequence,
    pub mog: MogPrior,
}

fn downscale_block<T: Real>(b: &mut ParamBuilder<'_, T>) -> FlowSequence {
    let mut seq = FlowSequence { layers: vec![FlowLayer::Squeeze] };
    for t in 0..2 {
        seq.extend(FlowSequence::transition(&mut b.scope(&format!("transition{t}")), SQUEEZED_CHANNELS));
    }
    seq
}

impl DsFlow {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Self {
        let mut lb = b.scope("lr");
        let mut inn = downscale_block(&mut lb.scope("db"));
        for k in 0..cfg.flow_steps {
            inn.extend(FlowSequence::flow_step(&mut lb.scope(&format!("step{k}")), SQUEEZED_CHANNELS, cfg.coupling_width));
        }
        inn.layers.push(FlowLayer::Unsqueeze);
        let content = LrContentExtractor::new(&mut lb.scope("content"), cfg.content_features, cfg.deg_features, cfg.estimator_layers, cfg.dm_blocks);

        let mut db = b.scope("deg");
        let deg_cond = CondExtractor::new(&mut db.scope("cond"), SQUEEZED_CHANNELS, cfg.cond_features, cfg.cond_growth, cfg.deg_blocks);
        let mut deg_steps = downscale_block(&mut db.scope("db"));
        for k in 0..cfg.cond_flow_steps {
            deg_steps.extend(FlowSequence::cond_flow_step(&mut db.scope(&format!("step{k}")), SQUEEZED_CHANNELS, cfg.cond_features, cfg.coupling_width));
        }
        let side = cfg.lr_patch / 2;
        let mog = MogPrior::new(&mut db.scope("mog"), cfg.mog_components, (SQUEEZED_CHANNELS, side, side), cfg.mog_mean_std);
        DsFlow { inn, content, deg_cond, deg_steps, mog }
    }

    fn check_lr(s: Shape) -> Result<()> {
        if s.c != 3 || s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::shape(format!("LR input {s} must have 3 channels and even sides")));
        }
        Ok(())
    }

    /// Invertible network alone: (N, 3, H', W') -> (N, 3, H', W').
    pub fn inn_forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<(NodeId, NodeId)> {
        Self::check_lr(g.shape(x))?;
        self.inn.forward(g, x, None)
    }

    /// Squeezed representation inside the invertible network, before the
    /// final unsqueeze: (N, 12, H'/2, W'/2).
    pub fn inn_features<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        Self::check_lr(g.shape(x))?;
        let inner = FlowSequence { layers: self.inn.layers[..self.inn.layers.len() - 1].to_vec() };
        Ok(inner.forward(g, x, None)?.0)
    }

    pub fn content<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        self.content.apply(g, x)
    }

    pub fn lr_forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<LrLatents> {
        let (z_lr, logdet) = self.inn_forward(g, x)?;
        let z_c = self.content.apply(g, x);
        let z_d = g.sub(z_lr, z_c);
        Ok(LrLatents { z_c, z_d, z_lr, logdet })
    }

    pub fn lr_inverse<T: Real>(&self, g: &mut Graph<'_, T>, z_c: NodeId, z_d: NodeId) -> Result<NodeId> {
        if g.shape(z_c) != g.shape(z_d) {
            return Err(Error::shape(format!("content {} and degradation {} differ in shape", g.shape(z_c), g.shape(z_d))));
        }
        Self::check_lr(g.shape(z_c))?;
        let z_lr = g.add(z_c, z_d);
        self.inn.inverse(g, z_lr, None)
    }

    /// Decodes content alone (degradation latent zero).
    pub fn content_decode<T: Real>(&self, g: &mut Graph<'_, T>, z_c: NodeId) -> Result<NodeId> {
        Self::check_lr(g.shape(z_c))?;
        self.inn.inverse(g, z_c, None)
    }

    fn deg_features<T: Real>(&self, g: &mut Graph<'_, T>, z_c: NodeId) -> Result<NodeId> {
        let sq = squeeze(g, z_c)?;
        Ok(self.deg_cond.apply(g, sq))
    }

    /// `(z'_d, logdet)` with `z'_d` of shape (N, 12, H'/2, W'/2).
    pub fn deg_forward<T: Real>(&self, g: &mut Graph<'_, T>, z_d: NodeId, z_c: NodeId) -> Result<(NodeId, NodeId)> {
        if g.shape(z_c) != g.shape(z_d) {
            return Err(Error::shape(format!("content {} and degradation {} differ in shape", g.shape(z_c), g.shape(z_d))));
        }
        Self::check_lr(g.shape(z_d))?;
        let cond = self.deg_features(g, z_c)?;
        self.deg_steps.forward(g, z_d, Some(cond))
    }

    pub fn deg_inverse<T: Real>(&self, g: &mut Graph<'_, T>, zp_d: NodeId, z_c: NodeId) -> Result<NodeId> {
        let (a, b) = (g.shape(zp_d), g.shape(z_c));
        if a != Shape::new(b.n, SQUEEZED_CHANNELS, b.h / 2, b.w / 2) {
            return Err(Error::shape(format!("degradation latent {a} does not match content {b}")));
        }
        let cond = self.deg_features(g, z_c)?;
        self.deg_steps.inverse(g, zp_d, Some(cond))
    }

    /// Per-sample `-log p(z'_d) - log|det LR| - log|det Deg|` in nats, and the LR latents.
    pub fn nll_x<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<(NodeId, LrLatents)> {
        let lr = self.lr_forward(g, x)?;
        let (zp, ld) = self.deg_forward(g, lr.z_d, lr.z_c)?;
        let lp = self.mog.logp(g, zp);
        let total = g.add(lp, lr.logdet);
        let total = g.add(total, ld);
        Ok((g.neg(total), lr))
    }

    /// Decodes content `z_c` (shape of an LR image) with a degradation latent
    /// drawn at temperature `tau`, optionally from a fixed mixture component.
    pub fn degrade<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        store: &ParamStore<T>,
        z_c: NodeId,
        tau: f64,
        component: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<NodeId> {
        let s = g.shape(z_c);
        Self::check_lr(s)?;
        let (zp, _) = self.mog.sample(store, Shape::new(s.n, SQUEEZED_CHANNELS, s.h / 2, s.w / 2), tau, component, rng)?;
        let zp = g.input(zp);
        let z_d = self.deg_inverse(g, zp, z_c)?;
        self.lr_inverse(g, z_c, z_d)
    }
}
