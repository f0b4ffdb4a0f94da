//! Super-resolution direction: the HR flow factors an HR image into a content
//! latent and a high-frequency latent; the HF flow Gaussianizes the
//! high-frequency latent conditioned on content.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{split_channels, FlowLayer, FlowSequence};
use crate::model::ModelConfig;
use crate::nets::CondExtractor;
use crate::params::ParamBuilder;
use crate::priors::{std_normal_logp, std_normal_sample};
use crate::real::Real;
use crate::tensor::Shape;

/// Channels of the content latent.
pub const CONTENT_CHANNELS: usize = 3;

/// Output of [`SrFlow::hr_forward`].
#[derive(Debug, Clone, Copy)]
pub struct HrLatents {
    /// (N, 3, H / s, W / s)
    pub z_c: NodeId,
    /// (N, 3 s^2 - 3, H / s, W / s)
    pub z_h: NodeId,
    /// Per-sample log-determinant of the HR flow, (N, 1, 1, 1).
    pub logdet: NodeId,
}

#[derive(Debug, Clone)]
pub struct SrFlow {
    levels: Vec<FlowSequence>,
    hf_cond: CondExtractor,
    hf_steps: FlowSequence,
    scale: usize,
}

impl SrFlow {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Self {
        let n_levels = cfg.levels();
        let mut levels = Vec::with_capacity(n_levels);
        let mut c = 3;
        for l in 0..n_levels {
            c *= 4;
            let mut lb = b.scope(&format!("hr.level{l}"));
            let mut seq = FlowSequence { layers: vec![FlowLayer::Squeeze] };
            for t in 0..2 {
                seq.extend(FlowSequence::transition(&mut lb.scope(&format!("transition{t}")), c));
            }
            for k in 0..cfg.flow_steps {
                seq.extend(FlowSequence::flow_step(&mut lb.scope(&format!("step{k}")), c, cfg.coupling_width));
            }
            levels.push(seq);
        }
        let hf_channels = c - CONTENT_CHANNELS;
        let mut hb = b.scope("hf");
        let hf_cond = CondExtractor::new(&mut hb.scope("cond"), CONTENT_CHANNELS, cfg.cond_features, cfg.cond_growth, cfg.hf_blocks);
        let mut hf_steps = FlowSequence::default();
        for k in 0..cfg.cond_flow_steps {
            hf_steps.extend(FlowSequence::cond_flow_step(&mut hb.scope(&format!("step{k}")), hf_channels, cfg.cond_features, cfg.coupling_width));
        }
        SrFlow { levels, hf_cond, hf_steps, scale: cfg.scale }
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    /// Channels of the high-frequency latent.
    pub fn hf_channels(&self) -> usize {
        3 * self.scale * self.scale - CONTENT_CHANNELS
    }

    pub fn hr_forward<T: Real>(&self, g: &mut Graph<'_, T>, y: NodeId) -> Result<HrLatents> {
        let s = g.shape(y);
        if s.c != 3 || s.h % self.scale != 0 || s.w % self.scale != 0 {
            return Err(Error::shape(format!("HR input {s} must have 3 channels and sides divisible by {}", self.scale)));
        }
        let mut h = y;
        let mut logdet = g.zero_logdet(s.n);
        for level in &self.levels {
            let (o, l) = level.forward(g, h, None)?;
            h = o;
            logdet = g.add(logdet, l);
        }
        let (z_c, z_h) = split_channels(g, h, CONTENT_CHANNELS)?;
        Ok(HrLatents { z_c, z_h, logdet })
    }

    pub fn hr_inverse<T: Real>(&self, g: &mut Graph<'_, T>, z_c: NodeId, z_h: NodeId) -> Result<NodeId> {
        let (a, b) = (g.shape(z_c), g.shape(z_h));
        if a.c != CONTENT_CHANNELS || b.c != self.hf_channels() || a.with_c(b.c) != b {
            return Err(Error::shape(format!("latents {a} and {b} do not form an HR latent")));
        }
        let mut h = g.concat_channels(&[z_c, z_h]);
        for level in self.levels.iter().rev() {
            h = level.inverse(g, h, None)?;
        }
        Ok(h)
    }

    fn hf_features<T: Real>(&self, g: &mut Graph<'_, T>, z_h: NodeId, z_c: NodeId) -> Result<NodeId> {
        let (a, b) = (g.shape(z_c), g.shape(z_h));
        if a.c != CONTENT_CHANNELS || a.n != b.n || a.h != b.h || a.w != b.w {
            return Err(Error::shape(format!("content {a} does not align with high-frequency latent {b}")));
        }
        Ok(self.hf_cond.apply(g, z_c))
    }

    /// `(z'_h, logdet)`.
    pub fn hf_forward<T: Real>(&self, g: &mut Graph<'_, T>, z_h: NodeId, z_c: NodeId) -> Result<(NodeId, NodeId)> {
        let cond = self.hf_features(g, z_h, z_c)?;
        self.hf_steps.forward(g, z_h, Some(cond))
    }

    pub fn hf_inverse<T: Real>(&self, g: &mut Graph<'_, T>, zp_h: NodeId, z_c: NodeId) -> Result<NodeId> {
        let cond = self.hf_features(g, zp_h, z_c)?;
        self.hf_steps.inverse(g, zp_h, Some(cond))
    }

    /// Per-sample `-log p(z'_h) - log|det HR| - log|det HF|` in nats, and the HR latents.
    pub fn nll_y<T: Real>(&self, g: &mut Graph<'_, T>, y: NodeId) -> Result<(NodeId, HrLatents)> {
        let hr = self.hr_forward(g, y)?;
        let (zp, ld_hf) = self.hf_forward(g, hr.z_h, hr.z_c)?;
        let lp = std_normal_logp(g, zp);
        let total = g.add(lp, hr.logdet);
        let total = g.add(total, ld_hf);
        Ok((g.neg(total), hr))
    }

    /// Decodes content `z_c` with a high-frequency latent drawn at temperature `tau`.
    pub fn sr_generate<T: Real>(&self, g: &mut Graph<'_, T>, z_c: NodeId, tau: f64, rng: &mut impl Rng) -> Result<NodeId> {
        let s = g.shape(z_c);
        let zp = std_normal_sample(Shape::new(s.n, self.hf_channels(), s.h, s.w), tau, rng)?;
        let zp = g.input(zp);
        self.sr_decode(g, z_c, zp)
    }

    /// Decodes content with a given `z'_h`.
    pub fn sr_decode<T: Real>(&self, g: &mut Graph<'_, T>, z_c: NodeId, zp_h: NodeId) -> Result<NodeId> {
        let z_h = self.hf_inverse(g, zp_h, z_c)?;
        self.hr_inverse(g, z_c, z_h)
    }
}
