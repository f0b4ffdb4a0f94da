//! Model configuration, presets and the assembled bidirectional model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ds_flow::DsFlow;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{commit_staged, set_actnorm_initialized};
use crate::nets::{Discriminator, FeatureProxy};
use crate::params::{ParamBuilder, ParamGroup, ParamStore};
use crate::real::Real;
use crate::sr_flow::SrFlow;
use crate::tensor::Tensor;

/// Seed of the frozen feature proxy. Fixed so that feature distances are
/// comparable across models and runs.
pub const FEATURE_PROXY_SEED: u64 = 0x5eed_f00d;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Upscaling factor, one of 2, 4, 8.
    pub scale: usize,
    /// Unconditional flow steps per HR level and in the LR network.
    pub flow_steps: usize,
    /// Conditional flow steps in the HF and Deg flows.
    pub cond_flow_steps: usize,
    /// Dense blocks in the HF conditional extractor.
    pub hf_blocks: usize,
    /// Dense blocks in the Deg conditional extractor.
    pub deg_blocks: usize,
    /// Hidden width of coupling and injector networks.
    pub coupling_width: usize,
    /// Output channels of the conditional extractors.
    pub cond_features: usize,
    /// Growth channels inside dense blocks.
    pub cond_growth: usize,
    /// Conv layers in the degradation estimator.
    pub estimator_layers: usize,
    /// Modulated residual blocks in the LR content extractor.
    pub dm_blocks: usize,
    /// Trunk width of the LR content extractor.
    pub content_features: usize,
    /// Channels of the degradation estimator features.
    pub deg_features: usize,
    /// Mixture components of the degradation prior.
    pub mog_components: usize,
    /// Std of the initial mixture means.
    pub mog_mean_std: f64,
    /// LR training patch side; fixes the mixture parameter grid.
    pub lr_patch: usize,
    /// Base width of the patch discriminators.
    pub disc_features: usize,
}

impl ModelConfig {
    /// Tiny configuration for oracle checks and fast tests.
    pub fn toy() -> Self {
        ModelConfig {
            scale: 4,
            flow_steps: 2,
            cond_flow_steps: 2,
            hf_blocks: 1,
            deg_blocks: 1,
            coupling_width: 8,
            cond_features: 8,
            cond_growth: 4,
            estimator_layers: 2,
            dm_blocks: 1,
            content_features: 8,
            deg_features: 8,
            mog_components: 4,
            mog_mean_std: 0.1,
            lr_patch: 4,
            disc_features: 8,
        }
    }

    /// CPU-trainable default.
    pub fn desk() -> Self {
        ModelConfig {
            scale: 4,
            flow_steps: 8,
            cond_flow_steps: 4,
            hf_blocks: 4,
            deg_blocks: 2,
            coupling_width: 48,
            cond_features: 32,
            cond_growth: 16,
            estimator_layers: 4,
            dm_blocks: 8,
            content_features: 32,
            deg_features: 32,
            mog_components: 16,
            mog_mean_std: 0.1,
            lr_patch: 16,
            disc_features: 32,
        }
    }

    /// Full-size architecture.
    pub fn paper() -> Self {
        ModelConfig {
            flow_steps: 16,
            cond_flow_steps: 8,
            hf_blocks: 8,
            deg_blocks: 4,
            coupling_width: 64,
            cond_features: 64,
            cond_growth: 32,
            estimator_layers: 8,
            dm_blocks: 16,
            content_features: 64,
            deg_features: 64,
            lr_patch: 48,
            disc_features: 64,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Param(format!("unknown preset `{other}` (expected toy, desk or paper)"))),
        }
    }

    /// Number of HR squeeze levels, log2 of the scale.
    pub fn levels(&self) -> usize {
        self.scale.trailing_zeros() as usize
    }

    /// Side lengths of HR inputs must be multiples of this.
    pub fn hr_multiple(&self) -> usize {
        2 * self.scale
    }

    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8].contains(&self.scale) {
            return Err(Error::Param(format!("scale must be 2, 4 or 8, got {}", self.scale)));
        }
        let positive = [
            ("flow_steps", self.flow_steps),
            ("cond_flow_steps", self.cond_flow_steps),
            ("coupling_width", self.coupling_width),
            ("cond_features", self.cond_features),
            ("cond_growth", self.cond_growth),
            ("estimator_layers", self.estimator_layers),
            ("content_features", self.content_features),
            ("deg_features", self.deg_features),
            ("mog_components", self.mog_components),
            ("disc_features", self.disc_features),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Param(format!("{name} must be at least 1")));
            }
        }
        if self.lr_patch < 2 || self.lr_patch % 2 != 0 {
            return Err(Error::Param(format!("lr_patch must be even and at least 2, got {}", self.lr_patch)));
        }
        if !(self.mog_mean_std >= 0.0 && self.mog_mean_std.is_finite()) {
            return Err(Error::Param(format!("mog_mean_std must be finite and nonnegative, got {}", self.mog_mean_std)));
        }
        Ok(())
    }
}

/// Both flows, the three discriminators and the frozen feature proxy.
#[derive(Debug, Clone)]
pub struct SdFlow {
    pub config: ModelConfig,
    pub sr: SrFlow,
    pub ds: DsFlow,
    /// Separates HR content latents from LR content latents.
    pub d_content: Discriminator,
    /// Separates generated HR images from real ones.
    pub d_sr: Discriminator,
    /// Separates generated LR images from real ones.
    pub d_lr: Discriminator,
    pub proxy: FeatureProxy,
}

impl SdFlow {
    /// Builds the architecture and a freshly initialized parameter store.
    pub fn build<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Flow);
        let sr = SrFlow::new(&mut b, config);
        let ds = DsFlow::new(&mut b, config);
        let mut db = b.with_group(ParamGroup::Discriminator);
        let d_content = Discriminator::new(&mut db.scope("disc.content"), 3, config.disc_features);
        let d_sr = Discriminator::new(&mut db.scope("disc.sr"), 3, config.disc_features);
        let d_lr = Discriminator::new(&mut db.scope("disc.lr"), 3, config.disc_features);
        let mut proxy_rng = ChaCha8Rng::seed_from_u64(FEATURE_PROXY_SEED);
        let proxy = FeatureProxy::new(&mut ParamBuilder::new(&mut store, &mut proxy_rng, ParamGroup::Frozen).scope("proxy"));
        let model = SdFlow { config: config.clone(), sr, ds, d_content, d_sr, d_lr, proxy };
        Ok((model, store))
    }

    pub fn scale(&self) -> usize {
        self.config.scale
    }

    /// Runs both flows once on data to set ActNorm statistics, then marks
    /// every ActNorm initialized. Later calls are no-ops for initialized layers.
    pub fn data_init<T: Real>(&self, store: &mut ParamStore<T>, x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
        let staged = {
            let mut g = Graph::inference(store);
            let xi = g.input(x.clone());
            let yi = g.input(y.clone());
            self.ds.nll_x(&mut g, xi)?;
            self.sr.nll_y(&mut g, yi)?;
            g.take_staged()
        };
        commit_staged(store, staged)?;
        set_actnorm_initialized(store, true);
        Ok(())
    }

    /// HR content latent of `y`.
    pub fn hr_content<T: Real>(&self, g: &mut Graph<'_, T>, y: NodeId) -> Result<NodeId> {
        Ok(self.sr.hr_forward(g, y)?.z_c)
    }

    /// Super-resolves LR images at temperature `tau`.
    pub fn super_resolve<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId, tau: f64, rng: &mut impl Rng) -> Result<NodeId> {
        let z_c = self.ds.content(g, x);
        self.sr.sr_generate(g, z_c, tau, rng)
    }

    /// Downscales HR images at temperature `tau`, optionally from a fixed
    /// degradation component.
    pub fn downscale<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        store: &ParamStore<T>,
        y: NodeId,
        tau: f64,
        component: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<NodeId> {
        let z_c = self.hr_content(g, y)?;
        self.ds.degrade(g, store, z_c, tau, component, rng)
    }
}

/// Sets every invertible 1x1 convolution to the identity and marks every
/// ActNorm initialized at its construction values (zero bias, unit scale).
/// With zero-initialized coupling outputs every flow becomes a pure
/// permutation of its input.
pub fn identity_init<T: Real>(store: &mut ParamStore<T>) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let Some(stem) = name.strip_suffix(".perm").or(name.strip_suffix(".upper")).or(name.strip_suffix(".lower")) else {
            continue;
        };
        if !stem.ends_with("inv1x1") {
            continue;
        }
        let s = store.get(id).shape();
        let eye = !name.ends_with(".lower");
        store.set(id, Tensor::from_fn(s, |i, j, _, _| if eye && i == j { T::one() } else { T::zero() })).expect("same shape");
    }
    set_actnorm_initialized(store, true);
}
