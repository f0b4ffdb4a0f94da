//! Non-invertible networks: coupling nets, conditional feature extractors,
//! the LR content extractor, patch discriminators and the frozen feature proxy.

use crate::graph::{Graph, NodeId};
use crate::linalg;
use crate::params::{ParamBuilder, ParamGroup, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

const LRELU: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConvInit {
    /// He-normal weights multiplied by `scale`.
    He { scale: f64 },
    Zero,
    /// Rows of a random orthogonal matrix over the fan-in, times `gain`.
    Orthogonal { gain: f64 },
}

/// Square-kernel convolution with bias and "same"-style padding `k / 2`.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, init: ConvInit) -> Self {
        let fan_in = c_in * k * k;
        let shape = Shape::new(c_out, c_in, k, k);
        let w = match init {
            ConvInit::He { scale } => Tensor::randn(shape, scale * (2.0 / fan_in as f64).sqrt(), b.rng()),
            ConvInit::Zero => Tensor::zeros(shape),
            ConvInit::Orthogonal { gain } => {
                let n = fan_in.max(c_out);
                let q = linalg::random_orthogonal(n, b.rng());
                let data: Vec<f64> = (0..c_out).flat_map(|o| q[o * n..o * n + fan_in].iter().map(|v| v * gain).collect::<Vec<_>>()).collect();
                Tensor::from_f64(shape, &data).unwrap()
            }
        };
        let mut s = b.scope(name);
        let weight = s.add("weight", w);
        let bias = s.add("bias", Tensor::zeros(Shape::new(1, c_out, 1, 1)));
        Conv { weight, bias, c_in, c_out, stride, pad: k / 2 }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Scale/shift network of a coupling layer or injector:
/// conv3x3 + ReLU, conv3x3 + ReLU, zero-initialized conv3x3.
#[derive(Debug, Clone)]
pub struct CouplingNet {
    hidden1: Conv,
    hidden2: Conv,
    out: Conv,
}

impl CouplingNet {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, c_in: usize, c_out: usize, width: usize) -> Self {
        CouplingNet {
            hidden1: Conv::new(b, "conv1", c_in, width, 3, 1, ConvInit::He { scale: 1.0 }),
            hidden2: Conv::new(b, "conv2", width, width, 3, 1, ConvInit::He { scale: 1.0 }),
            out: Conv::new(b, "conv_out", width, c_out, 3, 1, ConvInit::Zero),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out.c_out
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        let h = self.hidden1.apply(g, x);
        let h = g.relu(h);
        let h = self.hidden2.apply(g, h);
        let h = g.relu(h);
        self.out.apply(g, h)
    }
}

/// Densely connected block: three growth convs with LeakyReLU, a fusion conv
/// back to the trunk width, and a scaled residual connection.
#[derive(Debug, Clone)]
struct DenseBlock {
    growth: Vec<Conv>,
    fuse: Conv,
}

const RESIDUAL_SCALE: f64 = 0.2;
const DENSE_LAYERS: usize = 3;

impl DenseBlock {
    fn new<T: Real>(b: &mut ParamBuilder<'_, T>, nf: usize, gc: usize) -> Self {
        let growth = (0..DENSE_LAYERS)
            .map(|i| Conv::new(b, &format!("conv{i}"), nf + i * gc, gc, 3, 1, ConvInit::He { scale: 0.1 }))
            .collect();
        let fuse = Conv::new(b, "fuse", nf + DENSE_LAYERS * gc, nf, 3, 1, ConvInit::He { scale: 0.1 });
        DenseBlock { growth, fuse }
    }

    fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        let mut feats = vec![x];
        for conv in &self.growth {
            let inp = g.concat_channels(&feats);
            let h = conv.apply(g, inp);
            feats.push(g.leaky_relu(h, LRELU));
        }
        let inp = g.concat_channels(&feats);
        let h = self.fuse.apply(g, inp);
        let h = g.scale(h, RESIDUAL_SCALE);
        g.add(x, h)
    }
}

/// Conditional feature extractor: residual dense blocks without upsampling.
/// Output spatial size equals input spatial size.
#[derive(Debug, Clone)]
pub struct CondExtractor {
    first: Conv,
    blocks: Vec<DenseBlock>,
    body: Conv,
}

impl CondExtractor {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, c_in: usize, nf: usize, growth: usize, n_blocks: usize) -> Self {
        let first = Conv::new(b, "conv_first", c_in, nf, 3, 1, ConvInit::He { scale: 1.0 });
        let blocks = (0..n_blocks).map(|i| DenseBlock::new(&mut b.scope(&format!("block{i}")), nf, growth)).collect();
        let body = Conv::new(b, "conv_body", nf, nf, 3, 1, ConvInit::He { scale: 0.1 });
        CondExtractor { first, blocks, body }
    }

    pub fn out_channels(&self) -> usize {
        self.first.c_out
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        let feat = self.first.apply(g, x);
        let mut h = feat;
        for blk in &self.blocks {
            h = blk.apply(g, h);
        }
        let h = self.body.apply(g, h);
        g.add(feat, h)
    }
}

/// Per-position affine modulation driven by degradation features:
/// `(1 + scale(d)) * h + shift(d)`, identity at initialization.
#[derive(Debug, Clone)]
struct DegModulation {
    scale: Conv,
    shift: Conv,
}

impl DegModulation {
    fn new<T: Real>(b: &mut ParamBuilder<'_, T>, deg_ch: usize, nf: usize) -> Self {
        DegModulation {
            scale: Conv::new(b, "scale", deg_ch, nf, 1, 1, ConvInit::Zero),
            shift: Conv::new(b, "shift", deg_ch, nf, 1, 1, ConvInit::Zero),
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<'_, T>, h: NodeId, deg: NodeId) -> NodeId {
        let s = self.scale.apply(g, deg);
        let s = g.add_scalar(s, 1.0);
        let b = self.shift.apply(g, deg);
        let m = g.mul(h, s);
        g.add(m, b)
    }
}

#[derive(Debug, Clone)]
struct DmResBlock {
    conv1: Conv,
    dm1: DegModulation,
    conv2: Conv,
    dm2: DegModulation,
}

impl DmResBlock {
    fn new<T: Real>(b: &mut ParamBuilder<'_, T>, nf: usize, deg_ch: usize) -> Self {
        DmResBlock {
            conv1: Conv::new(b, "conv1", nf, nf, 3, 1, ConvInit::He { scale: 0.1 }),
            dm1: DegModulation::new(&mut b.scope("dm1"), deg_ch, nf),
            conv2: Conv::new(b, "conv2", nf, nf, 3, 1, ConvInit::He { scale: 0.1 }),
            dm2: DegModulation::new(&mut b.scope("dm2"), deg_ch, nf),
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId, deg: NodeId) -> NodeId {
        let h = self.conv1.apply(g, x);
        let h = self.dm1.apply(g, h, deg);
        let h = g.leaky_relu(h, LRELU);
        let h = self.conv2.apply(g, h);
        let h = self.dm2.apply(g, h, deg);
        g.add(x, h)
    }
}

/// Maps an LR image to its content latent. A degradation estimator produces
/// features that modulate a residual trunk; the result is added to the input.
#[derive(Debug, Clone)]
pub struct LrContentExtractor {
    estimator: Vec<Conv>,
    first: Conv,
    blocks: Vec<DmResBlock>,
    last: Conv,
}

impl LrContentExtractor {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, nf: usize, deg_ch: usize, estimator_layers: usize, n_blocks: usize) -> Self {
        let mut e = b.scope("estimator");
        let estimator = (0..estimator_layers)
            .map(|i| Conv::new(&mut e, &format!("conv{i}"), if i == 0 { 3 } else { deg_ch }, deg_ch, 3, 1, ConvInit::He { scale: 1.0 }))
            .collect();
        let first = Conv::new(b, "conv_first", 3, nf, 3, 1, ConvInit::He { scale: 1.0 });
        let blocks = (0..n_blocks).map(|i| DmResBlock::new(&mut b.scope(&format!("block{i}")), nf, deg_ch)).collect();
        let last = Conv::new(b, "conv_last", nf, 3, 3, 1, ConvInit::Zero);
        LrContentExtractor { estimator, first, blocks, last }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        let mut deg = x;
        for conv in &self.estimator {
            let h = conv.apply(g, deg);
            deg = g.leaky_relu(h, LRELU);
        }
        let mut h = self.first.apply(g, x);
        for blk in &self.blocks {
            h = blk.apply(g, h, deg);
        }
        let h = g.leaky_relu(h, LRELU);
        let r = self.last.apply(g, h);
        g.add(x, r)
    }
}

/// Patch discriminator: two stride-2 convs, one stride-1 conv, then a 1-channel
/// score map. LeakyReLU(0.2) between layers, no normalization.
#[derive(Debug, Clone)]
pub struct Discriminator {
    convs: Vec<Conv>,
}

impl Discriminator {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, c_in: usize, nf: usize) -> Self {
        let init = ConvInit::He { scale: 1.0 };
        let convs = vec![
            Conv::new(b, "conv0", c_in, nf, 3, 2, init),
            Conv::new(b, "conv1", nf, 2 * nf, 3, 2, init),
            Conv::new(b, "conv2", 2 * nf, 2 * nf, 3, 1, init),
            Conv::new(b, "conv3", 2 * nf, 1, 3, 1, ConvInit::He { scale: 0.1 }),
        ];
        Discriminator { convs }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.apply(g, h);
            if i + 1 < self.convs.len() {
                h = g.leaky_relu(h, LRELU);
            }
        }
        h
    }
}

/// Frozen random feature stack used for perceptual and distribution terms:
/// five stride-2 3x3 conv levels with LeakyReLU and orthogonal rows.
#[derive(Debug, Clone)]
pub struct FeatureProxy {
    convs: Vec<Conv>,
}

pub const FEATURE_PROXY_WIDTHS: [usize; 5] = [16, 32, 32, 64, 64];

impl FeatureProxy {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>) -> Self {
        let mut b = b.with_group(ParamGroup::Frozen);
        let mut c_in = 3;
        let mut convs = Vec::new();
        for (i, &c) in FEATURE_PROXY_WIDTHS.iter().enumerate() {
            convs.push(Conv::new(&mut b, &format!("conv{i}"), c_in, c, 3, 2, ConvInit::Orthogonal { gain: 2f64.sqrt() }));
            c_in = c;
        }
        FeatureProxy { convs }
    }

    pub fn out_channels(&self) -> usize {
        self.convs.last().unwrap().c_out
    }

    /// Deepest-level feature map of an image batch in [0, 1].
    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        let mut h = g.add_scalar(x, -0.5);
        for conv in &self.convs {
            let z = conv.apply(g, h);
            h = g.leaky_relu(z, LRELU);
        }
        h
    }

    /// Spatially averaged deepest features, one vector per image.
    pub fn pooled<T: Real>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Vec<Vec<f64>> {
        let mut g = Graph::inference(store);
        let x = g.input(images.clone());
        let f = self.apply(&mut g, x);
        let fv = g.value(f);
        let s = fv.shape();
        (0..s.n)
            .map(|n| fv.sample(n).chunks(s.plane()).map(|p| p.iter().map(|v| v.as_f64()).sum::<f64>() / p.len() as f64).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_and_rng() -> (ParamStore<f64>, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(11))
    }

    #[test]
    fn coupling_net_starts_at_zero() {
        let (mut store, mut rng) = store_and_rng();
        let net = CouplingNet::new(&mut ParamBuilder::new(&mut store, &mut rng, ParamGroup::Flow).scope("c"), 2, 4, 8);
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::randn(Shape::new(1, 2, 4, 4), 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let y = net.apply(&mut g, x);
        assert_eq!(g.shape(y), Shape::new(1, 4, 4, 4));
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extractors_keep_spatial_size() {
        let (mut store, mut rng) = store_and_rng();
        let mut b = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Flow);
        let cond = CondExtractor::new(&mut b.scope("cond"), 3, 8, 4, 2);
        let lr = LrContentExtractor::new(&mut b.scope("lr"), 8, 6, 2, 2);
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::rand_uniform(Shape::new(2, 3, 6, 6), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let c = cond.apply(&mut g, x);
        assert_eq!(g.shape(c), Shape::new(2, 8, 6, 6));
        let z = lr.apply(&mut g, x);
        // zero-initialized output conv: content equals the input
        assert_eq!(g.value(z), g.value(x));
    }

    #[test]
    fn discriminator_and_proxy_shapes() {
        let (mut store, mut rng) = store_and_rng();
        let mut b = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Discriminator);
        let d = Discriminator::new(&mut b.scope("d"), 3, 8);
        let proxy = FeatureProxy::new(&mut b.scope("proxy"));
        assert!(store.ids_in(ParamGroup::Frozen).len() == 10);
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::zeros(Shape::new(2, 3, 16, 16)));
        let s = d.apply(&mut g, x);
        assert_eq!(g.shape(s), Shape::new(2, 1, 4, 4));
        let f = proxy.apply(&mut g, x);
        assert_eq!(g.shape(f), Shape::new(2, 64, 1, 1));
    }

    #[test]
    fn proxy_is_seed_deterministic() {
        let build = |seed| {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = FeatureProxy::new(&mut ParamBuilder::new(&mut store, &mut rng, ParamGroup::Frozen));
            let img = Tensor::rand_uniform(Shape::new(1, 3, 32, 32), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
            p.pooled(&store, &img)
        };
        assert_eq!(build(5), build(5));
        assert_ne!(build(5), build(6));
    }

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let (mut store, mut rng) = store_and_rng();
        let conv = Conv::new(&mut ParamBuilder::new(&mut store, &mut rng, ParamGroup::Frozen), "c", 2, 5, 3, 1, ConvInit::Orthogonal { gain: 1.0 });
        let w = store.get(conv.weight).to_f64_vec();
        for a in 0..5 {
            for b in 0..5 {
                let dot: f64 = (0..18).map(|k| w[a * 18 + k] * w[b * 18 + k]).sum();
                assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }
}
