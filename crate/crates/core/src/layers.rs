//! Invertible layers with exact inverses and analytic log-determinants.
//!
//! Every `forward` returns the output together with a per-sample log-determinant
//! of shape (N, 1, 1, 1). Layers own no tensors; their parameters live in the
//! shared [`ParamStore`] and are bound into a [`Graph`] on use.

use std::fmt;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::linalg::{self, Lu};
use crate::nets::CouplingNet;
use crate::params::{ParamBuilder, ParamGroup, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Log-scales pass through `s -> SCALE_CLAMP * tanh(s / SCALE_CLAMP)`.
pub const SCALE_CLAMP: f64 = 5.0;

/// Smallest admissible |diag(U)| of an invertible 1x1 convolution.
pub const MIN_PIVOT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    ActNorm,
    Inv1x1,
    AffineCoupling,
    CondAffineCoupling,
    AffineInjector,
    Squeeze,
    Unsqueeze,
}

impl LayerKind {
    pub const ALL: [LayerKind; 7] = [
        LayerKind::ActNorm,
        LayerKind::Inv1x1,
        LayerKind::AffineCoupling,
        LayerKind::CondAffineCoupling,
        LayerKind::AffineInjector,
        LayerKind::Squeeze,
        LayerKind::Unsqueeze,
    ];
}

impl std::str::FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Param(format!("unknown layer kind `{s}`")))
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LayerKind::ActNorm => "actnorm",
            LayerKind::Inv1x1 => "inv1x1",
            LayerKind::AffineCoupling => "affine_coupling",
            LayerKind::CondAffineCoupling => "cond_affine_coupling",
            LayerKind::AffineInjector => "affine_injector",
            LayerKind::Squeeze => "squeeze",
            LayerKind::Unsqueeze => "unsqueeze",
        };
        f.write_str(s)
    }
}

/// Per-channel affine normalization `y = s * (x + b)` with data-dependent init.
#[derive(Debug, Clone)]
pub struct ActNorm {
    name: String,
    pub bias: ParamId,
    pub scale: ParamId,
    /// Frozen scalar flag, 1 once the data-dependent init has been committed.
    pub initialized: ParamId,
}

impl ActNorm {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, channels: usize) -> Self {
        let cs = Shape::new(1, channels, 1, 1);
        let bias = b.add("bias", Tensor::zeros(cs));
        let scale = b.add("scale", Tensor::full(cs, T::one()));
        let initialized = b.add_in("initialized", Tensor::scalar(T::zero()), ParamGroup::Frozen);
        ActNorm { name: b.prefix().to_string(), bias, scale, initialized }
    }

    /// Bias and scale nodes. On the first forward pass of an uninitialized
    /// layer they are computed from `x` and staged on the graph.
    fn resolve<T: Real>(&self, g: &mut Graph<'_, T>, x: Option<NodeId>) -> Result<(NodeId, NodeId)> {
        let (b, s) = if g.params().get(self.initialized).item() != T::zero() {
            (g.param(self.bias), g.param(self.scale))
        } else if let (Some(bv), Some(sv)) = (g.staged(self.bias).cloned(), g.staged(self.scale).cloned()) {
            (g.input(bv), g.input(sv))
        } else if let Some(x) = x {
            let (bv, sv) = data_init(g.value(x));
            g.stage(self.bias, bv.clone());
            g.stage(self.scale, sv.clone());
            g.stage(self.initialized, Tensor::scalar(T::one()));
            (g.input(bv), g.input(sv))
        } else {
            (g.param(self.bias), g.param(self.scale))
        };
        if let Some(c) = g.value(s).data().iter().position(|v| *v == T::zero()) {
            return Err(Error::degenerate(&self.name, format!("scale of channel {c} is zero")));
        }
        Ok((b, s))
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<(NodeId, NodeId)> {
        let (b, s) = self.resolve(g, Some(x))?;
        let xs = g.shape(x);
        let h = g.add_channel(x, b);
        let y = g.mul_channel(h, s);
        let l = g.log_abs(s);
        let l = g.sum_all(l);
        let l = g.scale(l, xs.plane() as f64);
        Ok((y, g.expand_batch(l, xs.n)))
    }

    fn inverse<T: Real>(&self, g: &mut Graph<'_, T>, y: NodeId) -> Result<NodeId> {
        let (b, s) = self.resolve(g, None)?;
        let inv = g.recip(s);
        let h = g.mul_channel(y, inv);
        let nb = g.neg(b);
        Ok(g.add_channel(h, nb))
    }
}

/// Bias and scale that give zero mean and unit variance per channel.
fn data_init<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let count = (s.n * s.plane()) as f64;
    let mut mean = vec![0.0; s.c];
    let mut sq = vec![0.0; s.c];
    for (i, plane) in x.data().chunks(s.plane()).enumerate() {
        for v in plane {
            mean[i % s.c] += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for (i, plane) in x.data().chunks(s.plane()).enumerate() {
        for v in plane {
            sq[i % s.c] += (v.as_f64() - mean[i % s.c]).powi(2);
        }
    }
    let cs = Shape::new(1, s.c, 1, 1);
    let bias: Vec<f64> = mean.iter().map(|m| -m).collect();
    let scale: Vec<f64> = sq.iter().map(|q| 1.0 / ((q / count).sqrt() + 1e-6)).collect();
    (Tensor::from_f64(cs, &bias).unwrap(), Tensor::from_f64(cs, &scale).unwrap())
}

/// Invertible 1x1 convolution with weight `W = P (L + I) U`: `P` a fixed
/// permutation, `L` strictly lower, `U` upper triangular.
#[derive(Debug, Clone)]
pub struct Inv1x1 {
    name: String,
    channels: usize,
    pub perm: ParamId,
    pub lower: ParamId,
    pub upper: ParamId,
}

impl Inv1x1 {
    /// Initialized from the LU factors of a random orthogonal matrix.
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, channels: usize) -> Self {
        let q = linalg::random_orthogonal(channels, b.rng());
        let lu = Lu::decompose(&q, channels);
        let mut lower = lu.lower.clone();
        for k in 0..channels {
            lower[k * channels + k] = 0.0;
        }
        Self::from_factors(b, channels, &lu.perm_matrix(), &lower, &lu.upper)
    }

    /// Builds the layer from explicit factors (row-major `C x C`).
    pub fn from_factors<T: Real>(b: &mut ParamBuilder<'_, T>, channels: usize, perm: &[f64], lower: &[f64], upper: &[f64]) -> Self {
        let ms = Shape::new(channels, channels, 1, 1);
        let perm = b.add_in("perm", Tensor::from_f64(ms, perm).unwrap(), ParamGroup::Frozen);
        let lower = b.add("lower", Tensor::from_f64(ms, lower).unwrap());
        let upper = b.add("upper", Tensor::from_f64(ms, upper).unwrap());
        Inv1x1 { name: b.prefix().to_string(), channels, perm, lower, upper }
    }

    /// Weight node (C, C, 1, 1) and the masked upper factor.
    fn weight<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<(NodeId, NodeId)> {
        let c = self.channels;
        let uv = g.params().get(self.upper);
        for k in 0..c {
            let d = uv.data()[k * c + k].as_f64().abs();
            if d.is_nan() || d < MIN_PIVOT {
                return Err(Error::degenerate(&self.name, format!("|diag(U)[{k}]| = {d:e} below {MIN_PIVOT:e}")));
            }
        }
        let ms = Shape::new(c, c, 1, 1);
        let lower_mask = g.input(Tensor::from_fn(ms, |i, j, _, _| if j < i { T::one() } else { T::zero() }));
        let upper_mask = g.input(Tensor::from_fn(ms, |i, j, _, _| if j >= i { T::one() } else { T::zero() }));
        let eye = g.input(Tensor::from_fn(ms, |i, j, _, _| if i == j { T::one() } else { T::zero() }));
        let p = g.param(self.perm);
        let l = g.param(self.lower);
        let u = g.param(self.upper);
        let l = g.mul(l, lower_mask);
        let l = g.add(l, eye);
        let u = g.mul(u, upper_mask);
        let lu = g.matmul(l, u);
        Ok((g.matmul(p, lu), u))
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<(NodeId, NodeId)> {
        let xs = g.shape(x);
        let (w, u) = self.weight(g)?;
        let y = g.conv2d(x, w, None, 1, 0);
        let l = g.sum_log_abs_diag(u);
        let l = g.scale(l, xs.plane() as f64);
        Ok((y, g.expand_batch(l, xs.n)))
    }

    fn inverse<T: Real>(&self, g: &mut Graph<'_, T>, y: NodeId) -> Result<NodeId> {
        let (w, _) = self.weight(g)?;
        let wi = g.mat_inverse(w);
        Ok(g.conv2d(y, wi, None, 1, 0))
    }
}

/// Affine coupling: the first `ceil(C/2)` channels pass through and
/// parameterize an elementwise affine map of the rest. With `cond_channels > 0`
/// the net also sees a conditioning tensor.
#[derive(Debug, Clone)]
pub struct AffineCoupling {
    name: String,
    channels: usize,
    cond_channels: usize,
    net: CouplingNet,
}

impl AffineCoupling {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, channels: usize, cond_channels: usize, width: usize) -> Self {
        assert!(channels >= 2, "coupling needs at least two channels");
        let keep = channels.div_ceil(2);
        let net = CouplingNet::new(&mut b.scope("net"), keep + cond_channels, 2 * (channels - keep), width);
        AffineCoupling { name: b.prefix().to_string(), channels, cond_channels, net }
    }

    fn keep(&self) -> usize {
        self.channels.div_ceil(2)
    }

    /// Clamped log-scale and shift for the transformed half.
    fn scale_shift<T: Real>(&self, g: &mut Graph<'_, T>, za: NodeId, cond: Option<NodeId>) -> Result<(NodeId, NodeId)> {
        let inp = match (self.cond_channels, cond) {
            (0, _) => za,
            (cc, Some(c)) => {
                check_cond(&self.name, g.shape(za), g.shape(c), Some(cc))?;
                g.concat_channels(&[za, c])
            }
            (_, None) => return Err(Error::shape(format!("{}: conditioning input required", self.name))),
        };
        let h = self.net.apply(g, inp);
        let nb = self.channels - self.keep();
        let raw = g.narrow_channels(h, 0, nb);
        let shift = g.narrow_channels(h, nb, nb);
        Ok((g.soft_clamp(raw, SCALE_CLAMP), shift))
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId, cond: Option<NodeId>) -> Result<(NodeId, NodeId)> {
        check_channels(&self.name, g.shape(x), self.channels)?;
        let keep = self.keep();
        let za = g.narrow_channels(x, 0, keep);
        let zb = g.narrow_channels(x, keep, self.channels - keep);
        let (s, t) = self.scale_shift(g, za, cond)?;
        let e = g.exp(s);
        let yb = g.mul(e, zb);
        let yb = g.add(yb, t);
        let y = g.concat_channels(&[za, yb]);
        Ok((y, g.sum_per_sample(s)))
    }

    fn inverse<T: Real>(&self, g: &mut Graph<'_, T>, y: NodeId, cond: Option<NodeId>) -> Result<NodeId> {
        check_channels(&self.name, g.shape(y), self.channels)?;
        let keep = self.keep();
        let za = g.narrow_channels(y, 0, keep);
        let yb = g.narrow_channels(y, keep, self.channels - keep);
        let (s, t) = self.scale_shift(g, za, cond)?;
        let d = g.sub(yb, t);
        let ns = g.neg(s);
        let e = g.exp(ns);
        let zb = g.mul(d, e);
        Ok(g.concat_channels(&[za, zb]))
    }
}

/// Affine injector: `y = exp(clamp(g_s(cond))) * x + g_b(cond)` over all channels.
#[derive(Debug, Clone)]
pub struct AffineInjector {
    name: String,
    channels: usize,
    net: CouplingNet,
}

impl AffineInjector {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, channels: usize, cond_channels: usize, width: usize) -> Self {
        let net = CouplingNet::new(&mut b.scope("net"), cond_channels, 2 * channels, width);
        AffineInjector { name: b.prefix().to_string(), channels, net }
    }

    fn scale_shift<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId, cond: Option<NodeId>) -> Result<(NodeId, NodeId)> {
        check_channels(&self.name, g.shape(x), self.channels)?;
        let c = cond.ok_or_else(|| Error::shape(format!("{}: conditioning input required", self.name)))?;
        check_cond(&self.name, g.shape(x), g.shape(c), None)?;
        let h = self.net.apply(g, c);
        let raw = g.narrow_channels(h, 0, self.channels);
        let shift = g.narrow_channels(h, self.channels, self.channels);
        Ok((g.soft_clamp(raw, SCALE_CLAMP), shift))
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId, cond: Option<NodeId>) -> Result<(NodeId, NodeId)> {
        let (s, t) = self.scale_shift(g, x, cond)?;
        let e = g.exp(s);
        let y = g.mul(e, x);
        let y = g.add(y, t);
        Ok((y, g.sum_per_sample(s)))
    }

    fn inverse<T: Real>(&self, g: &mut Graph<'_, T>, y: NodeId, cond: Option<NodeId>) -> Result<NodeId> {
        let (s, t) = self.scale_shift(g, y, cond)?;
        let d = g.sub(y, t);
        let ns = g.neg(s);
        let e = g.exp(ns);
        Ok(g.mul(d, e))
    }
}

fn check_channels(name: &str, x: Shape, expected: usize) -> Result<()> {
    if x.c != expected {
        return Err(Error::shape(format!("{name}: expected {expected} channels, got {x}")));
    }
    Ok(())
}

fn check_cond(name: &str, x: Shape, cond: Shape, channels: Option<usize>) -> Result<()> {
    if x.n != cond.n || x.h != cond.h || x.w != cond.w {
        return Err(Error::shape(format!("{name}: conditioning {cond} does not align with input {x}")));
    }
    if let Some(c) = channels.filter(|&c| c != cond.c) {
        return Err(Error::shape(format!("{name}: expected {c} conditioning channels, got {}", cond.c)));
    }
    Ok(())
}

fn check_even(x: Shape) -> Result<()> {
    if x.h % 2 != 0 || x.w % 2 != 0 {
        return Err(Error::shape(format!("squeeze needs even height and width, got {x}")));
    }
    Ok(())
}

/// Checkerboard squeeze (N, C, H, W) -> (N, 4C, H/2, W/2); log-det 0.
pub fn squeeze<T: Real>(g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
    check_even(g.shape(x))?;
    Ok(g.squeeze2(x))
}

/// Exact inverse of [`squeeze`].
pub fn unsqueeze<T: Real>(g: &mut Graph<'_, T>, y: NodeId) -> Result<NodeId> {
    let s = g.shape(y);
    if s.c % 4 != 0 {
        return Err(Error::shape(format!("unsqueeze needs a channel count divisible by 4, got {s}")));
    }
    Ok(g.unsqueeze2(y))
}

/// Splits off the first `n_keep` channels. Inverse: `Graph::concat_channels`.
pub fn split_channels<T: Real>(g: &mut Graph<'_, T>, x: NodeId, n_keep: usize) -> Result<(NodeId, NodeId)> {
    let c = g.shape(x).c;
    if n_keep == 0 || n_keep >= c {
        return Err(Error::shape(format!("split needs 0 < n_keep < {c}, got {n_keep}")));
    }
    Ok((g.narrow_channels(x, 0, n_keep), g.narrow_channels(x, n_keep, c - n_keep)))
}

/// One invertible layer.
#[derive(Debug, Clone)]
pub enum FlowLayer {
    ActNorm(ActNorm),
    Inv1x1(Inv1x1),
    Coupling(AffineCoupling),
    Injector(AffineInjector),
    Squeeze,
    Unsqueeze,
}

impl FlowLayer {
    pub fn kind(&self) -> LayerKind {
        match self {
            FlowLayer::ActNorm(_) => LayerKind::ActNorm,
            FlowLayer::Inv1x1(_) => LayerKind::Inv1x1,
            FlowLayer::Coupling(c) if c.cond_channels > 0 => LayerKind::CondAffineCoupling,
            FlowLayer::Coupling(_) => LayerKind::AffineCoupling,
            FlowLayer::Injector(_) => LayerKind::AffineInjector,
            FlowLayer::Squeeze => LayerKind::Squeeze,
            FlowLayer::Unsqueeze => LayerKind::Unsqueeze,
        }
    }

    /// Parameter-name prefix, or the kind for parameterless layers.
    pub fn name(&self) -> String {
        match self {
            FlowLayer::ActNorm(l) => l.name.clone(),
            FlowLayer::Inv1x1(l) => l.name.clone(),
            FlowLayer::Coupling(l) => l.name.clone(),
            FlowLayer::Injector(l) => l.name.clone(),
            FlowLayer::Squeeze | FlowLayer::Unsqueeze => self.kind().to_string(),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId, cond: Option<NodeId>) -> Result<(NodeId, NodeId)> {
        match self {
            FlowLayer::ActNorm(l) => l.forward(g, x),
            FlowLayer::Inv1x1(l) => l.forward(g, x),
            FlowLayer::Coupling(l) => l.forward(g, x, cond),
            FlowLayer::Injector(l) => l.forward(g, x, cond),
            FlowLayer::Squeeze => {
                let y = squeeze(g, x)?;
                Ok((y, g.zero_logdet(g.shape(x).n)))
            }
            FlowLayer::Unsqueeze => {
                let y = unsqueeze(g, x)?;
                Ok((y, g.zero_logdet(g.shape(x).n)))
            }
        }
    }

    pub fn inverse<T: Real>(&self, g: &mut Graph<'_, T>, y: NodeId, cond: Option<NodeId>) -> Result<NodeId> {
        match self {
            FlowLayer::ActNorm(l) => l.inverse(g, y),
            FlowLayer::Inv1x1(l) => l.inverse(g, y),
            FlowLayer::Coupling(l) => l.inverse(g, y, cond),
            FlowLayer::Injector(l) => l.inverse(g, y, cond),
            FlowLayer::Squeeze => unsqueeze(g, y),
            FlowLayer::Unsqueeze => squeeze(g, y),
        }
    }
}

/// A composition of layers applied in order; the inverse runs them backwards.
/// Every layer sees the same conditioning tensor.
#[derive(Debug, Clone, Default)]
pub struct FlowSequence {
    pub layers: Vec<FlowLayer>,
}

impl FlowSequence {
    /// ActNorm then invertible 1x1 convolution.
    pub fn transition<T: Real>(b: &mut ParamBuilder<'_, T>, channels: usize) -> Self {
        FlowSequence {
            layers: vec![
                FlowLayer::ActNorm(ActNorm::new(&mut b.scope("actnorm"), channels)),
                FlowLayer::Inv1x1(Inv1x1::new(&mut b.scope("inv1x1"), channels)),
            ],
        }
    }

    /// ActNorm, invertible 1x1 convolution, affine coupling.
    pub fn flow_step<T: Real>(b: &mut ParamBuilder<'_, T>, channels: usize, width: usize) -> Self {
        let mut s = Self::transition(b, channels);
        s.layers.push(FlowLayer::Coupling(AffineCoupling::new(&mut b.scope("coupling"), channels, 0, width)));
        s
    }

    /// ActNorm, invertible 1x1 convolution, conditional coupling, affine injector.
    pub fn cond_flow_step<T: Real>(b: &mut ParamBuilder<'_, T>, channels: usize, cond_channels: usize, width: usize) -> Self {
        let mut s = Self::transition(b, channels);
        s.layers.push(FlowLayer::Coupling(AffineCoupling::new(&mut b.scope("coupling"), channels, cond_channels, width)));
        s.layers.push(FlowLayer::Injector(AffineInjector::new(&mut b.scope("injector"), channels, cond_channels, width)));
        s
    }

    pub fn extend(&mut self, other: FlowSequence) {
        self.layers.extend(other.layers);
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId, cond: Option<NodeId>) -> Result<(NodeId, NodeId)> {
        let mut h = x;
        let mut logdet = g.zero_logdet(g.shape(x).n);
        for layer in &self.layers {
            let (y, l) = layer.forward(g, h, cond)?;
            h = y;
            logdet = g.add(logdet, l);
        }
        Ok((h, logdet))
    }

    pub fn inverse<T: Real>(&self, g: &mut Graph<'_, T>, y: NodeId, cond: Option<NodeId>) -> Result<NodeId> {
        let mut h = y;
        for layer in self.layers.iter().rev() {
            h = layer.inverse(g, h, cond)?;
        }
        Ok(h)
    }
}

/// Sets or clears the data-dependent-init flag of every ActNorm in `store`.
pub fn set_actnorm_initialized<T: Real>(store: &mut ParamStore<T>, value: bool) {
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.name(id).rsplit('.').next() == Some("initialized")).collect();
    let v = if value { T::one() } else { T::zero() };
    for id in ids {
        store.get_mut(id).data_mut()[0] = v;
    }
}

/// Writes staged data-dependent init values into the store.
pub fn commit_staged<T: Real>(store: &mut ParamStore<T>, staged: Vec<(ParamId, Tensor<T>)>) -> Result<()> {
    for (id, v) in staged {
        store.set(id, v)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::logdet_bruteforce;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn builder<'a>(store: &'a mut ParamStore<f64>, rng: &'a mut ChaCha8Rng) -> ParamBuilder<'a, f64> {
        ParamBuilder::new(store, rng, ParamGroup::Flow)
    }

    fn run(layer: &FlowLayer, store: &ParamStore<f64>, x: &Tensor<f64>, cond: Option<&Tensor<f64>>) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut g = Graph::inference(store);
        let xi = g.input(x.clone());
        let c = cond.map(|c| g.input(c.clone()));
        let (y, l) = layer.forward(&mut g, xi, c).unwrap();
        let back = layer.inverse(&mut g, y, c).unwrap();
        (g.value(y).clone(), g.value(l).clone(), g.value(back).clone())
    }

    fn randn(s: Shape, seed: u64) -> Tensor<f64> {
        Tensor::randn(s, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Checks round trip and oracle log-det of a layer on a single sample.
    fn check_layer(layer: &FlowLayer, store: &ParamStore<f64>, x: &Tensor<f64>, cond: Option<&Tensor<f64>>) {
        let (_, l, back) = run(layer, store, x, cond);
        assert!(back.max_abs_diff(x) < 1e-10, "{}: round trip {}", layer.name(), back.max_abs_diff(x));
        let oracle = logdet_bruteforce(layer, store, x, cond).unwrap();
        let reported = l.item();
        assert!((reported - oracle).abs() / reported.abs().max(1.0) < 1e-4, "{}: reported {reported} oracle {oracle}", layer.name());
    }

    #[test]
    fn actnorm_identity_and_scaling() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let an = ActNorm::new(&mut builder(&mut store, &mut rng), 3);
        set_actnorm_initialized(&mut store, true);
        let layer = FlowLayer::ActNorm(an.clone());
        let x = randn(Shape::new(1, 3, 2, 2), 1);
        let (y, l, _) = run(&layer, &store, &x, None);
        assert_eq!(y, x);
        assert_eq!(l.item(), 0.0);
        store.set(an.scale, Tensor::full(Shape::new(1, 3, 1, 1), 2.0)).unwrap();
        let (_, l, _) = run(&layer, &store, &x, None);
        assert!((l.item() - 12.0 * LN2).abs() < 1e-12);
        assert!((l.item() - 8.3178).abs() < 1e-4);
    }

    #[test]
    fn actnorm_data_init_normalizes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let an = ActNorm::new(&mut builder(&mut store, &mut rng), 4);
        let layer = FlowLayer::ActNorm(an.clone());
        let x = randn(Shape::new(8, 4, 6, 6), 2).map(|v| 3.0 * v + 1.5);
        let mut g = Graph::inference(&store);
        let xi = g.input(x.clone());
        let (y, _) = layer.forward(&mut g, xi, None).unwrap();
        let yv = g.value(y).clone();
        let staged = g.take_staged();
        assert_eq!(staged.len(), 3);
        for c in 0..4 {
            let vals: Vec<f64> = (0..8).flat_map(|n| (0..36).map(move |k| (n, k))).map(|(n, k)| yv.at(n, c, k / 6, k % 6)).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-4, "channel {c}: mean {m} var {v}");
        }
        commit_staged(&mut store, staged).unwrap();
        assert_eq!(store.get(an.initialized).item(), 1.0);
        // committed values reproduce the same map
        let (y2, _, _) = run(&layer, &store, &x, None);
        assert!(y2.max_abs_diff(&yv) < 1e-12);
    }

    #[test]
    fn actnorm_zero_scale_is_degenerate() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let an = ActNorm::new(&mut builder(&mut store, &mut rng), 2);
        set_actnorm_initialized(&mut store, true);
        store.set(an.scale, Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, 0.0]).unwrap()).unwrap();
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        assert!(matches!(FlowLayer::ActNorm(an).forward(&mut g, x, None), Err(Error::Degenerate { .. })));
    }

    fn eye(n: usize, k: f64) -> Vec<f64> {
        (0..n * n).map(|i| if i % (n + 1) == 0 { k } else { 0.0 }).collect()
    }

    #[test]
    fn inv1x1_identity_scaled_and_random() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = builder(&mut store, &mut rng);
        let id = FlowLayer::Inv1x1(Inv1x1::from_factors(&mut b.scope("id"), 3, &eye(3, 1.0), &[0.0; 9], &eye(3, 1.0)));
        let two = FlowLayer::Inv1x1(Inv1x1::from_factors(&mut b.scope("two"), 3, &eye(3, 1.0), &[0.0; 9], &eye(3, 2.0)));
        let rnd = FlowLayer::Inv1x1(Inv1x1::new(&mut b.scope("rnd"), 3));
        let x = randn(Shape::new(1, 3, 2, 2), 3);
        let (y, l, _) = run(&id, &store, &x, None);
        assert_eq!(y, x);
        assert_eq!(l.item(), 0.0);
        let (y, l, _) = run(&two, &store, &x, None);
        assert!(y.max_abs_diff(&x.map(|v| 2.0 * v)) < 1e-14);
        assert!((l.item() - 12.0 * LN2).abs() < 1e-12);
        check_layer(&rnd, &store, &x, None);
    }

    #[test]
    fn inv1x1_random_init_is_orthogonal() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l = FlowLayer::Inv1x1(Inv1x1::new(&mut builder(&mut store, &mut rng), 6));
        let (_, ld, _) = run(&l, &store, &randn(Shape::new(1, 6, 2, 2), 1), None);
        assert!(ld.item().abs() < 1e-10);
    }

    #[test]
    fn inv1x1_tiny_pivot_is_degenerate() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut u = eye(2, 1.0);
        u[3] = 1e-13;
        let layer = FlowLayer::Inv1x1(Inv1x1::from_factors(&mut builder(&mut store, &mut rng).scope("bad"), 2, &eye(2, 1.0), &[0.0; 4], &u));
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        match layer.forward(&mut g, x, None) {
            Err(Error::Degenerate { layer, .. }) => assert_eq!(layer, "bad"),
            other => panic!("expected degenerate error, got {other:?}"),
        }
    }

    /// Raw output-bias value whose clamped log-scale equals `target`.
    fn raw_for(target: f64) -> f64 {
        SCALE_CLAMP * (target / SCALE_CLAMP).atanh()
    }

    fn set_out_bias(store: &mut ParamStore<f64>, prefix: &str, scale_channels: usize, log_scale: f64) {
        let id = store.find(&format!("{prefix}.net.conv_out.bias")).unwrap();
        let mut v = store.get(id).clone();
        for c in 0..scale_channels {
            v.data_mut()[c] = raw_for(log_scale);
        }
        store.set(id, v).unwrap();
    }

    #[test]
    fn coupling_zero_init_and_constant_scale() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = FlowLayer::Coupling(AffineCoupling::new(&mut builder(&mut store, &mut rng).scope("cp"), 4, 0, 8));
        let x = randn(Shape::new(1, 4, 4, 4), 4);
        let (y, l, _) = run(&c, &store, &x, None);
        assert_eq!(y, x);
        assert_eq!(l.item(), 0.0);
        set_out_bias(&mut store, "cp", 2, LN2);
        let (y, l, _) = run(&c, &store, &x, None);
        for n in 0..x.numel() {
            let (_, ch, _, _) = x.shape().unflatten(n);
            let want = if ch < 2 { x.data()[n] } else { 2.0 * x.data()[n] };
            assert!((y.data()[n] - want).abs() < 1e-12);
        }
        assert!((l.item() - 32.0 * LN2).abs() < 1e-10);
    }

    #[test]
    fn coupling_random_round_trip_and_oracle() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = FlowLayer::Coupling(AffineCoupling::new(&mut builder(&mut store, &mut rng).scope("cp"), 4, 0, 8));
        store.randomize(ParamGroup::Flow, 0.3, &mut rng);
        check_layer(&c, &store, &randn(Shape::new(1, 4, 4, 4), 5), None);
        // odd channel count: 3 pass through, 2 transformed
        let mut store = ParamStore::new();
        let c = FlowLayer::Coupling(AffineCoupling::new(&mut builder(&mut store, &mut rng).scope("odd"), 5, 0, 4));
        store.randomize(ParamGroup::Flow, 0.3, &mut rng);
        check_layer(&c, &store, &randn(Shape::new(1, 5, 2, 2), 6), None);
    }

    #[test]
    fn cond_coupling_and_injector() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = builder(&mut store, &mut rng);
        let cc = FlowLayer::Coupling(AffineCoupling::new(&mut b.scope("cc"), 4, 3, 8));
        let inj = FlowLayer::Injector(AffineInjector::new(&mut b.scope("inj"), 4, 3, 8));
        assert_eq!(cc.kind(), LayerKind::CondAffineCoupling);
        let x = randn(Shape::new(1, 4, 4, 4), 7);
        let cond = randn(Shape::new(1, 3, 4, 4), 8);
        for l in [&cc, &inj] {
            let (y, ld, _) = run(l, &store, &x, Some(&cond));
            assert_eq!(y, x);
            assert_eq!(ld.item(), 0.0);
        }
        set_out_bias(&mut store, "inj", 4, 3f64.ln());
        let (y, ld, _) = run(&inj, &store, &x, Some(&cond));
        assert!(y.max_abs_diff(&x.map(|v| 3.0 * v)) < 1e-12);
        assert!((ld.item() - 64.0 * 3f64.ln()).abs() < 1e-9);
        store.randomize(ParamGroup::Flow, 0.3, &mut rng);
        check_layer(&cc, &store, &x, Some(&cond));
        check_layer(&inj, &store, &x, Some(&cond));
    }

    #[test]
    fn cond_layers_reject_misaligned_cond() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cc = FlowLayer::Coupling(AffineCoupling::new(&mut builder(&mut store, &mut rng).scope("cc"), 4, 3, 8));
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::zeros(Shape::new(1, 4, 4, 4)));
        let c = g.input(Tensor::zeros(Shape::new(1, 3, 2, 2)));
        assert!(matches!(cc.forward(&mut g, x, Some(c)), Err(Error::Shape(_))));
        assert!(matches!(cc.forward(&mut g, x, None), Err(Error::Shape(_))));
    }

    #[test]
    fn squeeze_and_split_shapes() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let x = g.input(randn(Shape::new(1, 3, 4, 4), 9));
        let (y, l) = FlowLayer::Squeeze.forward(&mut g, x, None).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 12, 2, 2));
        assert_eq!(g.value(l).item(), 0.0);
        let back = FlowLayer::Squeeze.inverse(&mut g, y, None).unwrap();
        assert_eq!(g.value(back), g.value(x));
        let odd = g.input(Tensor::zeros(Shape::new(1, 3, 3, 4)));
        assert!(matches!(squeeze(&mut g, odd), Err(Error::Shape(_))));

        let z = g.input(randn(Shape::new(2, 48, 3, 3), 10));
        let (a, b) = split_channels(&mut g, z, 3).unwrap();
        assert_eq!(g.shape(a).c, 3);
        assert_eq!(g.shape(b).c, 45);
        let cat = g.concat_channels(&[a, b]);
        assert_eq!(g.value(cat), g.value(z));
        assert!(split_channels(&mut g, z, 0).is_err());
        assert!(split_channels(&mut g, z, 48).is_err());
    }

    #[test]
    fn split_of_concat_returns_parts() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let (p, q) = (randn(Shape::new(2, 2, 3, 3), 11), randn(Shape::new(2, 5, 3, 3), 12));
        let pi = g.input(p.clone());
        let qi = g.input(q.clone());
        let cat = g.concat_channels(&[pi, qi]);
        let (a, b) = split_channels(&mut g, cat, 2).unwrap();
        assert_eq!(g.value(a), &p);
        assert_eq!(g.value(b), &q);
    }

    fn steps(seed: u64, randomize: bool) -> (ParamStore<f64>, FlowSequence, FlowSequence, FlowSequence) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = builder(&mut store, &mut rng);
        let t = FlowSequence::transition(&mut b.scope("t"), 4);
        let f = FlowSequence::flow_step(&mut b.scope("f"), 4, 8);
        let c = FlowSequence::cond_flow_step(&mut b.scope("c"), 4, 2, 8);
        set_actnorm_initialized(&mut store, true);
        if randomize {
            store.randomize(ParamGroup::Flow, 0.2, &mut rng);
        }
        (store, t, f, c)
    }

    fn seq_run(seq: &FlowSequence, store: &ParamStore<f64>, x: &Tensor<f64>, cond: Option<&Tensor<f64>>) -> (Tensor<f64>, f64, Tensor<f64>, f64) {
        let mut g = Graph::inference(store);
        let xi = g.input(x.clone());
        let c = cond.map(|c| g.input(c.clone()));
        let (y, l) = seq.forward(&mut g, xi, c).unwrap();
        let mut parts = 0.0;
        let mut h = xi;
        for layer in &seq.layers {
            let (o, pl) = layer.forward(&mut g, h, c).unwrap();
            parts += g.value(pl).sum();
            h = o;
        }
        let back = seq.inverse(&mut g, y, c).unwrap();
        (g.value(y).clone(), g.value(l).sum(), g.value(back).clone(), parts)
    }

    #[test]
    fn steps_are_identity_at_init() {
        let (store, t, f, c) = steps(3, false);
        let x = randn(Shape::new(1, 4, 2, 2), 13);
        let cond = randn(Shape::new(1, 2, 2, 2), 14);
        for (seq, cnd) in [(&t, None), (&f, None), (&c, Some(&cond))] {
            let (_, l, _, _) = seq_run(seq, &store, &x, cnd);
            assert!(l.abs() < 1e-12);
        }
        // transition and flow-step outputs are a rotation of x (random 1x1 init); the
        // coupling contributes nothing: flow step output equals transition output.
        let (yt, ..) = seq_run(&t, &store, &x, None);
        let mut g = Graph::inference(&store);
        let xi = g.input(x.clone());
        let mut h = xi;
        for layer in &f.layers[..2] {
            h = layer.forward(&mut g, h, None).unwrap().0;
        }
        let (yf, _) = f.layers[2].forward(&mut g, h, None).unwrap();
        assert_eq!(g.value(yf), g.value(h));
        assert_eq!(yt.shape(), x.shape());
    }

    #[test]
    fn steps_logdet_matches_oracle_and_parts() {
        let (store, t, f, c) = steps(4, true);
        let small = randn(Shape::new(1, 4, 2, 2), 15);
        let x = randn(Shape::new(1, 4, 4, 4), 16);
        let cond = randn(Shape::new(1, 2, 4, 4), 17);
        for (seq, x, cnd) in [(&t, &small, None), (&f, &x, None), (&c, &x, Some(&cond))] {
            let (_, l, back, parts) = seq_run(seq, &store, x, cnd);
            assert!(back.max_abs_diff(x) < 1e-10);
            assert!((l - parts).abs() < 1e-12);
            let mut brute_parts = 0.0;
            let mut g = Graph::inference(&store);
            let mut h = g.input(x.clone());
            let ci = cnd.map(|c| g.input(c.clone()));
            for layer in &seq.layers {
                brute_parts += logdet_bruteforce(layer, &store, g.value(h), cnd).unwrap();
                h = layer.forward(&mut g, h, ci).unwrap().0;
            }
            assert!((l - brute_parts).abs() / l.abs().max(1.0) < 1e-4, "{l} vs {brute_parts}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn cond_step_round_trip(seed in 0u64..10_000) {
            let (store, _, _, c) = steps(seed, true);
            let x = randn(Shape::new(2, 4, 4, 4), seed + 1);
            let cond = randn(Shape::new(2, 2, 4, 4), seed + 2);
            let (_, _, back, _) = seq_run(&c, &store, &x, Some(&cond));
            prop_assert!(back.max_abs_diff(&x) < 1e-6);
        }
    }
}
