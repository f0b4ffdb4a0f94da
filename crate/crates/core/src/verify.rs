//! Self-check suites run in 64-bit precision on small configurations:
//! invertibility, log-determinants against brute-force Jacobians, and loss
//! gradients against central differences.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::layers::{set_actnorm_initialized, ActNorm, AffineCoupling, AffineInjector, FlowLayer, FlowSequence, Inv1x1, LayerKind};
use crate::model::{ModelConfig, SdFlow};
use crate::objectives::{self, LossWeights};
use crate::oracle::{self, logdet_bruteforce_fn, DEFAULT_EPS};
use crate::params::{ParamBuilder, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const INVERTIBILITY_TOL: f64 = 1e-5;
pub const LOGDET_REL_TOL: f64 = 1e-4;
pub const GRAD_REL_TOL: f64 = 1e-3;
/// Composition logdets are sums of the same floating-point terms.
pub const COMPOSITION_TOL: f64 = 1e-12;

/// One named check with the value it measured and the bound it was held to.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub metric: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn below(suite: &'static str, name: impl Into<String>, metric: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Check { suite, name: name.into(), metric, tolerance, passed: metric < tolerance, detail: detail.into() }
    }

    fn zero(suite: &'static str, name: impl Into<String>, metric: f64, detail: impl Into<String>) -> Self {
        Check { suite, name: name.into(), metric, tolerance: 0.0, passed: metric == 0.0, detail: detail.into() }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{} metric={:.3e} tol={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.metric,
            self.tolerance
        )?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Random parameter/input draws per invertibility check.
    pub seeds: u64,
    /// Draws per brute-force logdet check.
    pub logdet_seeds: u64,
    /// Finite-difference coordinates sampled per parameter tensor.
    pub coords_per_tensor: usize,
    /// Divides the reported logdet of this layer kind by H·W, simulating a
    /// missing spatial factor.
    pub logdet_fault: Option<LayerKind>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { seeds: 100, logdet_seeds: 3, coords_per_tensor: 1, logdet_fault: None }
    }
}

const LAYER_C: usize = 4;
const LAYER_SIDE: usize = 4;
const COND_C: usize = 2;

fn layer_of_kind(kind: LayerKind, b: &mut ParamBuilder<'_, f64>) -> FlowLayer {
    match kind {
        LayerKind::ActNorm => FlowLayer::ActNorm(ActNorm::new(b, LAYER_C)),
        LayerKind::Inv1x1 => FlowLayer::Inv1x1(Inv1x1::new(b, LAYER_C)),
        LayerKind::AffineCoupling => FlowLayer::Coupling(AffineCoupling::new(b, LAYER_C, 0, 8)),
        LayerKind::CondAffineCoupling => FlowLayer::Coupling(AffineCoupling::new(b, LAYER_C, COND_C, 8)),
        LayerKind::AffineInjector => FlowLayer::Injector(AffineInjector::new(b, LAYER_C, COND_C, 8)),
        LayerKind::Squeeze => FlowLayer::Squeeze,
        LayerKind::Unsqueeze => FlowLayer::Unsqueeze,
    }
}

fn needs_cond(kind: LayerKind) -> bool {
    matches!(kind, LayerKind::CondAffineCoupling | LayerKind::AffineInjector)
}

/// A single layer with random parameters, a random input and (when needed)
/// a random conditioning tensor.
struct LayerCase {
    layer: FlowLayer,
    store: ParamStore<f64>,
    x: Tensor<f64>,
    cond: Option<Tensor<f64>>,
}

fn layer_case(kind: LayerKind, seed: u64) -> LayerCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = layer_of_kind(kind, &mut ParamBuilder::new(&mut store, &mut rng, ParamGroup::Flow));
    store.randomize(ParamGroup::Flow, 0.2, &mut rng);
    set_actnorm_initialized(&mut store, true);
    let x = Tensor::randn(Shape::new(1, LAYER_C, LAYER_SIDE, LAYER_SIDE), 1.0, &mut rng);
    let cond = needs_cond(kind).then(|| Tensor::randn(Shape::new(1, COND_C, LAYER_SIDE, LAYER_SIDE), 1.0, &mut rng));
    LayerCase { layer, store, x, cond }
}

/// `(forward output, reported logdet, inverse of the output)`.
fn run_layer(case: &LayerCase) -> Result<(Tensor<f64>, f64, Tensor<f64>)> {
    let mut g = Graph::inference(&case.store);
    let x = g.input(case.x.clone());
    let c = case.cond.as_ref().map(|c| g.input(c.clone()));
    let (y, l) = case.layer.forward(&mut g, x, c)?;
    let back = case.layer.inverse(&mut g, y, c)?;
    Ok((g.value(y).clone(), g.value(l).sum(), g.value(back).clone()))
}

/// A toy model with flow and discriminator parameters perturbed away from
/// their construction values. The 1x1 convolutions keep their orthogonal
/// factors so that sampling through the inverse stays well conditioned.
pub fn random_toy_model(config: &ModelConfig, seed: u64, std: f64) -> Result<(SdFlow, ParamStore<f64>)> {
    let (model, mut store) = SdFlow::build::<f64>(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.group(id) != ParamGroup::Frozen && !store.name(id).contains("inv1x1")).collect();
    for id in ids {
        let noise = Tensor::randn(store.get(id).shape(), std, &mut rng);
        store.get_mut(id).add_assign(&noise);
    }
    set_actnorm_initialized(&mut store, true);
    Ok((model, store))
}

fn toy_hr(seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(Shape::new(1, 3, 8, 8), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn toy_lr(seed: u64, side: usize) -> Tensor<f64> {
    Tensor::rand_uniform(Shape::new(1, 3, side, side), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(7)))
}

/// Round trips for every layer kind and every composed flow.
pub fn invertibility_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    const SUITE: &str = "invertibility";
    let mut out = Vec::new();
    for kind in LayerKind::ALL {
        let mut worst: f64 = 0.0;
        for seed in 0..opts.seeds {
            let case = layer_case(kind, seed);
            let (_, _, back) = run_layer(&case)?;
            worst = worst.max(back.max_abs_diff(&case.x));
        }
        out.push(Check::below(SUITE, kind.to_string(), worst, INVERTIBILITY_TOL, format!("{} seeds", opts.seeds)));
    }

    let cfg = ModelConfig::toy();
    let mut worst = [0.0f64; 4];
    for seed in 0..opts.seeds {
        let (model, store) = random_toy_model(&cfg, seed, 0.05)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::inference(&store);
        let y_t = toy_hr(seed);
        let y = g.input(y_t.clone());
        let hr = model.sr.hr_forward(&mut g, y)?;
        let y_back = model.sr.hr_inverse(&mut g, hr.z_c, hr.z_h)?;
        worst[0] = worst[0].max(g.value(y_back).max_abs_diff(&y_t));

        let (zp, _) = model.sr.hf_forward(&mut g, hr.z_h, hr.z_c)?;
        let zh_back = model.sr.hf_inverse(&mut g, zp, hr.z_c)?;
        worst[1] = worst[1].max(g.value(zh_back).max_abs_diff(g.value(hr.z_h)));

        let x_t = toy_lr(seed, 4);
        let x = g.input(x_t.clone());
        let lr = model.ds.lr_forward(&mut g, x)?;
        let x_back = model.ds.lr_inverse(&mut g, lr.z_c, lr.z_d)?;
        worst[2] = worst[2].max(g.value(x_back).max_abs_diff(&x_t));

        let zd_t = Tensor::randn(Shape::new(1, 3, 4, 4), 1.0, &mut rng);
        let zd = g.input(zd_t.clone());
        let (zpd, _) = model.ds.deg_forward(&mut g, zd, lr.z_c)?;
        let zd_back = model.ds.deg_inverse(&mut g, zpd, lr.z_c)?;
        worst[3] = worst[3].max(g.value(zd_back).max_abs_diff(&zd_t));
    }
    for (name, w) in ["hr_flow", "hf_flow", "lr_flow", "deg_flow"].iter().zip(worst) {
        out.push(Check::below(SUITE, *name, w, INVERTIBILITY_TOL, format!("toy config, {} seeds", opts.seeds)));
    }
    Ok(out)
}

fn rel_to_oracle(analytic: f64, oracle: f64) -> f64 {
    (analytic - oracle).abs() / oracle.abs().max(1.0)
}

/// Brute-force Jacobian log-determinant of `f(input)` with everything else held fixed.
fn oracle_of(store: &ParamStore<f64>, input: &Tensor<f64>, f: impl Fn(&mut Graph<'_, f64>, NodeId) -> Result<NodeId>) -> Result<f64> {
    let shape = input.shape();
    let map = |v: &[f64]| -> Vec<f64> {
        let mut g = Graph::inference(store);
        let x = g.input(Tensor::from_vec(shape, v.to_vec()).expect("shape"));
        match f(&mut g, x) {
            Ok(y) => g.value(y).data().to_vec(),
            Err(_) => vec![f64::NAN; v.len()],
        }
    };
    logdet_bruteforce_fn(map, input.data(), DEFAULT_EPS)
}

/// Per-layer and composed-flow logdets against brute-force Jacobians, plus
/// exact additivity of sequence logdets.
pub fn logdet_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    const SUITE: &str = "logdet";
    let mut out = Vec::new();
    for kind in LayerKind::ALL {
        let mut worst: f64 = 0.0;
        for seed in 0..opts.logdet_seeds {
            let case = layer_case(kind, 1000 + seed);
            let (_, mut reported, _) = run_layer(&case)?;
            if opts.logdet_fault == Some(kind) {
                reported /= (LAYER_SIDE * LAYER_SIDE) as f64;
            }
            let reference = oracle::logdet_bruteforce(&case.layer, &case.store, &case.x, case.cond.as_ref())?;
            worst = worst.max(rel_to_oracle(reported, reference));
        }
        let detail = format!("layer {kind}, input (1,{LAYER_C},{LAYER_SIDE},{LAYER_SIDE}), {} seeds", opts.logdet_seeds);
        out.push(Check::below(SUITE, kind.to_string(), worst, LOGDET_REL_TOL, detail));
    }

    out.push(sequence_additivity()?);

    let cfg = ModelConfig::toy();
    let (model, store) = random_toy_model(&cfg, 11, 0.05)?;
    let y = toy_hr(11);
    let x = toy_lr(11, 4);
    let mut g = Graph::inference(&store);
    let yi = g.input(y.clone());
    let xi = g.input(x.clone());
    let hr = model.sr.hr_forward(&mut g, yi)?;
    let lr = model.ds.lr_forward(&mut g, xi)?;
    let (_, inn_ld) = model.ds.inn_forward(&mut g, xi)?;
    let z_c_hr = g.value(hr.z_c).clone();
    let z_h = g.value(hr.z_h).clone();
    let z_c_lr = g.value(lr.z_c).clone();
    let z_d = g.value(lr.z_d).clone();
    let (_, hf_ld) = {
        let zh = g.input(z_h.clone());
        let zc = g.input(z_c_hr.clone());
        model.sr.hf_forward(&mut g, zh, zc)?
    };
    let (_, deg_ld) = {
        let zd = g.input(z_d.clone());
        let zc = g.input(z_c_lr.clone());
        model.ds.deg_forward(&mut g, zd, zc)?
    };
    let reported = [g.value(hr.logdet).item(), g.value(hf_ld).item(), g.value(lr.logdet).item(), g.value(deg_ld).item()];

    let hr_oracle = oracle_of(&store, &y, |g, v| {
        let h = model.sr.hr_forward(g, v)?;
        Ok(g.concat_channels(&[h.z_c, h.z_h]))
    })?;
    let hf_oracle = oracle_of(&store, &z_h, |g, v| {
        let zc = g.input(z_c_hr.clone());
        Ok(model.sr.hf_forward(g, v, zc)?.0)
    })?;
    let lr_oracle = oracle_of(&store, &x, |g, v| Ok(model.ds.inn_forward(g, v)?.0))?;
    let deg_oracle = oracle_of(&store, &z_d, |g, v| {
        let zc = g.input(z_c_lr.clone());
        Ok(model.ds.deg_forward(g, v, zc)?.0)
    })?;
    let names = ["hr_flow", "hf_flow", "lr_flow", "deg_flow"];
    for ((name, r), o) in names.iter().zip(reported).zip([hr_oracle, hf_oracle, lr_oracle, deg_oracle]) {
        out.push(Check::below(SUITE, *name, rel_to_oracle(r, o), LOGDET_REL_TOL, format!("toy config, reported {r:.6} oracle {o:.6}")));
    }

    // The subtraction factor-out adds nothing: the LR logdet is the INN's,
    // and z_lr -> z_lr - z_c has a unit Jacobian.
    let diff = (g.value(lr.logdet).item() - g.value(inn_ld).item()).abs();
    out.push(Check::zero(SUITE, "lr_factor_out_analytic", diff, "lr_forward logdet minus network logdet"));
    let z_lr = g.value(lr.z_lr).clone();
    let sub_oracle = oracle_of(&store, &z_lr, |g, v| {
        let zc = g.input(z_c_lr.clone());
        Ok(g.sub(v, zc))
    })?;
    out.push(Check::below(SUITE, "lr_factor_out_oracle", sub_oracle.abs(), LOGDET_REL_TOL, "brute-force logdet of the subtraction"));
    Ok(out)
}

/// A mixed sequence's logdet equals the sum of its layers' logdets.
fn sequence_additivity() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let seq = {
        let mut b = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Flow);
        let mut seq = FlowSequence { layers: vec![FlowLayer::Squeeze] };
        seq.extend(FlowSequence::transition(&mut b.scope("t"), 12));
        seq.extend(FlowSequence::flow_step(&mut b.scope("f"), 12, 8));
        seq.extend(FlowSequence::cond_flow_step(&mut b.scope("c"), 12, COND_C, 8));
        seq.layers.push(FlowLayer::Unsqueeze);
        seq
    };
    store.randomize(ParamGroup::Flow, 0.2, &mut rng);
    set_actnorm_initialized(&mut store, true);
    let x_t = Tensor::randn(Shape::new(2, 3, 4, 4), 1.0, &mut rng);
    let c_t = Tensor::randn(Shape::new(2, COND_C, 2, 2), 1.0, &mut rng);
    let mut g = Graph::inference(&store);
    let x = g.input(x_t);
    let c = g.input(c_t);
    let (_, total) = seq.forward(&mut g, x, Some(c))?;
    let mut h = x;
    let mut parts = vec![0.0f64; 2];
    for layer in &seq.layers {
        let (y, l) = layer.forward(&mut g, h, Some(c))?;
        for (p, v) in parts.iter_mut().zip(g.value(l).data()) {
            *p += v;
        }
        h = y;
    }
    let worst = g.value(total).data().iter().zip(&parts).map(|(a, b): (&f64, &f64)| (a - b).abs()).fold(0.0, f64::max);
    Ok(Check::below("logdet", "sequence_additivity", worst, COMPOSITION_TOL, format!("{} layers, batch 2", seq.layers.len())))
}

/// One random coordinate per parameter tensor of `group`, as flat indices
/// into the concatenation of those tensors.
fn sample_coords(store: &ParamStore<f64>, ids: &[ParamId], per_tensor: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut coords = Vec::new();
    let mut offset = 0;
    for &id in ids {
        let n = store.get(id).numel();
        for _ in 0..per_tensor.min(n) {
            coords.push(offset + rng.random_range(0..n));
        }
        offset += n;
    }
    coords.sort_unstable();
    coords.dedup();
    coords
}

fn loss_gradient_check(
    name: &str,
    store: &ParamStore<f64>,
    group: ParamGroup,
    per_tensor: usize,
    loss: impl Fn(&mut Graph<'_, f64>) -> Result<NodeId>,
) -> Result<Check> {
    let ids = store.ids_in(group);
    let (analytic, value) = {
        let mut g = Graph::for_groups(store, &[group]);
        let l = loss(&mut g)?;
        let grads = g.backward(l);
        (grads.flatten(store, &ids), g.value(l).item())
    };
    let params = store.flatten(&ids);
    let f = |v: &[f64]| -> f64 {
        let mut s = store.clone();
        s.unflatten(&ids, v);
        let mut g = Graph::inference(&s);
        match loss(&mut g) {
            Ok(l) => g.value(l).item(),
            Err(_) => f64::NAN,
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let coords = sample_coords(store, &ids, per_tensor, &mut rng);
    let report = oracle::grad_check(f, &analytic, &params, DEFAULT_EPS, Some(&coords))?;
    let detail = format!(
        "loss {value:.5}, {} coords, worst index {} analytic {:.4e} numeric {:.4e}",
        report.checked, report.worst_param_index, report.analytic, report.numeric
    );
    Ok(Check::below("gradient", name, report.max_rel_err, GRAD_REL_TOL, detail))
}

/// Gradient checks for every objective, plus the stop-gradient probes.
pub fn gradient_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let cfg = ModelConfig::toy();
    let (model, store) = random_toy_model(&cfg, 3, 0.02)?;
    let w = LossWeights::default();
    let x_t = toy_lr(3, 8);
    let y_t = toy_hr(3);
    let k = opts.coords_per_tensor;
    let flow = ParamGroup::Flow;
    let disc = ParamGroup::Discriminator;
    let m = &model;
    let mut out = Vec::new();

    out.push(loss_gradient_check("nll_x", &store, flow, k, |g| {
        let x = g.input(x_t.clone());
        let (n, _) = m.ds.nll_x(g, x)?;
        Ok(objectives::nll_per_dim(g, n, 3 * 8 * 8))
    })?);
    out.push(loss_gradient_check("nll_y", &store, flow, k, |g| {
        let y = g.input(y_t.clone());
        let (n, _) = m.sr.nll_y(g, y)?;
        Ok(objectives::nll_per_dim(g, n, 3 * 8 * 8))
    })?);
    let latents = |g: &mut Graph<'_, f64>| -> Result<(NodeId, NodeId, NodeId, NodeId, NodeId)> {
        let x = g.input(x_t.clone());
        let y = g.input(y_t.clone());
        let hr = m.sr.hr_forward(g, y)?;
        let lr = m.ds.lr_forward(g, x)?;
        Ok((x, y, hr.z_c, lr.z_c, lr.z_lr))
    };
    out.push(loss_gradient_check("content", &store, flow, k, |g| {
        let (x, y, zh, zl, _) = latents(g)?;
        Ok(objectives::content_loss(g, m, zh, zl, x, y, w.alpha)?.total)
    })?);
    // Finite differences would move the stop-gradient copy of the LR
    // content along with the parameters; hold it at its base value instead.
    let frozen_content = {
        let mut g = Graph::inference(&store);
        let (_, _, _, zl, _) = latents(&mut g)?;
        g.value(zl).clone()
    };
    out.push(loss_gradient_check("domain_flow_side", &store, flow, k, |g| {
        let (_, _, zh, zl, zlr) = latents(g)?;
        let adv = objectives::domain_loss_gen(g, &m.d_content, zh, zl, zlr, w.beta1, 0.0)?.total;
        let target = g.input(frozen_content.clone());
        let r = g.sub(zlr, target);
        let r = objectives::mse_to(g, r, 0.0);
        Ok(objectives::weighted_sum(g, &[(1.0, adv), (w.beta2, r)]))
    })?);
    out.push(loss_gradient_check("domain_discriminator", &store, disc, k, |g| {
        let (_, _, zh, zl, _) = latents(g)?;
        let (zh, zl) = (g.detach(zh), g.detach(zl));
        Ok(objectives::domain_loss_disc(g, &m.d_content, zh, zl))
    })?);
    let backward = |g: &mut Graph<'_, f64>| -> Result<objectives::BackwardTerms> {
        let x = g.input(x_t.clone());
        let y = g.input(y_t.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        objectives::backward_losses(g, &store, m, x, y, &w, &mut rng)
    };
    out.push(loss_gradient_check("backward_ds", &store, flow, k, |g| Ok(backward(g)?.ds_loss))?);
    out.push(loss_gradient_check("backward_sr", &store, flow, k, |g| Ok(backward(g)?.sr_loss))?);
    out.push(loss_gradient_check("image_discriminators", &store, disc, k, |g| {
        let b = backward(g)?;
        let x = g.input(x_t.clone());
        let y = g.input(y_t.clone());
        let (fs, fd) = (g.detach(b.sr_fake), g.detach(b.ds_fake));
        let a = objectives::lsgan_disc(g, &m.d_sr, y, fs);
        let c = objectives::lsgan_disc(g, &m.d_lr, x, fd);
        Ok(g.add(a, c))
    })?);

    out.extend(stop_gradient_checks(m, &store, &x_t)?);
    Ok(out)
}

/// The residual penalty must send no gradient into the LR content path.
fn stop_gradient_checks(model: &SdFlow, store: &ParamStore<f64>, x_t: &Tensor<f64>) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let s = x_t.shape();
    {
        let empty = ParamStore::<f64>::new();
        let mut g = Graph::new(&empty);
        let z_c = g.variable(Tensor::randn(s, 1.0, &mut rng));
        let z_lr = g.variable(Tensor::randn(s, 1.0, &mut rng));
        let sg = g.detach(z_c);
        let r = g.sub(z_lr, sg);
        let r = g.square(r);
        let l = g.mean_all(r);
        let grads = g.backward(l);
        let on_content = grads.node(z_c).map(|t| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))).unwrap_or(0.0);
        let on_output = grads.node(z_lr).map(|t| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))).unwrap_or(0.0);
        out.push(Check::zero("gradient", "stop_gradient_latent", on_content, format!("max |d/dz_lr| = {on_output:.3e}")));
    }
    let mut g = Graph::for_groups(store, &[ParamGroup::Flow]);
    let x = g.input(x_t.clone());
    let lr = model.ds.lr_forward(&mut g, x)?;
    let zh = g.input(Tensor::zeros(Shape::new(1, 3, 2, 2)));
    let terms = objectives::domain_loss_gen(&mut g, &model.d_content, zh, lr.z_c, lr.z_lr, 0.0, 1.0)?;
    let grads = g.backward(terms.residual_l2);
    let mut content_max: f64 = 0.0;
    let mut inn_max: f64 = 0.0;
    for id in store.ids_in(ParamGroup::Flow) {
        let name = store.name(id);
        let m = grads.param(id).map(|t| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))).unwrap_or(0.0);
        if name.starts_with("lr.content.") {
            content_max = content_max.max(m);
        } else if name.starts_with("lr.") {
            inn_max = inn_max.max(m);
        }
    }
    out.push(Check::zero("gradient", "stop_gradient_content_extractor", content_max, format!("LR network max |grad| = {inn_max:.3e}")));
    Ok(out)
}

/// All three suites.
pub fn run_all(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut out = invertibility_suite(opts)?;
    out.extend(logdet_suite(opts)?);
    out.extend(gradient_suite(opts)?);
    Ok(out)
}
