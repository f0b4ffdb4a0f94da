//! Brute-force oracles: central differences, dense-Jacobian log-determinants,
//! gradient checks and scalar-loop image metrics. They never call into the
//! analytic backward pass or the production metric code.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::FlowLayer;
use crate::linalg::Lu;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Default central-difference step for 64-bit checks.
pub const DEFAULT_EPS: f64 = 1e-5;

fn step(eps: f64, x: f64) -> f64 {
    eps * x.abs().max(1.0)
}

/// Central-difference gradient of `f` at `x`; the step for coordinate `i` is
/// `eps * max(1, |x_i|)`.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Result<Vec<f64>> {
    assert!(eps > 0.0, "eps must be positive");
    finite_diff_coords(f, x, eps, &(0..x.len()).collect::<Vec<_>>())
}

/// Central differences for the listed coordinates only.
pub fn finite_diff_coords(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64, coords: &[usize]) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let h = step(eps, x[i]);
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::OracleFailure { coordinate: i });
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// `log |det J|` of a map `R^d -> R^d`, with `J` assembled column by column
/// from central differences.
pub fn logdet_bruteforce_fn(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], eps: f64) -> Result<f64> {
    let d = x.len();
    let mut jac = vec![0.0; d * d];
    let mut probe = x.to_vec();
    for j in 0..d {
        let h = step(eps, x[j]);
        probe[j] = x[j] + h;
        let up = f(&probe);
        probe[j] = x[j] - h;
        let down = f(&probe);
        probe[j] = x[j];
        if up.len() != d || down.len() != d {
            return Err(Error::shape(format!("map changes dimension: {d} -> {}", up.len())));
        }
        for i in 0..d {
            let v = (up[i] - down[i]) / (2.0 * h);
            if !v.is_finite() {
                return Err(Error::OracleFailure { coordinate: j });
            }
            jac[i * d + j] = v;
        }
    }
    Lu::decompose(&jac, d)
        .log_abs_det(0.0)
        .filter(|v| *v > 1e-300f64.ln())
        .ok_or_else(|| Error::degenerate("jacobian", "|det J| below 1e-300"))
}

/// Brute-force `log |det J|` of a layer's forward map at `x` (batch 1),
/// holding `cond` fixed.
pub fn logdet_bruteforce(layer: &FlowLayer, store: &ParamStore<f64>, x: &Tensor<f64>, cond: Option<&Tensor<f64>>) -> Result<f64> {
    if x.shape().n != 1 {
        return Err(Error::shape(format!("logdet_bruteforce needs batch 1, got {}", x.shape())));
    }
    let shape = x.shape();
    let map = |v: &[f64]| -> Vec<f64> {
        let mut g = Graph::inference(store);
        let xi = g.input(Tensor::from_vec(shape, v.to_vec()).unwrap());
        let c = cond.map(|c| g.input(c.clone()));
        match layer.forward(&mut g, xi, c) {
            Ok((y, _)) => g.value(y).data().to_vec(),
            Err(_) => vec![f64::NAN; v.len()],
        }
    };
    logdet_bruteforce_fn(map, x.data(), DEFAULT_EPS)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_param_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Denominator floor of [`relative_error`] used by [`grad_check`]; keeps
/// vanishing gradients from turning finite-difference noise into large ratios.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares `analytic` against central differences of `loss` at `params`,
/// over `coords` (all coordinates when `None`).
pub fn grad_check(
    loss: impl Fn(&[f64]) -> f64,
    analytic: &[f64],
    params: &[f64],
    eps: f64,
    coords: Option<&[usize]>,
) -> Result<GradReport> {
    assert_eq!(analytic.len(), params.len(), "gradient length mismatch");
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let numeric = finite_diff_coords(&loss, params, eps, coords)?;
    let mut report = GradReport { max_rel_err: 0.0, worst_param_index: 0, analytic: 0.0, numeric: 0.0, checked: coords.len() };
    for (&i, &n) in coords.iter().zip(&numeric) {
        let e = relative_error(analytic[i], n, GRAD_FLOOR);
        if e > report.max_rel_err || (report.max_rel_err == 0.0 && i == coords[0]) {
            report = GradReport { max_rel_err: e, worst_param_index: i, analytic: analytic[i], numeric: n, checked: coords.len() };
        }
    }
    Ok(report)
}

/// Evenly spread coordinate sample of at most `budget` indices over `[0, len)`,
/// always including both ends.
pub fn spread_coords(len: usize, budget: usize) -> Vec<usize> {
    if len <= budget {
        return (0..len).collect();
    }
    let mut v: Vec<usize> = (0..budget).map(|k| k * (len - 1) / (budget - 1)).collect();
    v.dedup();
    v
}

/// Luma of pixel (n, h, w), written out from the BT.601 definition.
fn luma_at(t: &Tensor<f64>, n: usize, h: usize, w: usize) -> f64 {
    (16.0 + 65.481 * t.at(n, 0, h, w) + 128.553 * t.at(n, 1, h, w) + 24.966 * t.at(n, 2, h, w)) / 255.0
}

/// PSNR-Y by a plain loop over pixels.
pub fn psnr_y_scalar(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let s = a.shape();
    let mut se = 0.0;
    for n in 0..s.n {
        for h in 0..s.h {
            for w in 0..s.w {
                se += (luma_at(a, n, h, w) - luma_at(b, n, h, w)).powi(2);
            }
        }
    }
    10.0 * (1.0 / (se / (s.n * s.h * s.w) as f64)).log10()
}

/// SSIM-Y with a direct 2-D 11x11 Gaussian window (σ = 1.5) per position.
pub fn ssim_y_scalar(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let s = a.shape();
    let mut k = [[0.0; 11]; 11];
    let mut ksum = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (-((i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2)) / 4.5).exp();
            ksum += *v;
        }
    }
    let (c1, c2) = (0.0001, 0.0009);
    let (mut total, mut count) = (0.0, 0.0);
    for n in 0..s.n {
        for i0 in 0..=s.h - 11 {
            for j0 in 0..=s.w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (i, row) in k.iter().enumerate() {
                    for (j, &kv) in row.iter().enumerate() {
                        let wgt = kv / ksum;
                        let (p, q) = (luma_at(a, n, i0 + i, j0 + j), luma_at(b, n, i0 + i, j0 + j));
                        ma += wgt * p;
                        mb += wgt * q;
                        saa += wgt * p * p;
                        sbb += wgt * q * q;
                        sab += wgt * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
    }
    total / count
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let g = finite_diff_grad(|v| v.iter().map(|x| x * x).sum(), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_diff_grad(|_| 3.5, &[0.3, -7.0, 12.0], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sine_gradient_at_zero_is_cos_zero() {
        let g = finite_diff_grad(|v| v.iter().map(|x| x.sin()).sum(), &[0.0; 4], 1e-5).unwrap();
        for v in g {
            assert!((v - 0.0f64.cos()).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_value_names_coordinate() {
        let r = finite_diff_grad(|v| if v[1] > 1.0 { f64::NAN } else { 0.0 }, &[0.0, 1.0], 1e-5);
        assert!(matches!(r, Err(Error::OracleFailure { coordinate: 1 })));
    }

    #[test]
    fn logdet_identity_and_scaling() {
        let x = [0.3, -1.2, 2.0];
        assert!(logdet_bruteforce_fn(|v| v.to_vec(), &x, 1e-5).unwrap().abs() < 1e-10);
        let ld = logdet_bruteforce_fn(|v| v.iter().map(|a| 2.0 * a).collect(), &x, 1e-5).unwrap();
        assert!((ld - 3.0 * 2f64.ln()).abs() < 1e-9);
        assert!((ld - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn singular_jacobian_is_degenerate() {
        let r = logdet_bruteforce_fn(|v| vec![v[0] + v[1], v[0] + v[1]], &[1.0, 2.0], 1e-5);
        assert!(matches!(r, Err(Error::Degenerate { .. })));
    }

    #[test]
    fn quadratic_loss_with_exact_gradient_passes() {
        let p = [0.5, -1.5, 3.0];
        let loss = |v: &[f64]| v.iter().enumerate().map(|(i, x)| (i + 1) as f64 * x * x).sum::<f64>();
        let analytic: Vec<f64> = p.iter().enumerate().map(|(i, x)| 2.0 * (i + 1) as f64 * x).collect();
        let r = grad_check(loss, &analytic, &p, 1e-5, None).unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
    }

    #[test]
    fn corrupted_coordinate_is_identified() {
        let p = [0.5, -1.5, 3.0, 0.7];
        let loss = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let mut analytic: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
        analytic[2] *= 2.0;
        let r = grad_check(loss, &analytic, &p, 1e-5, None).unwrap();
        assert_eq!(r.worst_param_index, 2);
        assert!(r.max_rel_err > 0.4);
    }

    #[test]
    fn spread_coords_covers_ends() {
        let c = spread_coords(1000, 10);
        assert_eq!(c.first(), Some(&0));
        assert_eq!(c.last(), Some(&999));
        assert_eq!(spread_coords(5, 10), vec![0, 1, 2, 3, 4]);
    }
}
