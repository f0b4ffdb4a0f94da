//! Resampling and filtering operators as separable matrices, and the BT.601
//! luma transform.
//!
//! Boundary handling is half-sample symmetric reflection (`-1 -> 0`,
//! `n -> n - 1`), folded into the operator matrices.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{sep_apply, Graph, NodeId, SepMatrix};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Cubic convolution parameter.
pub const CUBIC_A: f64 = -0.5;

/// Keys cubic convolution kernel with parameter `a`.
pub fn cubic(x: f64, a: f64) -> f64 {
    let t = x.abs();
    if t <= 1.0 {
        (a + 2.0) * t.powi(3) - (a + 3.0) * t.powi(2) + 1.0
    } else if t < 2.0 {
        a * t.powi(3) - 5.0 * a * t.powi(2) + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// The four interpolation weights for a sample at fractional offset `phase`
/// past the second tap (taps at distances `1 + phase, phase, 1 - phase, 2 - phase`).
pub fn bicubic_weights(phase: f64) -> [f64; 4] {
    [cubic(1.0 + phase, CUBIC_A), cubic(phase, CUBIC_A), cubic(1.0 - phase, CUBIC_A), cubic(2.0 - phase, CUBIC_A)]
}

/// Index into `[0, n)` under half-sample symmetric reflection, valid for any offset.
pub fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - 1 - m) as usize
    } else {
        m as usize
    }
}

/// Accumulates `w` at reflected column `j` of row `i`.
fn put(m: &mut SepMatrix, i: usize, j: isize, w: f64) {
    let inp = m.inp;
    m.weights[i * inp + reflect(j, inp)] += w;
}

fn normalize_rows(m: &mut SepMatrix) {
    let inp = m.inp;
    for row in m.weights.chunks_mut(inp) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
}

/// Bicubic downscaling by an integer factor `s`, with the kernel stretched by
/// `s` (antialiasing) and rows normalized to sum to one.
pub fn bicubic_down_matrix(n: usize, s: usize) -> SepMatrix {
    assert!(s >= 1 && n % s == 0, "bicubic_down_matrix: {n} not divisible by {s}");
    let out = n / s;
    let sf = s as f64;
    let mut m = SepMatrix::new(out, n, vec![0.0; out * n]);
    for i in 0..out {
        let center = (i as f64 + 0.5) * sf - 0.5;
        let lo = (center - 2.0 * sf).floor() as isize;
        let hi = (center + 2.0 * sf).ceil() as isize;
        for j in lo..=hi {
            let w = cubic((center - j as f64) / sf, CUBIC_A);
            if w != 0.0 {
                put(&mut m, i, j, w);
            }
        }
    }
    normalize_rows(&mut m);
    m
}

/// Bicubic upscaling by an integer factor `s`.
pub fn bicubic_up_matrix(n: usize, s: usize) -> SepMatrix {
    let out = n * s;
    let mut m = SepMatrix::new(out, n, vec![0.0; out * n]);
    for i in 0..out {
        let src = (i as f64 + 0.5) / s as f64 - 0.5;
        let base = src.floor();
        let w = bicubic_weights(src - base);
        for (t, wt) in w.iter().enumerate() {
            put(&mut m, i, base as isize - 1 + t as isize, *wt);
        }
    }
    m
}

/// Gaussian blur with standard deviation `sigma` and the given radius.
pub fn gaussian_matrix(n: usize, sigma: f64, radius: usize) -> SepMatrix {
    let mut m = SepMatrix::new(n, n, vec![0.0; n * n]);
    if sigma <= 0.0 {
        for i in 0..n {
            m.weights[i * n + i] = 1.0;
        }
        return m;
    }
    let r = radius as isize;
    let taps: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    for i in 0..n {
        for (t, w) in taps.iter().enumerate() {
            put(&mut m, i, i as isize + t as isize - r, w / total);
        }
    }
    m
}

/// Kernel size of the content low-pass filter.
pub const LPF_SIZE: usize = 9;

/// Low-pass filter used by the content and cycle losses: 9x9 Gaussian with
/// sigma = s / 2.
pub fn lowpass_matrix(n: usize, scale: usize) -> SepMatrix {
    gaussian_matrix(n, scale as f64 / 2.0, LPF_SIZE / 2)
}

fn check_divisible(shape: Shape, s: usize) -> Result<()> {
    if s == 0 || shape.h % s != 0 || shape.w % s != 0 {
        return Err(Error::shape(format!("image {shape} is not divisible by scale {s}")));
    }
    Ok(())
}

pub fn bicubic_downscale<T: Real>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let sh = x.shape();
    check_divisible(sh, s)?;
    Ok(sep_apply(x, &bicubic_down_matrix(sh.h, s), &bicubic_down_matrix(sh.w, s)))
}

pub fn bicubic_upscale<T: Real>(x: &Tensor<T>, s: usize) -> Tensor<T> {
    let sh = x.shape();
    sep_apply(x, &bicubic_up_matrix(sh.h, s), &bicubic_up_matrix(sh.w, s))
}

/// Gaussian blur with radius `ceil(3 sigma)`.
pub fn gaussian_blur<T: Real>(x: &Tensor<T>, sigma: f64) -> Tensor<T> {
    let sh = x.shape();
    let r = (3.0 * sigma).ceil().max(1.0) as usize;
    sep_apply(x, &gaussian_matrix(sh.h, sigma, r), &gaussian_matrix(sh.w, sigma, r))
}

pub fn lowpass<T: Real>(x: &Tensor<T>, scale: usize) -> Tensor<T> {
    let sh = x.shape();
    sep_apply(x, &lowpass_matrix(sh.h, scale), &lowpass_matrix(sh.w, scale))
}

/// Differentiable counterparts of the resampling functions.
pub fn bicubic_downscale_node<T: Real>(g: &mut Graph<'_, T>, x: NodeId, s: usize) -> Result<NodeId> {
    let sh = g.shape(x);
    check_divisible(sh, s)?;
    Ok(g.sep_linear(x, &Arc::new(bicubic_down_matrix(sh.h, s)), &Arc::new(bicubic_down_matrix(sh.w, s))))
}

pub fn bicubic_upscale_node<T: Real>(g: &mut Graph<'_, T>, x: NodeId, s: usize) -> NodeId {
    let sh = g.shape(x);
    g.sep_linear(x, &Arc::new(bicubic_up_matrix(sh.h, s)), &Arc::new(bicubic_up_matrix(sh.w, s)))
}

pub fn lowpass_node<T: Real>(g: &mut Graph<'_, T>, x: NodeId, scale: usize) -> NodeId {
    let sh = g.shape(x);
    g.sep_linear(x, &Arc::new(lowpass_matrix(sh.h, scale)), &Arc::new(lowpass_matrix(sh.w, scale)))
}

/// BT.601 studio-swing luma coefficients for inputs in [0, 1].
pub const Y_OFFSET: f64 = 16.0 / 255.0;
pub const Y_WEIGHTS: [f64; 3] = [65.481 / 255.0, 128.553 / 255.0, 24.966 / 255.0];

/// `Y = 16/255 + (65.481 R + 128.553 G + 24.966 B) / 255`, shape (N, 1, H, W).
pub fn rgb_to_y<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.c != 3 {
        return Err(Error::shape(format!("luma needs 3 channels, got {s}")));
    }
    let p = s.plane();
    let mut out = Vec::with_capacity(s.n * p);
    for n in 0..s.n {
        let img = x.sample(n);
        for k in 0..p {
            let v = Y_OFFSET + (0..3).map(|c| Y_WEIGHTS[c] * img[c * p + k].as_f64()).sum::<f64>();
            out.push(T::from_f64(v));
        }
    }
    Tensor::from_vec(Shape::new(s.n, 1, s.h, s.w), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn half_phase_weights() {
        let w = bicubic_weights(0.5);
        assert_eq!(w, [-0.0625, 0.5625, 0.5625, -0.0625]);
    }

    #[test]
    fn rows_sum_to_one() {
        for (n, s) in [(8, 2), (16, 4), (12, 3), (64, 4)] {
            for m in [bicubic_down_matrix(n, s), bicubic_up_matrix(n / s, s), lowpass_matrix(n, s), gaussian_matrix(n, 1.3, 4)] {
                for i in 0..m.out {
                    assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_images_are_preserved() {
        let x = Tensor::<f64>::full(Shape::new(1, 3, 16, 16), 0.37);
        for y in [bicubic_downscale(&x, 4).unwrap(), bicubic_upscale(&x, 2), gaussian_blur(&x, 2.0), lowpass(&x, 4)] {
            assert!(y.data().iter().all(|v| (v - 0.37).abs() < 1e-6));
        }
    }

    #[test]
    fn ramp_stays_ramp() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 1, 4, 32), |_, _, _, w| 0.01 * w as f64);
        let y = bicubic_downscale(&x, 2).unwrap();
        for j in 2..13 {
            let want = 0.01 * (2.0 * j as f64 + 0.5);
            assert!((y.at(0, 0, 1, j) - want).abs() < 1e-5);
            assert!((y.at(0, 0, 1, j + 1) - y.at(0, 0, 1, j) - 0.02).abs() < 1e-5);
        }
    }

    #[test]
    fn indivisible_is_rejected() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 3, 10, 12));
        assert!(matches!(bicubic_downscale(&x, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn reflect_handles_far_offsets() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(-2, 4), 1);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(9, 4), 1);
        assert_eq!(reflect(-5, 1), 0);
    }

    #[test]
    fn luma_reference_points() {
        let img = |v: f64| Tensor::<f64>::full(Shape::new(1, 3, 1, 1), v);
        let white = rgb_to_y(&img(1.0)).unwrap().item();
        let black = rgb_to_y(&img(0.0)).unwrap().item();
        let gray = rgb_to_y(&img(0.5)).unwrap().item();
        assert!((white - 235.0 / 255.0).abs() < 1e-12);
        assert!((black - 16.0 / 255.0).abs() < 1e-12);
        assert!((gray - (white + black) / 2.0).abs() < 1e-12);
        assert!(rgb_to_y(&Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2))).is_err());
    }

    #[test]
    fn node_versions_match_tensor_versions() {
        let x = Tensor::<f64>::rand_uniform(Shape::new(2, 3, 16, 16), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let store = crate::params::ParamStore::new();
        let mut g = Graph::inference(&store);
        let xi = g.input(x.clone());
        let d = bicubic_downscale_node(&mut g, xi, 4).unwrap();
        let u = bicubic_upscale_node(&mut g, d, 4);
        let l = lowpass_node(&mut g, xi, 4);
        let dv = bicubic_downscale(&x, 4).unwrap();
        assert_eq!(g.value(d), &dv);
        assert_eq!(g.value(u), &bicubic_upscale(&dv, 4));
        assert_eq!(g.value(l), &lowpass(&x, 4));
    }
}
