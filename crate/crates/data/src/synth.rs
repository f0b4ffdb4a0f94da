//! Procedural HR images and the blur, bicubic-downscale, noise degradation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use sdflow_core::imaging::{bicubic_downscale, gaussian_blur};
use sdflow_core::{Shape, Tensor};

use crate::corpus::{Corpus, Sample, ThetaRecord};
use crate::error::{DataError, Result};
use crate::image::RgbImage;

pub const BLUR_SIGMA_RANGE: (f64, f64) = (0.2, 3.0);
pub const NOISE_SIGMA_RANGE: (f64, f64) = (0.0, 0.04);
/// Subsamples per pixel side when rasterizing shapes.
const SUPERSAMPLE: usize = 4;

/// One draw of the degradation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradationParams {
    pub blur_sigma: f64,
    /// Noise std on the [0, 1] range.
    pub noise_sigma: f64,
    pub scale: usize,
    /// Seed of the additive noise.
    pub seed: u64,
}

impl DegradationParams {
    /// Uniform draw from the configured ranges.
    pub fn sample(scale: usize, rng: &mut impl Rng) -> Self {
        DegradationParams {
            blur_sigma: rng.random_range(BLUR_SIGMA_RANGE.0..=BLUR_SIGMA_RANGE.1),
            noise_sigma: rng.random_range(NOISE_SIGMA_RANGE.0..=NOISE_SIGMA_RANGE.1),
            scale,
            seed: rng.random(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        if !in_range(self.blur_sigma, BLUR_SIGMA_RANGE) {
            return Err(DataError::Config(format!("blur sigma {} outside {:?}", self.blur_sigma, BLUR_SIGMA_RANGE)));
        }
        if !in_range(self.noise_sigma, NOISE_SIGMA_RANGE) {
            return Err(DataError::Config(format!("noise sigma {} outside {:?}", self.noise_sigma, NOISE_SIGMA_RANGE)));
        }
        check_scale(self.scale)
    }
}

fn check_scale(s: usize) -> Result<()> {
    if ![2, 4, 8].contains(&s) {
        return Err(DataError::Config(format!("scale must be 2, 4 or 8, got {s}")));
    }
    Ok(())
}

/// Blur, bicubic downscale by `scale`, then add Gaussian noise, all in
/// floating point. Zero sigmas disable the respective stage.
pub fn degrade(hr: &Tensor<f64>, blur_sigma: f64, noise_sigma: f64, scale: usize, seed: u64) -> Result<Tensor<f64>> {
    if blur_sigma < 0.0 || noise_sigma < 0.0 {
        return Err(DataError::Config(format!("sigmas must be nonnegative, got blur {blur_sigma} noise {noise_sigma}")));
    }
    let blurred = if blur_sigma > 0.0 { gaussian_blur(hr, blur_sigma) } else { hr.clone() };
    let mut lr = bicubic_downscale(&blurred, scale)?;
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma).expect("positive sigma");
        for v in lr.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(lr)
}

type Rgb = [f64; 3];

fn random_color(rng: &mut impl Rng) -> Rgb {
    [rng.random(), rng.random(), rng.random()]
}

struct Canvas {
    size: usize,
    px: Vec<Rgb>,
}

impl Canvas {
    /// Blends `color` into every pixel by the fraction of its subsamples
    /// for which `inside` holds.
    fn paint(&mut self, color: Rgb, alpha: f64, inside: impl Fn(f64, f64) -> bool) {
        let step = 1.0 / SUPERSAMPLE as f64;
        for y in 0..self.size {
            for x in 0..self.size {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let (fx, fy) = (x as f64 + (sx as f64 + 0.5) * step, y as f64 + (sy as f64 + 0.5) * step);
                        if inside(fx, fy) {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    let a = alpha * hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                    let p = &mut self.px[y * self.size + x];
                    for c in 0..3 {
                        p[c] = (1.0 - a) * p[c] + a * color[c];
                    }
                }
            }
        }
    }
}

fn point_in_polygon(px: f64, py: f64, v: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = v.len() - 1;
    for i in 0..v.len() {
        let ((xi, yi), (xj, yj)) = (v[i], v[j]);
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    ((px - a.0 - t * dx).powi(2) + (py - a.1 - t * dy).powi(2)).sqrt()
}

/// A procedural composite: a color gradient, a band-limited texture,
/// antialiased polygons and text-like strokes. Values lie in [0, 1].
pub fn procedural_hr(size: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let n = size as f64;
    let (c0, c1) = (random_color(rng), random_color(rng));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ux, uy) = (angle.cos(), angle.sin());
    let mut canvas = Canvas { size, px: Vec::with_capacity(size * size) };
    for y in 0..size {
        for x in 0..size {
            let t = ((x as f64 / n - 0.5) * ux + (y as f64 / n - 0.5) * uy) / std::f64::consts::SQRT_2 + 0.5;
            canvas.px.push([0, 1, 2].map(|c| c0[c] + (c1[c] - c0[c]) * t));
        }
    }

    // Sum of random low-frequency sinusoids per channel.
    let waves: Vec<(usize, f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            let freq = rng.random_range(1.0..(n / 8.0).max(2.0)) * std::f64::consts::TAU / n;
            let dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            (rng.random_range(0..3), freq * dir.cos(), freq * dir.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.02..0.12))
        })
        .collect();
    for y in 0..size {
        for x in 0..size {
            let p = &mut canvas.px[y * size + x];
            for &(c, kx, ky, phase, amp) in &waves {
                p[c] += amp * (kx * x as f64 + ky * y as f64 + phase).sin();
            }
        }
    }

    for _ in 0..rng.random_range(2..=5) {
        let (cx, cy) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
        let radius = rng.random_range(0.1 * n..0.35 * n);
        let k = rng.random_range(3..=7);
        let start: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let verts: Vec<(f64, f64)> = (0..k)
            .map(|i| {
                let a = start + std::f64::consts::TAU * i as f64 / k as f64 + rng.random_range(-0.3..0.3);
                let r = radius * rng.random_range(0.5..1.0);
                (cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        let color = random_color(rng);
        let alpha = rng.random_range(0.6..1.0);
        canvas.paint(color, alpha, |x, y| point_in_polygon(x, y, &verts));
    }

    for _ in 0..rng.random_range(1..=4) {
        let mut pts = vec![(rng.random_range(0.0..n), rng.random_range(0.0..n))];
        for _ in 0..rng.random_range(2..=5) {
            let &(x, y) = pts.last().expect("nonempty");
            pts.push(((x + rng.random_range(-0.25 * n..0.25 * n)).clamp(0.0, n), (y + rng.random_range(-0.25 * n..0.25 * n)).clamp(0.0, n)));
        }
        let half_width = rng.random_range(0.5..1.75);
        let color = if rng.random_bool(0.5) { [0.05; 3] } else { [0.95; 3] };
        canvas.paint(color, 1.0, |x, y| pts.windows(2).any(|s| segment_distance(x, y, s[0], s[1]) <= half_width));
    }

    Tensor::from_fn(Shape::new(1, 3, size, size), |_, c, y, x| canvas.px[y * size + x][c].clamp(0.0, 1.0))
}

/// Seed of image `index` of a corpus generated from `seed`.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.random()
}

/// Generates `n` HR images of side `size` and their degraded LR
/// counterparts. HR image `i` and LR image `i` share the id `NNNNNN`.
pub fn synth_corpus(n: usize, size: usize, scale: usize, seed: u64) -> Result<Corpus> {
    check_scale(scale)?;
    if n == 0 {
        return Err(DataError::Config("corpus needs at least one image".into()));
    }
    if size == 0 || size % (2 * scale) != 0 {
        return Err(DataError::Config(format!("image size {size} must be a positive multiple of {}", 2 * scale)));
    }
    let items: Vec<Result<(Sample, Sample, ThetaRecord)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = image_seed(seed, i);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let hr = procedural_hr(size, &mut rng);
            let theta = DegradationParams::sample(scale, &mut rng);
            let lr = degrade(&hr, theta.blur_sigma, theta.noise_sigma, scale, theta.seed)?;
            let id = format!("{i:06}");
            Ok((
                Sample { id: id.clone(), image: RgbImage::from_tensor(&hr, 0)? },
                Sample { id: id.clone(), image: RgbImage::from_tensor(&lr, 0)? },
                ThetaRecord { id, blur_sigma: theta.blur_sigma, noise_sigma: theta.noise_sigma, seed: s },
            ))
        })
        .collect();
    let mut corpus = Corpus { scale, hr: Vec::with_capacity(n), lr: Vec::with_capacity(n), theta: Vec::with_capacity(n) };
    for item in items {
        let (h, l, t) = item?;
        corpus.hr.push(h);
        corpus.lr.push(l);
        corpus.theta.push(t);
    }
    Ok(corpus)
}
