//! Held-out evaluation: SR and DS quality against ground truth, bicubic
//! baselines, sample diversity and the temperature sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sdflow_core::imaging::{bicubic_downscale, bicubic_upscale};
use sdflow_core::metrics::{diversity, psnr_y, ssim_y, FeatureSpace};
use sdflow_core::{Graph, ParamStore, Real, Result, SdFlow, Tensor};
use sdflow_data::Corpus;

/// Temperatures of the default report.
pub const REPORT_TAUS: [f64; 2] = [0.0, 0.8];
/// Temperatures of the sweep.
pub const SWEEP_TAUS: [f64; 4] = [0.0, 0.4, 0.8, 1.2];
/// Temperature of the generated set compared by the feature distance.
pub const FD_TAU: f64 = 0.8;
/// Samples per image for diversity.
pub const DIVERSITY_SAMPLES: usize = 10;

/// One per-image measurement.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub image_id: String,
    pub metric: String,
    pub value: f64,
}

/// Set-level metrics of one method at one temperature.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SetMetrics {
    pub direction: String,
    pub method: String,
    pub tau: Option<f64>,
    pub psnr_y: f64,
    pub ssim_y: f64,
    pub diversity: Option<f64>,
    pub fd_proxy: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub images: usize,
    pub samples: usize,
    pub sets: Vec<SetMetrics>,
    #[serde(skip)]
    pub rows: Vec<MetricRow>,
}

impl EvalReport {
    pub fn find(&self, direction: &str, method: &str, tau: Option<f64>) -> Option<&SetMetrics> {
        self.sets.iter().find(|s| s.direction == direction && s.method == method && s.tau == tau)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub tau: f64,
    pub sr_psnr_y: f64,
    pub sr_diversity: f64,
    pub ds_psnr_y: f64,
    pub ds_diversity: f64,
}

/// Paired HR and LR images of a synthetic corpus as (N, 3, H, W) batches.
pub struct EvalSet<T> {
    pub ids: Vec<String>,
    pub hr: Tensor<T>,
    pub lr: Tensor<T>,
}

impl<T: Real> EvalSet<T> {
    /// Every HR image with an LR image of the same id, without dequantization noise.
    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        let pairs = corpus.pairs();
        if pairs.is_empty() {
            return Err(sdflow_core::Error::Param("evaluation needs HR and LR images sharing ids".into()));
        }
        let ids = pairs.iter().map(|(h, _)| h.id.clone()).collect();
        let hr = Tensor::stack(&pairs.iter().map(|(h, _)| h.image.to_tensor::<T>()).collect::<Vec<_>>())?;
        let lr = Tensor::stack(&pairs.iter().map(|(_, l)| l.image.to_tensor::<T>()).collect::<Vec<_>>())?;
        Ok(EvalSet { ids, hr, lr })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn split_batch<T: Real>(t: &Tensor<T>) -> Vec<Tensor<T>> {
    (0..t.shape().n).map(|i| t.batch_slice(i, 1)).collect()
}

fn clamp01<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| v.max(T::zero()).min(T::one()))
}

/// `samples` super-resolutions of every LR image at `tau`, clamped to [0, 1].
pub fn sr_samples<T: Real>(model: &SdFlow, store: &ParamStore<T>, lr: &Tensor<T>, tau: f64, samples: usize, rng: &mut impl Rng) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::inference(store);
    let x = g.input(lr.clone());
    let z_c = model.ds.content(&mut g, x);
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut g2 = Graph::inference(store);
        let zc = g2.input(g.value(z_c).clone());
        let y = model.sr.sr_generate(&mut g2, zc, tau, rng)?;
        out.push(clamp01(g2.value(y)));
    }
    Ok(out)
}

/// `samples` downscalings of every HR image at `tau`. Each image keeps one
/// mixture component across its samples: `component` if given, else one
/// drawn uniformly per image.
pub fn ds_samples<T: Real>(
    model: &SdFlow,
    store: &ParamStore<T>,
    hr: &Tensor<T>,
    tau: f64,
    samples: usize,
    component: Option<usize>,
    rng: &mut impl Rng,
) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::inference(store);
    let y = g.input(hr.clone());
    let z_c = model.hr_content(&mut g, y)?;
    let z_c = g.value(z_c).clone();
    let n = z_c.shape().n;
    if let Some(k) = component.filter(|&k| k >= model.ds.mog.components) {
        return Err(sdflow_core::Error::Param(format!("component {k} out of range 0..{}", model.ds.mog.components)));
    }
    let components: Vec<usize> = (0..n).map(|_| component.unwrap_or_else(|| rng.random_range(0..model.ds.mog.components))).collect();
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut items: Vec<Option<Tensor<T>>> = vec![None; n];
        for k in 0..model.ds.mog.components {
            let members: Vec<usize> = (0..n).filter(|&i| components[i] == k).collect();
            if members.is_empty() {
                continue;
            }
            let zc = Tensor::stack(&members.iter().map(|&i| z_c.batch_slice(i, 1)).collect::<Vec<_>>())?;
            let mut g2 = Graph::inference(store);
            let zc = g2.input(zc);
            let x = model.ds.degrade(&mut g2, store, zc, tau, Some(k), rng)?;
            for (j, &i) in members.iter().enumerate() {
                items[i] = Some(g2.value(x).batch_slice(j, 1));
            }
        }
        let items: Vec<Tensor<T>> = items.into_iter().map(|t| t.expect("every image has a component")).collect();
        out.push(clamp01(&Tensor::stack(&items)?));
    }
    Ok(out)
}

/// Per-image mean PSNR-Y and SSIM-Y of `samples` against `truth`, and the
/// per-image diversity when there are at least two samples.
fn score<T: Real>(samples: &[Tensor<T>], truth: &Tensor<T>) -> Result<Vec<(f64, f64, Option<f64>)>> {
    let truths = split_batch(truth);
    let per_sample: Vec<Vec<Tensor<T>>> = samples.iter().map(split_batch).collect();
    let mut out = Vec::with_capacity(truths.len());
    for (i, t) in truths.iter().enumerate() {
        let imgs: Vec<Tensor<T>> = per_sample.iter().map(|s| s[i].clone()).collect();
        let mut psnr = 0.0;
        let mut ssim = 0.0;
        for img in &imgs {
            psnr += psnr_y(img, t)?;
            ssim += ssim_y(img, t)?;
        }
        let k = imgs.len() as f64;
        let div = if imgs.len() >= 2 { Some(diversity(&imgs)?) } else { None };
        out.push((psnr / k, ssim / k, div));
    }
    Ok(out)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

struct Scored {
    psnr: f64,
    ssim: f64,
    diversity: Option<f64>,
}

fn summarize(rows: &mut Vec<MetricRow>, ids: &[String], prefix: &str, scores: &[(f64, f64, Option<f64>)]) -> Scored {
    for (id, (p, s, d)) in ids.iter().zip(scores) {
        rows.push(MetricRow { image_id: id.clone(), metric: format!("{prefix}.psnr_y"), value: *p });
        rows.push(MetricRow { image_id: id.clone(), metric: format!("{prefix}.ssim_y"), value: *s });
        if let Some(d) = d {
            rows.push(MetricRow { image_id: id.clone(), metric: format!("{prefix}.diversity"), value: *d });
        }
    }
    Scored {
        psnr: mean(scores.iter().map(|s| s.0)),
        ssim: mean(scores.iter().map(|s| s.1)),
        diversity: scores.iter().all(|s| s.2.is_some()).then(|| mean(scores.iter().filter_map(|s| s.2))),
    }
}

/// Full report: SR against HR and DS against the true LR at each `tau`,
/// with bicubic baselines and feature distances for the LR sets.
pub fn evaluate<T: Real>(model: &SdFlow, store: &ParamStore<T>, set: &EvalSet<T>, taus: &[f64], samples: usize, seed: u64) -> Result<EvalReport> {
    let s = model.scale();
    let features = FeatureSpace::default();
    let fd_ok = set.len() >= sdflow_core::metrics::FD_MIN_IMAGES;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut sets = Vec::new();
    let true_lr = split_batch(&set.lr);

    let up = bicubic_upscale(&set.lr, s);
    let b = summarize(&mut rows, &set.ids, "sr.bicubic", &score(&[clamp01(&up)], &set.hr)?);
    sets.push(SetMetrics { direction: "sr".into(), method: "bicubic".into(), tau: None, psnr_y: b.psnr, ssim_y: b.ssim, diversity: None, fd_proxy: None });
    let down = clamp01(&bicubic_downscale(&set.hr, s)?);
    let b = summarize(&mut rows, &set.ids, "ds.bicubic", &score(std::slice::from_ref(&down), &set.lr)?);
    let fd = if fd_ok { Some(features.fd_proxy(&split_batch(&down), &true_lr)?) } else { None };
    sets.push(SetMetrics { direction: "ds".into(), method: "bicubic".into(), tau: None, psnr_y: b.psnr, ssim_y: b.ssim, diversity: None, fd_proxy: fd });

    for &tau in taus {
        let sr = sr_samples(model, store, &set.lr, tau, samples, &mut rng)?;
        let m = summarize(&mut rows, &set.ids, &format!("sr.model.tau{tau}"), &score(&sr, &set.hr)?);
        sets.push(SetMetrics { direction: "sr".into(), method: "model".into(), tau: Some(tau), psnr_y: m.psnr, ssim_y: m.ssim, diversity: m.diversity, fd_proxy: None });

        let ds = ds_samples(model, store, &set.hr, tau, samples, None, &mut rng)?;
        let m = summarize(&mut rows, &set.ids, &format!("ds.model.tau{tau}"), &score(&ds, &set.lr)?);
        let fd = if fd_ok { Some(features.fd_proxy(&split_batch(&ds[0]), &true_lr)?) } else { None };
        sets.push(SetMetrics { direction: "ds".into(), method: "model".into(), tau: Some(tau), psnr_y: m.psnr, ssim_y: m.ssim, diversity: m.diversity, fd_proxy: fd });
    }
    Ok(EvalReport { images: set.len(), samples, sets, rows })
}

/// PSNR-Y and diversity of both directions over `taus`.
pub fn tau_sweep<T: Real>(model: &SdFlow, store: &ParamStore<T>, set: &EvalSet<T>, taus: &[f64], samples: usize, seed: u64) -> Result<Vec<SweepRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(taus.len());
    for &tau in taus {
        let sr = score(&sr_samples(model, store, &set.lr, tau, samples, &mut rng)?, &set.hr)?;
        let ds = score(&ds_samples(model, store, &set.hr, tau, samples, None, &mut rng)?, &set.lr)?;
        out.push(SweepRow {
            tau,
            sr_psnr_y: mean(sr.iter().map(|s| s.0)),
            sr_diversity: mean(sr.iter().map(|s| s.2.unwrap_or(0.0))),
            ds_psnr_y: mean(ds.iter().map(|s| s.0)),
            ds_diversity: mean(ds.iter().map(|s| s.2.unwrap_or(0.0))),
        });
    }
    Ok(out)
}
