use std::collections::BTreeSet;

use sdflow_core::imaging::{bicubic_downscale, bicubic_upscale};
use sdflow_core::metrics::psnr_y;
use sdflow_data::synth::{image_seed, BLUR_SIGMA_RANGE, NOISE_SIGMA_RANGE};
use sdflow_data::{degrade, procedural_hr, synth_corpus, Corpus, DataError, DegradationParams};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Asymptotic Kolmogorov survival function with the Stephens small-sample
/// correction.
fn ks_uniform_p(values: &[f64], lo: f64, hi: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|x| (x - lo) / (hi - lo)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let d = v
        .iter()
        .enumerate()
        .map(|(i, &u)| ((i as f64 + 1.0) / n - u).max(u - i as f64 / n))
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let p: f64 = (1..=100).map(|k| 2.0 * (-1f64).powi(k - 1) * (-2.0 * (k * k) as f64 * lambda * lambda).exp()).sum();
    p.clamp(0.0, 1.0)
}

#[test]
fn fixed_seed_gives_a_byte_identical_corpus() {
    let a = synth_corpus(6, 32, 4, 7).unwrap();
    let b = synth_corpus(6, 32, 4, 7).unwrap();
    assert_eq!(a, b);
    let c = synth_corpus(6, 32, 4, 8).unwrap();
    assert_ne!(a.hr, c.hr);

    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    a.save(da.path()).unwrap();
    b.save(db.path()).unwrap();
    for rel in ["hr/000003.png", "lr/000005.png", "theta.csv"] {
        assert_eq!(std::fs::read(da.path().join(rel)).unwrap(), std::fs::read(db.path().join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn zero_degradation_is_pure_bicubic_downscale() {
    let hr = procedural_hr(32, &mut ChaCha8Rng::seed_from_u64(3));
    let lr = degrade(&hr, 0.0, 0.0, 4, 11).unwrap();
    assert!(lr.max_abs_diff(&bicubic_downscale(&hr, 4).unwrap()) < 1e-6);
}

#[test]
fn noise_has_the_requested_std() {
    let hr = procedural_hr(128, &mut ChaCha8Rng::seed_from_u64(5));
    let clean = degrade(&hr, 0.0, 0.0, 2, 0).unwrap();
    let noisy = degrade(&hr, 0.0, 0.03, 2, 9).unwrap();
    let r: Vec<f64> = noisy.data().iter().zip(clean.data()).map(|(a, b)| a - b).collect();
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    let std = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r.len() as f64).sqrt();
    assert!(mean.abs() < 1e-3, "mean {mean}");
    assert!((std - 0.03).abs() < 0.03 * 0.03, "std {std}");
}

#[test]
fn negative_sigma_is_rejected() {
    let hr = procedural_hr(16, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(degrade(&hr, -0.1, 0.0, 2, 0), Err(DataError::Config(_))));
}

#[test]
fn recorded_theta_is_uniform_over_the_configured_ranges() {
    let corpus = synth_corpus(300, 16, 2, 21).unwrap();
    let blur: Vec<f64> = corpus.theta.iter().map(|t| t.blur_sigma).collect();
    let noise: Vec<f64> = corpus.theta.iter().map(|t| t.noise_sigma).collect();
    assert!(blur.iter().all(|&b| (BLUR_SIGMA_RANGE.0..=BLUR_SIGMA_RANGE.1).contains(&b)));
    assert!(noise.iter().all(|&s| (NOISE_SIGMA_RANGE.0..=NOISE_SIGMA_RANGE.1).contains(&s)));
    let pb = ks_uniform_p(&blur, BLUR_SIGMA_RANGE.0, BLUR_SIGMA_RANGE.1);
    let pn = ks_uniform_p(&noise, NOISE_SIGMA_RANGE.0, NOISE_SIGMA_RANGE.1);
    println!("KS p-values: blur {pb:.4}, noise {pn:.4}");
    assert!(pb > 0.01 && pn > 0.01);
}

#[test]
fn ks_oracle_rejects_a_skewed_sample() {
    let skewed: Vec<f64> = (0..300).map(|i| (i as f64 / 300.0).powi(3)).collect();
    assert!(ks_uniform_p(&skewed, 0.0, 1.0) < 1e-6);
}

#[test]
fn theta_seed_regenerates_the_pair() {
    let corpus = synth_corpus(3, 16, 2, 99).unwrap();
    let t = &corpus.theta[2];
    assert_eq!(t.seed, image_seed(99, 2));
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let hr = procedural_hr(16, &mut rng);
    let theta = DegradationParams::sample(2, &mut rng);
    assert_eq!((theta.blur_sigma, theta.noise_sigma), (t.blur_sigma, t.noise_sigma));
    let lr = degrade(&hr, theta.blur_sigma, theta.noise_sigma, 2, theta.seed).unwrap();
    assert_eq!(sdflow_data::RgbImage::from_tensor(&lr, 0).unwrap(), corpus.lr[2].image);
}

#[test]
fn lr_is_a_plausible_degradation_of_hr() {
    let corpus = synth_corpus(24, 64, 4, 5).unwrap();
    let mut total = 0.0;
    for (h, l) in corpus.pairs() {
        let up = bicubic_upscale(&l.image.to_tensor::<f64>(), 4);
        let p = psnr_y(&up, &h.image.to_tensor::<f64>()).unwrap();
        assert!(p.is_finite());
        total += p;
    }
    let mean = total / 24.0;
    println!("mean PSNR-Y(bicubic up LR, HR) = {mean:.2} dB");
    assert!(mean > 15.0);
}

#[test]
fn invalid_sizes_and_scales_are_configuration_errors() {
    assert!(matches!(synth_corpus(4, 36, 4, 0), Err(DataError::Config(_))));
    assert!(matches!(synth_corpus(4, 32, 3, 0), Err(DataError::Config(_))));
    assert!(matches!(synth_corpus(0, 32, 4, 0), Err(DataError::Config(_))));
}

#[test]
fn corpus_round_trips_through_disk() {
    let corpus = synth_corpus(10, 32, 4, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    corpus.save(dir.path()).unwrap();
    let loaded = Corpus::load(dir.path()).unwrap();
    assert_eq!(loaded, corpus);
}

#[test]
fn corpus_without_theta_loads_with_inferred_scale() {
    let corpus = synth_corpus(4, 16, 2, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    corpus.save(dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("theta.csv")).unwrap();
    let loaded = Corpus::load(dir.path()).unwrap();
    assert_eq!(loaded.scale, 2);
    assert!(loaded.theta.is_empty());
    assert_eq!(loaded.hr, corpus.hr);
}

#[test]
fn missing_corpus_directory_is_an_io_error() {
    let err = Corpus::load(std::path::Path::new("/nonexistent/corpus")).unwrap_err();
    assert!(err.is_io(), "{err}");
}

#[test]
fn split_is_80_10_10_and_disjoint() {
    let corpus = synth_corpus(50, 16, 2, 2).unwrap();
    let s = corpus.split().unwrap();
    let ids = |c: &Corpus| c.ids().into_iter().collect::<BTreeSet<_>>();
    let (tr, va, te) = (ids(&s.train), ids(&s.val), ids(&s.test));
    assert_eq!((tr.len(), va.len(), te.len()), (40, 5, 5));
    assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
    assert_eq!(s.test.hr.len(), 5);
    assert_eq!(s.test.theta.len(), 5);
    assert!(synth_corpus(4, 16, 2, 2).unwrap().split().is_err());
}
