//! One PASS/FAIL line per acceptance criterion. Criteria 6 and 7 reuse a
//! completed desk training run cached under `target/acceptance/desk`
//! (override with `SDFLOW_ACCEPTANCE_DIR`); a missing or partial run is
//! trained or resumed through the `sdflow` binary first, which takes hours.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdflow_cli::eval::{evaluate, tau_sweep, EvalReport, EvalSet, SweepRow, DIVERSITY_SAMPLES, FD_TAU, SWEEP_TAUS};
use sdflow_core::imaging::bicubic_weights;
use sdflow_core::metrics::{psnr_y, ssim_y};
use sdflow_core::oracle::{psnr_y_scalar, ssim_y_scalar};
use sdflow_core::priors::{std_normal_logp, std_normal_sample, MogPrior};
use sdflow_core::verify::{gradient_suite, invertibility_suite, logdet_suite, Check, VerifyOptions};
use sdflow_core::{DType, Graph, ModelConfig, ParamBuilder, ParamGroup, ParamStore, Real, SdFlow, Shape, Tensor};
use sdflow_data::{synth_corpus, Corpus};
use sdflow_train::log::smoothed;
use sdflow_train::{load_model, read_log, Checkpoint, CheckpointMeta, LossLog, RunOptions, TrainConfig, Trainer};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn report(results: &mut Vec<(usize, bool)>, id: usize, name: &str, o: Outcome) {
    println!("{} {id} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    results.push((id, o.passed));
}

fn suite(checks: &[Check], elapsed: Duration, limit: Duration) -> Outcome {
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.to_string()).collect();
    let worst = checks.iter().filter(|c| c.tolerance > 0.0).map(|c| c.metric / c.tolerance).fold(0.0, f64::max);
    let fast = elapsed < limit;
    outcome(
        failed.is_empty() && fast,
        format!(
            "{} checks, {} failed, worst metric/tolerance {worst:.2e}, {:.1}s (limit {}s){}",
            checks.len(),
            failed.len(),
            elapsed.as_secs_f64(),
            limit.as_secs(),
            failed.iter().map(|f| format!("\n    {f}")).collect::<String>()
        ),
    )
}

fn timed<R>(f: impl FnOnce() -> R) -> (R, Duration) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed())
}

fn shape_law() -> Outcome {
    let (m, store) = SdFlow::build::<f64>(&ModelConfig::toy(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::inference(&store);
    let y = g.input(Tensor::rand_uniform(Shape::new(2, 3, 32, 24), 0.0, 1.0, &mut rng));
    let x = g.input(Tensor::rand_uniform(Shape::new(2, 3, 12, 8), 0.0, 1.0, &mut rng));
    let hr = m.sr.hr_forward(&mut g, y).unwrap();
    let feats = m.ds.inn_features(&mut g, x).unwrap();
    let got = [g.shape(hr.z_c), g.shape(hr.z_h), g.shape(feats)];
    let want = [Shape::new(2, 3, 8, 6), Shape::new(2, 45, 8, 6), Shape::new(2, 12, 6, 4)];
    outcome(got == want, format!("z_c {}, z_h {}, LR features {} for HR 32x24 and LR 12x8 at s=4", got[0], got[1], got[2]))
}

fn priors() -> Outcome {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mog = MogPrior::new(&mut ParamBuilder::new(&mut store, &mut rng, ParamGroup::Flow), 1, (3, 4, 4), 0.0);
    let z = Tensor::<f64>::randn(Shape::new(8, 3, 4, 4), 2.0, &mut rng);
    let mut g = Graph::inference(&store);
    let zi = g.input(z);
    let zero = g.input(Tensor::zeros(Shape::new(1, 3, 4, 4)));
    let (a, b) = (mog.logp(&mut g, zi), std_normal_logp(&mut g, zi));
    let mog_err = g.value(a).data().iter().zip(g.value(b).data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    let lp0 = std_normal_logp(&mut g, zero);
    let at_zero = g.value(lp0).item() / 48.0;

    let (model, mstore) = SdFlow::build::<f64>(&ModelConfig::toy(), 2).unwrap();
    let s = Shape::new(2, 12, 4, 4);
    let draw = |seed| model.ds.mog.sample(&mstore, s, 0.0, Some(1), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().0;
    let n1: Tensor<f64> = std_normal_sample(s, 0.0, &mut rng).unwrap();
    let n2: Tensor<f64> = std_normal_sample(s, 0.0, &mut rng).unwrap();
    let deterministic = draw(1).data() == draw(2).data() && n1.data() == n2.data();
    outcome(
        mog_err < 1e-12 && (at_zero + 0.918_938_5).abs() < 5e-8 && deterministic,
        format!("|mog - normal| {mog_err:.1e} < 1e-12, logp(0) per element {at_zero:.7}, tau=0 draws identical: {deterministic}"),
    )
}

fn determinism_and_resume() -> Outcome {
    let corpus = synth_corpus(24, 32, 4, 8).unwrap();
    let mut cfg = TrainConfig::toy();
    (cfg.iters_pretrain, cfg.iters_forward, cfg.iters_finetune) = (2, 2, 2);
    let dir = tempfile::tempdir().unwrap();
    let train = |name: &str, until: Option<usize>| -> PathBuf {
        let out = dir.path().join(name);
        std::fs::create_dir_all(&out).unwrap();
        let mut t = Trainer::<f64>::new(&ModelConfig::toy(), cfg.clone(), corpus.clone()).unwrap();
        let mut log = LossLog::create(&out.join("loss.csv")).unwrap();
        let opts = RunOptions { checkpoint: Some(out.join("model.ckpt")), checkpoint_every: 100, until };
        t.run(&mut log, &opts, |_| {}).unwrap();
        out
    };
    let (a, b, c) = (train("a", None), train("b", None), train("c", Some(3)));
    let ck = Checkpoint::load(&c.join("model.ckpt")).unwrap();
    let mut t = Trainer::<f64>::resume(&ck, corpus.clone()).unwrap();
    let mut log = LossLog::resume(&c.join("loss.csv"), t.iteration()).unwrap();
    t.run(&mut log, &RunOptions { checkpoint: Some(c.join("model.ckpt")), checkpoint_every: 100, until: None }, |_| {}).unwrap();
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    let same_log = read(&a, "loss.csv") == read(&b, "loss.csv");
    let resumed_log = read(&a, "loss.csv") == read(&c, "loss.csv");
    let resumed_ck = read(&a, "model.ckpt") == read(&c, "model.ckpt");
    outcome(
        same_log && resumed_log && resumed_ck,
        format!("repeat run log bit-identical: {same_log}; resumed at 3/6 log identical: {resumed_log}, checkpoint identical: {resumed_ck}"),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut psnr_err, mut ssim_err) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let a = Tensor::<f64>::rand_uniform(Shape::new(1, 3, 24, 20), 0.0, 1.0, &mut rng);
        let d = Tensor::<f64>::rand_uniform(a.shape(), -0.15, 0.15, &mut rng);
        let b = Tensor::from_fn(a.shape(), |n, c, h, w| f64::clamp(a.at(n, c, h, w) + d.at(n, c, h, w), 0.0, 1.0));
        psnr_err = psnr_err.max((psnr_y(&a, &b).unwrap() - psnr_y_scalar(&a, &b)).abs());
        ssim_err = ssim_err.max((ssim_y(&a, &b).unwrap() - ssim_y_scalar(&a, &b)).abs());
    }
    let w = bicubic_weights(0.5);
    let w_err = w.iter().zip([-0.0625, 0.5625, 0.5625, -0.0625]).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    outcome(
        psnr_err < 1e-9 && ssim_err < 1e-9 && w_err < 1e-15,
        format!("20 pairs: max |psnr - oracle| {psnr_err:.1e}, max |ssim - oracle| {ssim_err:.1e}; bicubic weights at 0.5 {w:?}"),
    )
}

/// The cached desk run, trained or resumed if incomplete.
struct DeskRun {
    corpus: Corpus,
    checkpoint: Checkpoint,
    meta: CheckpointMeta,
    log: PathBuf,
}

fn desk_run() -> DeskRun {
    let root = std::env::var_os("SDFLOW_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance/desk"));
    let (corpus_dir, run) = (root.join("corpus"), root.join("run"));
    if !corpus_dir.join(sdflow_data::corpus::THETA_FILE).is_file() {
        println!("synthesizing the desk corpus in {}", corpus_dir.display());
        synth_corpus(256, 64, 4, 0).unwrap().save(&corpus_dir).unwrap();
    }
    let ckpt = run.join("model.ckpt");
    let complete = |p: &Path| {
        Checkpoint::load(p).ok().and_then(|ck| CheckpointMeta::read(&ck).ok()).is_some_and(|m| m.iteration >= m.train.total())
    };
    if !complete(&ckpt) {
        let mut args = vec!["train".to_string(), "--corpus".into(), corpus_dir.display().to_string(), "--out".into(), run.display().to_string()];
        if ckpt.is_file() {
            args.push("--resume".into());
        }
        println!("training the desk model into {} (hours on one core)", run.display());
        let status = Command::new(env!("CARGO_BIN_EXE_sdflow")).args(&args).status().unwrap();
        assert!(status.success(), "desk training failed: {status}");
    }
    let checkpoint = Checkpoint::load(&ckpt).unwrap();
    let meta = CheckpointMeta::read(&checkpoint).unwrap();
    DeskRun { corpus: Corpus::load(&corpus_dir).unwrap(), checkpoint, meta, log: run.join("loss.csv") }
}

fn nll_drop(log: &Path, end_of_forward: usize) -> Outcome {
    let records = read_log(log).unwrap();
    if records.len() < end_of_forward || end_of_forward < 100 {
        return outcome(false, format!("log has {} records, need {end_of_forward}", records.len()));
    }
    let series = |f: fn(&sdflow_train::LossRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
    let mut parts = Vec::new();
    let mut passed = true;
    for (name, v) in [("nll_y", series(|r| r.nll_y)), ("nll_x", series(|r| r.nll_x))] {
        let (early, late) = (smoothed(&v, 99, 100), smoothed(&v, end_of_forward - 1, 100));
        let drop = (early - late) / early.abs();
        passed &= drop >= 0.10;
        parts.push(format!("{name} {early:.4} -> {late:.4} ({:.1}% drop)", 100.0 * drop));
    }
    outcome(passed, format!("{} (>= 10% required, 100-iteration trailing mean)", parts.join(", ")))
}

fn desk_report<T: Real>(run: &DeskRun) -> (EvalReport, Vec<SweepRow>, Duration) {
    let (model, store): (SdFlow, ParamStore<T>) = load_model(&run.checkpoint, &run.meta.model).unwrap();
    let test = run.corpus.split().unwrap().test;
    let set = EvalSet::<T>::from_corpus(&test).unwrap();
    let report = evaluate(&model, &store, &set, &[0.0, FD_TAU], DIVERSITY_SAMPLES, 0).unwrap();
    let (sweep, elapsed) = timed(|| tau_sweep(&model, &store, &set, &SWEEP_TAUS, DIVERSITY_SAMPLES, 0).unwrap());
    (report, sweep, elapsed)
}

fn criterion6(run: &DeskRun, report: &EvalReport) -> Outcome {
    let desk = run.meta.model == ModelConfig::desk() && run.meta.train == TrainConfig::desk() && run.corpus.len() == 256;
    let t = &run.meta.train;
    let a = nll_drop(&run.log, t.iters_pretrain + t.iters_forward);
    let sr_bic = report.find("sr", "bicubic", None).unwrap();
    let sr0 = report.find("sr", "model", Some(0.0)).unwrap();
    let gain = sr0.psnr_y - sr_bic.psnr_y;
    let b = gain >= 0.3;
    let fd_bic = report.find("ds", "bicubic", None).unwrap().fd_proxy.unwrap();
    let fd_gen = report.find("ds", "model", Some(FD_TAU)).unwrap().fd_proxy.unwrap();
    let c = fd_gen < fd_bic;
    let div = |dir: &str, tau: f64| report.find(dir, "model", Some(tau)).unwrap().diversity.unwrap();
    let d = ["sr", "ds"].iter().all(|dir| div(dir, 0.0) == 0.0 && div(dir, 0.8) > 0.0);
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    outcome(
        desk && a.passed && b && c && d,
        format!(
            "desk config, 256 images, {}/{}/{} iterations: {desk}\n    (a) [{}] {}\n    (b) [{}] held-out SR PSNR-Y {:.3} dB vs bicubic {:.3} dB, gain {gain:+.3} dB (>= +0.3)\n    (c) [{}] fd_proxy generated LR (tau {FD_TAU}) {fd_gen:.4} vs bicubic LR {fd_bic:.4}\n    (d) [{}] diversity SR {:.4} -> {:.4}, DS {:.4} -> {:.4} (tau 0 -> 0.8)",
            t.iters_pretrain,
            t.iters_forward,
            t.iters_finetune,
            mark(a.passed),
            a.detail,
            mark(b),
            sr0.psnr_y,
            sr_bic.psnr_y,
            mark(c),
            mark(d),
            div("sr", 0.0),
            div("sr", 0.8),
            div("ds", 0.0),
            div("ds", 0.8),
        ),
    )
}

fn criterion7(sweep: &[SweepRow], elapsed: Duration) -> Outcome {
    let psnr: Vec<f64> = sweep.iter().map(|r| r.sr_psnr_y).collect();
    let div: Vec<f64> = sweep.iter().map(|r| r.sr_diversity).collect();
    let peak_at_zero = psnr.iter().all(|&p| p <= psnr[0]);
    let lower_at_end = psnr[psnr.len() - 1] < psnr[0];
    let increasing = div.windows(2).all(|w| w[1] > w[0]);
    let fast = elapsed < Duration::from_secs(600);
    let rows: String = sweep
        .iter()
        .map(|r| format!("\n    tau {:.1}: SR PSNR-Y {:.3} diversity {:.3} | DS PSNR-Y {:.3} diversity {:.3}", r.tau, r.sr_psnr_y, r.sr_diversity, r.ds_psnr_y, r.ds_diversity))
        .collect();
    outcome(
        peak_at_zero && lower_at_end && increasing && fast,
        format!(
            "SR PSNR-Y peaks at tau 0: {peak_at_zero}, lower at 1.2: {lower_at_end}; SR diversity strictly increasing: {increasing}; {:.1}s (limit 600s){rows}",
            elapsed.as_secs_f64()
        ),
    )
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    let opts = VerifyOptions::default();
    let (c, t) = timed(|| invertibility_suite(&opts).unwrap());
    report(&mut results, 1, "invertibility", suite(&c, t, Duration::from_secs(120)));
    let (c, t) = timed(|| logdet_suite(&opts).unwrap());
    report(&mut results, 2, "log-determinant", suite(&c, t, Duration::from_secs(300)));
    let (c, t) = timed(|| gradient_suite(&opts).unwrap());
    report(&mut results, 3, "gradients", suite(&c, t, Duration::from_secs(600)));
    report(&mut results, 4, "shape law", shape_law());
    report(&mut results, 5, "priors", priors());

    let run = desk_run();
    let (rep, sweep, sweep_time) = match run.meta.dtype().unwrap() {
        DType::F32 => desk_report::<f32>(&run),
        DType::F64 => desk_report::<f64>(&run),
    };
    report(&mut results, 6, "desk training", criterion6(&run, &rep));
    report(&mut results, 7, "temperature sweep", criterion7(&sweep, sweep_time));
    report(&mut results, 8, "determinism and resume", determinism_and_resume());
    report(&mut results, 9, "metric oracles", metric_oracles());

    let failed: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
