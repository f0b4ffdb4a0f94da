use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdflow_cli::config::{keys_help, read_pairs, RunConfig};
use sdflow_cli::eval::{self, EvalSet, DIVERSITY_SAMPLES, REPORT_TAUS, SWEEP_TAUS};
use sdflow_cli::exit::{self, MismatchError, UsageError};
use sdflow_core::layers::LayerKind;
use sdflow_core::metrics::diversity;
use sdflow_core::verify::{run_all, VerifyOptions};
use sdflow_core::{DType, ParamStore, Real, SdFlow};
use sdflow_data::{read_png, synth_corpus, write_png, Corpus, RgbImage};
use sdflow_train::{load_model, Checkpoint, CheckpointMeta, LossLog, RunOptions, Trainer};

#[derive(Parser)]
#[command(name = "sdflow", version, about = "Bidirectional flow for unpaired super-resolution and downscaling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic HR/LR corpus with recorded degradations.
    SynthData(SynthArgs),
    /// Train a model on a corpus; writes model.ckpt, loss.csv and config.txt.
    #[command(after_help = keys_help())]
    Train(TrainArgs),
    /// Super-resolve LR images.
    Sr(GenerateArgs),
    /// Downscale HR images.
    Downscale(DownscaleArgs),
    /// Run the invertibility, log-determinant and gradient oracle suites.
    Verify(VerifyArgs),
    /// Evaluate a checkpoint on the held-out split of a synthetic corpus.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 256)]
    n: usize,
    /// HR side length; a multiple of twice the scale.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    scale: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "corpus")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PhaseArg {
    All,
    Pretrain,
    Forward,
    Finetune,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Configuration override, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Schedule segments to run; a single phase zeroes the others.
    #[arg(long, value_enum, default_value_t = PhaseArg::All)]
    phase: PhaseArg,
    /// Length of the selected single phase.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from <out>/model.ckpt, including optimizer and RNG state.
    #[arg(long)]
    resume: bool,
    /// Start from the parameters of another checkpoint with fresh optimizers.
    #[arg(long, conflicts_with = "resume")]
    init: Option<PathBuf>,
    /// Train on every image instead of the training split.
    #[arg(long)]
    all_images: bool,
    /// Stop and checkpoint after this many total iterations.
    #[arg(long)]
    until: Option<usize>,
    #[arg(long, default_value_t = 100)]
    checkpoint_every: usize,
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A PNG file or a directory of PNG files.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    tau: f64,
    #[arg(long, default_value_t = 1)]
    n_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DownscaleArgs {
    #[command(flatten)]
    common: GenerateArgs,
    /// Fix the degradation mixture component.
    #[arg(long)]
    component: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Inject an off-by-H·W log-determinant error into one layer kind.
    #[arg(long)]
    fault: Option<LayerKind>,
    /// Random seeds of the invertibility suite.
    #[arg(long, default_value_t = 100)]
    seeds: u64,
    /// Also write the report as CSV.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value = "eval")]
    out: PathBuf,
    /// Comma-separated temperatures of the report.
    #[arg(long, value_delimiter = ',', default_values_t = REPORT_TAUS)]
    taus: Vec<f64>,
    /// Samples per image for diversity.
    #[arg(long, default_value_t = DIVERSITY_SAMPLES)]
    samples: usize,
    /// Also sweep the temperature over 0, 0.4, 0.8, 1.2.
    #[arg(long)]
    sweep: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(exit::USAGE);
    }
    let result = match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(a),
        Command::Sr(a) => generate(&a, None, true),
        Command::Downscale(a) => generate(&a.common, a.component, false),
        Command::Verify(a) => verify(a),
        Command::Eval(a) => evaluate(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e))
        }
    }
}

/// Caps the worker pool at `SDFLOW_THREADS` when set.
fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SDFLOW_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| UsageError(format!("SDFLOW_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    Ok(())
}

fn synth_data(a: SynthArgs) -> Result<u8> {
    let t = Instant::now();
    let corpus = synth_corpus(a.n, a.size, a.scale, a.seed)?;
    corpus.save(&a.out)?;
    let mean = |f: fn(&sdflow_data::ThetaRecord) -> f64| corpus.theta.iter().map(f).sum::<f64>() / corpus.theta.len() as f64;
    println!(
        "wrote {} HR ({}x{}) and {} LR ({}x{}) images to {} in {:.1}s; mean blur sigma {:.3}, mean noise sigma {:.4}",
        corpus.hr.len(),
        a.size,
        a.size,
        corpus.lr.len(),
        a.size / a.scale,
        a.size / a.scale,
        a.out.display(),
        t.elapsed().as_secs_f64(),
        mean(|r| r.blur_sigma),
        mean(|r| r.noise_sigma),
    );
    Ok(exit::OK)
}

fn run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut pairs = match &a.config {
        Some(p) => read_pairs(p)?,
        None => Vec::new(),
    };
    for o in &a.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| UsageError(format!("--set expects KEY=VALUE, got `{o}`")))?;
        pairs.push((k.trim().into(), v.trim().into()));
    }
    let mut cfg = RunConfig::from_pairs(&pairs)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let t = &mut cfg.train;
    match a.phase {
        PhaseArg::All => {
            if a.iters.is_some() {
                bail!(UsageError("--iters needs a single --phase".into()));
            }
        }
        single => {
            let keep = |p: PhaseArg, n: usize| if p == single { a.iters.unwrap_or(n) } else { 0 };
            (t.iters_pretrain, t.iters_forward, t.iters_finetune) =
                (keep(PhaseArg::Pretrain, t.iters_pretrain), keep(PhaseArg::Forward, t.iters_forward), keep(PhaseArg::Finetune, t.iters_finetune));
        }
    }
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<u8> {
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let corpus = Corpus::load(&a.corpus)?;
    let corpus = if a.all_images { corpus } else { corpus.split()?.train };
    let ckpt = a.out.join("model.ckpt");
    if a.resume {
        let ck = Checkpoint::load(&ckpt)?;
        let meta = CheckpointMeta::read(&ck)?;
        return match meta.dtype()? {
            DType::F32 => resume_with::<f32>(&a, &ck, corpus),
            DType::F64 => resume_with::<f64>(&a, &ck, corpus),
        };
    }
    let cfg = run_config(&a)?;
    std::fs::write(a.out.join("config.txt"), cfg.render() + "\n").with_context(|| format!("writing config to {}", a.out.display()))?;
    match cfg.dtype {
        DType::F32 => fresh_with::<f32>(&a, &cfg, corpus),
        DType::F64 => fresh_with::<f64>(&a, &cfg, corpus),
    }
}

fn fresh_with<T: Real>(a: &TrainArgs, cfg: &RunConfig, corpus: Corpus) -> Result<u8> {
    let mut trainer = Trainer::<T>::new(&cfg.model, cfg.train.clone(), corpus)?;
    if let Some(init) = &a.init {
        Checkpoint::load(init)?.restore_params(&mut trainer.store).with_context(|| format!("initializing from {}", init.display()))?;
    }
    let mut log = LossLog::create(&a.out.join("loss.csv"))?;
    drive(a, &mut trainer, &mut log)
}

fn resume_with<T: Real>(a: &TrainArgs, ck: &Checkpoint, corpus: Corpus) -> Result<u8> {
    let mut trainer = Trainer::<T>::resume(ck, corpus)?;
    let mut log = LossLog::resume(&a.out.join("loss.csv"), trainer.iteration())?;
    eprintln!("resuming at iteration {} of {}", trainer.iteration(), trainer.config.total());
    drive(a, &mut trainer, &mut log)
}

fn drive<T: Real>(a: &TrainArgs, trainer: &mut Trainer<T>, log: &mut LossLog) -> Result<u8> {
    let opts = RunOptions { checkpoint: Some(a.out.join("model.ckpt")), checkpoint_every: a.checkpoint_every, until: a.until };
    let stop = a.until.map_or(trainer.config.total(), |u| u.min(trainer.config.total()));
    let start = Instant::now();
    let first = trainer.iteration();
    let total = trainer.config.total();
    let every = a.log_every.max(1);
    trainer.run(log, &opts, |r| {
        if (r.iter + 1) % every == 0 || r.iter + 1 == total {
            let done = r.iter + 1 - first;
            let rate = start.elapsed().as_secs_f64() / done as f64;
            eprintln!(
                "iter {:>6}/{total} phase {} nll_x {:.4} nll_y {:.4} content {:.4} total {:.4} grad {:.2} lr {:.2e} ({:.2}s/iter)",
                r.iter + 1,
                r.phase,
                r.nll_x,
                r.nll_y,
                r.content,
                r.total,
                r.grad_norm,
                r.lr_model,
                rate
            );
        }
    })?;
    println!("trained to iteration {stop}; checkpoint {}", a.out.join("model.ckpt").display());
    Ok(exit::OK)
}

fn png_inputs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!(UsageError(format!("no PNG images in {}", path.display())));
    }
    Ok(files)
}

fn open_model(path: &Path) -> Result<(Checkpoint, CheckpointMeta)> {
    let ck = Checkpoint::load(path)?;
    let meta = CheckpointMeta::read(&ck)?;
    Ok((ck, meta))
}

fn generate(a: &GenerateArgs, component: Option<usize>, sr: bool) -> Result<u8> {
    if a.n_samples == 0 {
        bail!(UsageError("--n-samples must be at least 1".into()));
    }
    if !(a.tau >= 0.0 && a.tau.is_finite()) {
        bail!(UsageError(format!("--tau must be finite and nonnegative, got {}", a.tau)));
    }
    let (ck, meta) = open_model(&a.checkpoint)?;
    match meta.dtype()? {
        DType::F32 => generate_with::<f32>(a, component, sr, &ck, &meta),
        DType::F64 => generate_with::<f64>(a, component, sr, &ck, &meta),
    }
}

fn generate_with<T: Real>(a: &GenerateArgs, component: Option<usize>, sr: bool, ck: &Checkpoint, meta: &CheckpointMeta) -> Result<u8> {
    let (model, store): (SdFlow, ParamStore<T>) = load_model(ck, &meta.model)?;
    if let Some(k) = component.filter(|&k| k >= model.ds.mog.components) {
        bail!(UsageError(format!("--component {k} out of range 0..{}", model.ds.mog.components)));
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let multiple = if sr { 2 } else { model.config.hr_multiple() };
    for input in png_inputs(&a.input)? {
        let img = read_png(&input)?;
        if img.width % multiple != 0 || img.height % multiple != 0 {
            bail!(UsageError(format!("{}: {}x{} is not a multiple of {multiple}", input.display(), img.width, img.height)));
        }
        let t = img.to_tensor::<T>();
        let samples = if sr {
            eval::sr_samples(&model, &store, &t, a.tau, a.n_samples, &mut rng)?
        } else {
            eval::ds_samples(&model, &store, &t, a.tau, a.n_samples, component, &mut rng)?
        };
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        for (k, s) in samples.iter().enumerate() {
            let path = a.out.join(format!("{stem}_s{k}.png"));
            write_png(&path, &RgbImage::from_tensor(s, 0)?)?;
        }
        let shape = samples[0].shape();
        let div = if samples.len() >= 2 { format!(", diversity {:.4}", diversity(&samples)?) } else { String::new() };
        println!("{}: {} sample(s) of {}x{} at tau {}{div}", input.display(), samples.len(), shape.w, shape.h, a.tau);
    }
    Ok(exit::OK)
}

fn verify(a: VerifyArgs) -> Result<u8> {
    let opts = VerifyOptions { seeds: a.seeds, logdet_fault: a.fault, ..VerifyOptions::default() };
    let start = Instant::now();
    let checks = run_all(&opts)?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed, {:.1}s", checks.len(), start.elapsed().as_secs_f64());
    if let Some(path) = &a.report {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record(["suite", "name", "metric", "tolerance", "passed", "detail"])?;
        for c in &checks {
            w.write_record([c.suite.to_string(), c.name.clone(), c.metric.to_string(), c.tolerance.to_string(), c.passed.to_string(), c.detail.clone()])?;
        }
        w.flush()?;
    }
    Ok(if failed == 0 { exit::OK } else { exit::FAILURE })
}

fn evaluate(a: EvalArgs) -> Result<u8> {
    if a.samples < 2 {
        bail!(UsageError("--samples must be at least 2 to measure diversity".into()));
    }
    let (ck, meta) = open_model(&a.checkpoint)?;
    let corpus = Corpus::load(&a.corpus)?;
    if corpus.scale != meta.model.scale {
        bail!(MismatchError(format!("corpus scale {} differs from model scale {}", corpus.scale, meta.model.scale)));
    }
    let corpus = match a.split {
        SplitArg::All => corpus,
        split => {
            let s = corpus.split()?;
            match split {
                SplitArg::Train => s.train,
                SplitArg::Val => s.val,
                _ => s.test,
            }
        }
    };
    match meta.dtype()? {
        DType::F32 => evaluate_with::<f32>(&a, &ck, &meta, &corpus),
        DType::F64 => evaluate_with::<f64>(&a, &ck, &meta, &corpus),
    }
}

fn evaluate_with<T: Real>(a: &EvalArgs, ck: &Checkpoint, meta: &CheckpointMeta, corpus: &Corpus) -> Result<u8> {
    let (model, store): (SdFlow, ParamStore<T>) = load_model(ck, &meta.model)?;
    let set = EvalSet::<T>::from_corpus(corpus)?;
    let multiple = model.config.hr_multiple();
    let hs = set.hr.shape();
    if hs.h % multiple != 0 || hs.w % multiple != 0 {
        bail!(UsageError(format!("HR images {}x{} are not a multiple of {multiple}", hs.w, hs.h)));
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let report = eval::evaluate(&model, &store, &set, &a.taus, a.samples, a.seed)?;

    let mut w = csv::Writer::from_path(a.out.join("metrics.csv"))?;
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(a.out.join("summary.csv"))?;
    for s in &report.sets {
        w.serialize(s)?;
    }
    w.flush()?;
    std::fs::write(a.out.join("summary.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!("{:<3} {:<8} {:>5} {:>9} {:>8} {:>9} {:>9}", "dir", "method", "tau", "psnr_y", "ssim_y", "diversity", "fd_proxy");
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    for s in &report.sets {
        println!(
            "{:<3} {:<8} {:>5} {:>9.4} {:>8.4} {:>9} {:>9}",
            s.direction,
            s.method,
            s.tau.map_or("-".into(), |t| t.to_string()),
            s.psnr_y,
            s.ssim_y,
            opt(s.diversity),
            opt(s.fd_proxy)
        );
    }
    if a.sweep {
        let rows = eval::tau_sweep(&model, &store, &set, &SWEEP_TAUS, a.samples, a.seed)?;
        let mut w = csv::Writer::from_path(a.out.join("sweep.csv"))?;
        println!("{:>5} {:>9} {:>12} {:>9} {:>12}", "tau", "sr_psnr", "sr_diversity", "ds_psnr", "ds_diversity");
        for r in &rows {
            w.serialize(r)?;
            println!("{:>5} {:>9.4} {:>12.4} {:>9.4} {:>12.4}", r.tau, r.sr_psnr_y, r.sr_diversity, r.ds_psnr_y, r.ds_diversity);
        }
        w.flush()?;
    }
    println!("wrote {}", a.out.display());
    Ok(exit::OK)
}
