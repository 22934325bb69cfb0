//! Command-line driver. [`run_command`] takes the full argument vector and
//! returns the process exit code: 0 success, 1 usage error, 2 data error,
//! 3 numeric failure.

mod settings;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sonarmatch::detect::{cross_map_fuse, detect_combined, Keypoint};
use sonarmatch::experiment::{generate_pairs, run_experiment, ExperimentConfig};
use sonarmatch::imagecore::{load_pgm, save_pgm, AffineTransform, GrayImage};
use sonarmatch::matching::{match_images, matches_csv, render_overlay};
use sonarmatch::net::{grad_check, load_model, save_model, ArchConfig, LossConfig, SiameseModel};
use sonarmatch::patches::{build_dataset, load_dataset, save_dataset, DatasetOptions, Patch, SamplePair};
use sonarmatch::train::{evaluate_model, pretrain, train_model, PretrainOptions};

pub use settings::{parse_config, Settings};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(sonarmatch::Error),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(e) => write!(f, "error: {e}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<sonarmatch::Error> for CliError {
    fn from(e: sonarmatch::Error) -> Self {
        match e {
            sonarmatch::Error::InvalidParameter(m) => CliError::Usage(m),
            sonarmatch::Error::Numeric(m) => CliError::Numeric(m),
            other => CliError::Data(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.into())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "sonarmatch", version, about = "Sonar image matching under nonlinear intensity differences")]
struct Cli {
    /// Global RNG seed (default 42).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` config file; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic survey pair: a.pgm, b.pgm, truth.json.
    Synth(SynthArgs),
    /// Detect DoG and FAST keypoints in one image.
    Detect(DetectArgs),
    /// Cut a labelled patch-pair dataset (SMP1) from an aligned pair.
    BuildDataset(BuildArgs),
    /// Train a model on an SMP1 dataset.
    Train(TrainArgs),
    /// Self-supervised pretraining on whole images.
    Pretrain(PretrainArgs),
    /// Match two images with a trained model.
    Match(MatchArgs),
    /// Evaluate a model on an SMP1 dataset; prints JSON.
    Eval(EvalArgs),
    /// Finite-difference check of the analytic gradients on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Full synthetic pipeline: synth, detect, dataset, train, match, eval.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    gamma_a: Option<f64>,
    #[arg(long)]
    gamma_b: Option<f64>,
    #[arg(long)]
    speckle: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    /// Maximum rotation in degrees.
    #[arg(long)]
    rotation: Option<f64>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    image: PathBuf,
    /// Keypoint list, one `x y scale response source` line per point.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    overlay: Option<PathBuf>,
    #[arg(long)]
    max_per_detector: Option<usize>,
}

#[derive(Args, Debug)]
struct BuildArgs {
    #[arg(long)]
    image_a: PathBuf,
    #[arg(long)]
    image_b: PathBuf,
    /// `identity`, six comma-separated coefficients `a,b,tx,c,d,ty`, or a
    /// JSON file with a `coeffs` array.
    #[arg(long)]
    align: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    patch_size: Option<usize>,
    /// 0 keeps every correspondence.
    #[arg(long)]
    max_correspondences: Option<usize>,
    #[arg(long)]
    hard_negatives: bool,
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "model.smdl")]
    model_out: PathBuf,
    #[arg(long, default_value = "history.csv")]
    history: PathBuf,
    /// Warm-start weights.
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Whole survey images (PGM).
    #[arg(long, num_args = 1.., required = true)]
    images: Vec<PathBuf>,
    #[arg(long, default_value = "model.smdl")]
    model_out: PathBuf,
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    pairs_per_image: Option<usize>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct MatchArgs {
    #[arg(long)]
    image_a: PathBuf,
    #[arg(long)]
    image_b: PathBuf,
    #[arg(long)]
    align: String,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    overlay: Option<PathBuf>,
    #[arg(long)]
    matches: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    train_pairs: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[command(flatten)]
    train: TrainFlags,
}

/// Runs the command line `argv` (including the program name) and returns
/// the exit code. Diagnostics go to stderr, reports to stdout.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn set<T: Clone>(field: &mut T, flag: &Option<T>) {
    if let Some(v) = flag {
        *field = v.clone();
    }
}

fn apply_train_flags(s: &mut Settings, f: &TrainFlags) {
    set(&mut s.epochs, &f.epochs);
    set(&mut s.batch_size, &f.batch_size);
    set(&mut s.lr, &f.lr);
    set(&mut s.lambda_contrastive, &f.lambda);
    set(&mut s.margin, &f.margin);
    set(&mut s.val_fraction, &f.val_fraction);
    if f.no_augment {
        s.augment = false;
    }
}

fn dispatch(cli: Cli) -> CliResult {
    let mut s = match &cli.config {
        Some(p) => Settings::from_file(p)?,
        None => Settings::default(),
    };
    set(&mut s.seed, &cli.seed);
    match cli.command {
        Command::Synth(a) => synth(s, a),
        Command::Detect(a) => detect(s, a),
        Command::BuildDataset(a) => build(s, a),
        Command::Train(a) => train(s, a),
        Command::Pretrain(a) => pretrain_cmd(s, a),
        Command::Match(a) => match_cmd(s, a),
        Command::Eval(a) => eval(s, a),
        Command::Gradcheck(a) => gradcheck(s, a),
        Command::Experiment(a) => experiment(s, a),
    }
}

fn print_json(v: &serde_json::Value) -> CliResult {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(v).map_err(sonarmatch::Error::from)?)?;
    Ok(())
}

/// Parses `identity`, `a,b,tx,c,d,ty`, or a JSON file holding `coeffs`.
pub fn parse_align(arg: &str) -> CliResult<AffineTransform> {
    if arg == "identity" {
        return Ok(AffineTransform::IDENTITY);
    }
    let path = Path::new(arg);
    if arg.ends_with(".json") || path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|_| sonarmatch::Error::FileNotFound(path.to_path_buf()))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(sonarmatch::Error::from)?;
        let coeffs: Vec<f64> = v
            .get("coeffs")
            .and_then(|c| c.as_array())
            .map(|a| a.iter().filter_map(|x| x.as_f64()).collect())
            .unwrap_or_default();
        let c: [f64; 6] = coeffs
            .try_into()
            .map_err(|_| CliError::Data(sonarmatch::Error::InvalidImage(format!("{arg}: no six `coeffs`"))))?;
        return Ok(AffineTransform::from_coeffs(c));
    }
    let parts: Vec<f64> = arg
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--align `{arg}`: expected `identity` or six numbers")))?;
    let c: [f64; 6] =
        parts.try_into().map_err(|_| CliError::Usage(format!("--align `{arg}`: expected six coefficients")))?;
    Ok(AffineTransform::from_coeffs(c))
}

fn synth(mut s: Settings, a: SynthArgs) -> CliResult {
    set(&mut s.size, &a.size);
    set(&mut s.gamma_a, &a.gamma_a);
    set(&mut s.gamma_b, &a.gamma_b);
    set(&mut s.speckle, &a.speckle);
    set(&mut s.noise, &a.noise);
    set(&mut s.rotation, &a.rotation);
    let cfg = ExperimentConfig { pairs: 1, ..s.experiment()? };
    let pair = generate_pairs(&cfg)?.remove(0);
    // Recreate the survey settings for the echo; same draws as generate_pairs.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let _: u64 = rng.random();
    let survey = cfg.survey(0, &mut rng);
    std::fs::create_dir_all(&a.out)?;
    save_pgm(&pair.a, a.out.join("a.pgm"))?;
    save_pgm(&pair.b, a.out.join("b.pgm"))?;
    let truth = json!({ "coeffs": pair.truth.coeffs(), "config": survey, "seed": cfg.seed });
    std::fs::write(a.out.join("truth.json"), serde_json::to_string_pretty(&truth).map_err(sonarmatch::Error::from)?)?;
    eprintln!("wrote a.pgm, b.pgm, truth.json to {}", a.out.display());
    Ok(())
}

fn mark(img: &mut GrayImage, kp: &Keypoint) {
    let (cx, cy) = (kp.x.round() as i64, kp.y.round() as i64);
    for d in -2i64..=2 {
        for (x, y) in [(cx + d, cy), (cx, cy + d)] {
            if x >= 0 && y >= 0 && (x as usize) < img.width() && (y as usize) < img.height() {
                img.set(x as usize, y as usize, 1.0);
            }
        }
    }
}

fn detect(mut s: Settings, a: DetectArgs) -> CliResult {
    set(&mut s.max_per_detector, &a.max_per_detector);
    let img = load_pgm(&a.image)?;
    let kps = detect_combined(&img, &s.detector())?;
    let mut text = String::new();
    for k in &kps {
        text.push_str(&format!("{:.3} {:.3} {:.4} {:.6} {}\n", k.x, k.y, k.scale, k.response, k.source.as_str()));
    }
    std::fs::write(&a.out, text)?;
    if let Some(path) = &a.overlay {
        let mut over = img.clone();
        kps.iter().for_each(|k| mark(&mut over, k));
        save_pgm(&over, path)?;
    }
    let dog = kps.iter().filter(|k| k.source.as_str() == "DoG").count();
    print_json(&json!({ "keypoints": kps.len(), "dog": dog, "fast": kps.len() - dog }))
}

fn build(mut s: Settings, a: BuildArgs) -> CliResult {
    set(&mut s.patch_size, &a.patch_size);
    set(&mut s.max_correspondences, &a.max_correspondences);
    s.hard_negatives |= a.hard_negatives;
    let half = s.half()?;
    let t = parse_align(&a.align)?;
    let (ia, ib) = (load_pgm(&a.image_a)?, load_pgm(&a.image_b)?);
    let det = s.detector();
    let fused = cross_map_fuse(
        &detect_combined(&ia, &det)?,
        &detect_combined(&ib, &det)?,
        &t,
        s.dedup_radius,
        (ia.width(), ia.height()),
        (ib.width(), ib.height()),
    )?;
    let opts = DatasetOptions {
        hard_negatives: s.hard_negatives,
        max_correspondences: (s.max_correspondences > 0).then_some(s.max_correspondences),
        ..DatasetOptions::new(half, half, s.seed)
    };
    let ds = build_dataset(&ia, &ib, &fused.a, &fused.b, &opts)?;
    save_dataset(&ds, &a.out)?;
    let pos = ds.iter().filter(|x| x.is_positive()).count();
    print_json(&json!({ "fused": fused.len(), "samples": ds.len(), "positives": pos, "patch_size": 2 * half }))
}

fn initial_model(init: &Option<PathBuf>, seed: u64) -> CliResult<SiameseModel> {
    Ok(match init {
        Some(p) => load_model(p)?,
        None => SiameseModel::new(ArchConfig::default(), seed)?,
    })
}

fn train(mut s: Settings, a: TrainArgs) -> CliResult {
    apply_train_flags(&mut s, &a.train);
    let ds = load_dataset(&a.dataset)?;
    let out = train_model(initial_model(&a.init, s.seed)?, &ds, &s.train())?;
    save_model(out.selected(), &a.model_out)?;
    std::fs::write(&a.history, out.history_csv())?;
    let last = out.history.last();
    print_json(&json!({
        "train_samples": out.train_size,
        "val_samples": out.val_size,
        "epochs": out.history.len(),
        "best_epoch": out.best.as_ref().map(|b| b.0),
        "final_loss": last.map(|r| r.loss),
        "final_val_acc": last.and_then(|r| r.val_acc),
    }))
}

fn pretrain_cmd(mut s: Settings, a: PretrainArgs) -> CliResult {
    apply_train_flags(&mut s, &a.train);
    set(&mut s.patch_size, &a.patch_size);
    set(&mut s.pretrain_pairs, &a.pairs_per_image);
    let images: Vec<GrayImage> = a.images.iter().map(load_pgm).collect::<Result<_, _>>()?;
    let opts = PretrainOptions { patch_size: 2 * s.half()?, pairs_per_image: s.pretrain_pairs, ..Default::default() };
    let out = pretrain(initial_model(&a.init, s.seed)?, &images, &s.train(), &opts)?;
    save_model(&out.model, &a.model_out)?;
    print_json(&json!({
        "corpus": out.train_size + out.val_size,
        "epochs": out.history.len(),
        "final_loss": out.history.last().map(|r| r.loss),
    }))
}

fn match_cmd(mut s: Settings, a: MatchArgs) -> CliResult {
    set(&mut s.threshold, &a.threshold);
    set(&mut s.patch_size, &a.patch_size);
    let t = parse_align(&a.align)?;
    let (ia, ib) = (load_pgm(&a.image_a)?, load_pgm(&a.image_b)?);
    let model = load_model(&a.model)?;
    let out = match_images(&ia, &ib, &t, &model, &s.matching()?)?;
    if let Some(p) = &a.matches {
        std::fs::write(p, matches_csv(&out.matches))?;
    }
    if let Some(p) = &a.overlay {
        save_pgm(&render_overlay(&ia, &ib, &out.matches), p)?;
    }
    print_json(&json!({
        "scored": out.matches.len(),
        "accepted": out.accepted(),
        "inliers": out.inliers(),
        "estimate": out.estimate.map(|e| e.coeffs()),
    }))
}

fn eval(mut s: Settings, a: EvalArgs) -> CliResult {
    set(&mut s.threshold, &a.threshold);
    let model = load_model(&a.model)?;
    let ds = load_dataset(&a.dataset)?;
    let report = evaluate_model(&model, &ds, s.threshold)?;
    print_json(&serde_json::to_value(report).map_err(sonarmatch::Error::from)?)
}

/// Four mixed-label 8x8 pairs: even entries are a patch and a slightly
/// perturbed copy, odd entries two unrelated patches.
pub fn gradcheck_batch(seed: u64) -> Vec<SamplePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patch = |rng: &mut ChaCha8Rng| {
        Patch::new(8, 8, (0..64).map(|_| rng.random::<f32>()).collect(), 0).expect("valid patch")
    };
    (0..4)
        .map(|i| {
            let a = patch(&mut rng);
            let b = if i % 2 == 0 {
                let mut p = a.clone();
                p.data.iter_mut().for_each(|v| *v = (*v + rng.random_range(-0.1f32..0.1)).clamp(0.0, 1.0));
                p
            } else {
                patch(&mut rng)
            };
            SamplePair { patch_a: a, patch_b: b, label: (i % 2 == 0) as u8 }
        })
        .collect()
}

/// Tiny model with small positive biases. Zero biases let ReLU
/// pre-activations sit exactly on the kink, where central differences and
/// the analytic gradient legitimately disagree.
pub fn gradcheck_model(seed: u64) -> sonarmatch::Result<SiameseModel> {
    let mut model = SiameseModel::new(ArchConfig::tiny(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for bias in model.params_mut().into_iter().skip(1).step_by(2) {
        bias.iter_mut().for_each(|b| *b = rng.random_range(0.05..0.15));
    }
    Ok(model)
}

fn gradcheck(s: Settings, a: GradcheckArgs) -> CliResult {
    let model = gradcheck_model(s.seed)?;
    let loss = LossConfig { lambda_contrastive: s.lambda_contrastive, margin: s.margin };
    let report = grad_check(&model, &gradcheck_batch(s.seed), &loss, a.step, a.tol)?;
    for l in &report.layers {
        eprintln!("{:<12} {:>5} params  max rel err {:.3e}  {}", l.layer, l.params, l.max_rel_error, if l.passed { "ok" } else { "FAIL" });
    }
    print_json(&serde_json::to_value(&report).map_err(sonarmatch::Error::from)?)?;
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed (max rel err {:.3e})", report.max_rel_error())))
    }
}

fn experiment(mut s: Settings, a: ExperimentArgs) -> CliResult {
    apply_train_flags(&mut s, &a.train);
    set(&mut s.pairs, &a.pairs);
    set(&mut s.train_pairs, &a.train_pairs);
    set(&mut s.size, &a.size);
    set(&mut s.patch_size, &a.patch_size);
    let summary = run_experiment(&s.experiment()?, &a.out)?;
    print_json(&serde_json::to_value(&summary).map_err(sonarmatch::Error::from)?)
}
