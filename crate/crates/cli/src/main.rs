//! `panocon`: synthetic panorama generation, contrastive pretraining, PQ
//! evaluation, field-of-view sweeps, alpha ablations and numeric self-checks.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use panocon_core::contrastive::{
    combined_loss, spatial_contrastive_loss, LossConfig, SmoothingTransform,
};
use panocon_core::encoder::optim::OptimizerConfig;
use panocon_core::encoder::train::{pretrain, pretrain_labeled, trace_csv, TrainConfig};
use panocon_core::grid::{FeatureGrid, Provenance};
use panocon_core::io::{read_ppm, write_ppm};
use panocon_core::panoptic::{evaluate_dataset, ClassTable, PanopticMap};
use panocon_core::panorama::{
    fov_sweep, generate_synthetic, sweep_csv, FovSweepConfig, SyntheticSceneSpec,
};
use panocon_core::viewgeom::FloatImage;
use panocon_core::Error as CoreError;

#[derive(Parser)]
#[command(
    name = "panocon",
    version,
    about = "Dense contrastive pretraining and panoptic quality tooling for panoramic scenes",
    propagate_version = true
)]
struct Cli {
    /// Print progress notes to stderr (repeat for more detail)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic panorama dataset (paired .ppm RGB and .pgm labels)
    GenSynth(GenSynthArgs),
    /// Pretrain the encoder pair on a directory of .ppm images
    Pretrain(PretrainArgs),
    /// Evaluate Panoptic Quality of predictions against ground truth
    EvalPq(EvalPqArgs),
    /// Evaluate PQ across a grid of field-of-view crops
    FovSweep(FovSweepArgs),
    /// Rerun pretraining across a grid of alpha weights
    AlphaSweep(AlphaSweepArgs),
    /// Verify closed-form loss values and analytic gradients numerically
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    /// Number of panoramas to generate
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Base seed; image i uses seed + i
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Panorama height in pixels
    #[arg(long, default_value_t = 100)]
    height: usize,
    /// Panorama width in pixels (full 360 degrees)
    #[arg(long, default_value_t = 512)]
    width: usize,
    /// Texture noise amplitude (0-255)
    #[arg(long, default_value_t = 28)]
    noise: u8,
    /// Scene-spec JSON overriding the defaults (unknown keys rejected)
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum OptChoice {
    Sgd,
    Lars,
}

#[derive(Args)]
struct PretrainArgs {
    /// Directory of training images (.ppm)
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and the loss trace
    #[arg(long)]
    out: PathBuf,
    /// Optimizer preset: sgd (step decay from 1e-3) or lars (cosine restarts from 0.4)
    #[arg(long, value_enum, default_value = "sgd")]
    opt: OptChoice,
    #[arg(long, default_value_t = 90)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    batch_size: usize,
    /// Batch multiplier; 2 reproduces the large-batch variant
    #[arg(long, default_value_t = 1)]
    batch_scale: usize,
    /// Cap on optimizer steps (short runs)
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weight of the propagation loss
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Softmax temperature of the spatial loss
    #[arg(long, default_value_t = 0.3)]
    tau: f64,
    /// Positive-pair distance threshold as a fraction of the bin diagonal
    #[arg(long, default_value_t = 0.7)]
    threshold_ratio: f64,
    /// Momentum-encoder decay
    #[arg(long, default_value_t = 0.99)]
    beta: f64,
    /// Override the optimizer's base learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Training resolution (height)
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Training resolution (width)
    #[arg(long, default_value_t = 128)]
    width: usize,
    /// Supervised warm-start epochs on the dataset labels before the
    /// contrastive phase (requires paired .pgm label rasters)
    #[arg(long, default_value_t = 0)]
    warm_start_epochs: usize,
    /// Full train-config JSON applied before the flags (unknown keys rejected)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads (only 1 is used; kept for interface stability)
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct EvalPqArgs {
    /// Directory of predicted panoptic maps (.pgm)
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth panoptic maps (.pgm)
    #[arg(long)]
    gt: PathBuf,
    /// Class table JSON ({"1": {"name": "street", "kind": "stuff"}, ...})
    #[arg(long)]
    classes: PathBuf,
    /// Output directory for report.json and report.csv (prints only if absent)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for per-image matching
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct FovSweepArgs {
    /// Directory of predicted panoptic maps at panorama resolution (.pgm)
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth panoramas (.pgm)
    #[arg(long)]
    gt: PathBuf,
    /// Class table JSON
    #[arg(long)]
    classes: PathBuf,
    /// Comma-separated FoV grid in degrees
    #[arg(long, default_value = "140,170,205,237,271,304,338", value_delimiter = ',')]
    fovs: Vec<f64>,
    /// Crop center column; defaults to half the panorama width
    #[arg(long)]
    center: Option<usize>,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct AlphaSweepArgs {
    /// Directory of training images (.ppm)
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated alpha grid
    #[arg(long, default_value = "0.25,0.5,1,2,3,4", value_delimiter = ',')]
    alphas: Vec<f64>,
    /// Steps per alpha run
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "lars")]
    opt: OptChoice,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
    /// Train-config JSON applied before the flags (unknown keys rejected)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Random seeds for the gradient probes
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

enum CliError {
    Data(String),
    Numeric(String),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(format!("config: {e}"))
    }
}

type CliResult = Result<(), CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let verbose = cli.verbose;
    let result = match cli.command {
        Command::GenSynth(args) => cmd_gen_synth(args, verbose),
        Command::Pretrain(args) => cmd_pretrain(args, verbose),
        Command::EvalPq(args) => cmd_eval_pq(args),
        Command::FovSweep(args) => cmd_fov_sweep(args),
        Command::AlphaSweep(args) => cmd_alpha_sweep(args, verbose),
        Command::Selfcheck(args) => cmd_selfcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(CliError::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            ExitCode::from(4)
        }
    }
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, content: &str) -> CliResult {
    std::fs::write(path, content)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn cmd_gen_synth(args: GenSynthArgs, verbose: u8) -> CliResult {
    let mut scene: SyntheticSceneSpec = match &args.config {
        Some(path) => read_config(path)?,
        None => SyntheticSceneSpec::default(),
    };
    if args.config.is_none() {
        scene.height = args.height;
        scene.width = args.width;
        scene.texture_noise = args.noise;
    }
    std::fs::create_dir_all(&args.out)?;
    let mut files = Vec::new();
    for i in 0..args.n {
        let mut spec = scene.clone();
        spec.seed = args.seed.wrapping_add(i as u64);
        let panorama = generate_synthetic(&spec)?;
        let rgb_name = format!("{i:03}.ppm");
        let label_name = format!("{i:03}.pgm");
        write_ppm(&args.out.join(&rgb_name), &panorama.rgb)?;
        panorama.labels.write_pgm(&args.out.join(&label_name))?;
        if verbose > 0 {
            eprintln!("generated {rgb_name} (seed {})", spec.seed);
        }
        files.push(serde_json::json!({ "rgb": rgb_name, "labels": label_name, "seed": spec.seed }));
    }
    let meta = serde_json::json!({
        "generator": serde_json::to_value(&scene).map_err(CliError::from)?,
        "count": args.n,
        "base_seed": args.seed,
        "classes": ClassTable::street_scene(),
        "files": files,
    });
    write_file(
        &args.out.join("meta.json"),
        &serde_json::to_string_pretty(&meta).map_err(CliError::from)?,
    )?;
    write_file(
        &args.out.join("classes.json"),
        &ClassTable::street_scene().to_json(),
    )?;
    println!("wrote {} panoramas to {}", args.n, args.out.display());
    Ok(())
}

fn load_images(dir: &Path) -> Result<Vec<FloatImage>, CliError> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|entry| {
            let name = entry.ok()?.file_name().to_string_lossy().into_owned();
            name.ends_with(".ppm").then_some(name)
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no .ppm images found",
            dir.display()
        )));
    }
    names
        .iter()
        .map(|n| Ok(FloatImage::from_rgb8(&read_ppm(&dir.join(n))?)))
        .collect()
}

fn build_train_config(args: &PretrainArgs) -> Result<TrainConfig, CliError> {
    let mut cfg: TrainConfig = match &args.config {
        Some(path) => read_config(path)?,
        None => TrainConfig::default(),
    };
    if args.config.is_none() {
        cfg.epochs = args.epochs;
        cfg.batch_size = args.batch_size;
        cfg.input_height = args.height;
        cfg.input_width = args.width;
        cfg.alpha = args.alpha;
        cfg.tau = args.tau;
        cfg.threshold_ratio = args.threshold_ratio;
        cfg.beta = args.beta;
        cfg.optimizer = match args.opt {
            OptChoice::Sgd => OptimizerConfig::sgd(),
            OptChoice::Lars => OptimizerConfig::lars(),
        };
    }
    cfg.batch_scale = args.batch_scale;
    cfg.seed = args.seed;
    if args.steps.is_some() {
        cfg.max_steps = args.steps;
    }
    if args.warm_start_epochs > 0 {
        cfg.warm_start_epochs = args.warm_start_epochs;
    }
    if let Some(lr) = args.lr {
        cfg.optimizer.base_lr = lr;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_labels(dir: &Path) -> Result<Vec<PanopticMap>, CliError> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|entry| {
            let name = entry.ok()?.file_name().to_string_lossy().into_owned();
            name.ends_with(".pgm").then_some(name)
        })
        .collect();
    names.sort();
    names
        .iter()
        .map(|n| Ok(PanopticMap::read_pgm(&dir.join(n))?))
        .collect()
}

fn cmd_pretrain(args: PretrainArgs, verbose: u8) -> CliResult {
    let images = load_images(&args.data)?;
    let cfg = build_train_config(&args)?;
    std::fs::create_dir_all(&args.out)?;
    let labels = if cfg.warm_start_epochs > 0 {
        let labels = load_labels(&args.data)?;
        if labels.len() != images.len() {
            return Err(CliError::Data(format!(
                "warm start needs one .pgm per image: {} labels for {} images",
                labels.len(),
                images.len()
            )));
        }
        Some(labels)
    } else {
        None
    };
    let outcome = pretrain_labeled(&cfg, &images, labels.as_deref())?;
    if verbose > 0 {
        for r in &outcome.trace {
            eprintln!(
                "step {} epoch {} lr {} l_total {}",
                r.step, r.epoch, r.lr, r.l_total
            );
        }
    }
    outcome.state.save(&args.out.join("checkpoint.ckpt"))?;
    write_file(&args.out.join("trace.csv"), &trace_csv(&outcome.trace))?;
    if outcome.resampled_pairs > 0 {
        eprintln!(
            "note: {} view pairs re-sampled for lack of positives",
            outcome.resampled_pairs
        );
    }
    let last = outcome.trace.last();
    println!(
        "pretrained {} steps; final l_total {}",
        outcome.trace.len(),
        last.map(|r| r.l_total.to_string()).unwrap_or_default()
    );
    Ok(())
}

fn cmd_eval_pq(args: EvalPqArgs) -> CliResult {
    let table = ClassTable::from_json(
        &std::fs::read_to_string(&args.classes)
            .map_err(|e| CliError::Data(format!("{}: {e}", args.classes.display())))?,
    )?;
    let report = evaluate_dataset(&args.pred, &args.gt, &table, args.threads)?;
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        write_file(&out.join("report.json"), &report.to_json())?;
        write_file(&out.join("report.csv"), &report.to_csv())?;
    }
    let fmt = |v: Option<f64>| v.map(|x| format!("{:.4}", x)).unwrap_or_else(|| "-".into());
    println!(
        "pq_all {}  pq_stuff {}  pq_things {}",
        fmt(report.pq_all),
        fmt(report.pq_stuff),
        fmt(report.pq_things)
    );
    for class in &report.classes {
        println!(
            "  class {} ({}): pq {:.4} sq {:.4} rq {:.4}",
            class.class_id, class.name, class.pq, class.sq, class.rq
        );
    }
    Ok(())
}

fn load_map_pairs(
    pred_dir: &Path,
    gt_dir: &Path,
) -> Result<Vec<(PanopticMap, PanopticMap)>, CliError> {
    let pairs = panocon_core::panoptic::paired_map_files(pred_dir, gt_dir)?;
    pairs
        .iter()
        .map(|(p, g)| Ok((PanopticMap::read_pgm(p)?, PanopticMap::read_pgm(g)?)))
        .collect()
}

fn cmd_fov_sweep(args: FovSweepArgs) -> CliResult {
    let table = ClassTable::from_json(
        &std::fs::read_to_string(&args.classes)
            .map_err(|e| CliError::Data(format!("{}: {e}", args.classes.display())))?,
    )?;
    let pairs = load_map_pairs(&args.pred, &args.gt)?;
    if pairs.is_empty() {
        return Err(CliError::Data("no map pairs found".into()));
    }
    let center = args.center.unwrap_or(pairs[0].1.width / 2);
    let cfg = FovSweepConfig {
        fovs: args.fovs.clone(),
        center_col: center,
    };
    let rows = fov_sweep(&pairs, &table, &cfg)?;
    write_file(&args.out, &sweep_csv(&rows))?;
    println!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}

fn cmd_alpha_sweep(args: AlphaSweepArgs, verbose: u8) -> CliResult {
    let images = load_images(&args.data)?;
    let base: TrainConfig = match &args.config {
        Some(path) => read_config(path)?,
        None => TrainConfig {
            batch_size: 2,
            input_height: 32,
            input_width: 64,
            optimizer: match args.opt {
                OptChoice::Sgd => OptimizerConfig::sgd(),
                OptChoice::Lars => OptimizerConfig::lars(),
            },
            ..Default::default()
        },
    };
    let mut alphas = args.alphas.clone();
    alphas.sort_by(|a, b| a.partial_cmp(b).expect("finite alphas"));
    let mut csv = String::from("alpha,l_spatial,l_glopro,l_total\n");
    for &alpha in &alphas {
        if !(alpha >= 0.0) {
            return Err(CliError::Data(format!("alpha {alpha} must be >= 0")));
        }
        let mut cfg = base.clone();
        cfg.alpha = alpha;
        cfg.seed = args.seed;
        // steps_per_epoch >= 1, so this many epochs always reaches the cap
        cfg.epochs = args.steps.max(1);
        cfg.max_steps = Some(args.steps);
        cfg.validate()?;
        let outcome = pretrain(&cfg, &images)?;
        if verbose > 0 {
            eprintln!("alpha {alpha}: {} steps done", outcome.trace.len());
        }
        // report the mean over the final tenth of the steps
        let window = (args.steps / 10).max(1);
        let tail = &outcome.trace[outcome.trace.len().saturating_sub(window)..];
        let mean = |f: &dyn Fn(&panocon_core::encoder::train::StepRecord) -> f64| {
            tail.iter().map(f).sum::<f64>() / tail.len() as f64
        };
        use std::fmt::Write as _;
        writeln!(
            csv,
            "{},{},{},{}",
            alpha,
            mean(&|r| r.l_spatial),
            mean(&|r| r.l_glopro),
            mean(&|r| r.l_total)
        )
        .expect("string write");
    }
    write_file(&args.out, &csv)?;
    println!("wrote {} rows to {}", alphas.len(), args.out.display());
    Ok(())
}

/// Deterministic values in [-1, 1) for the self-check probes.
fn lcg_stream(seed: u64) -> impl FnMut() -> f64 {
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
    move || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }
}

fn cmd_selfcheck(args: SelfcheckArgs) -> CliResult {
    // closed-form scalars
    let cfg = LossConfig { tau: 0.3, alpha: 1.0 };
    let corr = panocon_core::viewgeom::CorrespondenceSet {
        grid_shape_a: (1, 2),
        grid_shape_b: (1, 2),
        positives: vec![vec![0], vec![1]],
        negatives: vec![vec![1], vec![0]],
        threshold_ratio: 0.7,
        threshold_px: 1.0,
    };
    let a = FeatureGrid::new(
        1,
        2,
        4,
        vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        Provenance::Regular,
    )?;
    let b = FeatureGrid::new(
        1,
        2,
        4,
        vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        Provenance::Momentum,
    )?;
    let (v, _, _) = spatial_contrastive_loss(&a, &b, &corr, &cfg)?;
    if (v - std::f64::consts::LN_2).abs() > 1e-9 {
        return Err(CliError::Numeric(format!("ln 2 check failed: {v}")));
    }

    // analytic vs finite-difference gradients on random instances
    let mut worst: f64 = 0.0;
    for seed in 0..args.seeds {
        let mut draw = lcg_stream(seed);
        let ch = 4;
        let mut mk = |prov| {
            let values: Vec<f64> = (0..2 * 2 * ch).map(|_| draw()).collect();
            FeatureGrid::new(2, 2, ch, values, prov).unwrap()
        };
        let fa = mk(Provenance::Regular);
        let fb = mk(Provenance::Momentum);
        let corr = panocon_core::viewgeom::CorrespondenceSet {
            grid_shape_a: (2, 2),
            grid_shape_b: (2, 2),
            positives: (0..4).map(|i| vec![i as u32]).collect(),
            negatives: (0..4u32)
                .map(|i| (0..4).filter(|&j| j != i).collect())
                .collect(),
            threshold_ratio: 0.7,
            threshold_px: 1.0,
        };
        let g = SmoothingTransform::identity(ch);
        let report = combined_loss(&fa, &fb, &corr, &g, &cfg)?;
        let eps = 1e-5;
        for i in 0..fa.values.len() {
            let mut plus = fa.clone();
            plus.values[i] += eps;
            let mut minus = fa.clone();
            minus.values[i] -= eps;
            let fd = (combined_loss(&plus, &fb, &corr, &g, &cfg)?.l_total
                - combined_loss(&minus, &fb, &corr, &g, &cfg)?.l_total)
                / (2.0 * eps);
            let analytic = report.grad_a.values[i];
            let denom = analytic.abs().max(fd.abs());
            if denom > 1e-6 {
                worst = worst.max((analytic - fd).abs() / denom);
            }
        }
    }
    if worst > 1e-4 {
        return Err(CliError::Numeric(format!(
            "gradient self-check failed: rel err {worst}"
        )));
    }
    println!(
        "selfcheck ok: closed-form values exact, gradient rel err {worst:.2e} over {} seeds",
        args.seeds
    );
    Ok(())
}
