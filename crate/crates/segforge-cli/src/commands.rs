//! The five subcommands. Each returns the process exit code so `main` stays a
//! thin dispatcher; errors bubble as [`CliError`] and are mapped to exit codes
//! there.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use segforge_core::checkpoint::{load_checkpoint_bytes, peek_dtype};
use segforge_core::data::augment::resize_bilinear;
use segforge_core::data::pngio::{decode_image_bytes, encode_gray_png, load_dir, write_dataset};
use segforge_core::data::synth::synth_dataset;
use segforge_core::data::{split, Sample, SplitSpec};
use segforge_core::element::{Dtype, Element};
use segforge_core::error::{ConfigError, DataError};
use segforge_core::gradcheck::{
    block_checks, model_checks, op_checks, run_block_check, run_model_check, run_op_check,
    CheckPlan, GradCheckReport,
};
use segforge_core::model::Model;
use segforge_core::tape::Mode;
use segforge_core::tensor::{Shape, Tensor};
use segforge_core::train::{evaluate, sig6, train, TrainPlan};

use crate::config::{
    invalid, load_config, parse_arch, parse_dtype, parse_loss, threads_from_env, RunConfig,
};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "segforge",
    about = "ResUNet++ semantic segmentation: train, evaluate, predict",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Train a model on a PNG dataset or synthetic ellipses
    Train(TrainArgs),
    /// Score a checkpoint against a dataset directory
    Eval(EvalArgs),
    /// Segment a single image with a trained checkpoint
    Predict(PredictArgs),
    /// Verify analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Write a synthetic ellipse dataset as PNG pairs
    Synth(SynthArgs),
}

pub fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.cmd {
        Cmd::Train(a) => cmd_train(a).map(|()| 0),
        Cmd::Eval(a) => cmd_eval(a).map(|()| 0),
        Cmd::Predict(a) => cmd_predict(a).map(|()| 0),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Synth(a) => cmd_synth(a).map(|()| 0),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn check_threshold(threshold: f64) -> Result<(), ConfigError> {
    if !(0.0..=1.0).contains(&threshold) || !threshold.is_finite() {
        return Err(invalid(
            "threshold",
            format!("{threshold} is outside [0, 1]"),
        ));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run config; explicit flags override file values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory containing images/ and masks/
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Train on N synthetic samples instead of a dataset directory
    #[arg(long)]
    pub synth: Option<usize>,
    /// Edge length of synthetic samples (defaults to the model input size)
    #[arg(long)]
    pub size: Option<usize>,
    /// Output directory for checkpoints, metrics.csv, config.resolved.json
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// resunetpp | unet
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    /// dice | bce | bce_dice | mse
    #[arg(long)]
    pub loss: Option<String>,
    /// Sets the model input size and the augmentation target size together
    #[arg(long)]
    pub input_size: Option<usize>,
    /// f32 | f64
    #[arg(long)]
    pub dtype: Option<String>,
    /// 1 is the bitwise-reproducible reference mode
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Precedence: defaults, then the config file, then SEGFORGE_THREADS, then
/// explicit flags. A data-source flag also clears the competing source from
/// the file so `--synth` over a file with `data_dir` is not ambiguous.
pub fn resolve(args: &TrainArgs) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(t) = threads_from_env()? {
        cfg.threads = t;
    }
    if args.data.is_some() && args.synth.is_some() {
        return Err(invalid("data", "--data and --synth are mutually exclusive"));
    }
    if let Some(dir) = &args.data {
        cfg.data_dir = Some(dir.clone());
        cfg.synth = None;
    }
    if let Some(n) = args.synth {
        cfg.synth = Some(n);
        cfg.data_dir = None;
    }
    if let Some(s) = args.size {
        cfg.synth_size = Some(s);
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(arch) = &args.arch {
        cfg.model.arch = parse_arch(arch)?;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(batch) = args.batch_size {
        cfg.train.batch_size = batch;
    }
    if let Some(lr) = args.lr_max {
        cfg.train.lr_max = lr;
    }
    if let Some(loss) = &args.loss {
        cfg.train.loss = parse_loss(loss)?;
    }
    if let Some(size) = args.input_size {
        cfg.model.input_size = size;
        cfg.augment.target_size = size;
    }
    if let Some(dtype) = &args.dtype {
        cfg.dtype = parse_dtype(dtype)?;
    }
    if let Some(threads) = args.threads {
        cfg.threads = threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_samples<T: Element>(cfg: &RunConfig) -> Result<Vec<Sample<T>>, CliError> {
    match (&cfg.data_dir, cfg.synth) {
        (Some(dir), None) => Ok(load_dir(dir)?),
        (None, Some(n)) => {
            let size = cfg.synth_size.unwrap_or(cfg.model.input_size);
            Ok(synth_dataset(n, size, cfg.seed)?)
        }
        (Some(_), Some(_)) => {
            Err(invalid("data", "configure either data_dir or synth, not both").into())
        }
        (None, None) => Err(invalid("data", "no data source: set data_dir or synth").into()),
    }
}

pub fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = resolve(&args)?;
    match cfg.dtype {
        Dtype::F32 => train_run::<f32>(&cfg),
        Dtype::F64 => train_run::<f64>(&cfg),
    }
}

fn train_run<T: Element>(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_samples::<T>(cfg)?;
    let (train_set, val_set, test_set) = split(
        data,
        &SplitSpec {
            seed: cfg.seed,
            ..SplitSpec::default()
        },
    )?;
    log::info!(
        "split {}/{}/{} train/val/test",
        train_set.len(),
        val_set.len(),
        test_set.len()
    );
    let mut model = Model::<T>::build(cfg.model.clone(), cfg.seed)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|source| DataError::Io {
        path: cfg.out_dir.display().to_string(),
        source,
    })?;
    // Written before training so an aborted run still records what it ran.
    write_file(
        &cfg.out_dir.join("config.resolved.json"),
        cfg.to_json().as_bytes(),
    )?;
    let history = train(TrainPlan {
        model: &mut model,
        train_set: &train_set,
        val_set: &val_set,
        cfg: &cfg.train,
        aug: &cfg.augment,
        seed: cfg.seed,
        out_dir: Some(&cfg.out_dir),
        wall_clock: cfg.threads != 1,
    })?;
    let best = history.best().expect("training ran at least one epoch");
    println!("best epoch {} val_dice {}", best.epoch, sig6(best.val.dice));
    // Report test metrics from the persisted best checkpoint, not the
    // in-memory model, so the printed numbers match what a fresh process
    // loading best.ckpt would compute.
    let bytes = read_file(&cfg.out_dir.join("best.ckpt"))?;
    let mut best_model = load_checkpoint_bytes::<T>(&bytes)?;
    if test_set.is_empty() {
        println!("no test split; skipping held-out evaluation");
    } else {
        let report = evaluate(&mut best_model, &test_set, cfg.train.threshold)?;
        println!(
            "test dice {} miou {} recall {} precision {} (n={})",
            sig6(report.dice),
            sig6(report.miou),
            sig6(report.recall),
            sig6(report.precision),
            report.n_samples
        );
    }
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory containing images/ and masks/
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

pub fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    check_threshold(args.threshold)?;
    let bytes = read_file(&args.checkpoint)?;
    match peek_dtype(&bytes)? {
        Dtype::F32 => eval_run::<f32>(&bytes, &args),
        Dtype::F64 => eval_run::<f64>(&bytes, &args),
    }
}

fn eval_run<T: Element>(bytes: &[u8], args: &EvalArgs) -> Result<(), CliError> {
    let mut model = load_checkpoint_bytes::<T>(bytes)?;
    let data: Vec<Sample<T>> = load_dir(&args.data)?;
    let report = evaluate(&mut model, &data, args.threshold)?;
    println!(
        "evaluated {} samples at threshold {}",
        report.n_samples, report.threshold
    );
    println!(
        "dice {} miou {} recall {} precision {}",
        sig6(report.dice),
        sig6(report.miou),
        sig6(report.recall),
        sig6(report.precision)
    );
    println!("dice,miou,recall,precision,n_samples,threshold");
    println!(
        "{},{},{},{},{},{}",
        sig6(report.dice),
        sig6(report.miou),
        sig6(report.recall),
        sig6(report.precision),
        report.n_samples,
        sig6(report.threshold)
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input PNG (8-bit gray, RGB, or RGBA)
    #[arg(long)]
    pub image: PathBuf,
    /// Output mask PNG
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Write round(255 * probability) instead of a binary 0/255 mask
    #[arg(long)]
    pub prob: bool,
}

pub fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    check_threshold(args.threshold)?;
    let bytes = read_file(&args.checkpoint)?;
    match peek_dtype(&bytes)? {
        Dtype::F32 => predict_run::<f32>(&bytes, &args),
        Dtype::F64 => predict_run::<f64>(&bytes, &args),
    }
}

fn predict_run<T: Element>(bytes: &[u8], args: &PredictArgs) -> Result<(), CliError> {
    let mut model = load_checkpoint_bytes::<T>(bytes)?;
    let s = model.config.input_size;
    let png = read_file(&args.image)?;
    let image = decode_image_bytes::<T>(&png, &args.image.display().to_string())?;
    let resized = resize_bilinear(&image, s, s);
    let x = Tensor::new(Shape::nchw(1, 3, s, s), resized.data().to_vec())
        .expect("resize output matches the model input shape");
    let probs = model.forward(&x, Mode::Infer)?;
    let p = probs.data();
    let gray: Vec<u8> = if args.prob {
        p.iter()
            .map(|v| (255.0 * v.to_f64()).round().clamp(0.0, 255.0) as u8)
            .collect()
    } else {
        p.iter()
            .map(|v| if v.to_f64() >= args.threshold { 255 } else { 0 })
            .collect()
    };
    write_file(&args.out, &encode_gray_png(&gray, s as u32, s as u32))?;
    let fg = p.iter().filter(|v| v.to_f64() >= args.threshold).count() as f64 / p.len() as f64;
    println!("foreground fraction {}", sig6(fg));
    println!("wrote {}", args.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Max relative error allowed between analytic and numeric gradients
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// all, or one op/block name (see the listing printed on a bad name)
    #[arg(long, default_value = "all")]
    pub ops: String,
    /// Machine-readable CSV instead of the table
    #[arg(long)]
    pub csv: bool,
    /// Also check every parameter of the full toy models (minutes of CPU)
    #[arg(long)]
    pub model: bool,
}

pub fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32, CliError> {
    if !(args.tolerance > 0.0) {
        return Err(invalid("tolerance", "must be positive").into());
    }
    let plan = CheckPlan::default();
    // "conv2d" selects every conv2d/* variant; a full "conv2d/w" still works.
    let wanted = |name: &str| {
        args.ops == "all"
            || args.ops == name
            || name.split('/').next() == Some(args.ops.as_str())
    };
    let mut reports: Vec<GradCheckReport> = Vec::new();
    let mut matched = false;
    for name in op_checks() {
        if wanted(name) {
            matched = true;
            reports.push(run_op_check(name, &plan)?);
        }
    }
    for name in block_checks() {
        if wanted(name) {
            matched = true;
            reports.extend(run_block_check(name, &plan)?);
        }
    }
    if args.model {
        let model_plan = CheckPlan::model();
        for name in model_checks() {
            if wanted(name) {
                matched = true;
                reports.extend(run_model_check(name, &model_plan)?);
            }
        }
    }
    if !matched {
        return Err(invalid(
            "ops",
            format!(
                "unknown check {:?}; known: all, {:?}, {:?}",
                args.ops,
                op_checks(),
                block_checks()
            ),
        )
        .into());
    }
    let failures: Vec<&GradCheckReport> = reports
        .iter()
        .filter(|r| !r.passes(args.tolerance))
        .collect();
    if args.csv {
        println!("name,coords_checked,max_rel_err,pass");
        for r in &reports {
            println!(
                "{},{},{:e},{}",
                r.name,
                r.coords_checked,
                r.max_rel_err,
                r.passes(args.tolerance)
            );
        }
    } else {
        let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        println!(
            "{:<width$}  {:>6}  {:>12}  result",
            "name", "coords", "max_rel_err"
        );
        for r in &reports {
            println!(
                "{:<width$}  {:>6}  {:>12.3e}  {}",
                r.name,
                r.coords_checked,
                r.max_rel_err,
                if r.passes(args.tolerance) {
                    "pass"
                } else {
                    "FAIL"
                }
            );
            if !r.passes(args.tolerance) {
                println!(
                    "{:width$}  worst at index {}: analytic {:e} vs numeric {:e}",
                    "", r.worst_index, r.analytic_at_worst, r.numeric_at_worst
                );
            }
        }
        if failures.is_empty() {
            println!(
                "all {} checks passed at tolerance {:e}",
                reports.len(),
                args.tolerance
            );
        } else {
            println!(
                "{} of {} checks exceeded tolerance {:e}",
                failures.len(),
                reports.len(),
                args.tolerance
            );
        }
    }
    Ok(if failures.is_empty() { 0 } else { 1 })
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of image/mask pairs
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    if args.n == 0 {
        return Err(invalid("n", "need at least one sample").into());
    }
    if args.size < 16 {
        return Err(invalid("size", format!("{} is below the minimum of 16", args.size)).into());
    }
    // Generation is geometry rasterized to 8-bit PNG; f64 keeps the pipeline
    // in one precision regardless of what training will later decode it as.
    let samples = synth_dataset::<f64>(args.n, args.size, args.seed)?;
    write_dataset(&args.out, &samples)?;
    println!(
        "wrote {} image/mask pairs to {}",
        args.n,
        args.out.display()
    );
    Ok(())
}
