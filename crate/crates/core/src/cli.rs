//! Command-line driver.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 file error
//! (IO, image decoding, checkpoint integrity or version), 4 numeric
//! divergence, 1 anything else.

use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde_json::json;

use crate::checkpoint::CheckpointBundle;
use crate::config::{reference, RunConfig};
use crate::dataset::{
    generate_dataset, load_image, load_manifest, load_mask, save_image, save_mask, split_dataset, write_manifest,
    ManifestEntry, SceneSample, MANIFEST_FILE,
};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::metrics::{ConfusionCounts, MetricsReport};
use crate::model::Encoded;
use crate::plot::write_training_plots;
use crate::trainer::{evaluate_checkpoint, run_ablation, train, AblationMode, TrainOptions};
use crate::viz;

pub const LOG_ENV: &str = "SEGREFINE_LOG";

pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const DIVERGENCE: i32 = 4;
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Argument(_) => exit::CONFIG,
        Error::Io { .. } | Error::Image { .. } | Error::Integrity { .. } | Error::Incompatible { .. } | Error::Format(_) => {
            exit::IO
        }
        Error::Divergence { .. } | Error::Numeric(_) => exit::DIVERGENCE,
        Error::Shape(_) => exit::OTHER,
    }
}

const ABOUT: &str = "Frozen-encoder segmentation with policy-gradient residual refinement.";

const FOOTER: &str = "Exit codes: 0 ok, 2 config/usage, 3 file/IO, 4 numeric divergence, 1 other.
Log verbosity: SEGREFINE_LOG=error|warn|info|debug|trace (default info).";

#[derive(Parser, Debug)]
#[command(name = "segrefine", version, about = ABOUT)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed override (train.seed; dataset.seed for `generate`).
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory (overrides output.dir).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Epoch count override (train.epochs).
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Training mode override (train.mode).
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Dataset directory with a manifest; default regenerates from [dataset].
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Baseline,
    Curriculum,
    #[value(name = "curriculum_rl")]
    CurriculumRl,
}

impl From<ModeArg> for AblationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Baseline => AblationMode::Baseline,
            ModeArg::Curriculum => AblationMode::Curriculum,
            ModeArg::CurriculumRl => AblationMode::CurriculumRl,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic dataset: images/, masks/, manifest.tsv.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train; writes checkpoint, history, report and plots.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score a checkpoint; writes report.json and report.txt.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Dataset directory with a manifest; default regenerates from [dataset].
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Which part of the train/validation split to score.
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Predict one image; writes mask, overlay and optional error map.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
        /// Ground-truth mask for the false-positive / false-negative map.
        #[arg(long, value_name = "PATH")]
        gt: Option<PathBuf>,
    },
    /// Train all three configurations over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = 3, value_name = "N")]
        seeds: usize,
    },
    /// Print every configuration key with its default.
    ConfigReference,
}

/// Builds the clap command with the key reference appended to `--help`.
pub fn command() -> clap::Command {
    let keys = format!("Configuration keys (TOML sections):\n{}\n{FOOTER}", reference());
    let mut cmd = Cli::command().after_long_help(keys.clone()).after_help(keys.clone());
    for name in ["generate", "train", "eval", "infer", "ablate"] {
        cmd = cmd.mut_subcommand(name, |c| c.after_help(keys.clone()));
    }
    cmd
}

/// Parses `args`, runs, and returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return exit::CONFIG;
        }
    };
    match run(cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "info");
    let _ = env_logger::Builder::from_env(env).format_target(false).try_init();
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(None, None, None, common.out.as_deref());
    Ok(cfg)
}

fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::Argument(format!(
                "output directory {} is not empty (use --force)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_samples(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<SceneSample>> {
    match data {
        Some(dir) => {
            let side = cfg.dataset.side();
            let samples = load_manifest(&dir.join(MANIFEST_FILE), Some((side, side)))?;
            info!("loaded {} samples from {}", samples.len(), dir.display());
            Ok(samples)
        }
        None => generate_dataset(&cfg.dataset),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.dataset.seed = s;
            }
            cfg.dataset.validate()?;
            cmd_generate(&cfg, common.force)
        }
        Command::Train { common, train } => {
            let mut cfg = load_config(&common)?;
            cfg.apply_overrides(common.seed, train.epochs, train.mode.map(Into::into), None);
            cfg.validate()?;
            cmd_train(&cfg, train.data.as_deref(), common.force)
        }
        Command::Eval { common, checkpoint, data, split } => {
            let mut cfg = load_config(&common)?;
            cfg.apply_overrides(common.seed, None, None, None);
            cfg.validate()?;
            cmd_eval(&cfg, &checkpoint, data.as_deref(), split, common.force)
        }
        Command::Infer { common, checkpoint, image, gt } => {
            let cfg = load_config(&common)?;
            cmd_infer(&cfg, &checkpoint, &image, gt.as_deref(), common.force)
        }
        Command::Ablate { common, train, seeds } => {
            let mut cfg = load_config(&common)?;
            cfg.apply_overrides(common.seed, train.epochs, None, None);
            cfg.validate()?;
            cmd_ablate(&cfg, train.data.as_deref(), seeds, common.force)
        }
        Command::ConfigReference => {
            print!("{}", reference());
            Ok(())
        }
    }
}

pub fn cmd_generate(cfg: &RunConfig, force: bool) -> Result<()> {
    let out = &cfg.output.dir;
    prepare_out(out, force)?;
    for sub in ["images", "masks"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let samples = generate_dataset(&cfg.dataset)?;
    let k = cfg.dataset.num_classes;
    let mut hist = vec![0u64; k];
    let mut entries = Vec::with_capacity(samples.len());
    for s in &samples {
        let image = PathBuf::from("images").join(format!("{}.png", s.id));
        let mask = PathBuf::from("masks").join(format!("{}.png", s.id));
        save_image(&s.image, &out.join(&image))?;
        save_mask(&s.mask, &out.join(&mask))?;
        for (h, c) in hist.iter_mut().zip(s.mask.histogram(k)) {
            *h += c;
        }
        entries.push(ManifestEntry { image, mask, id: s.id.clone() });
    }
    write_manifest(&out.join(MANIFEST_FILE), &entries)?;
    write(&out.join("config.toml"), &cfg.to_toml())?;

    let total: u64 = hist.iter().sum();
    println!("wrote {} samples to {}", samples.len(), out.display());
    println!("{:<12} {:>10} {:>8}", "class", "pixels", "share");
    for (c, &n) in hist.iter().enumerate() {
        println!(
            "{:<12} {:>10} {:>7.2}%",
            crate::dataset::class_name(c),
            n,
            100.0 * n as f64 / total.max(1) as f64
        );
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, data: Option<&Path>, force: bool) -> Result<()> {
    let out = &cfg.output.dir;
    prepare_out(out, force)?;
    write(&out.join("config.toml"), &cfg.to_toml())?;
    let samples = load_samples(cfg, data)?;
    let spec = cfg.model_spec();
    let opts = TrainOptions {
        checkpoint_path: Some(out.join("checkpoint.ckpt")),
    };
    let outcome = train(&spec, &cfg.train, &cfg.loss, &samples, &opts)?;
    outcome.history.save(&out.join("history.tsv"))?;
    outcome.best_report.save_json(&out.join("report.json"))?;
    write(&out.join("report.txt"), &outcome.best_report.to_table())?;
    write_training_plots(&outcome.history, &out.join("plots"))?;
    let summary = json!({
        "mode": cfg.train.mode,
        "epochs": cfg.train.epochs,
        "initial_val_miou": outcome.initial_report.mean_iou,
        "best_epoch": outcome.best.epoch,
        "best_val_miou": outcome.best.best_val_miou,
        "best_val_dice": outcome.best_report.dice,
        "encoder_checksum_before": outcome.encoder_checksum_before,
        "encoder_checksum_after": outcome.encoder_checksum_after,
        "train_ids": outcome.train_ids,
        "val_ids": outcome.val_ids,
    });
    write(&out.join("summary.json"), &serde_json::to_string_pretty(&summary).expect("json"))?;
    println!("{}", outcome.best_report.to_table());
    println!(
        "best val mIoU {:.4} at epoch {} (initial {:.4}); outputs in {}",
        outcome.best.best_val_miou,
        outcome.best.epoch,
        outcome.initial_report.mean_iou,
        out.display()
    );
    Ok(())
}

fn select_split(cfg: &RunConfig, samples: Vec<SceneSample>, split: SplitArg) -> Result<Vec<SceneSample>> {
    if split == SplitArg::All {
        return Ok(samples);
    }
    let (train, val) = split_dataset(samples, cfg.train.val_fraction, cfg.train.seed)?;
    Ok(if split == SplitArg::Train { train } else { val })
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: Option<&Path>, split: SplitArg, force: bool) -> Result<()> {
    let bundle = CheckpointBundle::load(checkpoint)?;
    bundle.check_spec(&cfg.model_spec(), checkpoint)?;
    let samples = select_split(cfg, load_samples(cfg, data)?, split)?;
    let report = evaluate_checkpoint(&bundle, &samples)?;
    let out = &cfg.output.dir;
    prepare_out(out, force)?;
    report.save_json(&out.join("report.json"))?;
    write(&out.join("report.txt"), &report.to_table())?;
    println!("{}", report.to_table());
    println!(
        "mIoU {:.6} Dice {:.6} on {} samples (checkpoint best {:.6} at epoch {})",
        report.mean_iou, report.dice, report.num_samples, bundle.best_val_miou, bundle.epoch
    );
    Ok(())
}

/// Nearest-neighbour resize of a label map.
fn resize_mask(mask: &Mask, h: usize, w: usize) -> Mask {
    if (mask.height(), mask.width()) == (h, w) {
        return mask.clone();
    }
    let mut out = Mask::filled(h, w, 0);
    for y in 0..h {
        let sy = (y * mask.height()) / h;
        for x in 0..w {
            let sx = (x * mask.width()) / w;
            out.set(y, x, mask.get(sy, sx));
        }
    }
    out
}

pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, image_path: &Path, gt: Option<&Path>, force: bool) -> Result<()> {
    let bundle = CheckpointBundle::load(checkpoint)?;
    let side = bundle.spec.side;
    let original = load_image(image_path, None)?;
    let (h, w, _) = original.dims3();
    let input = if (h, w) != (side, side) {
        warn!("{} is {h}x{w}; resizing to the model size {side}x{side}", image_path.display());
        load_image(image_path, Some((side, side)))?
    } else {
        original.clone()
    };
    let encoder = Encoder::<f32>::new(&bundle.spec.encoder)?;
    let enc = Encoded::new(&encoder, &input)?;
    let pred = bundle.model.predict(&enc, bundle.mode.uses_rl())?;
    let mask = resize_mask(&Mask::new(side, side, pred.labels())?, h, w);

    let out = &cfg.output.dir;
    prepare_out(out, force)?;
    save_mask(&mask, &out.join("mask.png"))?;
    save_image(&viz::overlay(&original, &mask)?, &out.join("overlay.png"))?;
    if let Some(alpha) = pred.policy.as_ref().map(|p| p.alpha) {
        info!("refinement step alpha = {alpha}");
    }
    if let Some(gt_path) = gt {
        let gt = load_mask(gt_path)?;
        if (gt.height(), gt.width()) != (h, w) {
            return Err(Error::Argument(format!(
                "ground truth is {}x{}, image is {h}x{w}",
                gt.height(),
                gt.width()
            )));
        }
        let (map, counts) = viz::error_map(&original, &mask, &gt)?;
        save_image(&map, &out.join("error_map.png"))?;
        let mut conf = ConfusionCounts::new(bundle.spec.num_classes);
        conf.accumulate(mask.data(), &gt)?;
        let report = MetricsReport::from_counts(&conf);
        report.save_json(&out.join("report.json"))?;
        println!(
            "false positives {} px, false negatives {} px, mIoU {:.4}",
            counts.false_positive, counts.false_negative, report.mean_iou
        );
    }
    println!("wrote mask.png and overlay.png to {}", out.display());
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig, data: Option<&Path>, seeds: usize, force: bool) -> Result<()> {
    let out = &cfg.output.dir;
    prepare_out(out, force)?;
    write(&out.join("config.toml"), &cfg.to_toml())?;
    let runs_dir = out.join("runs");
    std::fs::create_dir_all(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;
    let samples = load_samples(cfg, data)?;
    let mut io_err = None;
    let table = run_ablation(&cfg.model_spec(), &cfg.train, &cfg.loss, &samples, seeds, |run| {
        let path = runs_dir.join(format!("{}_seed{}.tsv", run.mode, run.seed));
        if let Err(e) = run.history.save(&path) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    write(&out.join("ablation.txt"), &table.to_table())?;
    write(&out.join("ablation.json"), &table.to_json())?;
    println!("{}", table.to_table());
    Ok(())
}
