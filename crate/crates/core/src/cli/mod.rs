//! `stnlab {train|eval|align|sweep|compare}`.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage or config error, 3 I/O or
//! data error, 4 training divergence, 5 incompatible checkpoint or spec.

mod config;
mod manifest;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

pub use config::{backbone_preset, AffineSpec, Column, ConfigError, RunConfig, OPTIONAL_KEYS, REQUIRED_KEYS};
pub use manifest::{manifest_file, sha256_hex, RunManifest};

use crate::data::{make_glyph_dataset, pad_canvas, LabeledDataset, MnistFiles};
use crate::error::Error;
use crate::experiments::{
    alignment_analysis, alignment_csv, angle_sweep, confusion_csv, evaluate, history_csv, render_alignment_grid,
    sweep_angles, sweep_csv, train_with, AlignmentOptions, MatchedFilterBank, ThetaPredictor, TrainConfig,
};
use crate::models::{self, ModelInstance};
use crate::spatial::AffineParams;
use crate::tensor::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_INCOMPATIBLE: i32 = 5;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.txt";
pub const RESULTS_HEADER_PREFIX: &str = "network";
pub const CELLS_HEADER: &str = "network,column,seed,error_rate";

#[derive(Parser, Debug)]
#[command(name = "stnlab", version, about = "Spatial transformer experiments on MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory with the MNIST IDX files.
    #[arg(long, env = "STNLAB_DATA")]
    data: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write checkpoint, history and manifest.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Feature-map alignment residuals and an alignment image grid.
    Align {
        #[command(flatten)]
        common: Common,
        /// Model analysed and shown in the middle grid row.
        #[arg(long, required_unless_present = "glyphs")]
        checkpoint: Option<PathBuf>,
        /// Model shown in the bottom grid row (defaults to `--checkpoint`).
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Analyse the synthetic W/M detector bank under a half turn instead.
        #[arg(long)]
        glyphs: bool,
    },
    /// Predicted orientation versus applied rotation.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train every (model, column, seed) cell and tabulate median errors.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError { code: EXIT_CONFIG, message: e.to_string() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) | Error::Idx { .. } => EXIT_DATA,
            Error::Divergence { .. } => EXIT_DIVERGED,
            Error::Checkpoint(_) | Error::Shape { .. } => EXIT_INCOMPATIBLE,
            Error::Spec(_) | Error::InvalidInput { .. } | Error::NonFinite { .. } => EXIT_CONFIG,
            _ => EXIT_INTERNAL,
        };
        CliError { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(message: impl Into<String>) -> CliError {
    CliError { code: EXIT_CONFIG, message: message.into() }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train { common } => cmd_train(&common),
        Command::Eval { common, checkpoint } => cmd_eval(&common, &checkpoint),
        Command::Align { common, checkpoint, reference, glyphs } => {
            cmd_align(&common, checkpoint.as_deref(), reference.as_deref(), glyphs)
        }
        Command::Sweep { common, checkpoint } => cmd_sweep(&common, &checkpoint),
        Command::Compare { common, seeds } => cmd_compare(&common, &seeds),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn read_config(path: &Path, seed: Option<u64>) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError {
        code: EXIT_DATA,
        message: format!("{}: {e}", path.display()),
    })?;
    Ok(RunConfig::parse(&text, seed)?)
}

fn require_config(common: &Common) -> CliResult<RunConfig> {
    let path = common.config.as_ref().ok_or_else(|| usage("--config is required"))?;
    read_config(path, common.seed)
}

fn out_dir(common: &Common, fallback: Option<&Path>) -> CliResult<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| fallback.map(Path::to_path_buf))
        .ok_or_else(|| usage("--out is required"))?;
    fs::create_dir_all(&dir).map_err(Error::from)?;
    Ok(dir)
}

fn data_files(common: &Common) -> CliResult<MnistFiles> {
    let dir = common.data.clone().unwrap_or_else(|| PathBuf::from("data/mnist"));
    Ok(MnistFiles::locate(dir)?)
}

fn finish(mut manifest: RunManifest, dir: &Path, started: Instant) -> CliResult<()> {
    manifest.duration_seconds = started.elapsed().as_secs_f64();
    manifest.save(dir)?;
    Ok(())
}

fn cmd_train(common: &Common) -> CliResult<()> {
    let started = Instant::now();
    let cfg = require_config(common)?;
    let dir = out_dir(common, None)?;
    let files = data_files(common)?;
    let (train_set, _) = cfg.train.prepare_data(&files.load_train()?, &files.load_test()?)?;
    let spec = cfg.spec()?;
    let outcome = train_with(&spec, &cfg.train, &train_set, &mut |_, r| {
        eprintln!("epoch {} loss {:.4} accuracy {:.4}", r.epoch, r.loss, r.accuracy);
    })?;
    let mut manifest = RunManifest::new("train", cfg.train.seed, &cfg.snapshot());
    manifest.write_file(&dir, CHECKPOINT_FILE, &models::to_bytes(&outcome.model))?;
    manifest.write_file(&dir, "history.csv", history_csv(&outcome.history).as_bytes())?;
    manifest.write_file(&dir, CONFIG_FILE, cfg.snapshot().as_bytes())?;
    finish(manifest, &dir, started)
}

/// Config stored with a checkpoint, or `--config`, if either exists.
fn config_for_checkpoint(common: &Common, checkpoint: &Path) -> CliResult<Option<RunConfig>> {
    if let Some(p) = &common.config {
        return read_config(p, common.seed).map(Some);
    }
    let sibling = checkpoint.with_file_name(CONFIG_FILE);
    if sibling.is_file() {
        return read_config(&sibling, common.seed).map(Some);
    }
    Ok(None)
}

/// Test split prepared the way the checkpoint was trained, or unaugmented
/// on the model's canvas.
fn test_split(common: &Common, checkpoint: &Path, model: &ModelInstance) -> CliResult<LabeledDataset> {
    let (_, h, _) = model.spec().input;
    let cfg = match config_for_checkpoint(common, checkpoint)? {
        Some(c) => c.train,
        None => TrainConfig { canvas: h, ..TrainConfig::default() },
    };
    if cfg.canvas != h {
        return Err(CliError {
            code: EXIT_INCOMPATIBLE,
            message: format!("checkpoint expects {h}x{h} inputs, config canvas is {}", cfg.canvas),
        });
    }
    let files = data_files(common)?;
    let test = files.load_test()?;
    let (_, test) = cfg.prepare_data(&test.take(0), &test)?;
    Ok(test)
}

fn cmd_eval(common: &Common, checkpoint: &Path) -> CliResult<()> {
    let started = Instant::now();
    let model = models::load(checkpoint)?;
    let test = test_split(common, checkpoint, &model)?;
    let report = evaluate(&model, &test)?;
    println!("error_rate,{:.4}", report.error_rate);
    let dir = out_dir(common, checkpoint.parent())?;
    let mut manifest = RunManifest::new("eval", 0, &format!("checkpoint={}\n", checkpoint.display()));
    manifest.write_file(&dir, "confusion.csv", confusion_csv(&report).as_bytes())?;
    finish(manifest, &dir, started)
}

/// Applies one fixed transform.
struct Fixed(AffineParams);

impl ThetaPredictor for Fixed {
    fn predict_theta(&self, images: &Tensor) -> crate::Result<Vec<AffineParams>> {
        Ok(vec![self.0; images.shape()[0]])
    }
}

fn cmd_align(common: &Common, checkpoint: Option<&Path>, reference: Option<&Path>, glyphs: bool) -> CliResult<()> {
    let started = Instant::now();
    let dir = out_dir(common, None)?;
    let mut manifest;
    if glyphs {
        let count = match &common.config {
            Some(p) => read_config(p, common.seed)?.align_examples,
            None => 8,
        };
        let size = 25;
        let bank = MatchedFilterBank::new(size, 0.5)?;
        let g = make_glyph_dataset(count.max(1), size, common.seed.unwrap_or(0))?;
        let images = Tensor::concat_outer(&g.iter().map(|p| p.image.clone()).collect::<Vec<_>>())?;
        let t = AffineParams::rotation(std::f64::consts::PI);
        let report = alignment_analysis(&bank, 1, t, &images, Some(&[1, 0]), &AlignmentOptions::default())?;
        let undo = Fixed(t.invert()?);
        let grid = render_alignment_grid(&undo, &undo, &images.slice_outer(0, count.min(16)), t, 2)?;
        manifest = RunManifest::new("align", common.seed.unwrap_or(0), "mode=glyphs\n");
        manifest.write_file(&dir, "alignment.csv", alignment_csv(&report).as_bytes())?;
        manifest.write_file(&dir, "grid.pgm", &grid.to_pgm())?;
        println!(
            "residual_aligned,{:.4}\nresidual_best_spatial,{:.4}\nchannel_swap_residual,{:.4}",
            report.mean_aligned(),
            report.mean_best_spatial(),
            report.mean_channel_swap()
        );
    } else {
        let checkpoint = checkpoint.ok_or_else(|| usage("--checkpoint is required"))?;
        let model = models::load(checkpoint)?;
        let other = match reference {
            Some(p) => models::load(p)?,
            None => model.clone(),
        };
        if other.spec().input != model.spec().input {
            return Err(CliError { code: EXIT_INCOMPATIBLE, message: "reference model has a different input shape".into() });
        }
        let cfg = config_for_checkpoint(common, checkpoint)?;
        let (layer, transform, count) = match &cfg {
            Some(c) => (c.align_layer, c.align_transform, c.align_examples),
            None => (1, AffineSpec::Rotation(90.0), 8),
        };
        let (_, h, w) = model.spec().input;
        let files = data_files(common)?;
        let digits = pad_canvas(&files.load_test()?.take(count.max(1)), h)?;
        let t = transform.params(h, w);
        let report = alignment_analysis(&model, layer, t, &digits.images, None, &AlignmentOptions::default())?;
        let grid = render_alignment_grid(&model, &other, &digits.images.slice_outer(0, count.min(16)), t, 2)?;
        manifest = RunManifest::new("align", 0, &format!("checkpoint={}\nlayer={layer}\n", checkpoint.display()));
        manifest.write_file(&dir, "alignment.csv", alignment_csv(&report).as_bytes())?;
        manifest.write_file(&dir, "grid.pgm", &grid.to_pgm())?;
        println!("residual_aligned,{:.4}\nresidual_best_spatial,{:.4}", report.mean_aligned(), report.mean_best_spatial());
    }
    finish(manifest, &dir, started)
}

fn cmd_sweep(common: &Common, checkpoint: &Path) -> CliResult<()> {
    let started = Instant::now();
    let model = models::load(checkpoint)?;
    if !model.spec().variant.has_transformer() {
        return Err(CliError { code: EXIT_INCOMPATIBLE, message: "sweep needs a model with a spatial transformer".into() });
    }
    let (images, angles) = match config_for_checkpoint(common, checkpoint)? {
        Some(c) => (c.sweep_images, c.sweep_angles),
        None => (100, 72),
    };
    let (_, h, _) = model.spec().input;
    let files = data_files(common)?;
    let digits = pad_canvas(&files.load_test()?.take(images), h)?;
    let sweep = angle_sweep(&model, &model.spec().name(), &digits.images, &sweep_angles(angles))?;
    println!("correlation,{:.4}\nmissing,{}", sweep.correlation(), sweep.missing());
    let dir = out_dir(common, checkpoint.parent())?;
    let mut manifest = RunManifest::new("sweep", 0, &format!("checkpoint={}\n", checkpoint.display()));
    manifest.write_file(&dir, "sweep.csv", sweep_csv(&sweep).as_bytes())?;
    finish(manifest, &dir, started)
}

/// Median of a non-empty sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn cell_checkpoint_name(model: &str, column: &str, seed: u64) -> String {
    format!("cells/{model}_{column}_s{seed}.ckpt")
}

fn cmd_compare(common: &Common, seeds: &[u64]) -> CliResult<()> {
    let started = Instant::now();
    let cfg = require_config(common)?;
    if cfg.models.is_empty() {
        return Err(usage("compare needs a `models` list in the config"));
    }
    if seeds.is_empty() {
        return Err(usage("--seeds must list at least one seed"));
    }
    let dir = out_dir(common, None)?;
    let files = data_files(common)?;
    let (raw_train, raw_test) = (files.load_train()?, files.load_test()?);
    let seed_list = seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
    let mut manifest = RunManifest::new("compare", seeds[0], &format!("{}seeds={seed_list}\n", cfg.snapshot()));

    let mut cells = format!("{CELLS_HEADER}\n");
    let mut table: Vec<Vec<f64>> = vec![Vec::new(); cfg.models.len()];
    for column in &cfg.columns {
        let data_cfg = cfg.cell_config(&cfg.train.model, column, cfg.train.seed);
        let (train_set, test_set) = data_cfg.prepare_data(&raw_train, &raw_test)?;
        for (row, model) in cfg.models.iter().enumerate() {
            let spec = cfg.spec_for(model, column.canvas)?;
            let mut errors = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let tc = cfg.cell_config(model, column, seed);
                let outcome = train_with(&spec, &tc, &train_set, &mut |_, _| {})?;
                let err = evaluate(&outcome.model, &test_set)?.error_rate;
                eprintln!("{model} {} seed {seed}: error {err:.4}", column.name());
                let _ = writeln!(cells, "{model},{},{seed},{err:.6}", column.name());
                manifest.write_file(&dir, &cell_checkpoint_name(model, column.name(), seed), &models::to_bytes(&outcome.model))?;
                errors.push(err);
            }
            table[row].push(median(&errors));
        }
    }
    let mut results = RESULTS_HEADER_PREFIX.to_string();
    for c in &cfg.columns {
        let _ = write!(results, ",{}", c.name());
    }
    results.push('\n');
    for (model, row) in cfg.models.iter().zip(&table) {
        results.push_str(model);
        for v in row {
            let _ = write!(results, ",{v:.6}");
        }
        results.push('\n');
    }
    print!("{results}");
    manifest.write_file(&dir, "results.csv", results.as_bytes())?;
    manifest.write_file(&dir, "cells.csv", cells.as_bytes())?;
    manifest.write_file(&dir, CONFIG_FILE, cfg.snapshot().as_bytes())?;
    finish(manifest, &dir, started)
}
