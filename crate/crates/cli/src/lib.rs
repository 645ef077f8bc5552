//! The `elf` command line.

pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use elf_core::imageio::{read_manifest, write_manifest};
use elf_core::losses::format_db;
use elf_core::suite::{report_table, run_suite, SuiteOptions};
use elf_core::synth::generate_sample;
use elf_core::train::{mean_metrics, sig9};
use elf_core::{
    build_model, load_checkpoint, load_png, run_training_validated, save_png, DegradationSpec, Error, ManifestEntry,
    Sample, Tensor,
};

use crate::config::{parse_spec, RunConfig};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

/// Name of the run config written next to the checkpoints.
pub const CONFIG_SIDECAR: &str = "config.txt";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            code: EXIT_IO,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::IncompatibleModel(_) => EXIT_CONFIG,
            Error::File { .. }
            | Error::Io(_)
            | Error::Image { .. }
            | Error::ImageEncode { .. }
            | Error::NonRgb { .. }
            | Error::NotACheckpoint
            | Error::Corrupt
            | Error::UnknownVersion(_)
            | Error::Malformed(_) => EXIT_IO,
            _ => EXIT_RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "elf", version, about = "Two-stage degradation-aware image restoration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate procedural clean/degraded/map PNG triples and a manifest.
    Synth {
        #[arg(long, required_unless_present = "manifest")]
        clean_count: Option<usize>,
        /// Degradation spec file, or `defaults`.
        #[arg(long, default_value = "defaults")]
        spec: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Side length of the square images.
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Regenerate exactly the entries of an existing manifest.
        #[arg(long, conflicts_with = "clean_count")]
        manifest: Option<PathBuf>,
    },
    /// Train from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Restore every PNG in a directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Run config; defaults to the one saved beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Mean PSNR and SSIM of predictions against ground truth, as CSV.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Finite-difference check of every primitive, block and the pipeline.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-3)]
        pipeline_tol: f64,
        #[arg(long, default_value_t = 100)]
        probes: usize,
    },
}

/// Parses `argv`, runs one subcommand and returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let rendered = e.to_string();
            eprintln!("{}", rendered.lines().next().unwrap_or("usage error"));
            return EXIT_USAGE;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.code;
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("ELF_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config(format!("ELF_THREADS must be a positive integer, got `{value}`")))?;
    // a second call in the same process finds the pool already built
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(command: Command) -> CliResult<i32> {
    match command {
        Command::Synth {
            clean_count,
            spec,
            out,
            seed,
            size,
            manifest,
        } => synth(clean_count, &spec, &out, seed, size, manifest.as_deref()),
        Command::Train { config } => train(&config),
        Command::Infer {
            checkpoint,
            input,
            output,
            config,
        } => infer(&checkpoint, &input, &output, config.as_deref()),
        Command::Eval { pred, gt } => eval(&pred, &gt),
        Command::Gradcheck {
            tol,
            pipeline_tol,
            probes,
        } => gradcheck(SuiteOptions {
            tol,
            pipeline_tol,
            probes,
        }),
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn load_spec(arg: &str) -> CliResult<DegradationSpec> {
    if arg == "defaults" {
        return Ok(DegradationSpec::default());
    }
    let path = Path::new(arg);
    parse_spec(&read_text(path)?).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn load_run_config(path: &Path) -> CliResult<RunConfig> {
    let mut cfg =
        RunConfig::parse(&read_text(path)?).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}

fn file_name(index: usize) -> String {
    format!("{index:05}.png")
}

fn synth(
    clean_count: Option<usize>,
    spec: &str,
    out: &Path,
    seed: u64,
    size: usize,
    manifest: Option<&Path>,
) -> CliResult<i32> {
    let spec = load_spec(spec)?;
    if size == 0 {
        return Err(CliError::config("size must be positive"));
    }
    let entries: Vec<ManifestEntry> = match manifest {
        Some(path) => read_manifest(path)?,
        None => (0..clean_count.unwrap_or(0))
            .map(|index| ManifestEntry {
                index,
                seed: seed.wrapping_add(index as u64),
                kind: spec.kind,
            })
            .collect(),
    };
    for sub in ["clean", "degraded", "map"] {
        create_dir(&out.join(sub))?;
    }
    entries.par_iter().try_for_each(|e| -> CliResult<()> {
        let spec = DegradationSpec { kind: e.kind, ..spec.clone() };
        let s = generate_sample(size, e.seed, &spec)?;
        let name = file_name(e.index);
        save_png(&s.clean, &out.join("clean").join(&name))?;
        save_png(&s.degraded, &out.join("degraded").join(&name))?;
        save_png(&s.degradation_map, &out.join("map").join(&name))?;
        Ok(())
    })?;
    write_manifest(&out.join("manifest.tsv"), &entries)?;
    println!("wrote {} samples to {}", entries.len(), out.display());
    Ok(0)
}

/// Sorted PNG file names in `dir`.
fn png_names(dir: &Path) -> CliResult<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") && entry.path().is_file() {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Loads a synth output directory. A missing `map/` entry is replaced by
/// zeros; training never reads it.
fn load_dataset(dir: &Path) -> CliResult<Vec<Sample>> {
    let names = png_names(&dir.join("degraded"))?;
    names
        .par_iter()
        .map(|name| -> CliResult<Sample> {
            let degraded = load_png(&dir.join("degraded").join(name))?;
            let clean = load_png(&dir.join("clean").join(name))?;
            if clean.shape() != degraded.shape() {
                return Err(CliError::config(format!("{name}: clean and degraded sizes differ")));
            }
            let map_path = dir.join("map").join(name);
            let degradation_map = if map_path.exists() {
                load_png(&map_path)?
            } else {
                Tensor::zeros(degraded.shape().to_vec())
            };
            Ok(Sample {
                clean,
                degraded,
                degradation_map,
            })
        })
        .collect()
}

fn train(config_path: &Path) -> CliResult<i32> {
    let cfg = load_run_config(config_path)?;
    let train_dir = cfg
        .train_dir
        .clone()
        .ok_or_else(|| CliError::config("`train_dir` is required for training"))?;
    let data = load_dataset(&train_dir)?;
    if data.is_empty() {
        return Err(CliError::config(format!("{}: no training images", train_dir.display())));
    }
    let val = match &cfg.val_dir {
        Some(dir) => load_dataset(dir)?,
        None => Vec::new(),
    };
    if let Some(dir) = &cfg.train.checkpoint_dir {
        create_dir(dir)?;
        let sidecar = dir.join(CONFIG_SIDECAR);
        fs::write(&sidecar, cfg.serialize()).map_err(|e| CliError::io(&sidecar, e))?;
    }
    let mut model = build_model(&cfg.model, cfg.train.seed)?;
    let report = run_training_validated(&mut model, &data, &val, &cfg.train, &cfg.loss())?;
    let last = report.log.last().map_or("n/a".to_string(), |r| sig9(r.loss));
    println!(
        "epochs={} steps={} final_loss={last}",
        report.epochs_completed,
        report.log.len()
    );
    if let Some((epoch, psnr)) = report.best {
        println!("best_epoch={epoch} best_psnr={}", format_db(psnr));
    }
    Ok(0)
}

fn infer(checkpoint: &Path, input: &Path, output: &Path, config: Option<&Path>) -> CliResult<i32> {
    let config_path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_SIDECAR),
    };
    if !config_path.exists() {
        return Err(CliError::config(format!(
            "{}: run config not found; pass --config",
            config_path.display()
        )));
    }
    let cfg = load_run_config(&config_path)?;
    let template = build_model(&cfg.model, 0)?;
    let model = load_checkpoint(checkpoint, &template)?.model;
    let names = png_names(input)?;
    create_dir(output)?;
    names.par_iter().try_for_each(|name| -> CliResult<()> {
        let image = load_png(&input.join(name))?;
        let restored = model.restore_image(&image)?;
        save_png(&restored, &output.join(name))?;
        Ok(())
    })?;
    println!("restored {} images into {}", names.len(), output.display());
    Ok(0)
}

fn eval(pred: &Path, gt: &Path) -> CliResult<i32> {
    let names = png_names(gt)?;
    if names.is_empty() {
        return Err(CliError::config(format!("{}: no PNG files", gt.display())));
    }
    let pairs: Vec<(Tensor, Tensor)> = names
        .par_iter()
        .map(|name| -> CliResult<(Tensor, Tensor)> {
            let p = load_png(&pred.join(name))?;
            let g = load_png(&gt.join(name))?;
            if p.shape() != g.shape() {
                return Err(CliError::config(format!(
                    "{name}: prediction {:?} and ground truth {:?} differ in size",
                    p.shape(),
                    g.shape()
                )));
            }
            Ok((p, g))
        })
        .collect::<CliResult<_>>()?;
    let refs: Vec<(&Tensor, &Tensor)> = pairs.iter().map(|(p, g)| (p, g)).collect();
    let (psnr, ssim) = mean_metrics(&refs)?;
    println!("count,psnr,ssim");
    println!("{},{},{}", pairs.len(), format_db(psnr), sig9(ssim));
    Ok(0)
}

fn gradcheck(opts: SuiteOptions) -> CliResult<i32> {
    if !(opts.tol > 0.0 && opts.pipeline_tol > 0.0) || opts.probes == 0 {
        return Err(CliError::config("tolerances and probe count must be positive"));
    }
    let reports = run_suite(opts)?;
    print!("{}", report_table(&reports));
    let failed = reports.iter().filter(|r| !r.pass).count();
    println!("{} checks, {failed} failed", reports.len());
    Ok(if failed == 0 { 0 } else { EXIT_GRADCHECK })
}
