//! Command-line front end. [`dispatch`] parses arguments, runs one
//! subcommand and returns the process exit code: 0 on success, 1 for bad
//! flags, config or data, 2 when a run fails.

pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use drgrade_core::backbone::{AttentionMode, ModelAssembly, ModelConfig};
use drgrade_core::datapipe::{
    class_distribution, load_rgb, load_split, preprocess, AugTag, DRGrade, ExpandPolicy, Manifest,
    PreprocessOptions, Split,
};
use drgrade_core::explain::{write_panel, Stage};
use drgrade_core::trainer::{ablation_csv, evaluate, run_ablation, train, write_epoch_log};
use drgrade_core::{Error, Result};

pub use config::{resolve_config, RunConfig, Source, TrainFlags};

#[derive(Parser, Debug)]
#[command(name = "drgrade", version, about = "Diabetic retinopathy grading with global and category attention")]
struct Cli {
    /// Only log errors.
    #[arg(long, short, global = true, conflicts_with = "verbose")]
    quiet: bool,
    /// Log debug detail.
    #[arg(long, short, global = true)]
    verbose: bool,
    /// Seed for splitting, augmentation, initialisation, shuffling and dropout.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rescale a directory of graded images, split it and write a manifest.
    Preprocess {
        /// Grade subdirectories 0..4 (or DR0..DR4), or a labels.csv of path,grade.
        #[arg(long)]
        input_dir: PathBuf,
        /// Writes manifest.csv and images/ here.
        #[arg(long, required_unless_present = "out_manifest", conflicts_with = "out_manifest")]
        out_dir: Option<PathBuf>,
        /// Manifest path; images/ is written beside it.
        #[arg(long)]
        out_manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        resize: u32,
        /// Augmented copies per image: one-random, full or none.
        #[arg(long, alias = "expand", default_value = "one-random")]
        augment: ExpandPolicy,
        /// Train, validation and test fractions.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.5, 0.3, 0.2])]
        split: Vec<f64>,
    },
    /// Two-phase training on a manifest's train and val splits.
    Train {
        #[arg(long, required_unless_present = "print_config")]
        manifest: Option<PathBuf>,
        #[arg(long, required_unless_present = "print_config")]
        out_dir: Option<PathBuf>,
        /// TOML file of config keys; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        print_config: bool,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to model.toml beside the checkpoint.
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Train and test the four attention variants on identical data.
    Ablate {
        #[arg(long, required_unless_present = "print_config")]
        manifest: Option<PathBuf>,
        #[arg(long, required_unless_present = "print_config")]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        print_config: bool,
        /// Variants to run, in order.
        #[arg(long, value_delimiter = ',', default_value = "baseline,gab_only,cab_only,gab_cab")]
        modes: Vec<AttentionMode>,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Grad-CAM overlays at the pre-attention, GAB and CAB stages.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
        image: Vec<PathBuf>,
        /// Explain the original images of one split.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// At most this many images from the manifest.
        #[arg(long)]
        limit: Option<usize>,
        /// auto (the predicted grade) or 0..4.
        #[arg(long, default_value = "auto")]
        grade: String,
        #[arg(long, value_delimiter = ',', default_value = "noattn,gab,cab")]
        stages: Vec<Stage>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = if cli.quiet {
        log::LevelFilter::Error
    } else if cli.verbose {
        log::LevelFilter::Debug
    } else {
        log::LevelFilter::Info
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    log::set_max_level(level);
    QUIET.store(cli.quiet, std::sync::atomic::Ordering::Relaxed);
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

static QUIET: std::sync::atomic::AtomicBool = std::sync::atomic::AtomicBool::new(false);

/// Result summaries on stdout, silenced by `--quiet`.
macro_rules! say {
    ($($arg:tt)*) => {
        if !QUIET.load(std::sync::atomic::Ordering::Relaxed) {
            println!($($arg)*);
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Preprocess { input_dir, out_dir, out_manifest, resize, augment, split } => {
            let opts = PreprocessOptions {
                resize,
                policy: augment,
                fractions: [split[0], split[1], split[2]],
                seed: seed.unwrap_or(0),
            };
            let target = match (out_manifest, out_dir) {
                (Some(m), _) => m,
                (None, Some(d)) => d.join("manifest.csv"),
                (None, None) => unreachable!("clap requires one of them"),
            };
            let manifest = preprocess(&input_dir, &target, &opts)?;
            for s in Split::ALL {
                let subset = Manifest::new(manifest.source.clone(), manifest.in_split(s).cloned().collect());
                let d = class_distribution(&subset);
                say!("{s}: {} samples, per grade {:?}", d.total, d.counts);
            }
            Ok(())
        }
        Command::Train { manifest, out_dir, config, print_config, flags } => {
            let rc = resolve_config(&flags.to_table(seed), config.as_deref())?;
            if print_config {
                print!("{}", rc.render());
                return Ok(());
            }
            let (manifest, out_dir) = (manifest.expect("required"), out_dir.expect("required"));
            run_train(&rc, &manifest, &out_dir)
        }
        Command::Eval { ckpt, model_config, manifest, split, out_dir, batch_size } => {
            if batch_size == 0 {
                return Err(Error::Config("batch_size must be positive".into()));
            }
            let model = load_model(&ckpt, model_config.as_deref())?;
            let m = Manifest::load(&manifest)?;
            let data = load_split(&m, split, model.config.input_size as u32)?;
            let report = evaluate(&model, &data, batch_size)?.report;
            create_dir(&out_dir)?;
            report.save(&out_dir.join("report.toml"))?;
            say!(
                "{split}: accuracy {:.4}, macro F1 {:.4}, kappa {:.4}",
                report.accuracy,
                report.f1_macro,
                report.kappa_qwk.unwrap_or(0.0)
            );
            Ok(())
        }
        Command::Ablate { manifest, out_dir, config, print_config, modes, flags } => {
            let rc = resolve_config(&flags.to_table(seed), config.as_deref())?;
            if print_config {
                print!("{}", rc.render());
                return Ok(());
            }
            let (manifest, out_dir) = (manifest.expect("required"), out_dir.expect("required"));
            run_ablate(&rc, &modes, &manifest, &out_dir)
        }
        Command::Explain { ckpt, model_config, image, manifest, split, limit, grade, stages, out_dir } => {
            let grade = match grade.as_str() {
                "auto" => None,
                g => Some(DRGrade::parse(g)?.index()),
            };
            let model = load_model(&ckpt, model_config.as_deref())?;
            let paths = match manifest {
                Some(m) => {
                    let m = Manifest::load(&m)?;
                    let originals: Vec<PathBuf> = m
                        .in_split(split)
                        .filter(|s| s.aug == AugTag::Orig)
                        .map(|s| s.path.clone())
                        .take(limit.unwrap_or(usize::MAX))
                        .collect();
                    if originals.is_empty() {
                        return Err(Error::Validation(format!("manifest has no {split} images")));
                    }
                    originals
                }
                None => image,
            };
            for path in &paths {
                let stem = path.file_stem().unwrap_or_default().to_string_lossy();
                let written = write_panel(&model, &load_rgb(path)?, grade, &stages, &out_dir, &stem)?;
                log::info!("{}: wrote {} files", path.display(), written.len());
            }
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn load_model(ckpt: &Path, model_config: Option<&Path>) -> Result<ModelAssembly> {
    let cfg_path = match model_config {
        Some(p) => p.to_path_buf(),
        None => ckpt.with_file_name("model.toml"),
    };
    if !cfg_path.exists() {
        return Err(Error::Config(format!(
            "model config {} not found; pass --model-config",
            cfg_path.display()
        )));
    }
    ModelAssembly::load(ModelConfig::load(&cfg_path)?, ckpt)
}

/// Writes `config.toml`, `model.toml`, `epochs.csv`, `best.ckpt`,
/// `final.ckpt` and a report per evaluated split.
fn run_train(rc: &RunConfig, manifest: &Path, out_dir: &Path) -> Result<()> {
    let cfg = &rc.train;
    let m = Manifest::load(manifest)?;
    let size = cfg.input_size as u32;
    let train_set = load_split(&m, Split::Train, size)?;
    let val_set = load_split(&m, Split::Val, size)?;
    create_dir(out_dir)?;
    write_text(&out_dir.join("config.toml"), &rc.render())?;
    cfg.model_config().save(&out_dir.join("model.toml"))?;
    let model = ModelAssembly::new(cfg.model_config(), cfg.seed)?;
    log::info!(
        "training {} ({} parameters) on {} images, validating on {}",
        cfg.attention,
        model.parameter_count(),
        train_set.len(),
        val_set.len()
    );
    let outcome = train(model, &train_set, &val_set, cfg)?;
    write_epoch_log(&out_dir.join("epochs.csv"), &outcome.logs)?;
    outcome.best.save(&out_dir.join("best.ckpt"))?;
    outcome.model.save(&out_dir.join("final.ckpt"))?;
    let val = evaluate(&outcome.best, &val_set, cfg.batch_size)?.report;
    val.save(&out_dir.join("val_report.toml"))?;
    say!("best epoch {}: val accuracy {:.4}", outcome.best_epoch, val.accuracy);
    if m.in_split(Split::Test).next().is_some() {
        let test_set = load_split(&m, Split::Test, size)?;
        let test = evaluate(&outcome.best, &test_set, cfg.batch_size)?.report;
        test.save(&out_dir.join("test_report.toml"))?;
        say!("test accuracy {:.4}", test.accuracy);
    }
    Ok(())
}

/// Writes `config.toml`, `ablation.csv` and `<mode>.report.toml` per variant.
fn run_ablate(rc: &RunConfig, modes: &[AttentionMode], manifest: &Path, out_dir: &Path) -> Result<()> {
    if modes.is_empty() {
        return Err(Error::Config("--modes is empty".into()));
    }
    let cfg = &rc.train;
    let m = Manifest::load(manifest)?;
    let size = cfg.input_size as u32;
    let sets = [Split::Train, Split::Val, Split::Test].map(|s| load_split(&m, s, size));
    let [train_set, val_set, test_set] = sets;
    let rows = run_ablation(cfg, modes, &train_set?, &val_set?, &test_set?)?;
    create_dir(out_dir)?;
    write_text(&out_dir.join("config.toml"), &rc.render())?;
    let table = ablation_csv(&rows);
    write_text(&out_dir.join("ablation.csv"), &table)?;
    for r in &rows {
        r.report.save(&out_dir.join(format!("{}.report.toml", r.mode)))?;
    }
    say!("{}", table.trim_end());
    Ok(())
}
