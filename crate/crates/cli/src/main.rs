mod config;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use distilseg::dataset::CaseCache;
use distilseg::distill::{checkpoint_guidance, pseudo_label};
use distilseg::eval::{evaluate_dataset, EvalReport};
use distilseg::infer::segment;
use distilseg::models::Checkpoint;
use distilseg::phantoms::generate_cohort;
use distilseg::pipeline::{
    evaluate_student, evaluate_teacher, prepare, run_scenario, train_student, train_teacher,
    ExperimentConfig, ScenarioKind, StudentVariant, TrainedModel,
};
use distilseg::preprocess::{GuidanceMode, PreprocessConfig};
use distilseg::volume::{load_volume, save_volume, DatasetManifest, Split};
use distilseg::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "distilseg",
    version,
    about = "Teacher-student tumor segmentation for 3D CT"
)]
struct Cli {
    /// Root directory all relative paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// TOML or JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, e.g. `--set teacher_training.learning_rate=1e-3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Guidance {
    Box,
    Point,
}

impl From<Guidance> for GuidanceMode {
    fn from(g: Guidance) -> Self {
        match g {
            Guidance::Box => GuidanceMode::Box,
            Guidance::Point => GuidanceMode::Point,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Variant {
    Baseline,
    So,
    Do,
}

impl From<Variant> for StudentVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Baseline => StudentVariant::Baseline,
            Variant::So => StudentVariant::So,
            Variant::Do => StudentVariant::Do,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scenario {
    Vast,
    Scarce,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Validation => Some(Split::Validation),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a synthetic CT cohort with masks, lung masks and a manifest.
    GeneratePhantoms {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        /// How many of the cases keep only box annotations.
        #[arg(long, default_value_t = 0)]
        weak: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Splits, balances and caches a dataset.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fail unless every record has a lung mask.
        #[arg(long)]
        require_lungmask: bool,
    },
    /// Trains a guided teacher on the strong records.
    TrainTeacher {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        guidance: Guidance,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pseudo-labels the weak records with a trained teacher.
    PseudoLabel {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to the mode recorded in the checkpoint.
        #[arg(long, value_enum)]
        guidance: Option<Guidance>,
        #[arg(long)]
        threshold: Option<f32>,
        #[arg(long)]
        clip_to_box: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains a student on strong (and pseudo) labels.
    TrainStudent {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        pseudo: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: Variant,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores predictions, or a checkpoint on a labelled manifest.
    Evaluate {
        #[arg(long, requires = "gt", conflicts_with = "model")]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, requires = "manifest")]
        model: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs a complete vast or scarce experiment.
    RunScenario {
        #[arg(long, value_enum)]
        scenario: Scenario,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segments one CT volume with a student checkpoint.
    Segment {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        lungmask: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
    },
    /// Writes a PNG of one axial slice with masks overlaid.
    Plot {
        #[arg(long)]
        image: PathBuf,
        /// Reference mask (red).
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Predicted mask (green).
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Axial slice; defaults to the one with the most foreground.
        #[arg(long)]
        slice: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Preprocessing cache; defaults to `cache/` next to the manifest.
    #[arg(long)]
    cache: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<(DatasetManifest, CaseCache)> {
        let m = DatasetManifest::load(&self.manifest)?;
        let dir = self
            .cache
            .clone()
            .unwrap_or_else(|| m.base_dir.join("cache"));
        Ok((m, CaseCache::new(dir)?))
    }
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    write_json(&out.join("report.json"), report)?;
    let table = report.table();
    let p = out.join("table.md");
    fs::write(&p, &table).map_err(|e| Error::io(&p, e))?;
    print!("{table}");
    Ok(())
}

fn print_trained(t: &TrainedModel) {
    let how = if t.reused { "reused" } else { "trained" };
    println!(
        "{how} {} (best validation DSC {:.4} at epoch {})",
        t.checkpoint.display(),
        t.best_validation_dsc,
        t.best_epoch
    );
}

fn checkpoint_preprocess(ckpt: &Checkpoint, cfg: &ExperimentConfig) -> PreprocessConfig {
    ckpt.header
        .metadata
        .get("preprocess")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_else(|| cfg.preprocess.clone())
}

fn run(cli: Cli) -> Result<()> {
    std::env::set_current_dir(&cli.workdir).map_err(|e| Error::io(&cli.workdir, e))?;
    let mut cfg = config::load_config(cli.config.as_deref(), &cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::GeneratePhantoms { n, weak, out } => {
            let files = generate_cohort(n as usize, weak, &cfg.phantoms, cfg.seed, &out)?;
            println!(
                "wrote {} cases to {}",
                files.manifest.len(),
                files.manifest_path.display()
            );
        }
        Command::Prepare {
            manifest,
            out,
            require_lungmask,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let cache = CaseCache::new(out.join("cache"))?;
            let (prepared, report) = prepare(&m, &cfg, &cache, require_lungmask)?;
            let out_abs = std::path::absolute(&out).map_err(|e| Error::io(&out, e))?;
            let rebased = DatasetManifest {
                base_dir: std::path::absolute(&prepared.base_dir)
                    .map_err(|e| Error::io(&out, e))?,
                ..prepared
            }
            .rebase(&out_abs);
            rebased.save(out.join("manifest.json"))?;
            write_json(&out.join("prepare_report.json"), &report)?;
            write_json(&out.join("config.json"), &cfg)?;
            println!(
                "{} cases ({} cached, {} prepared); splits {:?}",
                report.cases, report.cache_hits, report.cache_misses, report.split_counts
            );
        }
        Command::TrainTeacher {
            data,
            guidance,
            out,
        } => {
            let (m, cache) = data.load()?;
            let t = train_teacher(&m, &cache, guidance.into(), &cfg, &out)?;
            write_json(&out.join("config.json"), &cfg)?;
            print_trained(&t);
        }
        Command::PseudoLabel {
            teacher,
            manifest,
            guidance,
            threshold,
            clip_to_box,
            out,
        } => {
            let ckpt = Checkpoint::load(&teacher)?;
            let mode = guidance
                .map(GuidanceMode::from)
                .or_else(|| checkpoint_guidance(&ckpt))
                .ok_or_else(|| {
                    Error::Validation("checkpoint records no guidance mode; pass --guidance".into())
                })?;
            if let Some(t) = threshold {
                cfg.distill.threshold = t;
            }
            cfg.distill.clip_to_box |= clip_to_box;
            let m = DatasetManifest::load(&manifest)?;
            let pc = checkpoint_preprocess(&ckpt, &cfg);
            let r = pseudo_label(&ckpt, &m, mode, &cfg.distill, &pc, &out)?;
            println!(
                "{} records, {} tumors, {} empty; manifest {}",
                r.report.records,
                r.report.stacks,
                r.report.empty_stacks,
                r.manifest_path.display()
            );
        }
        Command::TrainStudent {
            data,
            pseudo,
            variant,
            out,
        } => {
            let (m, cache) = data.load()?;
            let variant = StudentVariant::from(variant);
            let p = match (&pseudo, variant) {
                (Some(_), StudentVariant::Baseline) => {
                    log::info!("baseline students train on strong labels only; ignoring --pseudo");
                    None
                }
                (Some(p), _) => Some(DatasetManifest::load(p)?),
                (None, _) => None,
            };
            let t = train_student(&m, p.as_ref(), variant, &cache, &cfg, &out)?;
            write_json(&out.join("config.json"), &cfg)?;
            print_trained(&t);
        }
        Command::Evaluate {
            pred,
            gt,
            model,
            manifest,
            split,
            out,
        } => {
            let report = match (pred, gt, model, manifest) {
                (Some(p), Some(g), None, _) => evaluate_dataset(
                    &DatasetManifest::load(p)?,
                    &DatasetManifest::load(g)?,
                    &cfg.eval,
                )?,
                (None, _, Some(ckpt), Some(m)) => {
                    let ckpt = Checkpoint::load(ckpt)?;
                    let m = DatasetManifest::load(m)?;
                    if ckpt.header.spec.in_channels == 2 {
                        let mode = checkpoint_guidance(&ckpt).unwrap_or(GuidanceMode::Box);
                        cfg.preprocess = checkpoint_preprocess(&ckpt, &cfg);
                        evaluate_teacher(&ckpt, &m, split.split(), mode, &cfg)?
                    } else {
                        evaluate_student(
                            &ckpt,
                            &m,
                            split.split(),
                            &cfg,
                            Some(&out.join("predictions")),
                        )?
                    }
                }
                _ => {
                    return Err(Error::Validation(
                        "give either --pred and --gt, or --model and --manifest".into(),
                    ))
                }
            };
            write_report(&out, &report)?;
        }
        Command::RunScenario { scenario, out } => {
            let kind = match scenario {
                Scenario::Vast => ScenarioKind::Vast,
                Scenario::Scarce => ScenarioKind::Scarce,
            };
            let s = run_scenario(kind, &cfg, &out)?;
            println!("Teachers\n{}", s.teacher_table());
            println!("Students\n{}", s.student_table());
        }
        Command::Segment {
            image,
            lungmask,
            model,
            out,
            threshold,
        } => {
            let ckpt = Checkpoint::load(&model)?;
            let pc = checkpoint_preprocess(&ckpt, &cfg);
            let img = load_volume(&image)?;
            let lungs = load_volume(&lungmask)?;
            let mask = segment(&ckpt.to_model()?, &img, &lungs, threshold, &pc)?;
            save_volume(&mask, &out)?;
            println!(
                "{} tumor voxels written to {}",
                mask.count_nonzero(),
                out.display()
            );
        }
        Command::Plot {
            image,
            mask,
            pred,
            slice,
            out,
        } => {
            let img = load_volume(&image)?;
            let reference = mask.map(load_volume).transpose()?;
            let prediction = pred.map(load_volume).transpose()?;
            let z = slice.unwrap_or_else(|| {
                reference
                    .as_ref()
                    .or(prediction.as_ref())
                    .map_or(img.shape()[2] / 2, plot::busiest_slice)
            });
            let png = plot::overlay(&img, reference.as_ref(), prediction.as_ref(), z)?;
            plot::save_png(&png, &out)?;
            println!("slice {z} written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
