use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use xbld::datasets::{load_source, Limits};
use xbld::decoygen::{build_decoy_dataset, DecoyDatasetManifest, DecoyParams, ObjectMaskStrategy, Split};
use xbld::evalmetrics::{default_thresholds, evaluate, sweep, write_curves_csv, EvalReport};
use xbld::exec::Execution;
use xbld::experiment::{read_eval, resolve_device, run_pipeline, write_eval, ExperimentConfig};
use xbld::modelzoo::{fit_unrefined, preset, ModelHandle, TrainConfig};
use xbld::refine::{refine, RefineConfig};
use xbld::report::{emit_report, sample_indices, saliency_gallery, ReportStatus};
use xbld::xblloss::{ExplanationMethod, LossCoefficients};
use xbld::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_STAGE: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "xbld", version, about = "Decoy datasets, Grad-CAM refinement (XBL-D, RRR, RRR-G) and AR/AP evaluation")]
struct Cli {
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Run without data parallelism.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a decoy dataset from a source dataset.
    Decoy(DecoyArgs),
    /// Fit an unrefined (cross-entropy only) model.
    Train(TrainArgs),
    /// Refine a fitted model with an explanation loss.
    Refine(RefineArgs),
    /// Clean-test accuracy plus AR/AP curves.
    Evaluate(EvalArgs),
    /// AR/AP curves only, on either split.
    Sweep(SweepArgs),
    /// Tables and curve files from evaluation results.
    Report(ReportArgs),
    /// Every stage from a config file, reusing finished artifacts.
    Pipeline(PipelineArgs),
    /// Saliency gallery rows for sampled instances.
    Gallery(GalleryArgs),
}

#[derive(Args)]
struct DecoyArgs {
    /// Builtin name (fashion-mnist, cifar10, toy[:train:test]) or directory.
    #[arg(long)]
    source: String,
    #[arg(long, default_value_t = 4)]
    patch_size: usize,
    /// intensity[:tau], segmentation or corners[:patch]; defaults per source.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    preset: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    width_scale: f64,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    validation_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    method: String,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 2.7)]
    lambda1: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda2: f64,
    #[arg(long, default_value_t = 1e-5)]
    lambda: f64,
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    #[arg(long)]
    stop_loss: Option<f64>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Method label in the outputs; defaults to the checkpoint's method.
    #[arg(long)]
    label: Option<String>,
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    label: Option<String>,
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Evaluation JSON files written by `evaluate`.
    #[arg(long = "eval", required = true, num_args = 1..)]
    evals: Vec<PathBuf>,
    /// Methods the report should contain; missing ones make it partial.
    #[arg(long, value_delimiter = ',')]
    expect: Vec<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// `key=value` overrides (win over the file).
    #[arg(long = "set", value_parser = parse_kv)]
    overrides: Vec<(String, String)>,
    /// Root under which `runs/<run-id>/` is created.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct GalleryArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

/// Failure with the exit code it maps to.
struct Fail {
    code: u8,
    message: String,
}

impl Fail {
    fn validation(e: impl std::fmt::Display) -> Self {
        Fail {
            code: EXIT_VALIDATION,
            message: e.to_string(),
        }
    }

    fn stage(stage: &str, e: impl std::fmt::Display) -> Self {
        Fail {
            code: EXIT_STAGE,
            message: format!("stage `{stage}` failed: {e}"),
        }
    }
}

/// Configuration-type errors are validation failures; everything else is a
/// stage failure.
fn classify(stage: &str, e: Error) -> Fail {
    match e {
        Error::InvalidConfig(_) | Error::UnknownPreset(_) => Fail::validation(e),
        other => Fail::stage(stage, other),
    }
}

fn need_dir(p: &Path, what: &str) -> Result<(), Fail> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Fail::validation(format!("{what} directory {} does not exist", p.display())))
    }
}

fn parse_split(s: &str) -> Result<Split, Fail> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(Fail::validation(format!("split must be train or test, got `{s}`"))),
    }
}

fn load_model(dir: &Path) -> Result<ModelHandle, Fail> {
    need_dir(dir, "checkpoint")?;
    ModelHandle::load(dir).map_err(|e| Fail::stage("load checkpoint", e))
}

fn load_data(dir: &Path) -> Result<DecoyDatasetManifest, Fail> {
    need_dir(dir, "data")?;
    DecoyDatasetManifest::load(dir).map_err(|e| Fail::stage("load data", e))
}

fn run(cli: Cli) -> Result<ExitCode, Fail> {
    resolve_device().map_err(Fail::validation)?;
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match cli.cmd {
        Cmd::Decoy(a) => {
            let strategy = a.strategy.as_deref().map(str::parse::<ObjectMaskStrategy>).transpose().map_err(Fail::validation)?;
            if a.patch_size == 0 {
                return Err(Fail::validation("patch size must be positive"));
            }
            let source = load_source(
                &a.source,
                Limits {
                    train: a.train_limit,
                    test: a.test_limit,
                },
                a.patch_size,
            )
            .map_err(|e| classify("decoy", e))?;
            let params = DecoyParams {
                patch_size: a.patch_size,
                obj_mask_strategy: strategy.unwrap_or(source.default_strategy),
                seed: a.seed,
            };
            let m = build_decoy_dataset(&source, &params, &a.out, exec).map_err(|e| classify("decoy", e))?;
            println!("{}", m.root.display());
        }
        Cmd::Train(a) => {
            let data = load_data(&a.data)?;
            let info = &data.info;
            let spec = preset(&a.preset)
                .map_err(Fail::validation)?
                .with_width_scale(a.width_scale)
                .with_input((info.height, info.width, info.channels), info.num_classes);
            spec.validate().map_err(Fail::validation)?;
            let cfg = TrainConfig {
                epochs: a.epochs,
                batch_size: a.batch_size.unwrap_or(if a.preset == "coco2" { 16 } else { 32 }),
                seed: a.seed,
                stop_loss: None,
                validation_fraction: a.validation_fraction,
            };
            cfg.validate().map_err(Fail::validation)?;
            let (_, report) = fit_unrefined(&spec, &data, &cfg, Some(&a.out)).map_err(|e| classify("train", e))?;
            println!("{} (best epoch {})", a.out.display(), report.best_epoch);
        }
        Cmd::Refine(a) => {
            let method: ExplanationMethod = a.method.parse().map_err(Fail::validation)?;
            let cfg = RefineConfig {
                method,
                epochs: a.epochs,
                coeffs: LossCoefficients {
                    lambda1: a.lambda1,
                    lambda2: a.lambda2,
                    lambda: a.lambda,
                },
                stop_loss: a.stop_loss,
                seed: a.seed,
                batch_size: a.batch_size,
                epsilon: a.epsilon,
                snapshot_accuracy: false,
            };
            cfg.validate().map_err(Fail::validation)?;
            let mut model = load_model(&a.checkpoint)?;
            model.set_execution(exec);
            let data = load_data(&a.data)?;
            let (refined, trace) = refine(&model, &data, &cfg, Some(&a.out)).map_err(|e| classify("refine", e))?;
            refined.save(&a.out).map_err(|e| classify("refine", e))?;
            println!("{} ({} epochs)", a.out.display(), trace.epochs.len());
        }
        Cmd::Evaluate(a) => {
            let thresholds = a.thresholds.unwrap_or_else(default_thresholds);
            let mut model = load_model(&a.checkpoint)?;
            model.set_execution(exec);
            let data = load_data(&a.data)?;
            let label = a.label.unwrap_or_else(|| model.provenance.method.clone());
            let test = data.load_instances(Split::Test, exec).map_err(|e| classify("evaluate", e))?;
            let r = evaluate(&model, &test, &thresholds, &label, exec).map_err(|e| classify("evaluate", e))?;
            std::fs::create_dir_all(&a.out).map_err(|e| Fail::stage("evaluate", e))?;
            write_eval(&a.out.join(format!("{label}.json")), &r).map_err(|e| classify("evaluate", e))?;
            write_curves_csv(&a.out.join(format!("{label}_curves.csv")), &r.curves).map_err(|e| classify("evaluate", e))?;
            println!(
                "{label}: accuracy {:.4}, AR@{t} {:.4}, AP@{t} {:.4}",
                r.accuracy,
                r.ar_at_reference,
                r.ap_at_reference,
                t = r.reference_threshold
            );
        }
        Cmd::Sweep(a) => {
            let thresholds = a.thresholds.unwrap_or_else(default_thresholds);
            let split = parse_split(&a.split)?;
            let mut model = load_model(&a.checkpoint)?;
            model.set_execution(exec);
            let data = load_data(&a.data)?;
            let label = a.label.unwrap_or_else(|| model.provenance.method.clone());
            let insts = data.load_instances(split, exec).map_err(|e| classify("sweep", e))?;
            let maps = xbld::evalmetrics::saliency_for(&model, &insts).map_err(|e| classify("sweep", e))?;
            let masks: Vec<_> = insts.iter().map(|d| d.obj_mask.clone()).collect();
            let s = sweep(&maps, &masks, &thresholds, &label, exec).map_err(|e| classify("sweep", e))?;
            if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Fail::stage("sweep", e))?;
            }
            write_curves_csv(&a.out, &[s.ar, s.ap]).map_err(|e| classify("sweep", e))?;
            if s.excluded_from_ar > 0 {
                eprintln!("{} instances with empty object masks left out of AR", s.excluded_from_ar);
            }
        }
        Cmd::Report(a) => {
            let mut reports: Vec<EvalReport> = Vec::new();
            for p in &a.evals {
                match read_eval(p) {
                    Some(r) => reports.push(r),
                    None => log::warn!("could not read evaluation {}", p.display()),
                }
            }
            if reports.is_empty() {
                return Err(Fail::validation("no readable evaluation results"));
            }
            let dataset = a.dataset.unwrap_or_else(|| reports[0].dataset.clone());
            let status = emit_report(&reports, &a.expect, &dataset, &a.out).map_err(|e| classify("report", e))?;
            if let ReportStatus::Partial { missing } = status {
                eprintln!("partial report: missing {}", missing.join(", "));
                return Ok(ExitCode::from(EXIT_PARTIAL));
            }
        }
        Cmd::Pipeline(a) => {
            if !a.config.is_file() {
                return Err(Fail::validation(format!("config file {} does not exist", a.config.display())));
            }
            let cfg = ExperimentConfig::from_file(&a.config, &a.overrides, a.out).map_err(Fail::validation)?;
            let outcome = run_pipeline(&cfg).map_err(|e| match e.source {
                Error::InvalidConfig(_) | Error::UnknownPreset(_) if e.stage == "validate" => Fail::validation(e),
                _ => Fail::stage(&e.stage, e.source),
            })?;
            println!("{}", outcome.run_dir.display());
            if outcome.executed.is_empty() {
                log::info!("all stages reused existing artifacts");
            }
            if let ReportStatus::Partial { missing } = outcome.status {
                eprintln!("partial report: missing {}", missing.join(", "));
                return Ok(ExitCode::from(EXIT_PARTIAL));
            }
        }
        Cmd::Gallery(a) => {
            let split = parse_split(&a.split)?;
            if a.count == 0 {
                return Err(Fail::validation("count must be at least 1"));
            }
            let model = load_model(&a.checkpoint)?;
            let data = load_data(&a.data)?;
            let insts = data.load_instances(split, exec).map_err(|e| classify("gallery", e))?;
            let idx = sample_indices(insts.len(), a.count, a.seed);
            let picks: Vec<_> = idx.iter().map(|&i| &insts[i]).collect();
            for p in saliency_gallery(&model, &picks, &a.out).map_err(|e| classify("gallery", e))? {
                println!("{}", p.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_VALIDATION) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
