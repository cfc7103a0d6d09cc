//! Config-driven experiment pipeline with on-disk artifact reuse.
//!
//! Layout of one run, `<out>/runs/<run-id>/`:
//!
//! ```text
//! config.txt            canonical config (its hash is the run id)
//! data/<dataset>/       decoy dataset
//! unrefined/            checkpoint, losses.csv, trace.csv
//! <method>/             one per refinement method
//! eval/<label>.json     accuracy + AR/AP curves on the clean test split
//! report/               accuracy.csv, summary_ar_ap.csv, curves.csv, ...
//! saliency/<label>/     gallery rows (optional)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::datasets::{load_source, Limits};
use crate::decoygen::{build_decoy_dataset, DecoyDatasetManifest, DecoyInstance, DecoyParams, ObjectMaskStrategy, Split};
use crate::error::{Error, Result};
use crate::evalmetrics::{default_thresholds, evaluate, EvalReport};
use crate::exec::Execution;
use crate::modelzoo::{fit_unrefined_on, preset, ArchitectureSpec, ModelHandle, TrainConfig};
use crate::refine::{refine_on, RefineConfig};
use crate::report::{emit_report, sample_indices, saliency_gallery, ReportStatus};
use crate::xblloss::{ExplanationMethod, LossCoefficients};

pub const DEVICE_ENV: &str = "XBLD_DEVICE";
const DONE_MARKER: &str = ".complete";

/// Only CPU execution is available; `auto` resolves to it.
pub fn resolve_device() -> Result<&'static str> {
    match std::env::var(DEVICE_ENV).as_deref() {
        Err(_) | Ok("") | Ok("auto") | Ok("cpu") => Ok("cpu"),
        Ok(other) => Err(Error::InvalidConfig(format!("{DEVICE_ENV}={other}: only `cpu` (or `auto`) is supported by this build"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub preset: String,
    pub width_scale: f64,
    pub seed: u64,
    pub patch_size: usize,
    pub strategy: Option<ObjectMaskStrategy>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub epochs: usize,
    pub batch_size: Option<usize>,
    pub validation_fraction: f64,
    pub refine_epochs: usize,
    pub methods: Vec<ExplanationMethod>,
    pub coeffs: LossCoefficients,
    pub epsilon: f64,
    pub stop_loss: Option<f64>,
    pub thresholds: Vec<f64>,
    pub gallery: usize,
    pub out: PathBuf,
}

/// Keys accepted in config files and `--set` overrides.
pub const KEYS: [&str; 20] = [
    "dataset",
    "preset",
    "width_scale",
    "seed",
    "patch_size",
    "strategy",
    "train_limit",
    "test_limit",
    "epochs",
    "batch_size",
    "validation_fraction",
    "refine_epochs",
    "methods",
    "lambda1",
    "lambda2",
    "lambda",
    "epsilon",
    "stop_loss",
    "thresholds",
    "gallery",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value `{v}` for `{key}`")))
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl ExperimentConfig {
    /// Later pairs win, so CLI overrides go last.
    pub fn from_pairs(pairs: &[(String, String)], out: PathBuf) -> Result<Self> {
        let mut map: BTreeMap<&str, &str> = BTreeMap::new();
        for (k, v) in pairs {
            if !KEYS.contains(&k.as_str()) && k != "out" {
                return Err(Error::InvalidConfig(format!("unknown config key `{k}`")));
            }
            map.insert(k.as_str(), v.as_str());
        }
        let get = |k: &str| map.get(k).copied();
        let req = |k: &str| get(k).ok_or_else(|| Error::InvalidConfig(format!("`{k}` is required")));
        let opt = |k: &str| -> Result<Option<usize>> { get(k).map(|v| parse(k, v)).transpose() };
        let defaults = LossCoefficients::default();
        let cfg = ExperimentConfig {
            dataset: req("dataset")?.to_string(),
            preset: req("preset")?.to_string(),
            seed: parse("seed", req("seed")?)?,
            width_scale: get("width_scale").map(|v| parse("width_scale", v)).transpose()?.unwrap_or(1.0),
            patch_size: get("patch_size").map(|v| parse("patch_size", v)).transpose()?.unwrap_or(4),
            strategy: get("strategy").map(ObjectMaskStrategy::from_str).transpose()?,
            train_limit: opt("train_limit")?,
            test_limit: opt("test_limit")?,
            epochs: get("epochs").map(|v| parse("epochs", v)).transpose()?.unwrap_or(20),
            batch_size: opt("batch_size")?,
            validation_fraction: get("validation_fraction").map(|v| parse("validation_fraction", v)).transpose()?.unwrap_or(0.1),
            refine_epochs: get("refine_epochs").map(|v| parse("refine_epochs", v)).transpose()?.unwrap_or(50),
            methods: match get("methods") {
                Some(v) => v.split(',').filter(|s| !s.trim().is_empty()).map(|s| s.trim().parse()).collect::<Result<_>>()?,
                None => vec![ExplanationMethod::XblD, ExplanationMethod::Rrr],
            },
            coeffs: LossCoefficients {
                lambda1: get("lambda1").map(|v| parse("lambda1", v)).transpose()?.unwrap_or(defaults.lambda1),
                lambda2: get("lambda2").map(|v| parse("lambda2", v)).transpose()?.unwrap_or(defaults.lambda2),
                lambda: get("lambda").map(|v| parse("lambda", v)).transpose()?.unwrap_or(defaults.lambda),
            },
            epsilon: get("epsilon").map(|v| parse("epsilon", v)).transpose()?.unwrap_or(0.0),
            stop_loss: get("stop_loss").map(|v| parse("stop_loss", v)).transpose()?,
            thresholds: match get("thresholds") {
                Some(v) => v.split(',').map(|s| parse("thresholds", s)).collect::<Result<_>>()?,
                None => default_thresholds(),
            },
            gallery: get("gallery").map(|v| parse("gallery", v)).transpose()?.unwrap_or(0),
            out: get("out").map(PathBuf::from).unwrap_or(out),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[(String, String)], out: PathBuf) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = parse_pairs(&text)?;
        pairs.extend_from_slice(overrides);
        Self::from_pairs(&pairs, out)
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture_template()?.validate()?;
        if !(self.width_scale > 0.0) {
            return Err(Error::InvalidConfig("width_scale must be positive".into()));
        }
        if self.methods.is_empty() && self.refine_epochs > 0 {
            log::info!("no refinement methods configured; only the unrefined model is evaluated");
        }
        self.train_config().validate()?;
        self.coeffs.validate()?;
        if self.refine_epochs == 0 && !self.methods.is_empty() {
            return Err(Error::InvalidConfig("refine_epochs must be at least 1 when methods are configured".into()));
        }
        if self.thresholds.is_empty() || self.thresholds.windows(2).any(|w| w[1] <= w[0]) || self.thresholds.iter().any(|t| !(0.0..100.0).contains(t)) {
            return Err(Error::InvalidConfig("thresholds must be strictly increasing values in [0, 100)".into()));
        }
        let looks_like_path = self.dataset.contains('/') || Path::new(&self.dataset).exists();
        if looks_like_path && !Path::new(&self.dataset).is_dir() {
            return Err(Error::InvalidConfig(format!("dataset directory {} does not exist", self.dataset)));
        }
        Ok(())
    }

    fn architecture_template(&self) -> Result<ArchitectureSpec> {
        Ok(preset(&self.preset)?.with_width_scale(self.width_scale))
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(if self.preset == "coco2" { 16 } else { 32 })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size(),
            seed: self.seed,
            stop_loss: None,
            validation_fraction: self.validation_fraction,
        }
    }

    pub fn refine_config(&self, method: ExplanationMethod) -> RefineConfig {
        RefineConfig {
            method,
            epochs: self.refine_epochs,
            coeffs: self.coeffs,
            stop_loss: self.stop_loss,
            seed: self.seed,
            batch_size: self.batch_size(),
            epsilon: self.epsilon,
            snapshot_accuracy: false,
        }
    }

    /// Sorted `key=value` lines of every setting that affects results.
    pub fn canonical(&self) -> String {
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_else(|| "all".into());
        let lines = [
            format!("batch_size={}", self.batch_size()),
            format!("dataset={}", self.dataset),
            format!("epochs={}", self.epochs),
            format!("epsilon={}", self.epsilon),
            format!("gallery={}", self.gallery),
            format!("lambda={}", self.coeffs.lambda),
            format!("lambda1={}", self.coeffs.lambda1),
            format!("lambda2={}", self.coeffs.lambda2),
            format!("methods={}", self.methods.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(",")),
            format!("patch_size={}", self.patch_size),
            format!("preset={}", self.preset),
            format!("refine_epochs={}", self.refine_epochs),
            format!("seed={}", self.seed),
            format!("stop_loss={}", self.stop_loss.map(|s| s.to_string()).unwrap_or_else(|| "none".into())),
            format!("strategy={}", self.strategy.map(|s| s.to_string()).unwrap_or_else(|| "default".into())),
            format!("test_limit={}", opt(self.test_limit)),
            format!("thresholds={}", self.thresholds.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")),
            format!("train_limit={}", opt(self.train_limit)),
            format!("validation_fraction={}", self.validation_fraction),
            format!("width_scale={}", self.width_scale),
        ];
        lines.join("\n") + "\n"
    }

    pub fn run_id(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join("runs").join(self.run_id())
    }
}

/// A failed pipeline stage; artifacts of earlier stages stay on disk.
#[derive(Debug, thiserror::Error)]
#[error("stage `{stage}` failed: {source}")]
pub struct StageError {
    pub stage: String,
    #[source]
    pub source: Error,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T, StageError> {
    r.map_err(|source| StageError {
        stage: name.to_string(),
        source,
    })
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub run_dir: PathBuf,
    pub reports: Vec<EvalReport>,
    pub status: ReportStatus,
    /// Stages that did work in this invocation (empty on a full rerun).
    pub executed: Vec<String>,
}

fn done(dir: &Path) -> bool {
    dir.join(DONE_MARKER).exists()
}

fn mark_done(dir: &Path) -> Result<()> {
    let p = dir.join(DONE_MARKER);
    fs::write(&p, b"").map_err(|e| Error::io(&p, e))
}

fn find_dataset(data_root: &Path) -> Option<PathBuf> {
    let entries = fs::read_dir(data_root).ok()?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')) && p.join("dataset.json").is_file())
        .collect();
    dirs.sort();
    dirs.into_iter().next()
}

/// decoy → unrefined fit → refinement per method → clean-test evaluation →
/// report (→ gallery). Each stage reuses its artifacts when present.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutcome, StageError> {
    stage("validate", cfg.validate())?;
    let run_dir = cfg.run_dir();
    stage("setup", fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e)))?;
    let cfg_path = run_dir.join("config.txt");
    stage("setup", fs::write(&cfg_path, cfg.canonical()).map_err(|e| Error::io(&cfg_path, e)))?;
    let mut executed = Vec::new();
    let exec = Execution::Parallel;

    let data_root = run_dir.join("data");
    let manifest = match find_dataset(&data_root) {
        Some(dir) => stage("decoy", DecoyDatasetManifest::load(&dir))?,
        None => {
            executed.push("decoy".to_string());
            let limits = Limits {
                train: cfg.train_limit,
                test: cfg.test_limit,
            };
            let source = stage("decoy", load_source(&cfg.dataset, limits, cfg.patch_size))?;
            let params = DecoyParams {
                patch_size: cfg.patch_size,
                obj_mask_strategy: cfg.strategy.unwrap_or(source.default_strategy),
                seed: cfg.seed,
            };
            stage("decoy", build_decoy_dataset(&source, &params, &data_root, exec))?
        }
    };
    let info = &manifest.info;
    let spec = stage("train", cfg.architecture_template())?.with_input((info.height, info.width, info.channels), info.num_classes);

    let mut train: Option<Vec<DecoyInstance>> = None;
    let mut load_train = |stage_name: &str| -> Result<Vec<DecoyInstance>, StageError> {
        if train.is_none() {
            train = Some(stage(stage_name, manifest.load_instances(Split::Train, exec))?);
        }
        Ok(train.clone().expect("loaded"))
    };

    let unrefined_dir = run_dir.join("unrefined");
    let unrefined = if done(&unrefined_dir) {
        stage("train", ModelHandle::load(&unrefined_dir))?
    } else {
        executed.push("train".to_string());
        let data = load_train("train")?;
        let (m, _) = stage("train", fit_unrefined_on(&spec, &data, &info.name, &cfg.train_config(), Some(&unrefined_dir)))?;
        stage("train", mark_done(&unrefined_dir))?;
        m
    };

    let mut models = vec![("unrefined".to_string(), unrefined.clone())];
    for &method in &cfg.methods {
        let name = format!("refine:{method}");
        let dir = run_dir.join(method.as_str());
        let model = if done(&dir) {
            stage(&name, ModelHandle::load(&dir))?
        } else {
            executed.push(name.clone());
            let data = load_train(&name)?;
            let (m, _) = stage(&name, refine_on(&unrefined, &data, None, &cfg.refine_config(method), Some(&dir)))?;
            stage(&name, m.save(&dir))?;
            stage(&name, mark_done(&dir))?;
            m
        };
        models.push((method.as_str().to_string(), model));
    }

    let eval_dir = run_dir.join("eval");
    stage("evaluate", fs::create_dir_all(&eval_dir).map_err(|e| Error::io(&eval_dir, e)))?;
    let mut test: Option<Vec<DecoyInstance>> = None;
    let mut reports = Vec::new();
    for (label, model) in &models {
        let name = format!("evaluate:{label}");
        let path = eval_dir.join(format!("{label}.json"));
        let report = match read_eval(&path) {
            Some(r) => r,
            None => {
                executed.push(name.clone());
                if test.is_none() {
                    test = Some(stage(&name, manifest.load_instances(Split::Test, exec))?);
                }
                let r = stage(&name, evaluate(model, test.as_deref().expect("loaded"), &cfg.thresholds, label, exec))?;
                stage(&name, write_eval(&path, &r))?;
                r
            }
        };
        reports.push(report);
    }

    let expected: Vec<String> = models.iter().map(|(l, _)| l.clone()).collect();
    let status = stage("report", emit_report(&reports, &expected, &info.name, &run_dir.join("report")))?;

    if cfg.gallery > 0 {
        let data = load_train("gallery")?;
        let idx = sample_indices(data.len(), cfg.gallery, cfg.seed);
        let picks: Vec<&DecoyInstance> = idx.iter().map(|&i| &data[i]).collect();
        for (label, model) in &models {
            let dir = run_dir.join("saliency").join(label);
            if done(&dir) {
                continue;
            }
            executed.push(format!("gallery:{label}"));
            stage("gallery", saliency_gallery(model, &picks, &dir))?;
            stage("gallery", mark_done(&dir))?;
        }
    }

    Ok(PipelineOutcome {
        run_dir,
        reports,
        status,
        executed,
    })
}

pub fn read_eval(path: &Path) -> Option<EvalReport> {
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

pub fn write_eval(path: &Path, r: &EvalReport) -> Result<()> {
    let text = serde_json::to_string_pretty(r).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(s: &str) -> Vec<(String, String)> {
        parse_pairs(s).unwrap()
    }

    #[test]
    fn missing_seed_is_rejected() {
        let e = ExperimentConfig::from_pairs(&pairs("dataset = toy\npreset = fmnist\n"), "o".into()).unwrap_err();
        assert!(e.to_string().contains("seed"));
    }

    #[test]
    fn overrides_win_and_hash_is_stable() {
        let mut p = pairs("dataset = toy # builtin\npreset = fmnist\nseed = 1\nepochs = 3\n");
        let a = ExperimentConfig::from_pairs(&p, "o".into()).unwrap();
        p.push(("epochs".into(), "4".into()));
        let b = ExperimentConfig::from_pairs(&p, "o".into()).unwrap();
        assert_eq!(b.epochs, 4);
        assert_ne!(a.run_id(), b.run_id());
        let a2 = ExperimentConfig::from_pairs(&pairs("seed=1\npreset=fmnist\ndataset=toy\nepochs=3"), "elsewhere".into()).unwrap();
        assert_eq!(a.run_id(), a2.run_id(), "key order and output root do not change the id");
        assert_eq!(a.thresholds.len(), 12);
    }

    #[test]
    fn rejects_unknown_keys_and_presets() {
        assert!(ExperimentConfig::from_pairs(&pairs("dataset=toy\npreset=fmnist\nseed=1\nlr=3"), "o".into()).is_err());
        assert!(matches!(
            ExperimentConfig::from_pairs(&pairs("dataset=toy\npreset=resnet\nseed=1"), "o".into()),
            Err(Error::UnknownPreset(_))
        ));
        assert!(ExperimentConfig::from_pairs(&pairs("dataset=/no/such/dir\npreset=fmnist\nseed=1"), "o".into()).is_err());
    }
}
