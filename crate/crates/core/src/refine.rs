//! Refinement of a fitted model with an explanation loss.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoygen::{DecoyDatasetManifest, DecoyInstance, Split};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::modelzoo::ModelHandle;
use crate::training::{self, EpochRecord, TrainLoop};
use crate::xblloss::{CentroidCache, ExplanationMethod, LossCoefficients, Objective};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub method: ExplanationMethod,
    pub epochs: usize,
    pub coeffs: LossCoefficients,
    /// Stop once the epoch-mean total loss is ≤ σ.
    pub stop_loss: Option<f64>,
    pub seed: u64,
    pub batch_size: usize,
    pub epsilon: f64,
    /// Record clean-test accuracy after every epoch.
    pub snapshot_accuracy: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            method: ExplanationMethod::XblD,
            epochs: 50,
            coeffs: LossCoefficients::default(),
            stop_loss: None,
            seed: 0,
            batch_size: 32,
            epsilon: 0.0,
            snapshot_accuracy: false,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("refinement needs at least one epoch".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidConfig("epsilon must be nonnegative".into()));
        }
        self.coeffs.validate()?;
        if self.coeffs.lambda2 == 0.0 {
            log::warn!("{} refinement with lambda2 = 0 trains on cross-entropy only", self.method);
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RefineTrace {
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: Option<PathBuf>,
    pub centroids_computed: usize,
    pub skipped_instances: Vec<String>,
}

/// Grid-resolution centroids of every instance's object mask.
pub fn centroid_cache(instances: &[DecoyInstance], grid: (usize, usize)) -> Result<CentroidCache> {
    let mut cache = CentroidCache::new(grid);
    for inst in instances {
        cache.get(&inst.id, &inst.obj_mask)?;
    }
    Ok(cache)
}

pub fn refine(model: &ModelHandle, data: &DecoyDatasetManifest, cfg: &RefineConfig, out: Option<&Path>) -> Result<(ModelHandle, RefineTrace)> {
    cfg.validate()?;
    let train = data.load_instances(Split::Train, Execution::Parallel)?;
    let test = if cfg.snapshot_accuracy {
        Some(data.load_instances(Split::Test, Execution::Parallel)?)
    } else {
        None
    };
    refine_on(model, &train, test.as_deref(), cfg, out)
}

/// Continues training from `model` with the configured explanation loss.
/// With `out`, the checkpoint is rewritten after every epoch, so a numeric
/// failure leaves the last good one on disk.
pub fn refine_on(
    model: &ModelHandle,
    train: &[DecoyInstance],
    test: Option<&[DecoyInstance]>,
    cfg: &RefineConfig,
    out: Option<&Path>,
) -> Result<(ModelHandle, RefineTrace)> {
    cfg.validate()?;
    let mut refined = model.clone();
    let parent = format!("{}@{}", model.provenance.method, model.provenance.epochs);
    let base_epochs = model.provenance.epochs;
    refined.provenance.method = cfg.method.as_str().to_string();
    refined.provenance.coefficients = Some(cfg.coeffs);
    refined.provenance.parent = Some(parent);
    refined.provenance.seed = cfg.seed;

    let mut lp = TrainLoop {
        objective: Objective {
            method: Some(cfg.method),
            coeffs: cfg.coeffs,
            epsilon: cfg.epsilon,
        },
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        stop_loss: cfg.stop_loss,
        validation_fraction: 0.0,
        learning_rate: model.spec.learning_rate,
        snapshot_test: test,
        losses_csv: out.map(|d| d.join(training::LOSSES_FILE)),
    };
    let spec = refined.spec.clone();
    let prov = refined.provenance.clone();
    let mut records_so_far: Vec<EpochRecord> = Vec::new();
    let mut hook = |net: &crate::nn::Network<f32>, rec: &EpochRecord| -> Result<()> {
        records_so_far.push(rec.clone());
        if let Some(dir) = out {
            let snapshot = ModelHandle {
                spec: spec.clone(),
                provenance: crate::modelzoo::Provenance {
                    epochs: base_epochs + rec.epoch,
                    final_loss: Some(rec.mean.clone()),
                    ..prov.clone()
                },
                net: net.clone(),
            };
            snapshot.save(dir)?;
            training::write_trace(&dir.join(training::TRACE_FILE), &records_so_far)?;
        }
        Ok(())
    };
    let outcome = lp.run_with_hook(&mut refined.net, train, &mut hook)?;
    refined.provenance.epochs = base_epochs + outcome.records.len();
    refined.provenance.final_loss = outcome.records.last().map(|r| r.mean.clone());
    if !outcome.skipped_instances.is_empty() {
        log::warn!("{} instances had no usable object centroid", outcome.skipped_instances.len());
    }
    Ok((
        refined,
        RefineTrace {
            checkpoint: out.map(|d| d.join(crate::modelzoo::CHECKPOINT_FILE)),
            epochs: outcome.records,
            centroids_computed: outcome.centroids_computed,
            skipped_instances: outcome.skipped_instances,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::toy_shapes;
    use crate::decoygen::{generate_instances, BinaryMask, DecoyParams, ObjectMaskStrategy};
    use crate::modelzoo::{fit_unrefined_on, preset, TrainConfig};

    fn toy(n: usize) -> (Vec<DecoyInstance>, Vec<DecoyInstance>) {
        let src = toy_shapes(n, n / 2, 5);
        let params = DecoyParams {
            patch_size: 4,
            obj_mask_strategy: ObjectMaskStrategy::IntensityThreshold { tau: 0.1 },
            seed: 3,
        };
        generate_instances(&src, &params, Execution::Parallel).unwrap()
    }

    #[test]
    fn centroid_cache_full_grid() {
        let mut inst = toy(8).0.remove(0);
        inst.obj_mask = BinaryMask::ones(28, 28);
        let cache = centroid_cache(std::slice::from_ref(&inst), (14, 14)).unwrap();
        let mut cache2 = cache.clone();
        assert_eq!(cache2.get(&inst.id, &inst.obj_mask).unwrap(), Some((6.5, 6.5)));
        assert_eq!(cache2.computed(), 1);
    }

    #[test]
    fn refine_runs_logs_and_stops_early() {
        let (train, _) = toy(48);
        let spec = preset("fmnist").unwrap().with_width_scale(0.02).with_input((28, 28, 1), 4);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            seed: 1,
            ..TrainConfig::default()
        };
        let (model, _) = fit_unrefined_on(&spec, &train, "toy", &cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let rc = RefineConfig {
            epochs: 3,
            batch_size: 16,
            stop_loss: Some(1e9),
            ..RefineConfig::default()
        };
        let (refined, trace) = refine_on(&model, &train, None, &rc, Some(dir.path())).unwrap();
        assert_eq!(trace.epochs.len(), 1, "σ above any loss stops after the first epoch");
        assert_eq!(refined.provenance.method, "xbl_d");
        assert!(dir.path().join("checkpoint.bin").exists());
        let losses = std::fs::read_to_string(dir.path().join("losses.csv")).unwrap();
        assert!(losses.starts_with("step,ce,expl,reg,total\n"));
        assert!(trace.centroids_computed <= train.len());
        let back = ModelHandle::load(dir.path()).unwrap();
        assert_eq!(back.net.params(), refined.net.params());
    }

    #[test]
    fn rejects_bad_config() {
        let rc = RefineConfig {
            epochs: 0,
            ..RefineConfig::default()
        };
        assert!(rc.validate().is_err());
    }
}
