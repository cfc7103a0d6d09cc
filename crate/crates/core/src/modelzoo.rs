//! Architecture presets, model handles with checkpoints, and unrefined
//! (cross-entropy only) training.

use std::fs;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoygen::{DecoyDatasetManifest, DecoyInstance, LabeledImage, Split};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::nn::{ConvBlock, Network};
use crate::tensor::{Scalar, Tensor};
use crate::training::{self, EpochRecord, TrainLoop};
use crate::xblloss::{LossBreakdown, LossCoefficients, Objective};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub conv_blocks: Vec<ConvBlock>,
    pub fc_sizes: Vec<usize>,
    pub num_classes: usize,
    /// `(H, W, C)`.
    pub input_shape: (usize, usize, usize),
    pub learning_rate: f64,
}

fn blocks(filters: &[usize], pool: bool) -> Vec<ConvBlock> {
    filters
        .iter()
        .map(|&f| ConvBlock {
            filters: f,
            followed_by_maxpool: pool,
        })
        .collect()
}

/// The three tuned architectures.
pub fn preset(name: &str) -> Result<ArchitectureSpec> {
    match name {
        "fmnist" => Ok(ArchitectureSpec {
            conv_blocks: blocks(&[160], false),
            fc_sizes: vec![992, 800],
            num_classes: 10,
            input_shape: (28, 28, 1),
            learning_rate: 1.158e-4,
        }),
        "cifar10" => Ok(ArchitectureSpec {
            conv_blocks: blocks(&[250, 300], false),
            fc_sizes: vec![912],
            num_classes: 10,
            input_shape: (32, 32, 3),
            learning_rate: 1.267e-4,
        }),
        "coco2" => Ok(ArchitectureSpec {
            conv_blocks: blocks(&[160, 352, 416, 224], true),
            fc_sizes: vec![480],
            num_classes: 2,
            input_shape: (224, 224, 3),
            learning_rate: 1.789e-5,
        }),
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}

impl ArchitectureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.conv_blocks.is_empty() {
            return Err(Error::InvalidConfig("architecture needs at least one conv block".into()));
        }
        if self.fc_sizes.is_empty() {
            return Err(Error::InvalidConfig("architecture needs at least one fully connected layer".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        if self.conv_blocks.iter().any(|b| b.filters == 0) || self.fc_sizes.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Same topology with every conv/fc width multiplied by `factor`
    /// (rounded, at least 1). Used for desk-scale runs.
    pub fn with_width_scale(&self, factor: f64) -> Self {
        let s = |n: usize| ((n as f64 * factor).round() as usize).max(1);
        ArchitectureSpec {
            conv_blocks: self
                .conv_blocks
                .iter()
                .map(|b| ConvBlock {
                    filters: s(b.filters),
                    followed_by_maxpool: b.followed_by_maxpool,
                })
                .collect(),
            fc_sizes: self.fc_sizes.iter().map(|&n| s(n)).collect(),
            ..self.clone()
        }
    }

    pub fn with_input(&self, input_shape: (usize, usize, usize), num_classes: usize) -> Self {
        ArchitectureSpec {
            input_shape,
            num_classes,
            ..self.clone()
        }
    }

    /// Spatial size of the last-conv feature maps.
    pub fn feature_grid(&self) -> (usize, usize) {
        let (mut h, mut w, _) = self.input_shape;
        for b in &self.conv_blocks {
            if b.followed_by_maxpool {
                h /= 2;
                w /= 2;
            }
        }
        (h, w)
    }

    pub fn build<F: Scalar>(&self, seed: u64) -> Network<F> {
        let (h, w, c) = self.input_shape;
        let mut net = Network::new((c, h, w), &self.conv_blocks, &self.fc_sizes, self.num_classes);
        net.init_glorot(&mut ChaCha8Rng::seed_from_u64(seed));
        net
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset: String,
    pub seed: u64,
    pub epochs: usize,
    /// `unrefined`, `xbl_d`, `rrr` or `rrr_g`.
    pub method: String,
    #[serde(default)]
    pub coefficients: Option<LossCoefficients>,
    #[serde(default)]
    pub parent: Option<String>,
    #[serde(default)]
    pub final_loss: Option<LossBreakdown>,
}

/// A trained network with its architecture and how it was produced.
#[derive(Clone, Debug)]
pub struct ModelHandle {
    pub spec: ArchitectureSpec,
    pub provenance: Provenance,
    pub net: Network<f32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    num_params: usize,
    spec: ArchitectureSpec,
    provenance: Provenance,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const META_FILE: &str = "meta.json";
const MAGIC: &[u8; 8] = b"XBLDPAR1";

impl ModelHandle {
    pub fn new(spec: ArchitectureSpec, seed: u64, dataset: &str) -> Result<Self> {
        spec.validate()?;
        Ok(ModelHandle {
            net: spec.build(seed),
            provenance: Provenance {
                dataset: dataset.to_string(),
                seed,
                epochs: 0,
                method: "unrefined".into(),
                coefficients: None,
                parent: None,
                final_loss: None,
            },
            spec,
        })
    }

    /// Writes `checkpoint.bin` (little-endian f32 blob) and `meta.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let blob_path = dir.join(CHECKPOINT_FILE);
        let params = self.net.params();
        let mut buf = Vec::with_capacity(16 + params.len() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        let tmp = dir.join(format!("{CHECKPOINT_FILE}.tmp"));
        fs::File::create(&tmp)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let meta = CheckpointMeta {
            format: "xbld-f32-le-v1".into(),
            num_params: params.len(),
            spec: self.spec.clone(),
            provenance: self.provenance.clone(),
        };
        let meta_path = dir.join(META_FILE);
        fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n").map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let meta: CheckpointMeta = serde_json::from_reader(BufReader::new(fs::File::open(&meta_path).map_err(|e| Error::io(&meta_path, e))?))
            .map_err(|e| Error::Format {
                path: meta_path.clone(),
                message: e.to_string(),
            })?;
        let blob_path = dir.join(CHECKPOINT_FILE);
        let mut raw = Vec::new();
        fs::File::open(&blob_path)
            .and_then(|mut f| f.read_to_end(&mut raw))
            .map_err(|e| Error::io(&blob_path, e))?;
        let bad = |m: &str| Error::Format {
            path: blob_path.clone(),
            message: m.to_string(),
        };
        if raw.len() < 16 || &raw[..8] != MAGIC {
            return Err(bad("not an xbld checkpoint"));
        }
        let n = u64::from_le_bytes(raw[8..16].try_into().expect("8 bytes")) as usize;
        if n != meta.num_params || raw.len() != 16 + 4 * n {
            return Err(bad("parameter count does not match metadata"));
        }
        let params: Vec<f32> = raw[16..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let mut net: Network<f32> = {
            let (h, w, c) = meta.spec.input_shape;
            Network::new((c, h, w), &meta.spec.conv_blocks, &meta.spec.fc_sizes, meta.spec.num_classes)
        };
        if net.num_params() != n {
            return Err(bad("architecture in metadata does not match blob size"));
        }
        net.set_params(params);
        Ok(ModelHandle {
            spec: meta.spec,
            provenance: meta.provenance,
            net,
        })
    }

    pub fn set_execution(&mut self, exec: Execution) {
        self.net.set_execution(exec);
    }

    /// Inference-mode class probabilities.
    pub fn predict_proba(&self, images: &[&LabeledImage]) -> Result<Vec<Vec<f32>>> {
        let x = images_to_tensor::<f32>(images, &self.spec)?;
        let logits = self.net.logits(&x);
        Ok(logits.data().chunks(self.spec.num_classes).map(softmax).collect())
    }

    pub fn predict(&self, images: &[&LabeledImage]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(256) {
            let x = images_to_tensor::<f32>(chunk, &self.spec)?;
            let logits = self.net.logits(&x);
            out.extend(logits.data().chunks(self.spec.num_classes).map(argmax));
        }
        Ok(out)
    }
}

pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let m = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: F = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn argmax<F: PartialOrd + Copy>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Stacks images into an NCHW tensor after checking them against the architecture.
pub fn images_to_tensor<F: Scalar>(images: &[&LabeledImage], spec: &ArchitectureSpec) -> Result<Tensor<F>> {
    let (h, w, c) = spec.input_shape;
    let items = images
        .iter()
        .map(|img| {
            if (img.height(), img.width(), img.channels()) != (h, w, c) {
                return Err(Error::shape(
                    format!("{h}x{w}x{c}"),
                    format!("{}x{}x{}", img.height(), img.width(), img.channels()),
                ));
            }
            Ok(img.to_chw().into_iter().map(|v| F::of(f64::from(v))).collect())
        })
        .collect::<Result<Vec<Vec<F>>>>()?;
    Ok(Tensor::stack(&[c, h, w], items))
}

/// Logits `(B, K)` and last-conv feature maps `(B, K_filters, H_s, W_s)`.
#[derive(Clone, Debug)]
pub struct Features {
    pub logits: Tensor<f32>,
    pub feature_maps: Tensor<f32>,
}

impl Features {
    /// `(H_s, W_s)` of the feature maps.
    pub fn spatial(&self) -> (usize, usize) {
        let s = self.feature_maps.shape();
        (s[2], s[3])
    }

    pub fn filters(&self) -> usize {
        self.feature_maps.shape()[1]
    }
}

pub fn forward_with_features(model: &ModelHandle, images: &[&LabeledImage]) -> Result<Features> {
    let fl = model
        .net
        .feature_layer()
        .ok_or_else(|| Error::UnsupportedArchitecture("no convolutional layers".into()))?;
    let x = images_to_tensor::<f32>(images, &model.spec)?;
    let conv = model.net.forward(&x, 0, fl);
    let head = model.net.forward(conv.output(), fl, model.net.num_layers());
    Ok(Features {
        logits: head.output().clone(),
        feature_maps: conv.output().clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop once the epoch-mean total loss is at or below this value.
    pub stop_loss: Option<f64>,
    /// Fraction of the train split held out for best-epoch selection.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            seed: 0,
            stop_loss: None,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidConfig("validation fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
}

/// Cross-entropy-only training from a fresh initialization.
pub fn fit_unrefined(spec: &ArchitectureSpec, data: &DecoyDatasetManifest, cfg: &TrainConfig, out: Option<&Path>) -> Result<(ModelHandle, FitReport)> {
    cfg.validate()?;
    let train = data.load_instances(Split::Train, Execution::Parallel)?;
    fit_unrefined_on(spec, &train, &data.info.name, cfg, out)
}

pub fn fit_unrefined_on(
    spec: &ArchitectureSpec,
    train: &[DecoyInstance],
    dataset: &str,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<(ModelHandle, FitReport)> {
    cfg.validate()?;
    spec.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("empty train split".into()));
    }
    let mut model = ModelHandle::new(spec.clone(), cfg.seed, dataset)?;
    let coeffs = LossCoefficients {
        lambda1: 1.0,
        lambda2: 0.0,
        lambda: 0.0,
    };
    let mut lp = TrainLoop {
        objective: Objective::cross_entropy(coeffs),
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        stop_loss: cfg.stop_loss,
        validation_fraction: cfg.validation_fraction,
        learning_rate: spec.learning_rate,
        snapshot_test: None,
        losses_csv: out.map(|d| d.join(training::LOSSES_FILE)),
    };
    let outcome = lp.run(&mut model.net, train)?;
    model.provenance.epochs = outcome.records.len();
    model.provenance.final_loss = outcome.records.last().map(|r| r.mean.clone());
    if let Some(dir) = out {
        model.save(dir)?;
        training::write_trace(&dir.join(training::TRACE_FILE), &outcome.records)?;
    }
    Ok((
        model,
        FitReport {
            epochs: outcome.records,
            best_epoch: outcome.best_epoch,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_published_values() {
        let f = preset("fmnist").unwrap();
        assert_eq!(f.learning_rate, 1.158e-4);
        assert_eq!(f.conv_blocks.iter().map(|b| b.filters).collect::<Vec<_>>(), vec![160]);
        assert_eq!(f.fc_sizes, vec![992, 800]);
        let c = preset("cifar10").unwrap();
        assert_eq!(c.fc_sizes, vec![912]);
        assert_eq!(c.learning_rate, 1.267e-4);
        assert_eq!(c.conv_blocks.iter().map(|b| b.filters).collect::<Vec<_>>(), vec![250, 300]);
        let k = preset("coco2").unwrap();
        assert_eq!(k.conv_blocks.iter().map(|b| b.filters).collect::<Vec<_>>(), vec![160, 352, 416, 224]);
        assert!(k.conv_blocks.iter().all(|b| b.followed_by_maxpool));
        assert_eq!(k.fc_sizes, vec![480]);
        assert_eq!(k.learning_rate, 1.789e-5);
        assert_eq!(k.feature_grid(), (14, 14));
        assert!(matches!(preset("vgg"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn width_scale_keeps_topology() {
        let s = preset("fmnist").unwrap().with_width_scale(0.1);
        assert_eq!(s.conv_blocks[0].filters, 16);
        assert_eq!(s.fc_sizes, vec![99, 80]);
        assert_eq!(s.learning_rate, 1.158e-4);
    }

    #[test]
    fn forward_shapes_and_softmax() {
        let spec = preset("fmnist").unwrap().with_width_scale(0.05);
        let model = ModelHandle::new(spec, 1, "t").unwrap();
        let img = LabeledImage::new(28, 28, 1, (0..784).map(|i| (i % 255) as f32 / 255.0).collect(), 3).unwrap();
        let f = forward_with_features(&model, &[&img, &img]).unwrap();
        assert_eq!(f.logits.shape(), &[2, 10]);
        assert_eq!(f.spatial(), (28, 28));
        for p in model.predict_proba(&[&img, &img]).unwrap() {
            assert!(p.iter().all(|&v| v >= 0.0));
            assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        let wrong = LabeledImage::new(32, 32, 3, vec![0.0; 32 * 32 * 3], 0).unwrap();
        assert!(matches!(forward_with_features(&model, &[&wrong]), Err(Error::Shape { .. })));
    }

    #[test]
    fn coco2_feature_maps_are_14x14() {
        // narrow widths, full 224x224 geometry
        let spec = preset("coco2").unwrap().with_width_scale(1.0 / 80.0);
        let model = ModelHandle::new(spec, 2, "t").unwrap();
        let img = LabeledImage::new(224, 224, 3, vec![0.5; 224 * 224 * 3], 0).unwrap();
        let f = forward_with_features(&model, &[&img]).unwrap();
        assert_eq!(f.spatial(), (14, 14));
        assert_eq!(f.logits.shape(), &[1, 2]);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_logits() {
        let dir = tempfile::tempdir().unwrap();
        let spec = preset("cifar10").unwrap().with_width_scale(0.02);
        let model = ModelHandle::new(spec, 9, "t").unwrap();
        model.save(dir.path()).unwrap();
        let back = ModelHandle::load(dir.path()).unwrap();
        let img = LabeledImage::new(32, 32, 3, (0..3072).map(|i| (i % 17) as f32 / 16.0).collect(), 0).unwrap();
        let a = model.predict_proba(&[&img]).unwrap();
        let b = back.predict_proba(&[&img]).unwrap();
        assert_eq!(a, b);
        assert_eq!(back.spec, model.spec);
    }

    #[test]
    fn invalid_configs_rejected() {
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut spec = preset("fmnist").unwrap();
        spec.learning_rate = 0.0;
        assert!(spec.validate().is_err());
        spec = preset("fmnist").unwrap();
        spec.conv_blocks.clear();
        assert!(spec.validate().is_err());
    }
}
