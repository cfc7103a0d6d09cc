//! Mini-batch Adam loop shared by unrefined training and refinement.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoygen::DecoyInstance;
use crate::error::{Error, Result};
use crate::modelzoo::argmax;
use crate::nn::Network;
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::xblloss::{CentroidCache, LossBreakdown, Objective, PreparedBatch};

pub const LOSSES_FILE: &str = "losses.csv";
pub const TRACE_FILE: &str = "trace.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean: LossBreakdown,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub seconds: f64,
}

pub type EpochHook<'a> = dyn FnMut(&Network<f32>, &EpochRecord) -> Result<()> + 'a;

pub struct TrainLoop<'a> {
    pub objective: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Early stop once the epoch-mean total is ≤ this.
    pub stop_loss: Option<f64>,
    pub validation_fraction: f64,
    pub learning_rate: f64,
    /// Clean test set for per-epoch accuracy snapshots.
    pub snapshot_test: Option<&'a [DecoyInstance]>,
    pub losses_csv: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct LoopOutcome {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters the network holds on return.
    pub best_epoch: usize,
    pub centroids_computed: usize,
    pub skipped_instances: Vec<String>,
}

impl TrainLoop<'_> {
    pub fn run(&mut self, net: &mut Network<f32>, data: &[DecoyInstance]) -> Result<LoopOutcome> {
        self.run_with_hook(net, data, &mut |_, _| Ok(()))
    }

    /// Runs the loop, calling `hook` after every completed epoch. On a
    /// numeric failure the network is reset to the last completed epoch and
    /// the error is returned.
    pub fn run_with_hook(&mut self, net: &mut Network<f32>, data: &[DecoyInstance], hook: &mut EpochHook<'_>) -> Result<LoopOutcome> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch size must be positive".into()));
        }
        if data.is_empty() {
            return Err(Error::Dataset("no training instances".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let n_val = ((data.len() as f64) * self.validation_fraction).floor() as usize;
        let n_val = if n_val >= data.len() { 0 } else { n_val };
        let (val_idx, train_idx) = order.split_at(n_val);
        let val: Vec<&DecoyInstance> = val_idx.iter().map(|&i| &data[i]).collect();
        let mut train_idx = train_idx.to_vec();

        let mut cache = net.feature_layer().map(|fl| {
            let s = net.shape_at(fl);
            CentroidCache::new((s[1], s[2]))
        });
        let mut opt = Adam::new(self.learning_rate, net.num_params());
        let mut losses = match &self.losses_csv {
            Some(p) => Some(LossWriter::create(p)?),
            None => None,
        };
        let mut records = Vec::with_capacity(self.epochs);
        let mut last_good = net.params().to_vec();
        let mut best: Option<(f64, usize, Vec<f32>)> = None;

        for epoch in 1..=self.epochs {
            let t0 = Instant::now();
            train_idx.shuffle(&mut rng);
            let mut batch_losses = Vec::with_capacity(train_idx.len().div_ceil(self.batch_size));
            for chunk in train_idx.chunks(self.batch_size) {
                let refs: Vec<&DecoyInstance> = chunk.iter().map(|&i| &data[i]).collect();
                let step = self.step(net, &mut opt, &refs, cache.as_mut());
                let b = match step {
                    Ok(b) => b,
                    Err(e) => {
                        net.set_params(last_good);
                        return Err(e);
                    }
                };
                if let Some(w) = losses.as_mut() {
                    w.row(opt.steps(), &b)?;
                }
                batch_losses.push(b);
            }
            if let Some(w) = losses.as_mut() {
                w.flush()?;
            }
            let mean = LossBreakdown::mean(&batch_losses).expect("at least one batch");
            let val_accuracy = (!val.is_empty()).then(|| accuracy_of(net, &val));
            let test_accuracy = self.snapshot_test.map(|t| accuracy_of(net, &t.iter().collect::<Vec<_>>()));
            let rec = EpochRecord {
                epoch,
                mean,
                val_accuracy,
                test_accuracy,
                seconds: t0.elapsed().as_secs_f64(),
            };
            log::info!(
                "epoch {epoch}/{}: total {:.5} ce {:.5} expl {:.5}{} ({:.1}s)",
                self.epochs,
                rec.mean.total,
                rec.mean.ce,
                rec.mean.expl,
                val_accuracy.map(|a| format!(" val_acc {a:.4}")).unwrap_or_default(),
                rec.seconds
            );
            last_good.copy_from_slice(net.params());
            if let Some(acc) = val_accuracy {
                if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                    best = Some((acc, epoch, last_good.clone()));
                }
            }
            hook(net, &rec)?;
            let stop = self.stop_loss.is_some_and(|s| rec.mean.total <= s);
            records.push(rec);
            if stop {
                log::info!("epoch-mean total reached the stop threshold; stopping");
                break;
            }
        }
        let best_epoch = match best {
            Some((_, e, params)) => {
                net.set_params(params);
                e
            }
            None => records.len(),
        };
        let (centroids_computed, skipped_instances) = match &cache {
            Some(c) => (c.computed(), c.skipped().into_iter().map(String::from).collect()),
            None => (0, Vec::new()),
        };
        Ok(LoopOutcome {
            records,
            best_epoch,
            centroids_computed,
            skipped_instances,
        })
    }

    fn step(&self, net: &mut Network<f32>, opt: &mut Adam, refs: &[&DecoyInstance], cache: Option<&mut CentroidCache>) -> Result<LossBreakdown> {
        let batch = PreparedBatch::new(net, refs, cache)?;
        let eval = self.objective.evaluate(net, &batch, true)?;
        assert!(eval.breakdown.identity_holds(), "loss breakdown identity violated: {:?}", eval.breakdown);
        let grads = eval.grads.expect("gradients requested");
        opt.step(net.params_mut(), &grads);
        if !net.params().iter().all(|p| p.is_finite()) {
            return Err(Error::NumericInstability("parameters became non-finite".into()));
        }
        let mut b = eval.breakdown;
        b.per_instance.clear();
        Ok(b)
    }
}

/// Fraction of instances whose argmax prediction equals the label.
pub fn accuracy_of(net: &Network<f32>, data: &[&DecoyInstance]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    let shape = net.input_shape().to_vec();
    for chunk in data.chunks(256) {
        let items = chunk.iter().map(|d| d.image.to_chw()).collect();
        let x = Tensor::stack(&shape, items);
        let logits = net.logits(&x);
        correct += logits
            .data()
            .chunks(net.num_classes())
            .zip(chunk)
            .filter(|(z, d)| argmax(z) == d.image.label)
            .count();
    }
    correct as f64 / data.len() as f64
}

struct LossWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LossWriter {
    fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        writeln!(out, "step,ce,expl,reg,total").map_err(|e| Error::io(path, e))?;
        Ok(LossWriter {
            path: path.to_path_buf(),
            out,
        })
    }

    fn row(&mut self, step: u64, b: &LossBreakdown) -> Result<()> {
        writeln!(self.out, "{step},{},{},{},{}", b.ce, b.expl, b.reg, b.total).map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Per-epoch trace: `epoch,ce,expl,reg,total,val_accuracy,test_accuracy,seconds`.
pub fn write_trace(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut s = String::from("epoch,ce,expl,reg,total,val_accuracy,test_accuracy,seconds\n");
    let opt = |v: Option<f64>| v.map(|a| a.to_string()).unwrap_or_default();
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{:.3}\n",
            r.epoch,
            r.mean.ce,
            r.mean.expl,
            r.mean.reg,
            r.mean.total,
            opt(r.val_accuracy),
            opt(r.test_accuracy),
            r.seconds
        ));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
