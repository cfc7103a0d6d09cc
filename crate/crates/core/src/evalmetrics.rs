//! Percentile thresholding, activation precision / recall, threshold sweeps
//! and clean-test accuracy.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoygen::{BinaryMask, DecoyInstance};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::explainer::{batch_grad_cam, upsample, SaliencyMap};
use crate::modelzoo::ModelHandle;

/// Threshold used for single-number AR/AP summaries.
pub const REFERENCE_THRESHOLD: f64 = 40.0;

/// `{40, 45, …, 95}`.
pub fn default_thresholds() -> Vec<f64> {
    (0..12).map(|i| 40.0 + 5.0 * i as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "AR")]
    Ar,
    #[serde(rename = "AP")]
    Ap,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Ar => "AR",
            Metric::Ap => "AP",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdedMap {
    pub mask: BinaryMask,
    pub threshold: f64,
}

/// Linear-interpolation percentile of `values` (`t` in percent), never above
/// the sample maximum.
pub fn percentile_value(values: &[f32], t: f64) -> f64 {
    let mut s: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
    s.sort_by(f64::total_cmp);
    interpolate_sorted(&s, t)
}

fn interpolate_sorted(s: &[f64], t: f64) -> f64 {
    let n = s.len();
    let rank = t / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    (s[lo] + (s[hi] - s[lo]) * frac).min(s[n - 1])
}

fn check_threshold(t: f64) -> Result<()> {
    if !(0.0..100.0).contains(&t) {
        return Err(Error::InvalidConfig(format!("threshold {t} outside [0, 100)")));
    }
    Ok(())
}

/// Keeps pixels at or above the `t`-th percentile; the kept set is never
/// empty.
pub fn percentile_threshold(expl: &SaliencyMap, t: f64) -> Result<ThresholdedMap> {
    check_threshold(t)?;
    let v = percentile_value(expl.values(), t);
    let w = expl.width();
    Ok(ThresholdedMap {
        mask: BinaryMask::from_fn(expl.height(), w, |r, c| f64::from(expl.get(r, c)) >= v),
        threshold: t,
    })
}

/// `(|T|, |T ∧ A_obj|, |A_obj|)` for a threshold value.
fn counts(values: &[f32], obj: &[u8], v: f64) -> (usize, usize, usize) {
    let (mut kept, mut hit, mut rel) = (0, 0, 0);
    for (&x, &m) in values.iter().zip(obj) {
        let k = f64::from(x) >= v;
        kept += k as usize;
        rel += (m != 0) as usize;
        hit += (k && m != 0) as usize;
    }
    (kept, hit, rel)
}

fn check_shapes(expl: &SaliencyMap, obj: &BinaryMask) -> Result<()> {
    if (expl.height(), expl.width()) != (obj.height(), obj.width()) {
        return Err(Error::shape(
            format!("{}x{}", expl.height(), expl.width()),
            format!("{}x{}", obj.height(), obj.width()),
        ));
    }
    Ok(())
}

/// `|T ∧ A_obj| / |T|`.
pub fn activation_precision(expl: &SaliencyMap, obj_mask: &BinaryMask, t: f64) -> Result<f64> {
    check_shapes(expl, obj_mask)?;
    check_threshold(t)?;
    let (kept, hit, _) = counts(expl.values(), obj_mask.values(), percentile_value(expl.values(), t));
    Ok(hit as f64 / kept as f64)
}

/// `|T ∧ A_obj| / |A_obj|`; undefined (error) for an empty object mask.
pub fn activation_recall(expl: &SaliencyMap, obj_mask: &BinaryMask, t: f64) -> Result<f64> {
    check_shapes(expl, obj_mask)?;
    check_threshold(t)?;
    if obj_mask.is_empty() {
        return Err(Error::EmptyMask("activation recall needs a nonempty object mask".into()));
    }
    let (_, hit, rel) = counts(expl.values(), obj_mask.values(), percentile_value(expl.values(), t));
    Ok(hit as f64 / rel as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCurve {
    pub metric: Metric,
    pub method: String,
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
    /// Instances averaged per point.
    pub n_instances: usize,
}

impl MetricCurve {
    pub fn at(&self, t: f64) -> Option<f64> {
        self.thresholds.iter().position(|&x| x == t).map(|i| self.values[i])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub ar: MetricCurve,
    pub ap: MetricCurve,
    /// Instances left out of AR because their object mask is empty.
    pub excluded_from_ar: usize,
}

fn check_grid(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::InvalidConfig("empty threshold grid".into()));
    }
    for t in thresholds {
        check_threshold(*t)?;
    }
    if thresholds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidConfig("thresholds must be strictly increasing".into()));
    }
    Ok(())
}

/// Dataset-mean AR and AP per threshold.
pub fn sweep(expls: &[SaliencyMap], obj_masks: &[BinaryMask], thresholds: &[f64], method: &str, exec: Execution) -> Result<Sweep> {
    check_grid(thresholds)?;
    if expls.len() != obj_masks.len() {
        return Err(Error::shape(format!("{} object masks", expls.len()), obj_masks.len()));
    }
    if expls.is_empty() {
        return Err(Error::Dataset("no instances to sweep".into()));
    }
    for (e, m) in expls.iter().zip(obj_masks) {
        check_shapes(e, m)?;
    }
    // per instance: Some(ar per t) unless the mask is empty, ap per t
    let per: Vec<(Option<Vec<f64>>, Vec<f64>)> = exec::map_indices(exec, expls.len(), |i| {
        let vals = expls[i].values();
        let obj = obj_masks[i].values();
        let mut sorted: Vec<f64> = vals.iter().map(|&v| f64::from(v)).collect();
        sorted.sort_by(f64::total_cmp);
        let mut ar = Vec::with_capacity(thresholds.len());
        let mut ap = Vec::with_capacity(thresholds.len());
        for &t in thresholds {
            let (kept, hit, rel) = counts(vals, obj, interpolate_sorted(&sorted, t));
            ap.push(hit as f64 / kept as f64);
            ar.push(if rel > 0 { hit as f64 / rel as f64 } else { f64::NAN });
        }
        ((!obj_masks[i].is_empty()).then_some(ar), ap)
    });
    let n_ar = per.iter().filter(|(a, _)| a.is_some()).count();
    let mut ar_sum = vec![0.0; thresholds.len()];
    let mut ap_sum = vec![0.0; thresholds.len()];
    for (ar, ap) in &per {
        if let Some(ar) = ar {
            ar_sum.iter_mut().zip(ar).for_each(|(s, v)| *s += v);
        }
        ap_sum.iter_mut().zip(ap).for_each(|(s, v)| *s += v);
    }
    let curve = |metric, sums: Vec<f64>, n: usize| MetricCurve {
        metric,
        method: method.to_string(),
        thresholds: thresholds.to_vec(),
        values: sums.into_iter().map(|s| if n == 0 { 0.0 } else { s / n as f64 }).collect(),
        n_instances: n,
    };
    Ok(Sweep {
        ar: curve(Metric::Ar, ar_sum, n_ar),
        ap: curve(Metric::Ap, ap_sum, expls.len()),
        excluded_from_ar: expls.len() - n_ar,
    })
}

/// Clean-test accuracy.
pub fn accuracy(model: &ModelHandle, test: &[DecoyInstance]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Dataset("accuracy needs a nonempty test set".into()));
    }
    let refs: Vec<_> = test.iter().map(|d| &d.image).collect();
    let pred = model.predict(&refs)?;
    Ok(pred.iter().zip(test).filter(|(p, d)| **p == d.image.label).count() as f64 / test.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub method: String,
    pub accuracy: f64,
    pub curves: Vec<MetricCurve>,
    pub reference_threshold: f64,
    pub ar_at_reference: f64,
    pub ap_at_reference: f64,
    pub n_instances: usize,
    pub excluded_from_ar: usize,
}

/// Input-resolution Grad-CAM maps for the label class of each instance.
pub fn saliency_for(model: &ModelHandle, instances: &[DecoyInstance]) -> Result<Vec<SaliencyMap>> {
    let images: Vec<_> = instances.iter().map(|d| &d.image).collect();
    let labels: Vec<usize> = instances.iter().map(|d| d.image.label).collect();
    let (h, w, _) = model.spec.input_shape;
    let native = batch_grad_cam(model, &images, &labels)?;
    native.iter().map(|m| upsample(m, (h, w))).collect()
}

/// Accuracy plus AR/AP curves over `thresholds` on a clean test split.
pub fn evaluate(model: &ModelHandle, test: &[DecoyInstance], thresholds: &[f64], method: &str, exec: Execution) -> Result<EvalReport> {
    check_grid(thresholds)?;
    let acc = accuracy(model, test)?;
    let maps = saliency_for(model, test)?;
    let masks: Vec<BinaryMask> = test.iter().map(|d| d.obj_mask.clone()).collect();
    let sw = sweep(&maps, &masks, thresholds, method, exec)?;
    let (ar_ref, ap_ref) = {
        let t = if thresholds.contains(&REFERENCE_THRESHOLD) { REFERENCE_THRESHOLD } else { thresholds[0] };
        (sw.ar.at(t).unwrap_or(f64::NAN), sw.ap.at(t).unwrap_or(f64::NAN))
    };
    Ok(EvalReport {
        dataset: model.provenance.dataset.clone(),
        method: method.to_string(),
        accuracy: acc,
        reference_threshold: if thresholds.contains(&REFERENCE_THRESHOLD) { REFERENCE_THRESHOLD } else { thresholds[0] },
        ar_at_reference: ar_ref,
        ap_at_reference: ap_ref,
        n_instances: test.len(),
        excluded_from_ar: sw.excluded_from_ar,
        curves: vec![sw.ar, sw.ap],
    })
}

pub const CURVES_HEADER: &str = "method,metric,threshold,value,n_instances";

pub fn write_curves_csv(path: &Path, curves: &[MetricCurve]) -> Result<()> {
    let mut s = format!("{CURVES_HEADER}\n");
    for c in curves {
        for (t, v) in c.thresholds.iter().zip(&c.values) {
            s.push_str(&format!("{},{},{},{},{}\n", c.method, c.metric, t, v, c.n_instances));
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explainer::{Normalization, Resolution};
    use proptest::prelude::*;

    fn smap(h: usize, w: usize, v: Vec<f32>) -> SaliencyMap {
        SaliencyMap::new(h, w, v, Normalization::Minmax, 0, Resolution::Input).unwrap()
    }

    fn mask(h: usize, w: usize, v: Vec<u8>) -> BinaryMask {
        BinaryMask::from_values(h, w, v).unwrap()
    }

    #[test]
    fn grid_has_twelve_points() {
        let g = default_thresholds();
        assert_eq!(g.len(), 12);
        assert_eq!((g[0], g[11]), (40.0, 95.0));
    }

    #[test]
    fn two_by_two_examples() {
        let e = smap(2, 2, vec![0.9, 0.1, 0.2, 0.8]);
        assert!((percentile_value(e.values(), 50.0) - 0.5).abs() < 1e-7);
        assert_eq!(percentile_threshold(&e, 50.0).unwrap().mask.values(), &[1, 0, 0, 1]);
        let obj = mask(2, 2, vec![1, 1, 0, 0]);
        assert_eq!(activation_precision(&e, &obj, 50.0).unwrap(), 0.5);
        assert_eq!(activation_recall(&e, &obj, 50.0).unwrap(), 0.5);
    }

    #[test]
    fn degenerate_cases() {
        let c = smap(3, 3, vec![0.4; 9]);
        for t in [0.0, 50.0, 95.0, 99.9] {
            assert_eq!(percentile_threshold(&c, t).unwrap().mask.count(), 9);
        }
        let e = smap(2, 2, vec![0.9, 0.1, 0.2, 0.8]);
        assert_eq!(percentile_threshold(&e, 0.0).unwrap().mask.count(), 4);
        assert_eq!(activation_precision(&e, &BinaryMask::zeros(2, 2), 50.0).unwrap(), 0.0);
        assert!(matches!(activation_recall(&e, &BinaryMask::zeros(2, 2), 50.0), Err(Error::EmptyMask(_))));
        // exact match -> both metrics 1
        let obj = mask(2, 2, vec![1, 0, 0, 1]);
        assert_eq!(activation_precision(&e, &obj, 50.0).unwrap(), 1.0);
        assert_eq!(activation_recall(&e, &obj, 50.0).unwrap(), 1.0);
        assert_eq!(activation_recall(&e, &mask(2, 2, vec![0, 1, 1, 0]), 50.0).unwrap(), 0.0);
        assert!(percentile_threshold(&e, 100.0).is_err());
    }

    #[test]
    fn single_instance_sweep_equals_pointwise() {
        let e = smap(2, 2, vec![0.9, 0.1, 0.2, 0.8]);
        let obj = mask(2, 2, vec![1, 1, 0, 0]);
        let g = default_thresholds();
        let s = sweep(&[e.clone()], &[obj.clone()], &g, "m", Execution::Sequential).unwrap();
        for (i, &t) in g.iter().enumerate() {
            assert_eq!(s.ar.values[i], activation_recall(&e, &obj, t).unwrap());
            assert_eq!(s.ap.values[i], activation_precision(&e, &obj, t).unwrap());
        }
    }

    #[test]
    fn sweep_excludes_empty_masks_from_recall_only() {
        let e = smap(2, 2, vec![0.9, 0.1, 0.2, 0.8]);
        let s = sweep(
            &[e.clone(), e],
            &[mask(2, 2, vec![1, 0, 0, 0]), BinaryMask::zeros(2, 2)],
            &[50.0],
            "m",
            Execution::Parallel,
        )
        .unwrap();
        assert_eq!(s.excluded_from_ar, 1);
        assert_eq!((s.ar.n_instances, s.ap.n_instances), (1, 2));
        assert_eq!(s.ar.values, vec![1.0]);
        assert_eq!(s.ap.values, vec![0.25]);
        assert!(sweep(&[], &[], &[50.0], "m", Execution::Sequential).is_err());
        assert!(sweep(&[smap(1, 1, vec![0.0])], &[BinaryMask::ones(1, 1)], &[50.0, 45.0], "m", Execution::Sequential).is_err());
    }

    proptest! {
        #[test]
        fn metrics_stay_in_unit_interval(
            vals in proptest::collection::vec(0.0f32..=1.0, 16),
            bits in proptest::collection::vec(0u8..=1, 16),
            t in 0.0f64..99.9,
        ) {
            let e = smap(4, 4, vals);
            let m = mask(4, 4, bits);
            let ap = activation_precision(&e, &m, t).unwrap();
            prop_assert!((0.0..=1.0).contains(&ap));
            if !m.is_empty() {
                let ar = activation_recall(&e, &m, t).unwrap();
                prop_assert!((0.0..=1.0).contains(&ar));
            }
            prop_assert!(percentile_threshold(&e, t).unwrap().mask.count() > 0);
        }
    }
}
