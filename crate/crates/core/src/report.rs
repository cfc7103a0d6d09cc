//! Report tables, curve files and saliency galleries.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoygen::{BinaryMask, DecoyInstance};
use crate::error::{Error, Result};
use crate::evalmetrics::{write_curves_csv, EvalReport, Metric, MetricCurve};
use crate::explainer::{grad_cam, upsample};
use crate::imageio::{quantize, write_rgb};
use crate::modelzoo::ModelHandle;
use crate::reference;

pub const ACCURACY_FILE: &str = "accuracy.csv";
pub const SUMMARY_FILE: &str = "summary_ar_ap.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const REFERENCES_FILE: &str = "references.csv";
pub const COMPARISON_FILE: &str = "comparison.txt";

pub const ACCURACY_HEADER: &str = "method,dataset,accuracy,published_accuracy_full_scale";
pub const SUMMARY_HEADER: &str = "metric,method,dataset,value";
pub const REFERENCES_HEADER: &str = "metric,method,dataset,published_value_full_scale,source";

/// Methods that only appear as published reference rows.
const REFERENCE_ONLY: [&str; 4] = ["rbr", "cdep", "hint", "ce"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ReportStatus {
    Complete,
    Partial { missing: Vec<String> },
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Writes the report files into `dir`. `expected` lists the methods the run
/// was configured for; any without a result are written as gaps and make the
/// report partial.
pub fn emit_report(results: &[EvalReport], expected: &[String], dataset: &str, dir: &Path) -> Result<ReportStatus> {
    if results.is_empty() {
        return Err(Error::InvalidConfig("no evaluation results to report".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let key = reference::dataset_key(dataset);
    let find = |m: &str| results.iter().find(|r| r.method == m);

    let mut methods: Vec<String> = expected.to_vec();
    for r in results {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let missing: Vec<String> = methods.iter().filter(|m| find(m).is_none()).cloned().collect();

    let published_acc = |m: &str| key.and_then(|k| reference::accuracy(m, k));
    let mut acc = format!("{ACCURACY_HEADER}\n");
    for m in &methods {
        writeln!(acc, "{m},{dataset},{},{}", fmt_opt(find(m).map(|r| r.accuracy)), fmt_opt(published_acc(m))).unwrap();
    }
    for m in REFERENCE_ONLY {
        if let Some(v) = published_acc(m) {
            writeln!(acc, "{m},{dataset},,{v}").unwrap();
        }
    }
    write(&dir.join(ACCURACY_FILE), &acc)?;

    let mut summary = format!("{SUMMARY_HEADER}\n");
    for metric in [Metric::Ar, Metric::Ap] {
        for m in &methods {
            let v = find(m).map(|r| match metric {
                Metric::Ar => r.ar_at_reference,
                Metric::Ap => r.ap_at_reference,
            });
            writeln!(summary, "{metric},{m},{dataset},{}", fmt_opt(v)).unwrap();
        }
    }
    write(&dir.join(SUMMARY_FILE), &summary)?;

    let curves: Vec<MetricCurve> = methods.iter().filter_map(|m| find(m)).flat_map(|r| r.curves.iter().cloned()).collect();
    write_curves_csv(&dir.join(CURVES_FILE), &curves)?;

    let mut refs = format!("{REFERENCES_HEADER}\n");
    for r in reference::ACCURACY.iter().chain(reference::SUMMARY_AR_AP.iter()) {
        writeln!(refs, "{},{},{},{},{}", r.metric, r.method, r.dataset, r.value, r.citation).unwrap();
    }
    write(&dir.join(REFERENCES_FILE), &refs)?;

    write(&dir.join(COMPARISON_FILE), &comparison(results, &methods, dataset, key))?;

    Ok(if missing.is_empty() {
        ReportStatus::Complete
    } else {
        ReportStatus::Partial { missing }
    })
}

fn comparison(results: &[EvalReport], methods: &[String], dataset: &str, key: Option<&str>) -> String {
    let find = |m: &str| results.iter().find(|r| r.method == m);
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    let t = results[0].reference_threshold;
    let mut s = String::new();
    writeln!(s, "dataset: {dataset}").unwrap();
    match key {
        Some(k) => writeln!(s, "published reference dataset: {k} [published, full scale]").unwrap(),
        None => writeln!(s, "no published reference for this dataset").unwrap(),
    }
    writeln!(s).unwrap();
    writeln!(s, "clean-test accuracy").unwrap();
    writeln!(s, "{:<12} {:>12} {:>28}", "method", "this run", "[published, full scale]").unwrap();
    for m in methods.iter().map(String::as_str).chain(REFERENCE_ONLY) {
        let published = key.and_then(|k| reference::accuracy(m, k));
        let ours = find(m).map(|r| r.accuracy);
        if ours.is_none() && published.is_none() && REFERENCE_ONLY.contains(&m) {
            continue;
        }
        let ours_cell = match ours {
            Some(v) => format!("{v:.3}"),
            None if REFERENCE_ONLY.contains(&m) => "not run".into(),
            None => "MISSING".into(),
        };
        writeln!(s, "{m:<12} {ours_cell:>12} {:>28}", cell(published)).unwrap();
    }
    for metric in ["AR", "AP"] {
        writeln!(s).unwrap();
        writeln!(s, "{metric} at threshold {t}").unwrap();
        writeln!(s, "{:<12} {:>12} {:>28}", "method", "this run", "[published, full scale]").unwrap();
        for m in methods {
            let ours = find(m).map(|r| if metric == "AR" { r.ar_at_reference } else { r.ap_at_reference });
            let published = key.and_then(|k| reference::summary(metric, m, k));
            let ours_cell = ours.map(|v| format!("{v:.3}")).unwrap_or_else(|| "MISSING".into());
            writeln!(s, "{m:<12} {ours_cell:>12} {:>28}", cell(published)).unwrap();
        }
    }
    s
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// `count` distinct indices out of `n`, reproducible for a seed, ascending.
pub fn sample_indices(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, count.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// One PNG row per instance: input, Grad-CAM overlay at input resolution,
/// object mask, confounder mask.
pub fn saliency_gallery(model: &ModelHandle, instances: &[&DecoyInstance], out: &Path) -> Result<Vec<PathBuf>> {
    if instances.is_empty() {
        return Err(Error::InvalidConfig("gallery needs at least one instance".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        let img = &inst.image;
        let (h, w) = (img.height(), img.width());
        let map = upsample(&grad_cam(model, img, img.label)?, (h, w))?;
        let gap = 2;
        let row_w = 4 * w + 3 * gap;
        let mut rgb = vec![255u8; h * row_w * 3];
        let mut put = |panel: usize, r: usize, c: usize, px: [u8; 3]| {
            let o = (r * row_w + panel * (w + gap) + c) * 3;
            rgb[o..o + 3].copy_from_slice(&px);
        };
        let mask_px = |m: &BinaryMask, r: usize, c: usize| if m.get(r, c) { [255; 3] } else { [0; 3] };
        for r in 0..h {
            for c in 0..w {
                let base = if img.channels() == 3 {
                    [img.at(r, c, 0), img.at(r, c, 1), img.at(r, c, 2)]
                } else {
                    [img.at(r, c, 0); 3]
                };
                put(0, r, c, base.map(quantize));
                let v = map.get(r, c);
                // blend with a red-to-blue heat colour
                let heat = [v, 0.0, 1.0 - v];
                put(1, r, c, [0, 1, 2].map(|k| quantize(0.5 * base[k] + 0.5 * heat[k])));
                put(2, r, c, mask_px(&inst.obj_mask, r, c));
                put(3, r, c, mask_px(&inst.con_mask, r, c));
            }
        }
        let path = out.join(format!("row_{i:03}_{}.png", sanitize(&inst.id)));
        write_rgb(&path, &rgb, h, row_w)?;
        written.push(path);
    }
    Ok(written)
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalmetrics::default_thresholds;

    fn fake(method: &str, acc: f64) -> EvalReport {
        let g = default_thresholds();
        let curve = |metric| MetricCurve {
            metric,
            method: method.into(),
            thresholds: g.clone(),
            values: g.iter().map(|t| 1.0 - t / 100.0).collect(),
            n_instances: 7,
        };
        EvalReport {
            dataset: "decoy-fashion-mnist".into(),
            method: method.into(),
            accuracy: acc,
            curves: vec![curve(Metric::Ar), curve(Metric::Ap)],
            reference_threshold: 40.0,
            ar_at_reference: 0.6,
            ap_at_reference: 0.6,
            n_instances: 7,
            excluded_from_ar: 0,
        }
    }

    #[test]
    fn partial_and_refused() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_report(&[], &[], "x", dir.path()).is_err());
        let st = emit_report(&[fake("unrefined", 0.5)], &["unrefined".into(), "xbl_d".into()], "decoy-fashion-mnist", dir.path()).unwrap();
        assert_eq!(
            st,
            ReportStatus::Partial {
                missing: vec!["xbl_d".into()]
            }
        );
        let acc = fs::read_to_string(dir.path().join(ACCURACY_FILE)).unwrap();
        assert!(acc.contains("xbl_d,decoy-fashion-mnist,,0.904\n"));
        assert!(fs::read_to_string(dir.path().join(COMPARISON_FILE)).unwrap().contains("MISSING"));
    }

    #[test]
    fn sample_is_deterministic() {
        assert_eq!(sample_indices(100, 5, 3), sample_indices(100, 5, 3));
        assert_eq!(sample_indices(3, 10, 1), vec![0, 1, 2]);
    }
}
