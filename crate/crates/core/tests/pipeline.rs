use std::fs;

use xbld::experiment::{parse_pairs, run_pipeline, ExperimentConfig};
use xbld::modelzoo::{preset, ModelHandle};
use xbld::report::ReportStatus;

const SMOKE: &str = "dataset = toy:120:40\npreset = fmnist\nwidth_scale = 0.05\nseed = 3\nepochs = 1\nrefine_epochs = 1\nmethods = xbl_d,rrr,rrr_g\ngallery = 2\n";

#[test]
fn rerun_reuses_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_pairs(&parse_pairs(SMOKE).unwrap(), dir.path().to_path_buf()).unwrap();
    let first = run_pipeline(&cfg).unwrap();
    assert_eq!(first.status, ReportStatus::Complete);
    assert!(first.executed.iter().any(|s| s == "decoy"));
    assert_eq!(first.reports.len(), 4);
    let accuracy = fs::read(first.run_dir.join("report").join("accuracy.csv")).unwrap();

    let second = run_pipeline(&cfg).unwrap();
    assert!(second.executed.is_empty(), "{:?}", second.executed);
    assert_eq!(second.run_dir, first.run_dir);
    assert_eq!(fs::read(second.run_dir.join("report").join("accuracy.csv")).unwrap(), accuracy);
    for label in ["unrefined", "xbl_d", "rrr", "rrr_g"] {
        let rows = fs::read_dir(second.run_dir.join("saliency").join(label)).unwrap().filter(|e| {
            e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")
        });
        assert_eq!(rows.count(), 2);
    }

    // refined checkpoints record where they came from
    let refined = ModelHandle::load(&first.run_dir.join("xbl_d")).unwrap();
    assert_eq!(refined.provenance.method, "xbl_d");
    assert!(refined.provenance.parent.is_some());
}

#[test]
fn removed_stage_is_rebuilt_alone() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMOKE.replace("methods = xbl_d,rrr,rrr_g\ngallery = 2\n", "methods = rrr\n");
    let cfg = ExperimentConfig::from_pairs(&parse_pairs(&text).unwrap(), dir.path().to_path_buf()).unwrap();
    let first = run_pipeline(&cfg).unwrap();
    fs::remove_dir_all(first.run_dir.join("rrr")).unwrap();
    fs::remove_file(first.run_dir.join("eval").join("rrr.json")).unwrap();
    let again = run_pipeline(&cfg).unwrap();
    assert_eq!(again.executed, vec!["refine:rrr".to_string(), "evaluate:rrr".to_string()]);
}

#[test]
fn width_scaled_presets_stay_valid() {
    for name in ["fmnist", "cifar10", "coco2"] {
        for f in [0.05, 0.1, 0.5, 1.0] {
            let spec = preset(name).unwrap().with_width_scale(f);
            spec.validate().unwrap();
            assert!(spec.conv_blocks.iter().all(|b| b.filters >= 1));
        }
    }
}
