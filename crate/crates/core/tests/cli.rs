use std::fs;
use std::path::Path;
use std::process::Command;

fn xbld(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_xbld"))
        .args(args)
        .current_dir(cwd)
        .env_remove("XBLD_DEVICE")
        .output()
        .unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

const SMOKE: &str = "dataset = toy:120:40\npreset = fmnist\nwidth_scale = 0.05\nseed = 3\nepochs = 1\nrefine_epochs = 1\nmethods = xbl_d,rrr\n";

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(xbld(&["pipeline", "--config", "missing.txt"], d).0, 1);
    fs::write(d.join("noseed.txt"), "dataset = toy\npreset = fmnist\n").unwrap();
    assert_eq!(xbld(&["pipeline", "--config", "noseed.txt"], d).0, 1);
    fs::write(d.join("bad.txt"), "dataset = toy\npreset = fmnist\nseed = 1\ncolour = red\n").unwrap();
    assert_eq!(xbld(&["pipeline", "--config", "bad.txt"], d).0, 1);
    fs::write(d.join("nodata.txt"), "dataset = /definitely/not/here\npreset = fmnist\nseed = 1\n").unwrap();
    assert_eq!(xbld(&["pipeline", "--config", "nodata.txt"], d).0, 1);
    assert_eq!(xbld(&["train", "--preset", "vgg", "--data", "."], d).0, 1);
    assert_eq!(xbld(&["no-such-command"], d).0, 1);
}

#[test]
fn unsupported_device_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.txt"), SMOKE).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_xbld"))
        .args(["pipeline", "--config", "c.txt"])
        .current_dir(dir.path())
        .env("XBLD_DEVICE", "cuda")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn stage_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    // exists, so validation passes, but holds no images
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let cfg = SMOKE.replace("toy:120:40", empty.to_str().unwrap());
    fs::write(dir.path().join("c.txt"), cfg).unwrap();
    let (code, err) = xbld(&["pipeline", "--config", "c.txt"], dir.path());
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("decoy"), "{err}");
}

#[test]
fn staged_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (code, err) = xbld(&["decoy", "--source", "toy:80:20", "--seed", "2", "--out", "data"], d);
    assert_eq!(code, 0, "{err}");
    let data = d.join("data").join("decoy-toy");
    assert!(data.join("dataset.json").is_file());
    let data = data.to_str().unwrap();
    let (code, err) = xbld(&["train", "--preset", "fmnist", "--width-scale", "0.05", "--data", data, "--epochs", "1", "--seed", "2", "--out", "m"], d);
    assert_eq!(code, 0, "{err}");
    let (code, err) = xbld(&["refine", "--checkpoint", "m", "--data", data, "--method", "xbl-d", "--epochs", "1", "--seed", "2", "--out", "r"], d);
    assert_eq!(code, 0, "{err}");
    assert!(d.join("r").join("trace.csv").is_file());
    for (ckpt, label) in [("m", "unrefined"), ("r", "xbl_d")] {
        let (code, err) = xbld(&["evaluate", "--checkpoint", ckpt, "--data", data, "--label", label, "--out", "eval"], d);
        assert_eq!(code, 0, "{err}");
    }
    let (code, err) = xbld(&["report", "--eval", "eval/unrefined.json", "eval/xbl_d.json", "--dataset", "decoy-toy", "--out", "rep"], d);
    assert_eq!(code, 0, "{err}");
    let (code, _) = xbld(
        &["report", "--eval", "eval/unrefined.json", "--expect", "unrefined,xbl_d,rrr", "--dataset", "decoy-toy", "--out", "rep2"],
        d,
    );
    assert_eq!(code, 3);
    assert!(fs::read_to_string(d.join("rep2").join("comparison.txt")).unwrap().contains("MISSING"));
}
