use std::path::Path;
use std::process::{Command, Output};

fn fsplat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsplat")).args(args).output().expect("binary runs")
}

fn code(args: &[&str]) -> i32 {
    fsplat(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) {
    let out = fsplat(&["synth", "--out", p(dir), "--primitives", "8", "--views", "3", "--size", "32", "--points", "48", "--seed", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    synth(&data);
    assert!(data.join("manifest.json").exists());

    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"train": {"checkpoint_every": 1000}, "densify_enabled": false}"#).unwrap();
    let out = fsplat(&["train", "--config", p(&cfg), "--images", p(&data), "--out", p(&run), "--iterations", "30"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("final.ckpt");
    assert!(ckpt.exists() && run.join("train_log.csv").exists());

    let png = tmp.path().join("view.png");
    assert_eq!(code(&["render", "--checkpoint", p(&ckpt), "--images", p(&data), "--camera-index", "1", "--out", p(&png)]), 0);
    assert!(png.exists());

    let lod = tmp.path().join("lod");
    let out = fsplat(&["lod-sweep", "--checkpoint", p(&data.join("ground_truth.ckpt")), "--images", p(&data), "--k", "1,6", "--out", p(&lod)]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(lod.join("lod.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(lod.join("k6_view000.png").exists());

    let out = fsplat(&["metrics", "--pred", p(&png), "--target", p(&data.join("view_001.png"))]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("psnr"));
}

#[test]
fn configuration_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let gt = data.join("ground_truth.ckpt");
    assert_eq!(code(&["train", "--bogus"]), 2);
    assert_eq!(code(&["render", "--checkpoint", p(&gt), "--images", p(&data), "--k", "9", "--out", "x.png"]), 2);
    assert_eq!(code(&["render", "--checkpoint", p(&gt), "--images", p(&data), "--camera-index", "99", "--out", "x.png"]), 2);
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"iterations": "many"}}"#).unwrap();
    assert_eq!(code(&["train", "--config", p(&bad), "--images", p(&data), "--out", p(tmp.path())]), 2);
}

#[test]
fn data_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let missing = tmp.path().join("none.ckpt");
    assert_eq!(code(&["render", "--checkpoint", p(&missing), "--images", p(&data), "--out", "x.png"]), 3);
    let bytes = std::fs::read(data.join("ground_truth.ckpt")).unwrap();
    let cut = tmp.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
    assert_eq!(code(&["render", "--checkpoint", p(&cut), "--images", p(&data), "--out", "x.png"]), 3);
    std::fs::remove_file(data.join("view_000.png")).unwrap();
    assert_eq!(code(&["metrics", "--checkpoint", p(&data.join("ground_truth.ckpt")), "--images", p(&data)]), 3);
}

#[test]
fn gradcheck_tolerance_exit_4() {
    assert_eq!(code(&["gradcheck", "--primitives", "3", "--size", "24", "--mask"]), 0);
    assert_eq!(code(&["gradcheck", "--primitives", "3", "--size", "24", "--mask", "--tolerance", "1e-30"]), 4);
}
