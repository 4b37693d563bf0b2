use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stereoscale")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> BTreeMap<String, String> {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

fn error_line(out: &Output) -> String {
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "expected one stderr line, got {err:?}");
    lines[0].to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("small.cfg");
    std::fs::write(
        &cfg,
        "# tiny run\nresolution = 256\ntrain_distances = 2\ntest_count = 4\nmax_epochs = 2\nbatch_size = 4\n",
    )
    .unwrap();
    cfg
}

#[test]
fn render_contrast_between_near_and_far() {
    let dir = tempfile::tempdir().unwrap();
    let scene_dir = dir.path().join("scene");
    ok(&["scene", "gen", "--out", p(&scene_dir), "--seed", "0"]);
    let scene = scene_dir.join("scene.json");
    let near = ok(&["render", "--scene", p(&scene), "--distance", "0.25", "--out", p(&dir.path().join("near"))]);
    let far = ok(&["render", "--scene", p(&scene), "--distance", "2.5", "--out", p(&dir.path().join("far"))]);
    let a: f64 = near["masked_mean_abs_rad"].parse().unwrap();
    let b: f64 = far["masked_mean_abs_rad"].parse().unwrap();
    assert!((a / b - 10.0).abs() < 0.5, "ratio {}", a / b);
    assert_eq!(near["masked_pixels"], far["masked_pixels"]);
    let log = std::fs::read_to_string(dir.path().join("near/run.log")).unwrap();
    assert!(log.contains("sha256.disparity.qnd = "));
    assert!(log.contains("config.resolution = 256"));
}

#[test]
fn default_training_build_writes_600_samples() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("train");
    let kv = ok(&["dataset", "build-train", "--out", p(&out)]);
    assert_eq!(kv["samples"], "600");
    assert_eq!(std::fs::read_dir(out.join("samples")).unwrap().count(), 600);
    let manifest = std::fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 601);
    assert!(manifest.starts_with("id,path,distance_m,variant,flip,scene_id,seed\n"));
}

fn pipeline(root: &Path, cfg: &Path) -> (BTreeMap<String, String>, String) {
    let c = p(cfg);
    ok(&["--config", c, "dataset", "build-train", "--out", p(&root.join("train"))]);
    ok(&["--config", c, "dataset", "build-test", "--out", p(&root.join("test"))]);
    let trained = ok(&["--config", c, "train", "--data", p(&root.join("train")), "--out", p(&root.join("model"))]);
    assert_eq!(trained["epochs"], "2");
    let model = root.join("model/model.qnw");
    let eval = ok(&[
        "--config",
        c,
        "eval",
        "--model",
        p(&model),
        "--data",
        p(&root.join("test")),
        "--out",
        p(&root.join("eval")),
        "--train-data",
        p(&root.join("train")),
    ]);
    let manifest = std::fs::read_to_string(root.join("test/manifest.csv")).unwrap();
    (eval, manifest)
}

#[test]
fn pipeline_composes_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, manifest_a) = pipeline(&dir.path().join("a"), &cfg);
    let (b, manifest_b) = pipeline(&dir.path().join("b"), &cfg);
    assert_eq!(manifest_a, manifest_b);
    for key in ["r2", "rmse_m", "rmse_diopters", "median_abs_error_m"] {
        let (x, y): (f64, f64) = (a[key].parse().unwrap(), b[key].parse().unwrap());
        assert!((x - y).abs() <= 1e-6, "{key}: {x} vs {y}");
    }
    assert!(a.contains_key("linear_probe_r2") && a.contains_key("mean_baseline_r2"));
    assert_eq!(
        std::fs::read(dir.path().join("a/model/model.qnw")).unwrap(),
        std::fs::read(dir.path().join("b/model/model.qnw")).unwrap()
    );

    let root = dir.path().join("a");
    let csv = std::fs::read_to_string(root.join("eval/report.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 4);
    assert!(root.join("eval/scatter.svg").is_file());
    let log = std::fs::read_to_string(root.join("model/run.log")).unwrap();
    assert!(log.contains("sha256.model.qnw = ") && log.contains("seed.init = 0"));

    let model = root.join("model/model.qnw");
    let preds = ok(&["predict", "--model", p(&model), "--data", p(&root.join("test"))]);
    assert_eq!(preds.len(), 4);
    let single = ok(&["predict", "--model", p(&model), "--data", p(&root.join("test/samples/test_00000.qnd"))]);
    assert_eq!(single["pred_m.test_00000"], preds["pred_m.test_00000"]);

    let probe = ok(&[
        "probe-helmholtz",
        "--model",
        p(&model),
        "--data",
        p(&root.join("test")),
        "--factor",
        "2",
        "--out",
        p(&root.join("probe")),
    ]);
    assert_eq!(probe["n"], "4");
    assert!(probe["median_ratio"].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn oracle_recovers_matched_scale() {
    let dir = tempfile::tempdir().unwrap();
    let scene_dir = dir.path().join("scene");
    ok(&["scene", "gen", "--out", p(&scene_dir)]);
    let kv = ok(&["oracle", "--scene", p(&scene_dir.join("scene.json")), "--distance", "0.5"]);
    assert!(kv["relative_error"].parse::<f64>().unwrap().abs() < 0.03);
    assert_eq!(kv["matched"], "true");
}

#[test]
fn flags_override_config_and_are_logged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "scene_seed = 5\n").unwrap();
    ok(&["--config", p(&cfg), "scene", "gen", "--out", p(&dir.path().join("s")), "--seed", "9"]);
    let log = std::fs::read_to_string(dir.path().join("s/run.log")).unwrap();
    assert!(log.contains("override.scene_seed = 9"));
    assert!(log.contains("config.scene_seed = 9"));
    assert!(log.contains("seed.scene = 9"));
}

#[test]
fn failures_are_single_machine_readable_lines() {
    let dir = tempfile::tempdir().unwrap();

    let out = run(&["scene", "gen", "--out", "x", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error kind=usage message="));

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "resolutoin = 256\n").unwrap();
    let out = run(&["--config", p(&cfg), "scene", "gen", "--out", p(&dir.path().join("s"))]);
    assert_eq!(out.status.code(), Some(2));
    let line = error_line(&out);
    assert!(line.starts_with("error kind=config") && line.contains("unknown key"), "{line}");
    assert!(!dir.path().join("s").exists());

    let out = run(&["eval", "--model", "missing.qnw", "--data", "missing", "--out", p(&dir.path().join("e"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_line(&out).starts_with("error kind=io"));
}

#[test]
fn resolution_contradiction_is_rejected_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    ok(&["--config", p(&cfg), "dataset", "build-train", "--out", p(&dir.path().join("train"))]);
    let out = run(&[
        "--config",
        p(&cfg),
        "train",
        "--data",
        p(&dir.path().join("train")),
        "--out",
        p(&dir.path().join("model")),
        "--resolution",
        "512",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).contains("resolution mismatch"));
    assert!(!dir.path().join("model").exists());
}
