use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use sa4d::field::{checkpoint_bytes, load_checkpoint, save_checkpoint, AdamState, FieldConfig, IdentityField};
use sa4d::images::MaskImage;
use sa4d::pipeline::IdentityTable;

fn sa4d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sa4d"))
        .args(args)
        .env_remove("SA4D_THREADS")
        .output()
        .expect("run sa4d")
}

fn ok(args: &[&str]) -> String {
    let out = sa4d(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "sa4d {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &[&str] = &["--per-object", "40", "--frames", "6", "--held-out", "2", "--width", "24", "--height", "24"];

/// A small noisy dataset, a 30-iteration checkpoint and its table, shared
/// by the tests that only read them.
fn fixture() -> &'static (tempfile::TempDir, PathBuf, PathBuf, PathBuf) {
    static F: OnceLock<(tempfile::TempDir, PathBuf, PathBuf, PathBuf)> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let ckpt = dir.path().join("field.ckpt");
        let table = dir.path().join("table.json");
        let mut args = vec!["gen-scene", "--out", p(&data), "--boundary-flip", "0.1", "--seed", "5"];
        args.extend_from_slice(SMALL);
        ok(&args);
        ok(&["train", "--data", p(&data), "--out", p(&ckpt), "--iters", "30", "--seed", "1"]);
        ok(&["refine", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&table)]);
        (dir, data, ckpt, table)
    })
}

fn dir_contents(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_scene_is_reproducible_and_prints_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let mut args = vec!["gen-scene", "--out", p(d), "--seed", "12", "--void-dropout", "0.2"];
        args.extend_from_slice(SMALL);
        let stdout = ok(&args);
        assert!(stdout.contains("seed 12"), "{stdout}");
    }
    let (ca, cb) = (dir_contents(&a), dir_contents(&b));
    assert!(ca.len() > 10);
    // The run manifest records the argument list, which names the directory.
    let strip = |v: Vec<(PathBuf, Vec<u8>)>| -> Vec<(PathBuf, Vec<u8>)> { v.into_iter().filter(|(n, _)| n != Path::new("run.json")).collect() };
    assert_eq!(strip(ca), strip(cb));
}

#[test]
fn zero_noise_masks_equal_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["gen-scene", "--out", p(dir.path())];
    args.extend_from_slice(SMALL);
    ok(&args);
    let frames = dir.path().join("frames");
    for i in 0..6 {
        let mask = std::fs::read(frames.join(format!("{i:04}.mask.pgm"))).unwrap();
        let gt = std::fs::read(frames.join(format!("{i:04}.gt.pgm"))).unwrap();
        assert_eq!(mask, gt);
    }
}

#[test]
fn too_many_objects_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sa4d(&["gen-scene", "--out", p(&dir.path().join("x")), "--objects", "300"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("300"));
}

#[test]
fn bad_flags_and_thread_counts_exit_two() {
    assert_eq!(sa4d(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(sa4d(&["train"]).status.code(), Some(2));
    let (_, data, _, table) = fixture();
    let out = sa4d(&["--threads", "0", "segment", "--data", p(data), "--table", p(table)]);
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_sa4d"))
        .args(["segment", "--data", p(data), "--table", p(table)])
        .env("SA4D_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_sa4d"))
        .args(["segment", "--data", p(data), "--table", p(table)])
        .env("SA4D_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn train_zero_iterations_writes_initial_parameters() {
    let (dir, data, _, _) = fixture();
    let ckpt = dir.path().join("zero.ckpt");
    ok(&["train", "--data", p(data), "--out", p(&ckpt), "--iters", "0", "--seed", "77"]);
    let init = IdentityField::new(FieldConfig::default(), 77);
    assert_eq!(std::fs::read(&ckpt).unwrap(), checkpoint_bytes(&init, &AdamState::new(&init, 5e-4)));
    assert_eq!(std::fs::read_to_string(ckpt.with_extension("csv")).unwrap(), "iter,l2d,l3d,loss\n");
    let manifest = std::fs::read_to_string(dir.path().join("zero.ckpt.run.json")).unwrap();
    assert!(manifest.contains("\"seed\": 77"), "{manifest}");
}

#[test]
fn train_rerun_gives_identical_trace() {
    let (dir, data, ckpt, _) = fixture();
    let again = dir.path().join("again.ckpt");
    ok(&["train", "--data", p(data), "--out", p(&again), "--iters", "30", "--seed", "1"]);
    assert_eq!(
        std::fs::read(ckpt.with_extension("csv")).unwrap(),
        std::fs::read(again.with_extension("csv")).unwrap()
    );
    assert_eq!(std::fs::read(ckpt).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn train_without_masks_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["gen-scene", "--out", p(dir.path())];
    args.extend_from_slice(SMALL);
    ok(&args);
    std::fs::remove_file(dir.path().join("frames/0002.mask.pgm")).unwrap();
    let out = sa4d(&["train", "--data", p(dir.path()), "--out", p(&dir.path().join("m.ckpt")), "--iters", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn refine_interval_and_bad_checkpoints() {
    let (dir, data, ckpt, _) = fixture();
    let one = dir.path().join("one.json");
    let stdout = ok(&["refine", "--ckpt", p(ckpt), "--data", p(data), "--out", p(&one), "--interval", "6"]);
    assert!(stdout.contains("refinement took"), "{stdout}");
    assert_eq!(IdentityTable::load(&one).unwrap().timestamps.len(), 1);

    let missing = sa4d(&["refine", "--ckpt", p(&dir.path().join("nope.ckpt")), "--data", p(data), "--out", p(&one)]);
    assert_eq!(missing.status.code(), Some(2));
    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"SA4Dxxxxxxxx").unwrap();
    let bad = sa4d(&["refine", "--ckpt", p(&garbage), "--data", p(data), "--out", p(&one)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn non_finite_parameters_exit_three() {
    let (dir, data, ckpt, _) = fixture();
    let (mut field, adam) = load_checkpoint(ckpt).unwrap();
    field.tensors_mut()[0][0] = f64::NAN;
    let broken = dir.path().join("nan.ckpt");
    save_checkpoint(&broken, &field, &adam).unwrap();
    let out = sa4d(&["segment", "--data", p(data), "--ckpt", p(&broken)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn render_segment_and_eval() {
    let (dir, data, ckpt, table) = fixture();
    let out = dir.path().join("render");
    ok(&["render", "--data", p(data), "--table", p(table), "--out", p(&out), "--t", "0.3", "--view", "held-out"]);
    let mask = MaskImage::load(&out.join("mask.pgm")).unwrap();
    assert_eq!((mask.width, mask.height), (24, 24));
    assert!(sa4d::images::RgbImage::load(&out.join("image.ppm")).is_ok());

    let stdout = ok(&["segment", "--data", p(data), "--ckpt", p(ckpt), "--t", "0.2", "--refine"]);
    assert!(stdout.contains("object 1:") && stdout.contains("after refinement"), "{stdout}");

    let metrics = dir.path().join("metrics.json");
    let frames = data.join("frames");
    let stdout = ok(&["eval", "--pred", p(&frames), "--gt", p(&frames), "--out", p(&metrics)]);
    assert!(stdout.contains("mIoU 1.0000"), "{stdout}");
    let report: sa4d::eval::MetricsReport = sa4d::synth::read_json(&metrics).unwrap();
    assert_eq!(report.mean_iou, 1.0);

    ok(&["eval", "--data", p(data), "--table", p(table), "--out", p(&metrics)]);
    let report: sa4d::eval::MetricsReport = sa4d::synth::read_json(&metrics).unwrap();
    assert!((0.0..=1.0).contains(&report.mean_iou));
}

#[test]
fn edit_applies_scripts_and_rejects_dangling_ids() {
    let (dir, data, _, table) = fixture();
    let out = dir.path().join("edited");
    let stdout = ok(&["edit", "--data", p(data), "--table", p(table), "--recolor", "1:1,0,0", "--copy", "1:0,0.4,0", "--out", p(&out)]);
    assert!(stdout.contains("applied 2 edits"), "{stdout}");
    let script = sa4d::editing::EditScript::load(&out.join("edits.json")).unwrap();
    assert_eq!(script.edits.len(), 2);

    let untouched = dir.path().join("dangling");
    let bad = sa4d(&["edit", "--data", p(data), "--table", p(table), "--remove", "42", "--out", p(&untouched)]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(!untouched.exists());
}

#[test]
fn bench_reports_identical_masks_and_faster_lookup() {
    let (dir, data, ckpt, table) = fixture();
    let report = dir.path().join("bench.json");
    ok(&["bench", "--data", p(data), "--ckpt", p(ckpt), "--table", p(table), "--out", p(&report)]);
    let r: sa4d::bench::BenchReport = sa4d::synth::read_json(&report).unwrap();
    assert!(r.identical);
    assert!(r.table_fps > r.recompute_fps, "{r:?}");
}

#[test]
fn config_file_is_merged_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"scene": {"object_count": 3, "gaussians_per_object": 30, "frame_count": 4, "held_out_count": 1, "width": 16, "height": 16, "seed": 4}}"#).unwrap();
    let data = dir.path().join("data");
    ok(&["--config", p(&cfg), "gen-scene", "--out", p(&data), "--seed", "8"]);
    let d = sa4d::synth::Dataset::load(&data).unwrap();
    assert_eq!(d.scene.object_count, 3);
    assert_eq!(d.spec.seed, 8);
    let manifest: sa4d::config::RunManifest = sa4d::synth::read_json(&data.join("run.json")).unwrap();
    assert_eq!(manifest.command, "gen-scene");
    assert_eq!(manifest.config.scene.seed, 8);
    assert_eq!(manifest.config.scene.object_count, 3);
}
