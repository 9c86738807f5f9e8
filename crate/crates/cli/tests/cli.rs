//! End-to-end tests of the `spinefuse` binary: exit codes, output files, and
//! determinism across processes and thread counts.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use spinefuse_core::labels::AnnotatedCenter;
use spinefuse_core::metrics::rows_from_csv;
use spinefuse_core::phantom::{make_phantom, PhantomSpec};
use spinefuse_core::{Annotation3, VertebraLabel};

fn spinefuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spinefuse"))
        .args(args)
        .output()
        .expect("binary launches")
}

fn assert_code(out: &Output, want: i32) {
    let code = out.status.code().expect("process exited normally");
    assert_eq!(
        code,
        want,
        "exit code {code}, want {want}; stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, text).expect("config written");
    path.display().to_string()
}

/// Small noiseless setup: three bodies, three views, coarse detector.
const NOISELESS: &str = r#"{
  "input": {"phantom": {"n_vertebrae": 3, "start_label_index": 10, "level_spacing_mm": 20.0,
    "dims": [64, 64, 96], "jitter_mm": 0.0}},
  "n_views": 3,
  "detector": {"nu": 96, "nv": 96, "pitch_u_mm": 2.0, "pitch_v_mm": 2.0},
  "delta_min_px": 4.0,
  "seed": 7
}"#;

/// Same geometry with every noise source switched on.
const NOISY: &str = r#"{
  "input": {"phantom": {"n_vertebrae": 3, "start_label_index": 10, "level_spacing_mm": 20.0,
    "dims": [64, 64, 96], "jitter_mm": 1.5}},
  "n_views": 4,
  "detector": {"nu": 96, "nv": 96, "pitch_u_mm": 2.0, "pitch_v_mm": 2.0},
  "delta_min_px": 4.0,
  "detector_oracle": {"noise_sigma_px": 1.0, "p_miss": 0.1, "p_spurious": 0.2},
  "classifier": {"confusion": {"off_by_one": {"eps": 0.1}}, "pixel_noise": 20.0},
  "seed": 7
}"#;

#[test]
fn phantom_outputs_are_deterministic() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(dir.path(), NOISELESS);
    for sub in ["a", "b"] {
        let out = spinefuse(&[
            "phantom",
            "--config",
            &cfg,
            "--out-dir",
            dir.path().join(sub).to_str().expect("utf-8 path"),
        ]);
        assert_code(&out, 0);
    }
    for name in ["phantom.json", "phantom.raw", "annotation.json"] {
        let a = fs::read(dir.path().join("a").join(name)).expect("first copy readable");
        let b = fs::read(dir.path().join("b").join(name)).expect("second copy readable");
        assert_eq!(a, b, "{name} differs between identical invocations");
    }
    let ann = Annotation3::load(&dir.path().join("a/annotation.json")).expect("annotation parses");
    assert_eq!(ann.len(), 3, "three bodies requested");
    assert_eq!(ann.entries()[0].label.name(), "T3", "labels start at index 10");
}

#[test]
fn oversized_phantom_is_rejected() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(dir.path(), NOISELESS);
    let out = spinefuse(&[
        "phantom",
        "--config",
        &cfg,
        "--out-dir",
        dir.path().to_str().expect("utf-8 path"),
        "--n",
        "30",
    ]);
    assert_code(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error:"), "stderr was: {stderr}");
}

#[test]
fn missing_files_exit_with_the_io_code() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = spinefuse(&["run", "--config", "/definitely/not/here.json"]);
    assert_code(&out, 3);

    let cfg = write_config(
        dir.path(),
        r#"{"input": {"files": {"volume": "/definitely/not/here.json"}}}"#,
    );
    let out = spinefuse(&["run", "--config", &cfg]);
    assert_code(&out, 3);
}

#[test]
fn run_writes_parseable_outputs() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(dir.path(), NOISELESS);
    let out_dir = dir.path().join("out");
    let out = spinefuse(&[
        "run",
        "--config",
        &cfg,
        "--out-dir",
        out_dir.to_str().expect("utf-8 path"),
        "--dump-dp",
        "--dump-probmaps",
    ]);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("id_rate 1.000"), "stdout was: {stdout}");

    let fused: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("fused.json")).expect("fused.json"))
            .expect("fused.json parses");
    let fused = fused.as_array().expect("fused.json is an array");
    assert_eq!(fused.len(), 3, "one fused centroid per body");
    for v in fused {
        assert!(v["label"].is_string(), "centroid carries a label: {v}");
        assert_eq!(v["center_mm"].as_array().map(Vec::len), Some(3), "3D center: {v}");
        assert_eq!(v["support"].as_u64(), Some(3), "every view contributes");
    }

    let eval: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("eval.json")).expect("eval.json"))
            .expect("eval.json parses");
    assert_eq!(eval["id_rate"].as_f64(), Some(1.0), "noiseless run identifies everything");
    assert_eq!(eval["matched"].as_u64(), Some(3), "all bodies matched");

    for k in 0..3 {
        assert!(
            out_dir.join(format!("detections_{k:03}.json")).exists(),
            "detections file for view {k}"
        );
        assert!(
            out_dir.join(format!("probmap_{k:03}.json")).exists(),
            "probability map for view {k}"
        );
    }
    assert!(out_dir.join("dp.json").exists(), "dp dump requested");
}

#[test]
fn render_writes_images_and_projected_centers() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(
        dir.path(),
        r#"{
          "input": {"phantom": {"n_vertebrae": 3, "start_label_index": 10,
            "level_spacing_mm": 16.0, "body_semi_axes_mm": [7.0, 6.0, 5.0],
            "curvature_mm": 2.0, "dims": [32, 32, 48], "jitter_mm": 0.0}},
          "detector": {"nu": 64, "nv": 64, "pitch_u_mm": 2.0, "pitch_v_mm": 2.0},
          "delta_min_px": 4.0
        }"#,
    );
    let out_dir = dir.path().join("out");
    let out = spinefuse(&[
        "render",
        "--config",
        &cfg,
        "--out-dir",
        out_dir.to_str().expect("utf-8 path"),
        "--k",
        "2",
    ]);
    assert_code(&out, 0);
    for k in 0..2 {
        assert!(out_dir.join(format!("view_{k:03}.pgm")).exists(), "image for view {k}");
        assert!(out_dir.join(format!("view_{k:03}.json")).exists(), "sidecar for view {k}");
    }
    let proj: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(out_dir.join("projections.json")).expect("projections.json"),
    )
    .expect("projections.json parses");
    let views = proj.as_array().expect("one entry per view");
    assert_eq!(views.len(), 2, "two views requested");
    for v in views {
        assert_eq!(
            v["points"].as_array().map(Vec::len),
            Some(3),
            "each view projects every annotated center: {v}"
        );
    }
}

#[test]
fn sweep_csv_matches_the_requested_grid() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(dir.path(), NOISELESS);
    let out = spinefuse(&[
        "sweep",
        "--config",
        &cfg,
        "--out-dir",
        dir.path().to_str().expect("utf-8 path"),
        "--k",
        "3,4",
        "--seeds",
        "2",
    ]);
    assert_code(&out, 0);
    let rows = rows_from_csv(&fs::read_to_string(dir.path().join("sweep.csv")).expect("sweep.csv"))
        .expect("csv parses");
    let grid: Vec<(usize, u64)> = rows.iter().map(|r| (r.k, r.seed)).collect();
    assert_eq!(grid, vec![(3, 0), (3, 1), (4, 0), (4, 1)], "view-count-major grid order");
    for r in &rows {
        assert!(r.id_rate >= 0.0 && r.id_rate <= 1.0, "id rate in range: {r:?}");
        assert_eq!(r.matched + r.missed, 3, "every body matched or missed: {r:?}");
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("K=3") && stdout.contains("K=4"), "stdout was: {stdout}");
}

#[test]
fn thread_count_and_seed_flags_behave() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(dir.path(), NOISY);
    let run = |sub: &str, extra: &[&str]| {
        let out_dir = dir.path().join(sub);
        let mut args = vec![
            "run".to_string(),
            "--config".into(),
            cfg.clone(),
            "--out-dir".into(),
            out_dir.display().to_string(),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        let out = spinefuse(&args.iter().map(String::as_str).collect::<Vec<_>>());
        assert_code(&out, 0);
        fs::read(out_dir.join("fused.json")).expect("fused.json readable")
    };
    let single = run("t1", &["--threads", "1"]);
    let parallel = run("t2", &["--threads", "2"]);
    let reseeded = run("t3", &["--seed", "99"]);
    assert_eq!(single, parallel, "thread count changed the fused output");
    assert_ne!(single, reseeded, "the seed override had no effect");
}

#[test]
fn center_behind_the_source_fails_projection() {
    let dir = tempfile::tempdir().expect("tempdir");
    let spec = PhantomSpec {
        n_vertebrae: 2,
        start_label_index: 10,
        level_spacing_mm: 16.0,
        body_semi_axes_mm: [7.0, 6.0, 5.0],
        dims: [32, 32, 48],
        ..PhantomSpec::default()
    };
    let (vol, _) = make_phantom(&spec).expect("phantom builds");
    vol.save(&dir.path().join("vol")).expect("volume saved");
    // One center 1000 mm beyond the view-0 source (source sits 1000 mm from
    // the isocenter): its perspective denominator is negative.
    let ann = Annotation3::new(vec![AnnotatedCenter {
        label: VertebraLabel::new(10).expect("index 10 is in range"),
        center_mm: [2000.0, 0.0, 0.0],
    }])
    .expect("annotation builds");
    ann.save(&dir.path().join("ann.json")).expect("annotation saved");
    let cfg = write_config(
        dir.path(),
        &format!(
            r#"{{
              "input": {{"files": {{"volume": "{}", "annotation": "{}"}}}},
              "n_views": 3,
              "detector": {{"nu": 64, "nv": 64, "pitch_u_mm": 2.0, "pitch_v_mm": 2.0}},
              "delta_min_px": 4.0
            }}"#,
            dir.path().join("vol.json").display(),
            dir.path().join("ann.json").display()
        ),
    );
    let out = spinefuse(&[
        "run",
        "--config",
        &cfg,
        "--out-dir",
        dir.path().join("out").to_str().expect("utf-8 path"),
    ]);
    assert_code(&out, 4);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("view 0"), "stderr was: {stderr}");
}
