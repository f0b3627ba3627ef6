//! End-to-end tests of the `veinpatch` binary: every subcommand runs as a
//! child process against synthetic data in temporary directories.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_veinpatch")
}

/// Runs the binary with a scrubbed environment so a developer's
/// VEINPATCH_CONFIG cannot leak into tests.
fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("VEINPATCH_CONFIG")
        .output()
        .expect("binary runs")
}

fn run_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("VEINPATCH_CONFIG")
        .env(key, value)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Generates a small pre-aligned synthetic dataset with labels and
/// returns (root, manifest path, label map paths by (class, sample)).
fn synth_roi(dir: &Path, classes: u32, samples: u32, seed: u64) -> PathBuf {
    let out = run(&[
        "synth",
        "--out",
        &path_str(dir),
        "--classes",
        &classes.to_string(),
        "--samples",
        &samples.to_string(),
        "--style",
        "roi",
        "--seed",
        &seed.to_string(),
    ]);
    assert_ok(&out, "synth");
    dir.join("manifest.csv")
}

fn label_path(root: &Path, class: u32, sample: u32) -> PathBuf {
    root.join(format!("cls_{class:03}/s1/lbl_{sample:02}.pgm"))
}

#[test]
fn help_exits_zero_and_errors_are_machine_parseable() {
    let out = run(&["--help"]);
    assert_ok(&out, "--help");
    assert!(stdout_of(&out).contains("evaluate"));

    let out = run(&["detect", "--in", "/nonexistent/map.pgm", "--out", "/tmp/x.csv"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.lines().any(|l| l.starts_with("error: ")),
        "stderr was: {err}"
    );
}

#[test]
fn synth_then_ingest_roundtrip_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = run(&[
        "synth",
        "--out",
        &path_str(&data),
        "--classes",
        "2",
        "--samples",
        "2",
        "--style",
        "full",
        "--seed",
        "9",
        "--no-labels",
    ]);
    assert_ok(&out, "synth");
    assert!(data.join("manifest.csv").is_file());

    let m1 = tmp.path().join("ingested.csv");
    let out = run(&["ingest", "--root", &path_str(&data), "--out", &path_str(&m1)]);
    assert_ok(&out, "ingest");
    let line = stdout_of(&out);
    assert!(line.contains("classes=2"), "stdout: {line}");
    assert!(line.contains("images=4"), "stdout: {line}");
    assert!(line.contains("excluded=0"), "stdout: {line}");

    let m2 = tmp.path().join("ingested2.csv");
    let out = run(&["ingest", "--root", &path_str(&data), "--out", &path_str(&m2)]);
    assert_ok(&out, "re-ingest");
    let b1 = std::fs::read(&m1).unwrap();
    let b2 = std::fs::read(&m2).unwrap();
    assert_eq!(b1, b2, "re-ingest changed manifest bytes");

    // A corrupt PGM lands in the exclusion report, not the manifest.
    std::fs::write(data.join("cls_000/s1/img_99.pgm"), b"not a pgm").unwrap();
    let m3 = tmp.path().join("ingested3.csv");
    let out = run(&["ingest", "--root", &path_str(&data), "--out", &path_str(&m3)]);
    assert_ok(&out, "ingest with corrupt file");
    let line = stdout_of(&out);
    assert!(line.contains("excluded=1"), "stdout: {line}");
    assert!(line.contains("images=4"), "stdout: {line}");
    let report = m3.with_extension("exclusions.csv");
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("img_99.pgm"), "report: {text}");

    // An empty root is an error.
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = run(&["ingest", "--root", &path_str(&empty), "--out", &path_str(&m1)]);
    assert!(!out.status.success());
}

fn keypoint_rows(path: &Path) -> Vec<(f64, f64)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
            (f[0], f[1])
        })
        .collect()
}

fn min_chebyshev(points: &[(f64, f64)]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = (points[i].0 - points[j].0)
                .abs()
                .max((points[i].1 - points[j].1).abs());
            best = best.min(d);
        }
    }
    best
}

#[test]
fn config_precedence_is_flag_over_file_over_default() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_roi(&data, 1, 1, 3);
    let map = label_path(&data, 0, 0);
    assert!(map.is_file(), "synth label missing");
    let conf = tmp.path().join("veinpatch.conf");
    std::fs::write(&conf, "keypoint.c = 8\n").unwrap();

    let csv_default = tmp.path().join("default.csv");
    let out = run(&["detect", "--in", &path_str(&map), "--out", &path_str(&csv_default)]);
    assert_ok(&out, "detect default");

    let csv_file = tmp.path().join("file.csv");
    let out = run(&[
        "detect",
        "--in",
        &path_str(&map),
        "--out",
        &path_str(&csv_file),
        "--config",
        &path_str(&conf),
    ]);
    assert_ok(&out, "detect with config file");

    let csv_env = tmp.path().join("env.csv");
    let out = run_env(
        &["detect", "--in", &path_str(&map), "--out", &path_str(&csv_env)],
        "VEINPATCH_CONFIG",
        &path_str(&conf),
    );
    assert_ok(&out, "detect with env config");

    let csv_flag = tmp.path().join("flag.csv");
    let out = run(&[
        "detect",
        "--in",
        &path_str(&map),
        "--out",
        &path_str(&csv_flag),
        "--config",
        &path_str(&conf),
        "--c",
        "2",
    ]);
    assert_ok(&out, "detect with flag override");

    let d = keypoint_rows(&csv_default);
    let f = keypoint_rows(&csv_file);
    let e = keypoint_rows(&csv_env);
    let g = keypoint_rows(&csv_flag);

    // The spacing guarantee identifies which radius actually applied.
    assert!(min_chebyshev(&d) > 4.0, "default run violates c=4 spacing");
    assert!(min_chebyshev(&f) > 8.0, "file run violates c=8 spacing");
    assert!(min_chebyshev(&g) > 2.0, "flag run violates c=2 spacing");
    assert!(
        min_chebyshev(&g) <= 8.0,
        "flag did not override the file: spacing {}",
        min_chebyshev(&g)
    );
    assert!(f.len() < d.len(), "c=8 should keep fewer points than c=4");
    assert!(g.len() > f.len(), "c=2 should keep more points than c=8");
    assert_eq!(f, e, "env-var config differs from --config");
}

#[test]
fn detect_describe_match_chain_produces_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_roi(&data, 2, 2, 11);
    let a = label_path(&data, 0, 0);
    let b = label_path(&data, 0, 1);
    let c = label_path(&data, 1, 0);

    let mut descs = Vec::new();
    for (i, img) in [&a, &b, &c].iter().enumerate() {
        let kps = tmp.path().join(format!("{i}.csv"));
        let out = run(&["detect", "--in", &path_str(img), "--out", &path_str(&kps)]);
        assert_ok(&out, "detect");
        assert!(stdout_of(&out).contains("keypoints="));

        let bin_path = tmp.path().join(format!("{i}.bin"));
        let out = run(&[
            "describe",
            "--raw",
            "--in",
            &path_str(img),
            "--kps",
            &path_str(&kps),
            "--out",
            &path_str(&bin_path),
        ]);
        assert_ok(&out, "describe");
        descs.push(bin_path);
    }

    let out = run(&[
        "match",
        "--probe",
        &path_str(&descs[0]),
        "--gallery",
        &path_str(&descs[1]),
        "--json",
    ]);
    assert_ok(&out, "match genuine");
    let text = stdout_of(&out);
    let score_line = text.lines().next().unwrap();
    assert!(
        score_line.starts_with("score=") && score_line[6..].parse::<usize>().is_ok(),
        "bad score line: {score_line}"
    );
    let detail: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
    assert!(detail["score"].is_u64());
    assert!(detail["matches"].is_u64());

    let out = run(&[
        "match",
        "--probe",
        &path_str(&descs[0]),
        "--gallery",
        &path_str(&descs[2]),
    ]);
    assert_ok(&out, "match imposter");
    assert!(stdout_of(&out).starts_with("score="));

    // A describe run without --raw or --model is refused.
    let out = run(&[
        "describe",
        "--in",
        &path_str(&a),
        "--kps",
        &path_str(&tmp.path().join("0.csv")),
        "--out",
        &path_str(&tmp.path().join("x.bin")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn evaluate_writes_report_roc_and_dumps() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let manifest = synth_roi(&data, 3, 2, 17);
    let report_path = tmp.path().join("report.json");
    let roc_path = tmp.path().join("roc.csv");
    let dump_dir = tmp.path().join("dump");
    let cache = tmp.path().join("cache");

    let args = [
        "evaluate",
        "--manifest",
        &path_str(&manifest),
        "--protocol",
        "fvc2004",
        "--out",
        &path_str(&report_path),
        "--roc",
        &path_str(&roc_path),
        "--cache",
        &path_str(&cache),
        "--dump-dir",
        &path_str(&dump_dir),
        "--roi-skip",
        "true",
        "--seed",
        "1",
    ];
    let out = run(&args.iter().map(|s| *s).collect::<Vec<_>>());
    assert_ok(&out, "evaluate");
    assert!(stdout_of(&out).contains("eer="));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["protocol"], "fvc2004");
    assert_eq!(report["images"], 6);
    assert_eq!(report["classes"], 3);
    assert_eq!(report["genuine_pairs"], 3);
    assert_eq!(report["imposter_pairs"], 3);
    assert!(report["eer"].is_number());
    assert!(report["roc"]["thresholds"].is_array());
    assert!(report["config"]["detect"]["suppression_radius"].is_number());

    let roc_text = std::fs::read_to_string(&roc_path).unwrap();
    assert!(roc_text.starts_with("threshold,far,frr\n"));

    // Each of the 6 manifest images dumps 4 stage artifacts.
    let dumped = std::fs::read_dir(&dump_dir).unwrap().count();
    assert_eq!(dumped, 6 * 4);
    assert!(dump_dir.join("cls000_s1_00.vein.pgm").is_file());

    // A warm cache reproduces the report byte for byte.
    let report2_path = tmp.path().join("report2.json");
    let args2 = [
        "evaluate",
        "--manifest",
        &path_str(&manifest),
        "--protocol",
        "fvc2004",
        "--out",
        &path_str(&report2_path),
        "--cache",
        &path_str(&cache),
        "--roi-skip",
        "true",
        "--seed",
        "1",
    ];
    let out = run(&args2.iter().map(|s| *s).collect::<Vec<_>>());
    assert_ok(&out, "evaluate warm");
    assert_eq!(
        std::fs::read(&report_path).unwrap(),
        std::fs::read(&report2_path).unwrap()
    );
}

#[test]
fn sweep_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let manifest = synth_roi(&data, 2, 2, 23);
    let out_path = tmp.path().join("sweep.csv");
    let out = run(&[
        "sweep",
        "--manifest",
        &path_str(&manifest),
        "--axis",
        "c",
        "--out",
        &path_str(&out_path),
        "--roi-skip",
        "true",
    ]);
    assert_ok(&out, "sweep");
    let text = std::fs::read_to_string(&out_path).unwrap();
    assert!(text.starts_with("value,eer,mean_keypoints,mean_runtime_ms\n"));
    assert_eq!(text.lines().count(), 13, "12 rows plus header");
}

#[test]
fn train_desc_synth_then_describe_with_model() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("desc.vpw");
    let out = run(&[
        "train-desc",
        "--synth-classes",
        "6",
        "--synth-samples",
        "3",
        "--batch",
        "3",
        "--epochs",
        "1",
        "--out",
        &path_str(&model),
        "--seed",
        "2",
    ]);
    assert_ok(&out, "train-desc");
    assert!(stdout_of(&out).contains("epoch=1 loss="));
    assert!(model.is_file());
    assert!(sidecar_exists(&model), "metadata sidecar missing");

    let data = tmp.path().join("data");
    synth_roi(&data, 1, 1, 31);
    let map = label_path(&data, 0, 0);
    let kps = tmp.path().join("k.csv");
    let out = run(&["detect", "--in", &path_str(&map), "--out", &path_str(&kps)]);
    assert_ok(&out, "detect");
    let descf = tmp.path().join("d.bin");
    let out = run(&[
        "describe",
        "--model",
        &path_str(&model),
        "--in",
        &path_str(&map),
        "--kps",
        &path_str(&kps),
        "--out",
        &path_str(&descf),
    ]);
    assert_ok(&out, "describe with model");
    assert!(descf.is_file());
}

fn sidecar_exists(model: &Path) -> bool {
    let mut os = model.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os).is_file()
}

#[test]
fn unet_train_infer_evalseg_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = run(&[
        "synth",
        "--out",
        &path_str(&data),
        "--classes",
        "1",
        "--samples",
        "2",
        "--style",
        "roi",
        "--seed",
        "5",
        "--width",
        "64",
        "--height",
        "48",
    ]);
    assert_ok(&out, "synth small");

    let model = tmp.path().join("unet.vpw");
    let out = run(&[
        "train-unet",
        "--data",
        &path_str(&data),
        "--labels",
        &path_str(&data),
        "--out",
        &path_str(&model),
        "--epochs",
        "1",
        "--seed",
        "5",
    ]);
    assert_ok(&out, "train-unet");
    assert!(stdout_of(&out).contains("epoch=1 loss="));
    assert!(model.is_file());

    let img = data.join("cls_000/s1/img_00.pgm");
    let prob = tmp.path().join("prob.pgm");
    let out = run(&[
        "infer-unet",
        "--model",
        &path_str(&model),
        "--in",
        &path_str(&img),
        "--out",
        &path_str(&prob),
    ]);
    assert_ok(&out, "infer-unet");
    assert!(prob.is_file());

    let out = run(&[
        "eval-seg",
        "--model",
        &path_str(&model),
        "--data",
        &path_str(&data),
        "--labels",
        &path_str(&data),
    ]);
    assert_ok(&out, "eval-seg");
    let line = stdout_of(&out);
    assert!(line.starts_with("precision="), "stdout: {line}");
    let val: f64 = line
        .split_whitespace()
        .next()
        .unwrap()
        .trim_start_matches("precision=")
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&val), "precision {val} out of range");
}

#[test]
fn roi_command_writes_image_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = run(&[
        "synth",
        "--out",
        &path_str(&data),
        "--classes",
        "1",
        "--samples",
        "1",
        "--style",
        "full",
        "--seed",
        "13",
        "--no-labels",
    ]);
    assert_ok(&out, "synth full");
    let img = data.join("cls_000/s1/img_00.pgm");
    let roi = tmp.path().join("roi.pgm");
    let report = tmp.path().join("roi.json");
    let out = run(&[
        "roi",
        "--in",
        &path_str(&img),
        "--out",
        &path_str(&roi),
        "--report",
        &path_str(&report),
    ]);
    assert_ok(&out, "roi");
    assert!(roi.is_file());
    let detail: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(detail["applied_rotation_deg"].is_number());
    assert!(detail["crop_rect"].is_array());
}

#[test]
fn labels_command_mirrors_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_roi(&data, 1, 2, 37);
    // Feed the ROI images themselves; outputs mirror the tree.
    let out_dir = tmp.path().join("labels");
    let out = run(&[
        "labels",
        "--data",
        &path_str(&data),
        "--out",
        &path_str(&out_dir),
    ]);
    assert_ok(&out, "labels");
    assert!(out_dir.join("cls_000/s1/img_00.pgm").is_file());
    assert!(out_dir.join("cls_000/s1/img_01.pgm").is_file());
}
