//! Subcommand contracts exercised through the real binary.

use std::path::Path;
use std::process::{Command, Output};

fn panocon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panocon"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn read_dir_sorted(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn gen_synth_writes_the_requested_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    let run = panocon(&[
        "gen-synth",
        "--n",
        "8",
        "--seed",
        "7",
        "--height",
        "40",
        "--width",
        "128",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let names = read_dir_sorted(&out);
    assert_eq!(names.iter().filter(|n| n.ends_with(".ppm")).count(), 8);
    assert_eq!(names.iter().filter(|n| n.ends_with(".pgm")).count(), 8);
    assert!(names.contains(&"meta.json".to_string()));
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["count"], 8);
    assert_eq!(meta["files"].as_array().unwrap().len(), 8);
}

#[test]
fn gen_synth_zero_images_still_writes_valid_meta() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    let run = panocon(&["gen-synth", "--n", "0", "--out", out.to_str().unwrap()]);
    assert!(run.status.success());
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["count"], 0);
    assert_eq!(meta["files"].as_array().unwrap().len(), 0);
}

fn tiny_dataset(dir: &Path) {
    let run = panocon(&[
        "gen-synth",
        "--n",
        "4",
        "--seed",
        "3",
        "--height",
        "48",
        "--width",
        "160",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(run.status.success());
}

#[test]
fn pretrain_with_alpha_zero_reports_but_excludes_glopro() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_dataset(&data);
    let out = dir.path().join("run");
    let run = panocon(&[
        "pretrain",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--alpha",
        "0",
        "--steps",
        "3",
        "--batch-size",
        "2",
        "--height",
        "32",
        "--width",
        "64",
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next().unwrap(), "step,epoch,lr,l_spatial,l_glopro,l_total");
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        let (l_spatial, l_glopro, l_total): (f64, f64, f64) = (
            cols[3].parse().unwrap(),
            cols[4].parse().unwrap(),
            cols[5].parse().unwrap(),
        );
        assert!(l_glopro != 0.0, "glopro column still populated");
        assert_eq!(l_total, l_spatial, "alpha 0 excludes glopro from the total");
    }
}

#[test]
fn pretrain_records_batch_scale_in_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_dataset(&data);
    let out = dir.path().join("run");
    let run = panocon(&[
        "pretrain",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--opt",
        "lars",
        "--batch-scale",
        "2",
        "--batch-size",
        "1",
        "--steps",
        "2",
        "--height",
        "32",
        "--width",
        "64",
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    // the checkpoint header is JSON after magic(8) + version(4) + len(8)
    let bytes = std::fs::read(out.join("checkpoint.ckpt")).unwrap();
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[20..20 + header_len]).unwrap();
    assert_eq!(header["config"]["batch_scale"], 2);
    assert_eq!(header["config"]["optimizer"]["kind"], "lars");
}

#[test]
fn invalid_optimizer_is_a_usage_error() {
    let run = panocon(&[
        "pretrain",
        "--data",
        "/nonexistent",
        "--out",
        "/nonexistent",
        "--opt",
        "adam",
    ]);
    assert_eq!(run.status.code(), Some(2));
}

#[test]
fn eval_pq_of_identical_dirs_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_dataset(&data);
    let out = dir.path().join("report");
    let run = panocon(&[
        "eval-pq",
        "--pred",
        data.to_str().unwrap(),
        "--gt",
        data.to_str().unwrap(),
        "--classes",
        data.join("classes.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(run.status.success());
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.contains("pq_all 1.0000"), "{stdout}");
    // report mirrors the stuff/things row structure
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pq_stuff"], 1.0);
    assert_eq!(report["pq_things"], 1.0);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("stuff,")));
    assert!(csv.lines().any(|l| l.starts_with("things,")));
}

#[test]
fn missing_counterpart_names_the_offender() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt");
    tiny_dataset(&gt);
    let pred = dir.path().join("pred");
    std::fs::create_dir_all(&pred).unwrap();
    // copy all but one map
    for name in read_dir_sorted(&gt) {
        if name.ends_with(".pgm") && name != "002.pgm" {
            std::fs::copy(gt.join(&name), pred.join(&name)).unwrap();
        }
    }
    let run = panocon(&[
        "eval-pq",
        "--pred",
        pred.to_str().unwrap(),
        "--gt",
        gt.to_str().unwrap(),
        "--classes",
        gt.join("classes.json").to_str().unwrap(),
    ]);
    assert_eq!(run.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&run.stderr);
    assert!(stderr.contains("002.pgm"), "offender not named: {stderr}");
}

#[test]
fn fov_sweep_uses_the_reference_grid_and_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_dataset(&data);
    let out = dir.path().join("fov.csv");
    let run = panocon(&[
        "fov-sweep",
        "--pred",
        data.to_str().unwrap(),
        "--gt",
        data.to_str().unwrap(),
        "--classes",
        data.join("classes.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "fov_deg,pq,pq_stuff,pq_things");
    let fovs: Vec<f64> = lines
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(fovs, vec![140.0, 170.0, 205.0, 237.0, 271.0, 304.0, 338.0]);
}

#[test]
fn alpha_sweep_covers_the_default_grid_and_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_dataset(&data);
    let out = dir.path().join("alpha.csv");
    let run = panocon(&[
        "alpha-sweep",
        "--data",
        data.to_str().unwrap(),
        "--steps",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "alpha,l_spatial,l_glopro,l_total");
    let mut alphas = Vec::new();
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 4);
        let alpha: f64 = cols[0].parse().unwrap();
        let (ls, lg, lt): (f64, f64, f64) = (
            cols[1].parse().unwrap(),
            cols[2].parse().unwrap(),
            cols[3].parse().unwrap(),
        );
        // columns are means over the trace tail, so the recombined identity
        // holds to rounding, not bitwise
        assert!((lt - (ls + alpha * lg)).abs() < 1e-12);
        alphas.push(alpha);
    }
    assert_eq!(alphas, vec![0.25, 0.5, 1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn config_files_reject_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_dataset(&data);
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{ "epochs": 1, "no_such_knob": 5 }"#).unwrap();
    let run = panocon(&[
        "pretrain",
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(run.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&run.stderr).contains("no_such_knob"));
}

#[test]
fn help_enumerates_the_documented_flags() {
    let expectations: &[(&str, &[&str])] = &[
        ("gen-synth", &["--n", "--seed", "--out", "--height", "--width", "--config"]),
        (
            "pretrain",
            &[
                "--data",
                "--out",
                "--opt",
                "--epochs",
                "--batch-size",
                "--batch-scale",
                "--steps",
                "--seed",
                "--alpha",
                "--tau",
                "--threshold-ratio",
                "--beta",
                "--warm-start-epochs",
                "--config",
                "--threads",
                "--verbose",
            ],
        ),
        ("eval-pq", &["--pred", "--gt", "--classes", "--out", "--threads"]),
        (
            "fov-sweep",
            &["--pred", "--gt", "--classes", "--fovs", "--center", "--out", "--threads"],
        ),
        (
            "alpha-sweep",
            &["--data", "--alphas", "--steps", "--seed", "--opt", "--out", "--threads"],
        ),
        ("selfcheck", &["--seeds"]),
    ];
    for (cmd, flags) in expectations {
        let run = panocon(&[cmd, "--help"]);
        assert!(run.status.success());
        let help = String::from_utf8_lossy(&run.stdout);
        for flag in *flags {
            assert!(help.contains(flag), "{cmd} --help missing {flag}");
        }
    }
}

#[test]
fn selfcheck_passes() {
    let run = panocon(&["selfcheck"]);
    assert!(run.status.success());
    assert!(String::from_utf8_lossy(&run.stdout).contains("selfcheck ok"));
}

#[test]
fn non_finite_training_exits_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_dataset(&data);
    let run = panocon(&[
        "pretrain",
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
        "--lr",
        "1e300",
        "--steps",
        "3",
        "--batch-size",
        "1",
        "--height",
        "32",
        "--width",
        "64",
    ]);
    assert_eq!(run.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&run.stderr).contains("numeric failure"));
}
