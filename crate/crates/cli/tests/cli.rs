use std::path::Path;
use std::process::{Command, Output};

const SMALL_SPEC: &str = r#"{
  "name": "small",
  "input": [3, 32, 32],
  "layers": [
    {"kind": "conv", "kernel": [3, 3], "stride": 1, "in_channels": 3, "out_channels": 4},
    {"kind": "relu"},
    {"kind": "conv_strided", "kernel": [3, 3], "stride": 2, "in_channels": 4, "out_channels": 6},
    {"kind": "relu"},
    {"kind": "conv_transpose", "kernel": [2, 2], "stride": 2, "in_channels": 6, "out_channels": 4},
    {"kind": "relu"},
    {"kind": "conv", "kernel": [3, 3], "stride": 1, "in_channels": 8, "out_channels": 4, "concat": 1}
  ]
}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchfeas"))
        .args(args)
        .current_dir(dir)
        .env_remove("PATCHFEAS_WORKERS")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &[]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["feasibility"]).status.code(), Some(1));
    assert_eq!(
        run(
            dir.path(),
            &["feasibility", "--log10", "10", "--classes", "1"]
        )
        .status
        .code(),
        Some(1)
    );
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), "{\"name\": 3}").unwrap();
    assert_eq!(
        run(dir.path(), &["rf", "--spec", "bad.json"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(dir.path(), &["rf", "--spec", "missing.json"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn feasibility_from_a_literal() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(
        dir.path(),
        &["feasibility", "--log10", "219", "--classes", "19"],
    );
    let row = out.lines().nth(1).unwrap();
    assert!(row.ends_with(",171,13"), "{row}");
    let out = ok(
        dir.path(),
        &["feasibility", "--log10", "1500", "--classes", "10"],
    );
    assert!(out.lines().nth(1).unwrap().ends_with(",1499,38"));
}

#[test]
fn preset_table_has_sixteen_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["feasibility", "--preset", "reference"]);
    assert_eq!(out.lines().count(), 17);
}

#[test]
fn generated_data_repeats_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "--seed", "5", "gen-data", "--count", "3", "--size", "32", "--out", "a",
        ],
    );
    ok(
        d,
        &[
            "--seed", "5", "gen-data", "--count", "3", "--size", "32", "--out", "b",
        ],
    );
    for f in ["00000.ppm", "00002.pgm", "meta.json"] {
        assert_eq!(
            std::fs::read(d.join("a").join(f)).unwrap(),
            std::fs::read(d.join("b").join(f)).unwrap()
        );
    }
    let v = ok(d, &["verify", "a/manifest.json"]);
    assert!(v.starts_with("ok"));

    std::fs::write(d.join("a/00001.ppm"), b"P6\n1 1\n255\n\0\0\0").unwrap();
    let o = run(d, &["verify", "a/manifest.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("00001.ppm"));
}

#[test]
fn train_attack_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.json"), SMALL_SPEC).unwrap();
    ok(
        d,
        &[
            "--seed", "1", "gen-data", "--count", "8", "--size", "32", "--out", "train",
        ],
    );
    ok(
        d,
        &[
            "--seed", "2", "gen-data", "--count", "2", "--size", "32", "--out", "val",
        ],
    );
    ok(
        d,
        &[
            "train",
            "--spec",
            "small.json",
            "--data",
            "train",
            "--val",
            "val",
            "--epochs",
            "1",
            "--out",
            "m.pseg",
        ],
    );
    assert_eq!(&std::fs::read(d.join("m.pseg")).unwrap()[..5], b"PSEG1");
    let log = std::fs::read_to_string(d.join("m.epochs.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);

    // Switch whichever object class the first validation image holds.
    let labels = std::fs::read(d.join("val/00000.pgm")).unwrap();
    let from = (1..4u8)
        .find(|c| labels[labels.len() - 32 * 32..].contains(c))
        .unwrap();
    let target = format!("class_switch:{from}:{}", from % 3 + 1);
    let args = [
        "attack",
        "--model",
        "m.pseg",
        "--image",
        "val/00000.ppm",
        "--labels",
        "val/00000.pgm",
        "--target",
        &target,
        "--patch",
        "4x4@auto",
        "--iters",
        "3",
        "--eot",
        "--out-prefix",
        "run",
    ];
    let printed = ok(d, &args);
    assert!(printed.contains("changed_pixels"));
    for suffix in [
        "patched.ppm",
        "patch.ppm",
        "before.pgm",
        "after.pgm",
        "changed.pgm",
        "metrics.json",
        "trace.csv",
        "manifest.json",
    ] {
        assert!(d.join(format!("run_{suffix}")).exists(), "{suffix}");
    }
    let trace = std::fs::read_to_string(d.join("run_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 4);
    ok(d, &["verify", "run_manifest.json"]);

    // A second run with the same seed writes identical artifacts.
    let again: Vec<&str> = args
        .iter()
        .map(|a| if *a == "run" { "rerun" } else { a })
        .collect();
    ok(d, &again);
    for suffix in ["patched.ppm", "metrics.json", "trace.csv", "changed.pgm"] {
        assert_eq!(
            std::fs::read(d.join(format!("run_{suffix}"))).unwrap(),
            std::fs::read(d.join(format!("rerun_{suffix}"))).unwrap(),
            "{suffix}"
        );
    }

    ok(
        d,
        &[
            "feasibility",
            "--spec",
            "small.json",
            "--patch",
            "4x4",
            "--classes",
            "4",
            "--mode",
            "as_printed",
            "--out",
            "feas.csv",
        ],
    );
    let report = ok(
        d,
        &[
            "report",
            "--feasibility",
            "feas.csv",
            "--metrics",
            "run*_metrics.json",
        ],
    );
    let mut lines = report.lines();
    assert!(lines
        .next()
        .unwrap()
        .ends_with("measured_changed_pixels,verdict"));
    let row = lines.next().unwrap();
    assert!(row.starts_with("small,4,4,as_printed,"), "{row}");
    assert!(
        row.ends_with(",exceeds") || row.ends_with(",within"),
        "{row}"
    );
}
