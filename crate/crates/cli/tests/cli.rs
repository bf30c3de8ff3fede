use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ownerguard(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ownerguard"))
        .current_dir(dir)
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ownerguard(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &[&str] = &["--k", "60"];

fn synth_small(dir: &Path) {
    ok(dir, &["synth", "--trips-per-driver", "12", "--duration-s", "320"]);
}

#[test]
fn full_workflow_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_small(d);
    let ingest = ok(d, &["ingest"]);
    assert!(ingest.contains("essential: "));
    assert!(ingest.contains("fuel_rail_pressure_aux"));
    let train = ok(d, &[SMALL, &["train"]].concat());
    assert_eq!(train.lines().count(), 5);
    let table = ok(d, &["evaluate"]);
    assert!(table.starts_with("| Model Name |"));
    assert!(table.contains("| Model Ensemble |"));

    let detect = ok(d, &["detect", "A-10-splice-B"]);
    assert!(detect.starts_with("A-10-splice-B: "));
    assert!(detect.contains("THEFT"));
    assert!(d.join("out/detect/A-10-splice-B.json").exists());

    ok(d, &["report", "A-10-splice-B"]);
    let report = d.join("out/report/A-10-splice-B");
    assert!(report.join("summary.md").exists());
    assert!(report.join("transmission_oil_temperature.csv").exists());
    assert!(report.join("transmission_oil_temperature.svg").exists());
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("run.json"),
        r#"{"data_dir": "corpus", "output_dir": "results", "k": 40, "synth": {"trips_per_driver": 12, "duration_s": 320}}"#,
    )
    .unwrap();
    ok(d, &["--config", "run.json", "synth"]);
    assert!(d.join("corpus/manifest.json").exists());
    ok(d, &["--config", "run.json", "ingest"]);
    let train = ok(d, &["--config", "run.json", "--k", "30", "train"]);
    assert!(train.lines().all(|l| l.contains("k=30")), "{train}");
    assert!(d.join("results/codebooks").is_dir());
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    // Configuration problems exit with 1.
    fs::write(d.join("bad.json"), r#"{"windw_s": 32}"#).unwrap();
    assert_eq!(ownerguard(d, &["--config", "bad.json", "ingest"]).status.code(), Some(1));
    assert_eq!(ownerguard(d, &["--filter", "boxcar", "ingest"]).status.code(), Some(1));

    // Data problems exit with 2.
    assert_eq!(ownerguard(d, &["ingest"]).status.code(), Some(2));

    synth_small(d);
    // Nothing separates drivers this strongly.
    let out = ownerguard(d, &["--separation-threshold", "1000", "ingest"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("relax the separation threshold"));

    ok(d, &["ingest"]);
    // 190 segments per feature cannot support k = 500.
    assert_eq!(ownerguard(d, &["--elbow-k", "10,500", "train"]).status.code(), Some(3));
    ok(d, &[SMALL, &["train"]].concat());
    ok(d, &["evaluate"]);
    assert_eq!(ownerguard(d, &["detect", "no-such-trip"]).status.code(), Some(2));
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(dir.path(), &["--help"]);
    for cmd in ["synth", "ingest", "train", "detect", "evaluate", "report"] {
        assert!(help.contains(cmd), "{cmd} missing from help");
    }
}
