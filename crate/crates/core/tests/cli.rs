use std::path::Path;
use std::process::{Command, Output};

use mmdistill::cli::{EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_MISSING_ARTIFACT, EXIT_USAGE};
use mmdistill::config::RunConfig;

const SMALL: &[&str] = &[
    "--set",
    "data.train_size=120",
    "--set",
    "data.val_size=30",
    "--set",
    "data.test_size=40",
    "--set",
    "pretrain.epochs=1",
    "--set",
    "pretrain.max_samples=60",
    "--set",
    "teacher_plan.epochs=1",
    "--set",
    "student_plan.epochs=2",
    "--set",
    "eval.sweep_probabilities=[0.0,0.9]",
];

fn mmdistill(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmdistill"))
        .args(args)
        .arg("--out")
        .arg(out)
        .args(SMALL)
        .output()
        .unwrap()
}

fn ok(out: &Path, args: &[&str]) {
    let o = mmdistill(out, args);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn pipeline(out: &Path) {
    for stage in [
        "gen-data",
        "pretrain-encoders",
        "train-teacher",
        "distill-student",
        "train-baseline",
    ] {
        ok(out, &[stage]);
    }
    ok(out, &["evaluate", "--model", "student"]);
    ok(out, &["evaluate", "--model", "baseline"]);
}

#[test]
fn evaluate_before_training_reports_the_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let o = mmdistill(dir.path(), &["evaluate"]);
    assert_eq!(o.status.code(), Some(EXIT_MISSING_ARTIFACT as i32));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing upstream artifact"));
}

#[test]
fn unknown_subcommand_and_bad_config_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = mmdistill(dir.path(), &["train-everything"]);
    assert_eq!(o.status.code(), Some(EXIT_USAGE as i32));
    let o = mmdistill(dir.path(), &["gen-data", "--set", "theta=0"]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG as i32));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "schema = \"mmdistill.run/0\"\n").unwrap();
    let o = mmdistill(dir.path(), &["gen-data", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG as i32));
}

#[test]
fn pipeline_is_bit_reproducible_and_echo_reproduces_it() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for file in [
        "teacher/metrics.csv",
        "student/metrics.csv",
        "baseline/metrics.csv",
        "eval/student.csv",
        "eval/baseline.csv",
    ] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert_eq!(x, y, "{file} differs");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("eval/student.json")).unwrap())
            .unwrap();
    assert_eq!(report["schema"], "mmdistill.report/1");

    // rerun the teacher from the echoed config alone
    let echo = a.path().join("config.toml");
    let c = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_mmdistill"))
        .args([
            "gen-data",
            "--config",
            echo.to_str().unwrap(),
            "--out",
            c.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(o.status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_mmdistill"))
        .args([
            "train-teacher",
            "--config",
            echo.to_str().unwrap(),
            "--out",
            c.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(
        std::fs::read(a.path().join("teacher/metrics.csv")).unwrap(),
        std::fs::read(c.path().join("teacher/metrics.csv")).unwrap()
    );
}

#[test]
fn overrides_change_only_the_named_keys() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "gen-data",
            "--set",
            "student_plan.alpha=0.4",
            "--set",
            "eval.theta_grid.1=100",
        ],
    );
    let echoed = RunConfig::load(&dir.path().join("config.toml")).unwrap();
    let mut expected = RunConfig::default()
        .with_overrides(
            &SMALL
                .iter()
                .skip(1)
                .step_by(2)
                .map(|s| s.to_string())
                .collect::<Vec<_>>(),
        )
        .unwrap();
    expected.out_dir = dir.path().to_path_buf();
    assert_ne!(echoed, expected);
    expected.student_plan.alpha = 0.4;
    expected.eval.theta_grid[1] = 100;
    assert_eq!(echoed, expected);
}

#[test]
fn alpha_ablation_trains_one_student_per_grid_value() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data"]);
    ok(d, &["train-teacher"]);
    ok(d, &["ablate-alpha"]);
    let text = std::fs::read_to_string(d.join("ablations/alpha.csv")).unwrap();
    let alphas: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(alphas, ["1", "0.7", "0.4", "0.1"]);
    for a in &alphas {
        assert!(d.join(format!("student-alpha-{a}/metrics.csv")).exists());
    }
    ok(d, &["report"]);
    assert!(std::fs::read_to_string(d.join("report.md"))
        .unwrap()
        .contains("student-alpha-0.4"));
}

#[test]
fn divergence_has_its_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data"]);
    let o = mmdistill(
        dir.path(),
        &[
            "train-baseline",
            "--set",
            "student_plan.base_lr=1e200",
            "--set",
            "student_plan.peak_lr=1e200",
        ],
    );
    assert_eq!(
        o.status.code(),
        Some(EXIT_DIVERGENCE as i32),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
}
