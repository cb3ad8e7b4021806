//! End-to-end checks of the command-line interface: argument validation,
//! exit codes, and the artifacts each subcommand writes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::process::{Command, Output};

use quadpolicy::mlp::Mlp;

fn quadpolicy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quadpolicy"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn missing_config_exits_one_and_names_the_path() {
    let out = quadpolicy(&["train", "--config", "/no/such/config.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("/no/such/config.toml"),
        "stderr should name the missing file: {}",
        stderr(&out)
    );
}

#[test]
fn smoke_and_config_are_mutually_exclusive() {
    let out = quadpolicy(&["train", "--smoke", "--config", "whatever.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("exclusive"), "{}", stderr(&out));
}

#[test]
fn evaluate_rejects_policy_together_with_pd_only() {
    let out = quadpolicy(&["evaluate", "--policy", "p.net", "--pd-only"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn evaluate_requires_some_controller() {
    let out = quadpolicy(&["evaluate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn evaluate_rejects_wrongly_shaped_policy() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.net");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Mlp::init(&[4, 4], &mut rng).unwrap().save(&path).unwrap();
    let out = quadpolicy(&["evaluate", "--policy", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("18"), "{}", stderr(&out));
}

#[test]
fn pd_only_recovery_evaluation_runs() {
    let out = quadpolicy(&["evaluate", "--pd-only", "--rollouts", "5", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("recovery: 5 rollouts"), "{text}");
}

#[test]
fn export_traj_writes_a_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traj.csv");
    let out = quadpolicy(&[
        "export-traj",
        "--pd-only",
        "--steps",
        "50",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("t,px,py,pz,"), "{header}");
    assert_eq!(lines.count(), 50);
}

#[test]
fn bench_inference_reports_latency() {
    let out = quadpolicy(&["bench", "--mode", "inference", "--repetitions", "200"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("median"), "{}", stdout(&out));
}

#[test]
fn train_writes_artifacts_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let run = |iters: &str| {
        quadpolicy(&[
            "train",
            "--smoke",
            "--seed",
            "11",
            "--iterations",
            iters,
            "--out",
            out_dir.to_str().unwrap(),
        ])
    };
    let out = run("1");
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for name in ["config.toml", "policy.net", "value.net", "learning_curve.csv", "timings.csv"] {
        assert!(out_dir.join(name).exists(), "missing {name}");
    }
    let curve = std::fs::read_to_string(out_dir.join("learning_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3); // header, baseline row, iteration 1

    let out = run("2");
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stderr(&out).contains("resuming"), "{}", stderr(&out));
    let curve = std::fs::read_to_string(out_dir.join("learning_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);
}
