//! Exit-code and file-output contract of the command-line interface.

use std::path::Path;
use std::process::{Command, Output};

use poslin::gen::{example_one, example_two};
use poslin::Policy;
use sha2::{Digest, Sha256};

fn poslin(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poslin"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("one.json"), example_one().to_json()).unwrap();
    assert_eq!(code(&poslin(&["validate", "one.json"], dir.path())), 0);

    let bad = example_one().to_json().replace("\"s\": [\n    1.0", "\"s\": [\n    -1.0");
    assert_ne!(bad, example_one().to_json());
    std::fs::write(dir.path().join("bad.json"), bad).unwrap();
    let out = poslin(&["validate", "bad.json"], dir.path());
    assert_eq!(code(&out), 1);
    let report = String::from_utf8(out.stdout).unwrap();
    assert!(report.contains("s_strictly_positive"), "{report}");

    std::fs::write(dir.path().join("broken.json"), "{ not json").unwrap();
    assert_eq!(code(&poslin(&["validate", "broken.json"], dir.path())), 2);
    assert_eq!(code(&poslin(&["validate", "missing.json"], dir.path())), 2);
}

#[test]
fn solve_methods_agree_and_diverge_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("one.json"), example_one().to_json()).unwrap();
    let vi = poslin(&["solve", "one.json", "--method", "vi"], dir.path());
    let oracle = poslin(&["solve", "one.json", "--method", "oracle"], dir.path());
    assert_eq!(code(&vi), 0);
    assert_eq!(code(&oracle), 0);
    let v1: serde_json::Value = serde_json::from_slice(&vi.stdout).unwrap();
    let v2: serde_json::Value = serde_json::from_slice(&oracle.stdout).unwrap();
    let d = (v1["value"].as_f64().unwrap() - v2["value"].as_f64().unwrap()).abs();
    assert!(d < 1e-8);

    // Drift-only divergent instance: value iteration cannot converge.
    let unstable = poslin::gen::scalar_instance(1.5, 1.0);
    std::fs::write(dir.path().join("unstable.json"), unstable.to_json()).unwrap();
    assert_eq!(code(&poslin(&["solve", "unstable.json"], dir.path())), 3);

    let scalar = poslin::gen::scalar_instance(0.5, 1.0);
    std::fs::write(dir.path().join("scalar.json"), scalar.to_json()).unwrap();
    let out = poslin(&["solve", "scalar.json"], dir.path());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["p"][0].as_f64().unwrap() - 2.0).abs() < 1e-8);
    assert!((v["value"].as_f64().unwrap() - 2.0).abs() < 1e-8);
}

#[test]
fn search_requires_initial_policy_and_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("one.json"), example_one().to_json()).unwrap();
    assert_eq!(
        code(&poslin(&["search", "one.json", "--gamma", "1.1"], dir.path())),
        4
    );
    assert_eq!(
        code(&poslin(&["search", "one.json", "--gamma", "0.5"], dir.path())),
        2
    );

    let mut inst = example_one();
    inst.k_hat = Some(Policy::all_idle(3));
    std::fs::write(dir.path().join("one_khat.json"), inst.to_json()).unwrap();
    let out = poslin(
        &[
            "search",
            "one_khat.json",
            "--gamma",
            "1.0",
            "--trace",
            "trace.csv",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,cardinality_S,upper_total,lower_total,selected_state"));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["ratio"].as_f64().unwrap() <= 1.0 + 1e-9);
}

#[test]
fn convert_exit_codes_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("one.json"), example_one().to_json()).unwrap();
    std::fs::write(dir.path().join("two.json"), example_two().to_json()).unwrap();

    let out = poslin(
        &["convert", "two.json", "--to", "ssp", "--out", "two_ssp.json"],
        dir.path(),
    );
    assert_eq!(code(&out), 5);
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("--skeleton"), "{err}");

    assert_eq!(
        code(&poslin(
            &[
                "convert",
                "two.json",
                "--to",
                "ssp",
                "--skeleton",
                "16",
                "--out",
                "two_sk.json"
            ],
            dir.path()
        )),
        0
    );

    assert_eq!(
        code(&poslin(
            &["convert", "one.json", "--to", "ssp", "--out", "one_ssp.json"],
            dir.path()
        )),
        0
    );
    assert_eq!(
        code(&poslin(
            &[
                "convert",
                "one_ssp.json",
                "--to",
                "control",
                "--out",
                "one_back.json"
            ],
            dir.path()
        )),
        0
    );
    let back =
        poslin::ProblemInstance::from_json(&std::fs::read_to_string(dir.path().join("one_back.json")).unwrap())
            .unwrap();
    let p0 = poslin::bellman::solve(&example_one()).unwrap().p;
    let p1 = poslin::bellman::solve(&back).unwrap().p;
    assert!((p0.as_vec() - p1.as_vec()).amax() < 1e-8);
}

#[test]
fn gen_flag_validation() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&poslin(
            &["gen", "--preset", "chemical", "--n", "4"],
            dir.path()
        )),
        2
    );
    let out = poslin(&["gen", "--preset", "random", "--n", "1"], dir.path());
    assert_eq!(code(&out), 0);
    let inst = poslin::ProblemInstance::from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(inst.n, 1);

    // Unknown flags are a usage error.
    assert_eq!(code(&poslin(&["gen", "--bogus"], dir.path())), 2);
}

#[test]
fn chemical_preset_digest_is_frozen() {
    let dir = tempfile::tempdir().unwrap();
    let out = poslin(
        &["gen", "--preset", "chemical", "--seed", "7", "--out", "plant.json"],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let bytes = std::fs::read(dir.path().join("plant.json")).unwrap();
    let digest = format!("{:x}", Sha256::digest(&bytes));
    assert_eq!(
        digest,
        "afed3490d005a842ef37134aad42d2c26886e2098564a5577d1a95ff18562cb5"
    );
}

#[test]
fn run_record_lands_on_stderr_only() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("one.json"), example_one().to_json()).unwrap();
    let out = poslin(&["solve", "one.json"], dir.path());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("wall_time_ms"));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(!stdout.contains("wall_time_ms"));
}
