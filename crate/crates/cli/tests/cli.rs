//! End-to-end tests for the `likertlab` binary: every subcommand, the exit
//! code discipline, and byte-level determinism of repeated runs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_likertlab"))
}

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(rel)
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

/// Writes a one-question plan with a single synthetic backend into `dir`.
fn small_plan(dir: &Path, repetitions: u32, seed: u64) -> PathBuf {
    let plan = serde_json::json!({
        "questionnaire": fixture("questionnaires/q1.json"),
        "backends": [
            {"type": "synthetic", "name": "neutral", "profile": {}}
        ],
        "repetitions": repetitions,
        "seed": seed,
    });
    let path = dir.join("plan.json");
    std::fs::write(&path, serde_json::to_string_pretty(&plan).unwrap()).unwrap();
    path
}

#[test]
fn perturb_writes_dump_and_reports_per_kind_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("conditions.jsonl");
    let output = bin()
        .args(["perturb"])
        .arg(fixture("questionnaires/q1.json"))
        .args(["--provider", "table1"])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr(&output));

    let text = stdout(&output);
    for kind in [
        "original",
        "response_order",
        "missing_refusal",
        "odd_scale",
        "even_scale",
        "emotional_priming",
        "key_typo",
        "letter_swap",
        "keyboard_typo",
        "synonym",
        "paraphrase",
        "paraphrase_x_reversal",
    ] {
        assert!(
            text.contains(&format!("{kind}: 1")),
            "missing {kind} in:\n{text}"
        );
    }

    let dump = std::fs::read_to_string(&out).unwrap();
    assert_eq!(dump.lines().count(), 12);
    // Every line is a JSON object with a rendered prompt.
    for line in dump.lines() {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(record["rendered_prompt"].is_string());
    }
}

#[test]
fn perturb_json_format_parses() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("conditions.jsonl");
    let output = bin()
        .args(["perturb"])
        .arg(fixture("questionnaires/q1.json"))
        .args(["--provider", "table1", "--format", "json"])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&output)).unwrap();
    assert_eq!(summary["conditions"], 12);
    assert_eq!(summary["questions"], 1);
    assert_eq!(summary["per_kind"]["paraphrase"], 1);
}

#[test]
fn perturb_fails_naming_capability_when_provider_lacks_texts() {
    // The q1 lookup table has no entries for the six-question set, so the
    // provider-backed kinds cannot be generated.
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("conditions.jsonl");
    let provider = format!("fixture:{}", fixture("providers/q1_texts.json").display());
    let output = bin()
        .args(["perturb"])
        .arg(fixture("questionnaires/desk.json"))
        .args(["--provider", &provider])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(!output.status.success());
    let err = stderr(&output);
    assert!(
        err.contains("paraphrase") || err.contains("synonym"),
        "stderr should name the missing capability:\n{err}"
    );
}

#[test]
fn pipeline_runs_end_to_end_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let plan = small_plan(dir.path(), 5, 7);

    let run = |run_dir: &Path| {
        let output = bin()
            .args(["--config"])
            .arg(&plan)
            .arg("--out")
            .arg(run_dir)
            .args(["--format", "json", "interview", "--provider", "stub"])
            .output()
            .unwrap();
        assert!(output.status.success(), "stderr: {}", stderr(&output));
        serde_json::from_str::<serde_json::Value>(&stdout(&output)).unwrap()
    };

    let run_a = dir.path().join("run-a");
    let run_b = dir.path().join("run-b");
    let summary = run(&run_a);
    run(&run_b);

    assert_eq!(summary["cells_total"], 60); // 1 backend x 12 conditions x 5 reps
    assert_eq!(summary["completed"], 60);
    assert_eq!(summary["transport_failed"], 0);

    // Same plan, same seed: byte-identical interview logs.
    let log_a = std::fs::read(run_a.join("interviews.jsonl")).unwrap();
    let log_b = std::fs::read(run_b.join("interviews.jsonl")).unwrap();
    assert_eq!(log_a, log_b);

    // extract
    let output = bin()
        .args(["--format", "json", "extract"])
        .arg(&run_a)
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    let classify: serde_json::Value = serde_json::from_str(&stdout(&output)).unwrap();
    assert_eq!(classify["total"], 60);

    // analyze
    let output = bin().args(["analyze"]).arg(&run_a).output().unwrap();
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    assert!(run_a.join("reports.json").exists());

    // report
    let output = bin().args(["report"]).arg(&run_a).output().unwrap();
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    let text = stdout(&output);
    assert!(
        text.contains("total interviews: 60"),
        "summary missing:\n{text}"
    );
    for file in [
        "reports/wide.csv",
        "reports/robust_share.csv",
        "reports/mean_kl.csv",
        "reports/mean_entropy.csv",
        "reports/nonresponse_rate.csv",
        "reports/center_shift.csv",
        "reports/summary.json",
        "reports/summary.txt",
    ] {
        assert!(run_a.join(file).exists(), "missing {file}");
    }
}

#[test]
fn seed_flag_overrides_plan_seed() {
    let dir = tempfile::tempdir().unwrap();
    let plan = small_plan(dir.path(), 2, 7);
    let run_dir = dir.path().join("run");
    let output = bin()
        .args(["--seed", "99", "--config"])
        .arg(&plan)
        .arg("--out")
        .arg(&run_dir)
        .args(["interview", "--provider", "stub"])
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    let stored: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("plan.json")).unwrap()).unwrap();
    assert_eq!(stored["seed"], 99);
}

#[test]
fn resume_completes_a_truncated_run() {
    let dir = tempfile::tempdir().unwrap();
    let plan = small_plan(dir.path(), 5, 3);
    let run_dir = dir.path().join("run");
    let output = bin()
        .args(["--config"])
        .arg(&plan)
        .arg("--out")
        .arg(&run_dir)
        .args(["interview", "--provider", "stub"])
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr(&output));

    // Drop the tail of the log to simulate an interrupted run.
    let log_path = run_dir.join("interviews.jsonl");
    let log = std::fs::read_to_string(&log_path).unwrap();
    let kept: Vec<&str> = log.lines().take(20).collect();
    std::fs::write(&log_path, format!("{}\n", kept.join("\n"))).unwrap();

    let output = bin()
        .args(["--format", "json", "resume"])
        .arg(&run_dir)
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&output)).unwrap();
    assert_eq!(summary["executed"], 40);
    assert_eq!(summary["completed"], 60);
}

#[test]
fn oracle_passes_on_biased_profile_and_reports_nothing_applicable_on_neutral() {
    let dir = tempfile::tempdir().unwrap();
    let plan = small_plan(dir.path(), 10, 5);

    let output = bin()
        .args(["--config"])
        .arg(&plan)
        .args(["oracle"])
        .arg(fixture("profiles/recency.json"))
        .args(["--seeds", "2"])
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stdout: {}\nstderr: {}",
        stdout(&output),
        stderr(&output)
    );
    let text = stdout(&output);
    assert!(text.contains("PASS"), "missing verdict line:\n{text}");
    assert!(
        text.contains("recency sign"),
        "missing assertion name:\n{text}"
    );

    let output = bin()
        .args(["--config"])
        .arg(&plan)
        .args(["oracle"])
        .arg(fixture("profiles/neutral.json"))
        .args(["--seeds", "1"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "stdout: {}", stdout(&output));
}

#[test]
fn oracle_validates_center_pull_and_position_blind_profiles() {
    let dir = tempfile::tempdir().unwrap();
    let plan = small_plan(dir.path(), 25, 5);

    for profile in ["profiles/center_pull.json", "profiles/position_blind.json"] {
        let output = bin()
            .args(["--config"])
            .arg(&plan)
            .args(["--format", "json", "oracle"])
            .arg(fixture(profile))
            .args(["--seeds", "2"])
            .output()
            .unwrap();
        assert!(
            output.status.success(),
            "{profile} stdout: {}\nstderr: {}",
            stdout(&output),
            stderr(&output)
        );
        let report: serde_json::Value = serde_json::from_str(&stdout(&output)).unwrap();
        let assertions = report["assertions"].as_array().unwrap();
        assert!(!assertions.is_empty());
        assert!(assertions.iter().all(|a| a["passed"] == true));
    }
}

#[test]
fn stage_errors_produce_nonzero_exits() {
    // Missing run directory.
    let output = bin()
        .args(["extract", "/nonexistent/run"])
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(stderr(&output).contains("error"));

    // Missing plan file.
    let dir = tempfile::tempdir().unwrap();
    let output = bin()
        .args(["--config", "/nonexistent/plan.json", "--out"])
        .arg(dir.path().join("run"))
        .args(["interview"])
        .output()
        .unwrap();
    assert!(!output.status.success());

    // Interview without --config.
    let output = bin().args(["interview"]).output().unwrap();
    assert!(!output.status.success());
    assert!(stderr(&output).contains("--config"));

    // Unknown provider spec.
    let output = bin()
        .args(["perturb"])
        .arg(fixture("questionnaires/q1.json"))
        .args(["--provider", "banana"])
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(stderr(&output).contains("unknown provider"));
}
