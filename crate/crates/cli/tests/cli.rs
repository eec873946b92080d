//! Command-line behaviour: exit codes, the golden evaluation report and the
//! mock pipeline from trial preparation to ground-truth export.

mod common;

use std::path::Path;

use common::{fixtures, match_run, prepare_workspace, read_tree, run, run_ok, PATIENTS, TRIAL_ID};
use serde_json::Value;
use trialmatch_core::eval::ground_truth::is_qualifying;
use trialmatch_core::model::{CriterionAssessment, Trial};

fn stdout_json(out: &std::process::Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn eval_fixture(name: &str) -> String {
    fixtures().join("eval").join(name).to_str().unwrap().to_string()
}

fn close(a: &Value, b: &Value) -> bool {
    (a.as_f64().unwrap() - b.as_f64().unwrap()).abs() < 1e-12
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run([
        "trial",
        "prep",
        "--data",
        dir.path().to_str().unwrap(),
        "--config",
        "/nonexistent/gateway.toml",
        "--trial",
        TRIAL_ID,
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config file"));
    assert!(read_tree(dir.path()).is_empty(), "nothing written on a usage error");
}

#[test]
fn invalid_arguments_exit_with_two() {
    let out = run([
        "match",
        "run",
        "--data",
        "/tmp",
        "--config",
        "x.toml",
        "--trial",
        "T",
        "--as-of",
        "2018-06-01",
        "--strategy",
        "topk:0",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(["eval", "report", "--labels", "a", "--predictions", "b", "--classes", "met,maybe"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(["serve", "--data", "/tmp"]);
    assert_eq!(out.status.code(), Some(2), "serving without a token is refused");
}

#[test]
fn eval_report_matches_the_sklearn_golden_files() {
    let args = [
        "eval",
        "report",
        "--labels",
        &eval_fixture("labels.jsonl"),
        "--predictions",
        &eval_fixture("predictions.jsonl"),
    ];
    let out = run_ok(args);
    let golden = std::fs::read_to_string(fixtures().join("eval/expected_report.txt")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), golden);
    assert!(String::from_utf8_lossy(&out.stderr).contains("2 labeled row(s)"));

    let expected: Value =
        serde_json::from_str(&std::fs::read_to_string(eval_fixture("expected_report.json")).unwrap()).unwrap();
    let out = run_ok(args.iter().copied().chain(["--format", "json"]));
    let report = &stdout_json(&out)["report"];
    for (got, want) in report["classes"].as_array().unwrap().iter().zip(expected["classes"].as_array().unwrap()) {
        assert_eq!(got["class"], want["class"]);
        assert_eq!(got["support"], want["support"]);
        for metric in ["precision", "recall", "f1"] {
            assert!(
                close(&got[metric], &want[metric]),
                "{} {metric}: {} vs {}",
                want["class"],
                got[metric],
                want[metric]
            );
        }
    }
    assert!(close(&report["accuracy"], &expected["accuracy"]));
    assert_eq!(report["total"], expected["total"]);
    for avg in ["macro_avg", "weighted_avg"] {
        for metric in ["precision", "recall", "f1"] {
            assert!(close(&report[avg][metric], &expected[avg][metric]), "{avg} {metric}");
        }
    }
}

#[test]
fn eval_report_groups_by_criterion_kind() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("trials")).unwrap();
    std::fs::copy(fixtures().join("trial.json"), dir.path().join("trials").join(format!("{TRIAL_ID}.json"))).unwrap();
    let out = run_ok([
        "eval",
        "report",
        "--data",
        dir.path().to_str().unwrap(),
        "--labels",
        &eval_fixture("labels.jsonl"),
        "--predictions",
        &eval_fixture("predictions.jsonl"),
        "--group-by",
        "kind",
        "--format",
        "json",
    ]);
    let expected: Value =
        serde_json::from_str(&std::fs::read_to_string(eval_fixture("expected_report.json")).unwrap()).unwrap();
    let groups = stdout_json(&out)["groups"].clone();
    let want = expected["groups_by_kind"].as_array().unwrap();
    assert_eq!(groups.as_array().unwrap().len(), want.len());
    for (got, want) in groups.as_array().unwrap().iter().zip(want) {
        assert_eq!(got["group"], want["group"]);
        assert_eq!(got["samples"], want["samples"]);
        assert!(close(&got["accuracy"], &want["accuracy"]));
    }
}

fn assessments(dir: &Path, patient: &str) -> Vec<CriterionAssessment> {
    trialmatch_core::record::read_jsonl(&dir.join("assessments").join(TRIAL_ID).join(format!("{patient}.jsonl")))
        .unwrap()
}

#[test]
fn mock_pipeline_is_deterministic_and_feeds_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    prepare_workspace(&data);

    let stats = stdout_json(&run_ok(["store", "stats", "--data", data.to_str().unwrap()]));
    assert_eq!(stats["count"], 14);
    assert_eq!(stats["pages_per_patient"]["p01"], 6);
    assert_eq!(stats["pages_per_patient"]["p02"], 5);
    assert_eq!(stats["pages_per_patient"]["p03"], 3);

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    match_run(&data, &a, "topk-guideline:3");
    match_run(&data, &b, "topk-guideline:3");
    let (ta, tb) = (read_tree(&a.join("assessments")), read_tree(&b.join("assessments")));
    assert_eq!(ta.len(), PATIENTS.len());
    assert_eq!(ta, tb);
    assert_eq!(read_tree(&a.join("runs")), read_tree(&b.join("runs")));
    assert!(a.join("manifest.json").is_file());

    // A ToScreen classification confirms every verdict that argues for eligibility.
    let assessed = assessments(&a, "p01");
    let trial: Trial = serde_json::from_slice(&std::fs::read(fixtures().join("trial.json")).unwrap()).unwrap();
    let event = serde_json::json!({
        "event_id": "ev-1",
        "actor_id": "crc-7",
        "timestamp": "2018-06-02T10:00:00Z",
        "patient_id": "p01",
        "trial_id": TRIAL_ID,
        "payload": { "type": "PatientClassification", "label": "ToScreen" },
    });
    std::fs::write(a.join("feedback.jsonl"), format!("{event}\n")).unwrap();
    std::fs::create_dir_all(a.join("trials")).unwrap();
    std::fs::copy(
        data.join("trials").join(format!("{TRIAL_ID}.json")),
        a.join("trials").join(format!("{TRIAL_ID}.json")),
    )
    .unwrap();
    let out = run_ok(["eval", "ground-truth", "--data", a.to_str().unwrap()]);
    let labels: Vec<Value> =
        String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let expected: Vec<(String, String)> = assessed
        .iter()
        .filter(|x| is_qualifying(trial.criterion(&x.criterion_id).unwrap().kind, x.verdict))
        .map(|x| (x.criterion_id.clone(), x.verdict.as_str().to_string()))
        .collect();
    let got: Vec<(String, String)> = labels
        .iter()
        .map(|l| (l["criterion_id"].as_str().unwrap().to_string(), l["label"].as_str().unwrap().to_string()))
        .collect();
    assert!(!expected.is_empty());
    assert_eq!(got, expected);
    assert!(labels.iter().all(|l| l["provenance"] == "InferredFromPatientLabel"));
}

#[test]
fn ablation_lists_one_row_per_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    prepare_workspace(&data);
    for strategy in ["topk-guideline:1", "all"] {
        match_run(&data, &data, strategy);
    }
    let out = run_ok(["eval", "ablation", "--data", data.to_str().unwrap(), "--labels", &eval_fixture("labels.jsonl")]);
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "strategy,average_images_used,precision,recall,labeled,assessments");
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, vec!["all", "topk-guideline:1"]);

    let usage = stdout_json(&run_ok(["eval", "usage", "--data", data.to_str().unwrap(), "--role", "assessor"]));
    assert!(usage["summary"]["calls"].as_u64().unwrap() > 0);
}

#[test]
fn n2c2_command_scores_a_synthetic_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixtures().join("n2c2");
    let out = run_ok([
        "eval",
        "n2c2",
        "--n2c2-dir",
        corpus.to_str().unwrap(),
        "--data",
        dir.path().to_str().unwrap(),
        "--config",
        common::mock_config().to_str().unwrap(),
    ]);
    let summary = stdout_json(&out);
    assert_eq!(summary["patients"], 2);
    assert_eq!(summary["labeled"], 26);
    assert_eq!(summary["scored"], 26);
    assert_eq!(summary["report"]["total"], 26);
    // Each patient is assessed as of its latest note.
    let run: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("runs/n2c2-2018/901/all.json")).unwrap()).unwrap();
    assert_eq!(run["as_of_date"], "2016-02-14");
    assert_eq!(run["assessments"].as_array().unwrap().len(), 13);
}
