use std::fs;
use std::path::Path;

use uqlink_cli::run;

fn uqlink(args: &[&str]) -> anyhow::Result<uqlink_cli::Outcome> {
    let mut full = vec!["uqlink"];
    full.extend_from_slice(args);
    run(full)
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

fn csv_rows(file: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(file).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(str::to_owned).collect()).collect()
}

fn synth(dir: &Path, name: &str, extra: &[&str]) -> String {
    let mut args = vec!["synth", "--prompts", "120", "--seed", "4", "--out"];
    let out = path(dir, name);
    args.push(&out);
    args.extend_from_slice(extra);
    uqlink(&args).unwrap();
    format!("{out}/traces.jsonl")
}

#[test]
fn pipeline_produces_every_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let traces = synth(d, "synth", &[]);
    assert!(d.join("synth/dataset.jsonl").exists());

    uqlink(&["targets", "--traces", &traces, "--out", &path(d, "targets")]).unwrap();
    let targets = csv_rows(&d.join("targets/targets.csv"));
    assert_eq!(targets.len(), 120);

    uqlink(&["train", "--traces", &traces, "--trees", "20", "--cv", "--out", &path(d, "train")]).unwrap();
    for f in ["model.json", "feature_config.json", "cv_summary.json", "cv_prompt_scores.csv", "manifest.json"] {
        assert!(d.join("train").join(f).exists(), "{f}");
    }
    let model = path(d, "train/model.json");

    let out = uqlink(&[
        "evaluate",
        "--traces",
        &traces,
        "--model",
        &model,
        "--resamples",
        "50",
        "--score-mode",
        "per-generation",
        "--out",
        &path(d, "eval"),
    ])
    .unwrap();
    assert!(out.summary.contains("model scores"));
    for f in [
        "report.json",
        "roc.csv",
        "budget.csv",
        "rankings.csv",
        "recoverability.csv",
        "correlations.csv",
        "prompt_scores.csv",
    ] {
        assert!(d.join("eval").join(f).exists(), "{f}");
    }
    let roc_names: std::collections::BTreeSet<String> =
        csv_rows(&d.join("eval/roc.csv")).into_iter().map(|r| r[0].clone()).collect();
    assert!(roc_names.contains("regressor") && roc_names.contains("regressor_per_generation"));
    let rankings = csv_rows(&d.join("eval/rankings.csv"));
    let names: Vec<&str> = rankings.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["regressor", "pe", "se", "perplexity", "oracle", "random"]);

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(d.join("eval/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "evaluate");
    assert!(manifest["inputs"].as_array().unwrap().len() >= 2);
}

#[test]
fn scores_file_and_cv_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let traces = synth(d, "synth", &[]);
    uqlink(&["evaluate", "--traces", &traces, "--trees", "10", "--resamples", "20", "--out", &path(d, "cv")]).unwrap();
    assert!(d.join("cv/cv_summary.json").exists());
    let scores = path(d, "cv/prompt_scores.csv");
    let out = uqlink(&["evaluate", "--traces", &traces, "--scores", &scores, "--resamples", "20", "--out", &path(d, "s")])
        .unwrap();
    assert!(out.summary.contains("scores file"));
    // Same scores in, same rankings table out.
    assert_eq!(
        csv_rows(&d.join("cv/rankings.csv")),
        csv_rows(&d.join("s/rankings.csv"))
    );
}

#[test]
fn zero_variability_prompts_score_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let traces = synth(d, "synth", &["--temperature", "0"]);
    uqlink(&["train", "--traces", &traces, "--trees", "10", "--out", &path(d, "train")]).unwrap();
    uqlink(&[
        "predict",
        "--traces",
        &traces,
        "--model",
        &path(d, "train/model.json"),
        "--out",
        &path(d, "pred"),
    ])
    .unwrap();
    let rows = csv_rows(&d.join("pred/prompt_scores.csv"));
    assert_eq!(rows.len(), 120);
    for r in rows {
        let s: f64 = r[1].parse().unwrap();
        assert!(s.abs() < 1e-9, "{r:?}");
    }
    assert_eq!(csv_rows(&d.join("pred/generation_scores.csv")).len(), 1200);
}

#[test]
fn runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let traces = synth(d, "synth", &[]);
    for name in ["a", "b"] {
        uqlink(&["train", "--traces", &traces, "--trees", "15", "--seed", "8", "--out", &path(d, name)]).unwrap();
    }
    for f in ["model.json", "manifest.json"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    uqlink(&["train", "--traces", &traces, "--trees", "15", "--seed", "9", "--out", &path(d, "c")]).unwrap();
    assert_ne!(fs::read(d.join("a/model.json")).unwrap(), fs::read(d.join("c/model.json")).unwrap());
}

#[test]
fn sweeps_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let traces = synth(d, "synth", &[]);
    uqlink(&["sweep", "truncation", "--traces", &traces, "--out", &path(d, "trunc")]).unwrap();
    let rows = csv_rows(&d.join("trunc/truncation.csv"));
    assert_eq!(rows.len(), 10 * 6);
    let identity = rows.iter().find(|r| r[0] == "10" && r[1] == "all").unwrap();
    assert_eq!(identity[2], "1");

    let temps = d.join("temps");
    fs::create_dir(&temps).unwrap();
    for t in ["0", "1"] {
        let src = synth(d, &format!("t{t}"), &["--temperature", t]);
        fs::copy(src, temps.join(format!("t{t}.jsonl"))).unwrap();
    }
    uqlink(&["sweep", "temperature", "--traces", temps.to_str().unwrap(), "--out", &path(d, "temp")]).unwrap();
    assert_eq!(csv_rows(&d.join("temp/temperature.csv")).len(), 2);

    uqlink(&[
        "sweep",
        "window",
        "--traces",
        &traces,
        "--trees",
        "5",
        "--folds",
        "3",
        "--out",
        &path(d, "window"),
    ])
    .unwrap();
    assert_eq!(csv_rows(&d.join("window/window.csv")).len(), 8 + 10);
}

#[test]
fn errors_leave_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = path(d, "missing.jsonl");
    let err = uqlink(&["targets", "--traces", &missing, "--out", &path(d, "x")]).unwrap_err();
    assert_eq!(uqlink_cli::error_kind(&err), "io");
    assert!(!d.join("x").exists());

    let traces = synth(d, "synth", &[]);
    assert!(uqlink(&["synth", "--out", &path(d, "synth")]).is_err(), "existing output kept");
    let err = uqlink(&["train", "--traces", &traces, "--segment", "middle", "--out", &path(d, "y")]).unwrap_err();
    assert!(format!("{err:#}").contains("--segment"));
    assert!(!d.join("y").exists());
}

#[test]
fn validate_flags_violations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let traces = synth(d, "synth", &[]);
    let ok = uqlink(&["validate", "--traces", &traces, "--out", &path(d, "v1")]).unwrap();
    assert!(!ok.failed);

    let text = fs::read_to_string(&traces).unwrap();
    let mut rec: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
    rec["postilla_tokens"].as_array_mut().unwrap().pop();
    let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
    lines[1] = rec.to_string();
    let bad = d.join("bad.jsonl");
    fs::write(&bad, lines.join("\n") + "\n").unwrap();
    let out = uqlink(&["validate", "--traces", bad.to_str().unwrap(), "--out", &path(d, "v2")]).unwrap();
    assert!(out.failed);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("v2/validation.json")).unwrap()).unwrap();
    assert_eq!(report[0]["clean"], false);
    assert!(uqlink(&["targets", "--traces", bad.to_str().unwrap(), "--out", &path(d, "t")]).is_err());
}
