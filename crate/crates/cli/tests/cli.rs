use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[generator]
user_count = 200
[experiment]
grid_epochs = 1
w_grid = [0.05, 0.5]
[experiment.rnnsm]
hidden = 6
fused = 6
[experiment.rnnsm.train]
epochs = 1
[experiment.rnn]
hidden = 6
fused = 6
[experiment.rnn.train]
epochs = 1
"#;

fn rnnsm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rnnsm"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn small_config(dir: &Path) {
    fs::write(dir.join("run.toml"), SMALL).unwrap();
}

#[test]
fn default_generate_writes_two_thousand_users() {
    let dir = tempfile::tempdir().unwrap();
    let o = rnnsm(dir.path(), &["generate", "--out", "gen"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("gen/sessions.jsonl")).unwrap();
    let users: BTreeSet<String> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["user_id"].to_string())
        .collect();
    assert_eq!(users.len(), 2000);
    let truth = fs::read_to_string(dir.path().join("gen/ground_truth.csv")).unwrap();
    assert_eq!(truth.lines().count(), 2001);
    assert!(dir.path().join("gen/manifest.generate.json").exists());
}

#[test]
fn generate_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    for out in ["a", "b", "c"] {
        let seed = if out == "c" { "4" } else { "3" };
        let o = rnnsm(dir.path(), &["generate", "--config", "run.toml", "--seed", seed, "--out", out]);
        assert_eq!(code(&o), 0);
    }
    let read = |p: &str| fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/sessions.jsonl"), read("b/sessions.jsonl"));
    assert_eq!(read("a/ground_truth.csv"), read("b/ground_truth.csv"));
    assert_eq!(read("a/manifest.generate.json"), read("b/manifest.generate.json"));
    assert_ne!(read("a/sessions.jsonl"), read("c/sessions.jsonl"));
}

#[test]
fn invalid_cohort_fractions_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.toml"),
        r#"
[[generator.cohorts]]
name = "only"
fraction = 0.4
gap_mu = 1.0
gap_sigma = 0.5
"#,
    )
    .unwrap();
    let o = rnnsm(dir.path(), &["generate", "--config", "bad.toml"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("fraction"));
}

#[test]
fn unknown_model_and_malformed_config_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&rnnsm(dir.path(), &["train", "--model", "lstm"])), 2);
    fs::write(dir.path().join("broken.toml"), "seed = \"x\"\n").unwrap();
    assert_eq!(code(&rnnsm(dir.path(), &["generate", "--config", "broken.toml"])), 2);
}

#[test]
fn predict_without_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    let o = rnnsm(dir.path(), &["predict", "--config", "run.toml", "--model", "rnnsm"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let o = rnnsm(dir.path(), &["predict", "--config", "run.toml", "--model", "cph"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn schema_mismatch_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    assert_eq!(code(&rnnsm(dir.path(), &["generate", "--config", "run.toml", "--out", "gen"])), 0);
    let text = fs::read_to_string(dir.path().join("gen/sessions.jsonl")).unwrap();
    let no_tablet: String = text
        .lines()
        .filter(|l| !l.contains("\"tablet\""))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(dir.path().join("no_tablet.jsonl"), no_tablet).unwrap();
    let o = rnnsm(
        dir.path(),
        &["train", "--config", "run.toml", "--model", "rnn", "--data", "gen/sessions.jsonl"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = rnnsm(
        dir.path(),
        &["predict", "--config", "run.toml", "--model", "rnn", "--data", "no_tablet.jsonl"],
    );
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("mismatch"));
}

fn pipeline(dir: &Path, out: &str) {
    for cmd in ["train", "predict", "evaluate"] {
        let o = rnnsm(
            dir,
            &[cmd, "--config", "run.toml", "--seed", "9", "--out", out, "--threads", "2"],
        );
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn full_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    pipeline(dir.path(), "one");
    pipeline(dir.path(), "two");
    let read = |p: &str| fs::read_to_string(dir.path().join(p)).unwrap();
    for m in ["manifest.train.json", "manifest.predict.json", "manifest.evaluate.json", "report.json"] {
        assert_eq!(read(&format!("one/{m}")), read(&format!("two/{m}")), "{m}");
    }
    let report: serde_json::Value = serde_json::from_str(&read("one/report.json")).unwrap();
    let models: Vec<&String> = report["models"].as_object().unwrap().keys().collect();
    assert_eq!(models, ["baseline", "cph", "cpha", "rnn", "rnnsm", "rnnsma"]);
    for plot in ["rmse_by_week.csv", "mean_error_by_week.csv", "rmse_by_active_days.csv"] {
        assert!(read(&format!("one/plots/{plot}")).lines().count() > 1, "{plot}");
    }
    let header = read("one/predictions/rnnsma.csv");
    assert!(header.starts_with("user_id,predicted_return_days,predicted_return_date,is_censored_truth,true_return_days"));
}

#[test]
fn evaluate_single_file_gives_one_column() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    let o = rnnsm(dir.path(), &["predict", "--config", "run.toml", "--model", "baseline"]);
    assert_eq!(code(&o), 0);
    let o = rnnsm(
        dir.path(),
        &["evaluate", "--config", "run.toml", "--out", "eval", "rnnsm-out/predictions/baseline.csv"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eval/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["models"].as_object().unwrap().len(), 1);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("baseline") && !table.contains("rnnsma"));
}

#[test]
fn evaluate_missing_predictions_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = rnnsm(dir.path(), &["evaluate", "--model", "cph"]);
    assert_eq!(code(&o), 3);
}
