use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn distractors(out: &Path, args: &[&str]) -> Output {
    let f = fixtures();
    Command::new(env!("CARGO_BIN_EXE_distractors"))
        .arg("--config")
        .arg(f.join("run.toml"))
        .arg("--fixture")
        .arg(f.join("exchanges.jsonl"))
        .arg("--output-dir")
        .arg(out)
        .args(["--log-level", "error"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = distractors(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn evaluate_prints_a_table_for_every_approach() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--approach", "all"]);
    let table = ok(dir.path(), &["evaluate"]);
    assert!(table.starts_with("Approach"));
    for a in ["knn", "cot", "rb", "ft", "sb"] {
        assert!(table.lines().any(|l| l.starts_with(a)), "{table}");
    }
    let report = read_json(&dir.path().join("evaluate.json"));
    assert_eq!(report["summary"]["approaches"]["knn"]["count"], 12);
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 16);
    let hash = report["config_hash"].as_str().unwrap();
    assert!(dir.path().join("configs").join(format!("{hash}.toml")).exists());
}

#[test]
fn generate_is_idempotent_against_the_results_store() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--approach", "cot"]);
    let before = std::fs::read(dir.path().join("results.jsonl")).unwrap();
    ok(dir.path(), &["generate", "--approach", "cot"]);
    assert_eq!(std::fs::read(dir.path().join("results.jsonl")).unwrap(), before);
}

#[test]
fn typed_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = distractors(dir.path(), &["evaluate"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("data error"));

    let o = distractors(dir.path(), &["--split-ratio", "2", "split"]);
    assert_eq!(o.status.code(), Some(2));

    // a different split asks for prompts nobody recorded
    let o = distractors(dir.path(), &["--split-seed", "99", "generate", "--approach", "cot"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&o.stderr).contains("replay miss"));
}

#[test]
fn evaluate_names_the_missing_result() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--approach", "cot"]);
    let results = dir.path().join("results.jsonl");
    let text = std::fs::read_to_string(&results).unwrap();
    let kept: Vec<&str> = text.lines().skip(1).collect();
    let dropped: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    std::fs::write(&results, kept.join("\n") + "\n").unwrap();
    let o = distractors(dir.path(), &["evaluate", "--approach", "cot"]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(dropped["mcq_id"].as_str().unwrap()), "{err}");
}

#[test]
fn pairs_build_on_one_mcq_gives_six_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_distractors"))
        .arg("--corpus")
        .arg(fixtures().join("single_mcq.jsonl"))
        .arg("--output-dir")
        .arg(dir.path())
        .args(["--split-ratio", "0.9", "pairs-build", "--training-export"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pairs = std::fs::read_to_string(dir.path().join("pairs_train.jsonl")).unwrap();
    assert_eq!(pairs.lines().count(), 6);
    let training = std::fs::read_to_string(dir.path().join("ranker_train.jsonl")).unwrap();
    assert_eq!(training.lines().count(), 6);
}

#[test]
fn human_evaluation_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--approach", "cot"]);
    ok(dir.path(), &["humaneval-export", "--approach", "cot", "--balance", "--seed", "3"]);
    let sheet = std::fs::read_to_string(dir.path().join("eval_sheet.csv")).unwrap();
    assert!(sheet.starts_with("row_id,question_stem,distractor\n"));
    assert!(!sheet.contains("llm") && !sheet.contains("human"));
    let key = std::fs::read_to_string(dir.path().join("eval_key.csv")).unwrap();
    let mut ratings = String::from("row_id,rater_id,validity,plausibility\n");
    for (i, line) in key.lines().skip(1).enumerate() {
        let row = line.split(',').next().unwrap();
        let human = line.ends_with("human");
        let v = if human { 5 } else { 3 + (i % 2) };
        let p = if human { 4 + (i % 2) } else { 2 + (i % 3) };
        ratings.push_str(&format!("{row},r1,{v},{p}\n{row},r2,{v},{}\n", (p + i % 2).min(5)));
    }
    let ratings_path = dir.path().join("ratings.csv");
    std::fs::write(&ratings_path, ratings).unwrap();
    let out = ok(
        dir.path(),
        &[
            "humaneval-analyze",
            "--key",
            dir.path().join("eval_key.csv").to_str().unwrap(),
            "--ratings",
            ratings_path.to_str().unwrap(),
        ],
    );
    assert!(out.contains("validity") && out.contains("plausibility"));
    let report = read_json(&dir.path().join("agreement.json"));
    assert_eq!(report["validity"]["qwk"], 1.0);
    assert_eq!(report["t_test_kind"], "pooled");
    assert!(report["plausibility"]["t_test"]["p"].as_f64().unwrap() < 0.05);
}

#[test]
fn cache_export_import_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let cache_arg = cache.to_str().unwrap();
    ok(dir.path(), &["--cache-dir", cache_arg, "generate", "--approach", "ft"]);
    let exported = dir.path().join("ft.jsonl");
    ok(
        dir.path(),
        &["--cache-dir", cache_arg, "cache", "export", "--out", exported.to_str().unwrap(), "--model", "ft:gpt-3.5-turbo:distractors"],
    );
    assert_eq!(std::fs::read_to_string(&exported).unwrap().lines().count(), 12);

    let fresh = tempfile::tempdir().unwrap();
    let fresh_cache = fresh.path().join("cache");
    let o = Command::new(env!("CARGO_BIN_EXE_distractors"))
        .arg("--cache-dir")
        .arg(&fresh_cache)
        .args(["cache", "import", "--file"])
        .arg(&exported)
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&o.stdout).contains("imported 12 new"));
    let o = Command::new(env!("CARGO_BIN_EXE_distractors"))
        .arg("--config")
        .arg(fixtures().join("run.toml"))
        .arg("--output-dir")
        .arg(fresh.path())
        .arg("--cache-dir")
        .arg(&fresh_cache)
        .args(["generate", "--approach", "ft"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
