use std::path::PathBuf;
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn contexty(data_dir: &std::path::Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_contexty"))
        .arg("--data-dir")
        .arg(data_dir)
        .args(args)
        .env_remove("CONTEXTY_API_KEY")
        .env_remove("OPENAI_API_KEY")
        .output()
        .expect("run contexty")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn hash_of_flat_gray_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = contexty(dir.path(), &["hash", fixtures().join("phash/gray.png").to_str().unwrap()]);
    assert_eq!(stdout(&out).trim(), "0".repeat(64));
    let missing = contexty(dir.path(), &["hash", "/nonexistent.png"]);
    assert!(!missing.status.success());
}

#[test]
fn replay_reproduces_the_golden_demo_tree() {
    let dir = tempfile::tempdir().unwrap();
    let log = fixtures().join("demo/events.jsonl");
    let golden = fixtures().join("demo/tree.golden.json");
    let out = contexty(dir.path(), &["replay", log.to_str().unwrap(), "--expect", golden.to_str().unwrap()]);
    assert_eq!(stdout(&out), std::fs::read_to_string(&golden).unwrap());

    let other = dir.path().join("other.json");
    std::fs::write(&other, "{}").unwrap();
    let bad = contexty(dir.path(), &["replay", log.to_str().unwrap(), "--expect", other.to_str().unwrap()]);
    assert!(!bad.status.success());
}

#[test]
fn ingest_then_score_offline() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    std::fs::create_dir(&input).unwrap();
    std::fs::write(input.join("a.txt"), "Tokyo hotel shortlist near Shinjuku").unwrap();
    std::fs::write(input.join("b.md"), "Rust borrow checker notes").unwrap();
    std::fs::copy(fixtures().join("phash/screen_0.png"), input.join("c.png")).unwrap();
    let data = dir.path().join("data");
    let out = contexty(&data, &["ingest", input.to_str().unwrap(), "--session", "cli"]);
    stdout(&out);

    let out = contexty(&data, &["score", "--query", "tokyo hotel", "--session", "cli", "--now", "1700000000000", "--json"]);
    let rows: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[0]["title"].as_str().unwrap().to_lowercase().contains("tokyo"), "{rows:?}");
    assert!(rows.windows(2).all(|w| w[0]["score"].as_f64() >= w[1]["score"].as_f64()));
}

#[test]
fn calibration_report_covers_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = contexty(dir.path(), &["probe-calibrate", fixtures().join("ncd/corpus.json").to_str().unwrap()]);
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(report.is_object());
    assert!(report.to_string().contains("ncd"), "{report}");
}
