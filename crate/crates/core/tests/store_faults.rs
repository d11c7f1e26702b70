mod common;

use std::fs::OpenOptions;
use std::io::Write;

use common::*;
use contexty_core::analyzer::{AnalyzerAdapter, MockProvider, Module};
use contexty_core::engine::{EngineConfig, ObservationInput, Session};
use contexty_core::store::SessionStore;
use contexty_core::{AnalyzerError, EngineError, Provenance, StoreError, Timestamp};
use std::sync::Arc;

fn disk_session(store: &SessionStore, id: &str) -> Session {
    Session::create(store, id, AnalyzerAdapter::mock(), EngineConfig::default(), Timestamp(T0))
        .unwrap()
        .with_clock(ticking_clock(T0))
}

fn reopen(store: &SessionStore, id: &str) -> Result<Session, EngineError> {
    Session::open(store, id, AnalyzerAdapter::mock(), EngineConfig::default())
}

fn seed(store: &SessionStore, id: &str) -> Session {
    let s = disk_session(store, id);
    for t in ["alpha notes on caching", "beta notes on caching", "gamma unrelated grocery list"] {
        s.capture_snippet(snippet(t)).unwrap();
    }
    s
}

#[test]
fn torn_tail_is_dropped_on_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let store = SessionStore::open(dir.path()).unwrap();
    let live = seed(&store, "torn");
    let expected = live.canonical_tree();
    let events = live.events().unwrap().len();
    drop(live);

    let log = store.session_dir("torn").join("events.jsonl");
    let clean_len = std::fs::metadata(&log).unwrap().len();
    OpenOptions::new().append(true).open(&log).unwrap().write_all(b"{\"schema\":\"ctx").unwrap();

    let s = reopen(&store, "torn").unwrap();
    assert_eq!(s.canonical_tree(), expected);
    assert_eq!(std::fs::metadata(&log).unwrap().len(), clean_len);
    assert_eq!(s.manifest().event_count, events as u64);
    s.capture_snippet(snippet("delta after recovery")).unwrap();
    assert!(s.verify_replay().unwrap());
    drop(s);
    assert_eq!(reopen(&store, "torn").unwrap().events().unwrap().len(), events + 3);
}

#[test]
fn corrupt_complete_line_fails_replay() {
    let dir = tempfile::tempdir().unwrap();
    let store = SessionStore::open(dir.path()).unwrap();
    drop(seed(&store, "bad"));
    let log = store.session_dir("bad").join("events.jsonl");
    let text = std::fs::read_to_string(&log).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[1] = "{not json}";
    std::fs::write(&log, lines.join("\n") + "\n").unwrap();
    match reopen(&store, "bad") {
        Err(EngineError::Store(StoreError::Replay { seq, .. })) => assert_eq!(seq, 2),
        other => panic!("expected replay error, got {other:?}"),
    }
}

#[test]
fn sequence_gap_fails_replay() {
    let dir = tempfile::tempdir().unwrap();
    let store = SessionStore::open(dir.path()).unwrap();
    drop(seed(&store, "gap"));
    let log = store.session_dir("gap").join("events.jsonl");
    let text = std::fs::read_to_string(&log).unwrap();
    let kept: Vec<&str> = text.lines().enumerate().filter(|(i, _)| *i != 2).map(|(_, l)| l).collect();
    std::fs::write(&log, kept.join("\n") + "\n").unwrap();
    assert!(matches!(reopen(&store, "gap"), Err(EngineError::Store(StoreError::Replay { seq: 4, .. }))));
}

#[test]
fn tampered_placement_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let store = SessionStore::open(dir.path()).unwrap();
    drop(seed(&store, "tamper"));
    let log = store.session_dir("tamper").join("events.jsonl");
    let text = std::fs::read_to_string(&log).unwrap();
    let mut out = Vec::new();
    for line in text.lines() {
        let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v["kind"] == "placement" && v["payload"]["memoryId"] == "mem_000002" {
            v["payload"]["judgments"] = serde_json::json!([]);
        }
        out.push(serde_json::to_string(&v).unwrap());
    }
    std::fs::write(&log, out.join("\n") + "\n").unwrap();
    let err = reopen(&store, "tamper").unwrap_err();
    assert!(matches!(err, EngineError::Store(StoreError::Replay { .. })), "{err:?}");
}

#[test]
fn failed_operations_leave_the_log_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let store = SessionStore::open(dir.path()).unwrap();
    let mock = Arc::new(MockProvider::new());
    let s = Session::create(&store, "fail", AnalyzerAdapter::new(mock.clone()), EngineConfig::default(), Timestamp(T0)).unwrap();
    s.capture_snippet(snippet("first capture about caching")).unwrap();
    let log = store.session_dir("fail").join("events.jsonl");
    let before = std::fs::read(&log).unwrap();
    for module in [Module::ContentAnalysis, Module::PlacementEvolution] {
        mock.fail(module, AnalyzerError::Transport("connection reset".into()));
        assert!(s.capture_snippet(snippet("second capture about caching")).is_err());
        mock.clear_failures();
    }
    mock.fail(Module::Chat, AnalyzerError::Unavailable("down".into()));
    let chat = contexty_core::engine::ChatInput {
        message: "hi".into(),
        ..Default::default()
    };
    assert!(s.chat(chat).is_err());
    mock.clear_failures();
    let bad = ObservationInput {
        image: b"not an image".to_vec(),
        provenance: Provenance::default(),
    };
    assert!(s.capture_observation(bad).is_err());
    assert_eq!(std::fs::read(&log).unwrap(), before);
    assert_eq!(s.state().last_seq, 3);
    assert!(s.verify_replay().unwrap());
}

#[test]
fn blobs_are_verified_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let store = SessionStore::open(dir.path()).unwrap();
    let s = disk_session(&store, "blob");
    let png = read_fixture("phash/checker.png");
    let out = s
        .capture_observation(ObservationInput {
            image: png.clone(),
            provenance: Provenance::default(),
        })
        .unwrap();
    let image_ref = out.memory.unwrap().image_ref.unwrap();
    assert_eq!(s.load_blob(&image_ref).unwrap(), png);
    let blobs = store.session_dir("blob").join("blobs");
    let file = std::fs::read_dir(&blobs).unwrap().next().unwrap().unwrap().path();
    std::fs::write(&file, b"tampered").unwrap();
    assert!(s.load_blob(&image_ref).is_err());
    assert!(s.load_blob(&"sha256-00".into()).is_err());
}

#[test]
fn session_ids_are_validated_and_unique() {
    let dir = tempfile::tempdir().unwrap();
    let store = SessionStore::open(dir.path()).unwrap();
    assert!(store.create("../escape", Timestamp(T0)).is_err());
    assert!(store.create("", Timestamp(T0)).is_err());
    store.create("ok_1", Timestamp(T0)).unwrap();
    assert!(store.create("ok_1", Timestamp(T0)).is_err());
    assert!(matches!(reopen(&store, "missing"), Err(EngineError::Store(StoreError::UnknownSession(_)))));
    assert_eq!(store.list().unwrap(), vec!["ok_1".to_string()]);
}
