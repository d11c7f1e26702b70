mod common;

use common::*;
use contexty_core::engine::ChatInput;
use contexty_core::probe::{gzip_len, ncd, run_calibration, stage1_gate, stage2_gate, CalibrationCorpus, ProbeConfig};
use serde::Deserialize;

#[derive(Deserialize)]
struct RefPair {
    id: String,
    group: String,
    ca: usize,
    cb: usize,
    cab: usize,
    ncd: f64,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct Boundary {
    id: String,
    response_a: String,
    response_b: String,
    ncd: f64,
}

#[derive(Deserialize)]
struct Reference {
    pairs: Vec<RefPair>,
    boundary: Vec<Boundary>,
}

fn load() -> (CalibrationCorpus, Reference) {
    (
        serde_json::from_slice(&read_fixture("ncd/corpus.json")).unwrap(),
        serde_json::from_slice(&read_fixture("ncd/reference.json")).unwrap(),
    )
}

#[test]
fn stage1_gate_is_inclusive_on_both_thresholds() {
    let c = ProbeConfig::default();
    assert!(stage1_gate(0.85, 0.92, &c));
    assert!(stage1_gate(1.0, 1.0, &c));
    assert!(!stage1_gate(0.86, 0.91, &c));
    assert!(!stage1_gate(0.84, 0.99, &c));
    assert!(!stage1_gate(0.849_999_999, 0.92, &c));
}

#[test]
fn ncd_matches_python_gzip_on_corpus() {
    let (corpus, reference) = load();
    assert_eq!(corpus.pairs.len(), 50);
    for (pair, r) in corpus.pairs.iter().zip(&reference.pairs) {
        assert_eq!(pair.id, r.id);
        let (a, b) = (pair.response_a.as_bytes(), pair.response_b.as_bytes());
        assert_eq!(gzip_len(a), r.ca, "{}", r.id);
        assert_eq!(gzip_len(b), r.cb, "{}", r.id);
        let joined = [a, b].concat();
        assert_eq!(gzip_len(&joined), r.cab, "{}", r.id);
        let got = ncd(a, b).unwrap();
        assert!((got - r.ncd).abs() <= 1e-12, "{}: {got} vs {}", r.id, r.ncd);
    }
}

#[test]
fn identical_pairs_are_close_and_random_pairs_far() {
    let (corpus, reference) = load();
    for (pair, r) in corpus.pairs.iter().zip(&reference.pairs) {
        let d = ncd(pair.response_a.as_bytes(), pair.response_b.as_bytes()).unwrap();
        match r.group.as_str() {
            "identical" => assert!(d <= 0.2, "{}: {d}", r.id),
            "random" => assert!(d >= 0.85, "{}: {d}", r.id),
            _ => {}
        }
    }
}

#[test]
fn stage2_gate_is_strict_at_tau() {
    let (_, reference) = load();
    let at = &reference.boundary[0];
    let above = &reference.boundary[1];
    assert_eq!(at.id, "ncd-70");
    assert_eq!(ncd(at.response_a.as_bytes(), at.response_b.as_bytes()).unwrap(), 0.7);
    assert_eq!(at.ncd, 0.7);
    assert!(!stage2_gate(&at.response_a, &at.response_b, 0.7).unwrap());
    assert!(ncd(above.response_a.as_bytes(), above.response_b.as_bytes()).unwrap() > 0.7);
    assert!(stage2_gate(&above.response_a, &above.response_b, 0.7).unwrap());
}

#[test]
fn ncd_rejects_empty_input() {
    assert!(ncd(b"", b"x").is_err());
    assert!(stage2_gate("x", "", 0.7).is_err());
}

#[test]
fn calibration_separates_groups() {
    let (corpus, _) = load();
    let report = run_calibration(&corpus, 0.7).unwrap();
    assert_eq!(report.pair_count, 50);
    assert_eq!(report.substantive_count, 25);
    assert_eq!(report.compressor.level, 6);
    assert_eq!(report.compressor.mtime, 0);
    let sub = report.ncd.mean_substantive.unwrap();
    let non = report.ncd.mean_non_substantive.unwrap();
    assert!(sub > 0.7 && non < 0.2, "{sub} {non}");
    assert_eq!(report.ncd.histogram.iter().map(|b| b.count).sum::<usize>(), 50);
}

#[test]
fn chat_probe_without_snippets_skips_second_response() {
    let (s, mock) = mock_session("p");
    s.capture_observation(contexty_core::engine::ObservationInput {
        image: read_fixture("phash/screen_0.png"),
        provenance: contexty_core::Provenance::new("Editor", "budget", None),
    })
    .unwrap();
    let before = mock.calls(contexty_core::analyzer::Module::Chat);
    let out = s
        .chat(ChatInput {
            message: "what is on screen?".into(),
            probe: true,
            ..Default::default()
        })
        .unwrap();
    let gate = out.gate.clone().unwrap();
    assert!(gate.stage1_equivalent);
    assert!(!out.awaits_choice());
    assert_eq!(mock.calls(contexty_core::analyzer::Module::Chat), before + 1);
    assert_eq!(s.funnel().stage1_equivalent, 1);
}

#[test]
fn chat_probe_with_snippet_context_compares_both() {
    let (s, mock) = mock_session("p");
    for t in ["Tokyo hotel shortlist near Shinjuku", "Tokyo hotel prices in spring", "Tokyo ramen map for the hotel area"] {
        s.capture_snippet(snippet(t)).unwrap();
    }
    let out = s
        .chat(ChatInput {
            message: "Tokyo hotel plan?".into(),
            probe: true,
            ..Default::default()
        })
        .unwrap();
    let gate = out.gate.clone().unwrap();
    assert!(!gate.stage1_equivalent);
    let d = gate.report.ncd.unwrap();
    assert_eq!(gate.stage2_show, Some(d > 0.7));
    assert_eq!(out.awaits_choice(), d > 0.7);
    assert_eq!(mock.calls(contexty_core::analyzer::Module::Chat), 2);
    assert!(s.verify_replay().unwrap());
}
