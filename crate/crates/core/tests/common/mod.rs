//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod oracle;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use contexty_core::analyzer::{AnalyzerAdapter, MockProvider};
use contexty_core::engine::{ChatInput, Clock, EngineConfig, ObservationInput, Session, SnippetInput};
use contexty_core::filter::{PerceptualHash, GRID};
use contexty_core::probe::Choice;
use contexty_core::tree::MemoryEdit;
use contexty_core::{GroupName, MemoryId, Provenance, Timestamp};

pub const T0: i64 = 1_700_000_000_000;
pub const DEMO_EVENTS: usize = 100;
pub const DEMO_ID: &str = "demo";

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn read_fixture(rel: &str) -> Vec<u8> {
    std::fs::read(fixtures().join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

/// Clock that advances one minute per reading.
pub fn ticking_clock(start: i64) -> Clock {
    let t = Arc::new(AtomicI64::new(start));
    Arc::new(move || Timestamp(t.fetch_add(60_000, Ordering::SeqCst)))
}

pub fn mock_session(id: &str) -> (Session, Arc<MockProvider>) {
    let mock = Arc::new(MockProvider::new());
    let s = Session::in_memory(id, AnalyzerAdapter::new(mock.clone()), EngineConfig::default()).with_clock(ticking_clock(T0));
    (s, mock)
}

pub fn snippet(text: &str) -> SnippetInput {
    SnippetInput {
        text: Some(text.to_string()),
        provenance: Provenance::new("Browser", "Notes", None),
        ..Default::default()
    }
}

/// PNG whose 16x16 cell pattern reproduces `bits`: cells with a set bit are
/// white, the rest black, each cell `scale` pixels wide.
pub fn pattern_png(bits: &PerceptualHash, scale: u32) -> Vec<u8> {
    let side = GRID as u32 * scale;
    let img = image::RgbImage::from_fn(side, side, |x, y| {
        let cell = (y / scale) as usize * GRID + (x / scale) as usize;
        let v = if bits.bit(cell) { 255 } else { 0 };
        image::Rgb([v, v, v])
    });
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).expect("png encode");
    out.into_inner()
}

/// A hash with exactly the listed cells set.
pub fn hash_with(cells: impl IntoIterator<Item = usize>) -> PerceptualHash {
    let mut h = PerceptualHash::from_bytes([0; 32]);
    for c in cells {
        h.set_bit(c, true);
    }
    h
}

fn obs(name: &str) -> ObservationInput {
    ObservationInput {
        image: read_fixture(&format!("phash/{name}")),
        provenance: Provenance::new("Screen", name, None),
    }
}

const DEMO_SNIPPETS: &[&str] = &[
    "Tokyo hotel options near Shinjuku station under 20000 yen per night",
    "Japan rail pass covers most Shinkansen lines between Tokyo and Kyoto",
    "Kyoto temples itinerary: Fushimi Inari early morning then Kiyomizu",
    "Rust borrow checker explained with lifetimes and mutable references",
    "Rust async runtime comparison tokio versus async-std for servers",
    "Quarterly budget review spreadsheet with travel and hardware costs",
    "Budget for the Japan trip: flights, hotel and rail pass totals",
    "Rust error handling with thiserror and the question mark operator",
];

/// Runs the scripted demo session until its log holds exactly
/// [`DEMO_EVENTS`] events. Everything is deterministic: mock analyzer,
/// ticking clock, fixture images.
pub fn run_demo(session: &Session) {
    let mut ids: Vec<MemoryId> = Vec::new();
    for (i, text) in DEMO_SNIPPETS.iter().enumerate() {
        let mut input = snippet(text);
        if i == 1 {
            input.user_memo = Some("check the 14 day pass".into());
        }
        ids.extend(session.capture_snippet(input).unwrap().memory_id().cloned());
    }
    for name in ["screen_0.png", "screen_1.png", "noise.png", "noise_jitter.png", "screen_0.png"] {
        ids.extend(session.capture_observation(obs(name)).unwrap().memory_id().cloned());
    }
    session
        .chat(ChatInput {
            message: "What did I plan for the Tokyo hotel?".into(),
            explicit_memory_ids: vec![ids[0].clone()],
            ..Default::default()
        })
        .unwrap();
    let probed = session
        .chat(ChatInput {
            message: "Summarize the rust notes".into(),
            probe: true,
            ..Default::default()
        })
        .unwrap();
    if probed.awaits_choice() {
        session.choose(&probed.query_id, Choice::A).unwrap();
    }
    let grouped = session.group(&[ids[5].clone(), ids[6].clone()], Some("Money".into())).unwrap();
    session
        .rename_branch(&grouped, GroupName::new("Money Matters", "Costs across projects"))
        .unwrap();
    session.move_memory(&ids[2], Some(&grouped)).unwrap();
    session
        .edit_memory(
            &ids[3],
            MemoryEdit {
                title: Some("Borrow Checker".into()),
                ..Default::default()
            },
        )
        .unwrap();
    session.set_summary("Planning a Japan trip while learning Rust.").unwrap();
    session.refresh_summary().unwrap();

    let mut hidden = false;
    while session.events().unwrap().len() < DEMO_EVENTS {
        hidden = !hidden;
        session.set_visibility(&ids[7], hidden, false).unwrap();
    }
    assert_eq!(session.events().unwrap().len(), DEMO_EVENTS, "demo script overshot");
}

/// Mock provider whose relatedness answer is a single fixed score against
/// the most recent candidate. Everything else is delegated to the mock.
pub struct FixedRelatedness {
    pub inner: MockProvider,
    pub score: f64,
}

impl contexty_core::analyzer::Provider for FixedRelatedness {
    fn name(&self) -> &str {
        "fixed"
    }

    fn complete_json(&self, request: &contexty_core::analyzer::JsonRequest<'_>) -> Result<serde_json::Value, contexty_core::AnalyzerError> {
        let answer = self.inner.complete_json(request)?;
        if request.module != contexty_core::analyzer::Module::PlacementEvolution {
            return Ok(answer);
        }
        let first = request.input["existingItems"][0]["id"].as_str().unwrap_or_default();
        Ok(serde_json::json!({ "related": [{ "id": first, "score": self.score }] }))
    }

    fn chat(&self, request: &contexty_core::analyzer::ChatRequest) -> Result<String, contexty_core::AnalyzerError> {
        self.inner.chat(request)
    }
}

pub fn fixed_session(score: f64) -> (Session, Arc<FixedRelatedness>) {
    let provider = Arc::new(FixedRelatedness {
        inner: MockProvider::new(),
        score,
    });
    let s = Session::in_memory("fixed", AnalyzerAdapter::new(provider.clone()), EngineConfig::default()).with_clock(ticking_clock(T0));
    (s, provider)
}
