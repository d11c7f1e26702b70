//! Work behind each CLI subcommand, kept out of `main` so it can be tested.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use contexty_core::analyzer::{AnalyzerAdapter, RemoteConfig, RemoteProvider};
use contexty_core::engine::{CaptureOutcome, EngineConfig, ObservationInput, Session, SnippetInput};
use contexty_core::filter::phash;
use contexty_core::probe::{run_calibration, CalibrationCorpus, CalibrationReport};
use contexty_core::retrieval::{rank_memories, Query, RetrievalScope, ScoredMemory};
use contexty_core::store::{replay, scan_log, SessionState, SessionStore};
use contexty_core::{Provenance, Timestamp};
use serde::Serialize;

use crate::api::AppState;
use crate::config::{ProviderKind, ServiceConfig};
use crate::error::{ApiError, ErrorCode};

type CliResult<T> = Result<T, ApiError>;

fn io_err(path: &Path, e: std::io::Error) -> ApiError {
    let code = if e.kind() == std::io::ErrorKind::NotFound {
        ErrorCode::NotFound
    } else {
        ErrorCode::Internal
    };
    ApiError::new(code, format!("{}: {e}", path.display()))
}

pub fn analyzer_for(cfg: &ServiceConfig) -> CliResult<AnalyzerAdapter> {
    match cfg.analyzer.provider {
        ProviderKind::Mock => Ok(AnalyzerAdapter::mock()),
        ProviderKind::Remote => {
            let remote = RemoteConfig::from_env().and_then(RemoteProvider::new)?;
            Ok(AnalyzerAdapter::new(Arc::new(remote)))
        }
    }
}

pub fn app_state(cfg: &ServiceConfig) -> CliResult<AppState> {
    let store = SessionStore::open(&cfg.server.data_dir).map_err(ApiError::from)?;
    let token = std::env::var(&cfg.server.token_env).ok();
    Ok(AppState::new(store, analyzer_for(cfg)?, cfg.engine()).with_token(token))
}

/// 64-hex perceptual hash of an image file.
pub fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(phash(&bytes)?.to_hex())
}

/// Where a log to replay comes from.
fn log_path(source: &str, data_dir: &Path) -> PathBuf {
    let p = PathBuf::from(source);
    if p.is_file() {
        p
    } else if p.is_dir() {
        p.join("events.jsonl")
    } else {
        data_dir.join(source).join("events.jsonl")
    }
}

/// Replays a log without touching it. `source` is a log file, a session
/// directory, or a session id under `data_dir`.
pub fn replay_state(source: &str, data_dir: &Path, engine: &EngineConfig) -> CliResult<SessionState> {
    let path = log_path(source, data_dir);
    let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
    let scan = scan_log(&bytes)?;
    if scan.torn_tail > 0 {
        tracing::warn!(bytes = scan.torn_tail, "ignoring torn log tail");
    }
    let id = path
        .parent()
        .and_then(|d| d.file_name())
        .map_or_else(|| "session".to_string(), |n| n.to_string_lossy().into_owned());
    Ok(replay(&id, &scan.events, engine.filter.ring_capacity)?)
}

/// Canonical tree JSON of a replayed log.
pub fn replay_canonical(source: &str, data_dir: &Path, engine: &EngineConfig) -> CliResult<String> {
    Ok(replay_state(source, data_dir, engine)?.tree.to_canonical_json())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ScoreRow {
    #[serde(flatten)]
    pub scored: ScoredMemory,
    pub title: String,
}

pub fn score(state: &SessionState, query: &str, now: Timestamp, engine: &EngineConfig) -> Vec<ScoreRow> {
    let q = Query::new(query, now);
    rank_memories(&state.tree, &q, &engine.retrieval, RetrievalScope::full())
        .into_iter()
        .map(|scored| ScoreRow {
            title: state.tree.memory(&scored.memory_id).map(|m| m.title.clone()).unwrap_or_default(),
            scored,
        })
        .collect()
}

pub fn render_scores(rows: &[ScoreRow]) -> String {
    let mut out = format!("{:>8} {:>8} {:>6} {:>8} {:>6}  {:<12} {}\n", "score", "overlap", "tag", "recency", "source", "id", "title");
    for r in rows {
        let c = &r.scored.components;
        out.push_str(&format!(
            "{:>8.4} {:>8.4} {:>6.2} {:>8.4} {:>6.2}  {:<12} {}\n",
            r.scored.score, c.token_overlap, c.tag_boost, c.recency, c.source_boost, r.scored.memory_id, r.title
        ));
    }
    out
}

pub fn calibrate(corpus: &Path, tau: f64) -> CliResult<CalibrationReport> {
    let text = std::fs::read_to_string(corpus).map_err(|e| io_err(corpus, e))?;
    let corpus: CalibrationCorpus = serde_json::from_str(&text).map_err(|e| ApiError::bad_request(format!("invalid corpus: {e}")))?;
    Ok(run_calibration(&corpus, tau)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct IngestLine {
    pub file: String,
    pub outcome: CaptureOutcome,
}

fn ingest_files(path: &Path) -> CliResult<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| io_err(&dir, e))? {
            let p = entry.map_err(|e| io_err(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    Ok(files)
}

/// Captures files into a session: text as snippets, images as
/// observations (or image snippets with `images_as_snippets`). Other files
/// are skipped.
pub fn ingest(session: &Session, path: &Path, images_as_snippets: bool) -> CliResult<Vec<IngestLine>> {
    let mut lines = Vec::new();
    for file in ingest_files(path)? {
        let ext = file.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        let name = file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let provenance = Provenance::new("ingest", name.clone(), None);
        let outcome = match ext.as_deref() {
            Some("txt" | "md") => {
                let text = std::fs::read_to_string(&file).map_err(|e| io_err(&file, e))?;
                session.capture_snippet(SnippetInput {
                    text: Some(text),
                    provenance,
                    ..Default::default()
                })?
            }
            Some("png" | "jpg" | "jpeg") => {
                let image = std::fs::read(&file).map_err(|e| io_err(&file, e))?;
                if images_as_snippets {
                    session.capture_snippet(SnippetInput {
                        image: Some(image),
                        provenance,
                        ..Default::default()
                    })?
                } else {
                    session.capture_observation(ObservationInput { image, provenance })?
                }
            }
            _ => continue,
        };
        lines.push(IngestLine { file: name, outcome });
    }
    Ok(lines)
}
