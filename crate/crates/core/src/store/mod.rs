//! Append-only session persistence.
//!
//! Each session lives in its own directory:
//!
//! ```text
//! <root>/<session-id>/manifest.json
//! <root>/<session-id>/events.jsonl     one SessionEvent per line
//! <root>/<session-id>/blobs/<sha256>.<png|jpg|bin>
//! ```
//!
//! A torn final line (a crash mid-write) is cut off when the log is opened;
//! a damaged complete line is a replay error naming its sequence number.

mod events;
mod state;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use events::*;
pub use state::{replay, Applied, ApplyError, ProbeFunnel, SessionState};

use crate::error::StoreError;
use crate::model::{ImageRef, Timestamp};

type Result<T> = std::result::Result<T, StoreError>;

const MANIFEST: &str = "manifest.json";
const EVENTS: &str = "events.jsonl";
const BLOBS: &str = "blobs";
const BLOB_PREFIX: &str = "sha256-";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionManifest {
    pub session_id: String,
    pub created_at: Timestamp,
    pub schema_version: String,
    pub event_count: u64,
    /// Image ref to the hex SHA-256 of its bytes.
    #[serde(default)]
    pub blob_index: BTreeMap<String, String>,
}

/// Session ids become directory names, so only a safe alphabet is allowed.
pub fn valid_session_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn blob_extension(bytes: &[u8]) -> &'static str {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        "png"
    } else if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
        "jpg"
    } else {
        "bin"
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// The ref [`SessionLog::store_blob`] assigns to these bytes.
pub fn blob_ref(bytes: &[u8]) -> ImageRef {
    ImageRef::new(format!("{BLOB_PREFIX}{}", content_hash(bytes)))
}

/// Result of scanning a log file.
#[derive(Debug)]
pub struct LogScan {
    pub events: Vec<SessionEvent>,
    /// Length in bytes of the valid prefix.
    pub valid_len: u64,
    /// Bytes of a torn final line, if any.
    pub torn_tail: u64,
}

/// Parses a log. Complete lines must parse and be gapless; an unterminated
/// final line is reported as torn and not returned.
pub fn scan_log(bytes: &[u8]) -> Result<LogScan> {
    let mut events: Vec<SessionEvent> = Vec::new();
    let mut offset = 0usize;
    while offset < bytes.len() {
        let Some(nl) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            return Ok(LogScan {
                events,
                valid_len: offset as u64,
                torn_tail: (bytes.len() - offset) as u64,
            });
        };
        let line = &bytes[offset..offset + nl];
        let expected = events.last().map_or(1, |e| e.seq + 1);
        let event: SessionEvent = serde_json::from_slice(line).map_err(|e| StoreError::Replay {
            seq: expected,
            reason: format!("unreadable record: {e}"),
        })?;
        if event.seq != expected {
            return Err(StoreError::Replay {
                seq: event.seq,
                reason: format!("sequence gap, expected {expected}"),
            });
        }
        events.push(event);
        offset += nl + 1;
    }
    Ok(LogScan {
        events,
        valid_len: bytes.len() as u64,
        torn_tail: 0,
    })
}

/// Directory holding many sessions.
#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
}

impl SessionStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn session_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn exists(&self, id: &str) -> bool {
        valid_session_id(id) && self.session_dir(id).join(MANIFEST).is_file()
    }

    pub fn create(&self, id: &str, now: Timestamp) -> Result<SessionLog> {
        if !valid_session_id(id) {
            return Err(StoreError::Integrity(format!("invalid session id {id:?}")));
        }
        let dir = self.session_dir(id);
        if dir.join(MANIFEST).exists() {
            return Err(StoreError::Integrity(format!("session {id} already exists")));
        }
        fs::create_dir_all(dir.join(BLOBS))?;
        let manifest = SessionManifest {
            session_id: id.to_string(),
            created_at: now,
            schema_version: LOG_SCHEMA.to_string(),
            event_count: 0,
            blob_index: BTreeMap::new(),
        };
        write_atomic(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
        File::create(dir.join(EVENTS))?.sync_all()?;
        SessionLog::open_dir(dir).map(|(log, _)| log)
    }

    /// Opens a session and returns its log with the recovered events.
    pub fn open_session(&self, id: &str) -> Result<(SessionLog, Vec<SessionEvent>)> {
        if !self.exists(id) {
            return Err(StoreError::UnknownSession(id.to_string()));
        }
        SessionLog::open_dir(self.session_dir(id))
    }

    pub fn list(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if self.exists(&name) {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Removes a whole session. Logs are never edited in place.
    pub fn delete(&self, id: &str) -> Result<()> {
        if !self.exists(id) {
            return Err(StoreError::UnknownSession(id.to_string()));
        }
        fs::remove_dir_all(self.session_dir(id))?;
        Ok(())
    }
}

/// Writer for one session's log and blobs.
#[derive(Debug)]
pub struct SessionLog {
    dir: PathBuf,
    manifest: SessionManifest,
    file: File,
    last_seq: u64,
    recovered_tail: u64,
}

impl SessionLog {
    /// Opens a session directory, cutting off a torn final record.
    pub fn open_dir(dir: impl Into<PathBuf>) -> Result<(Self, Vec<SessionEvent>)> {
        let dir = dir.into();
        let manifest: SessionManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
        if manifest.schema_version != LOG_SCHEMA {
            return Err(StoreError::Integrity(format!("unsupported log schema {}", manifest.schema_version)));
        }
        let path = dir.join(EVENTS);
        let mut bytes = Vec::new();
        if path.exists() {
            File::open(&path)?.read_to_end(&mut bytes)?;
        }
        let scan = scan_log(&bytes)?;
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        if scan.torn_tail > 0 {
            tracing::warn!(bytes = scan.torn_tail, path = %path.display(), "dropping torn log tail");
            file.set_len(scan.valid_len)?;
            file.sync_all()?;
        }
        let mut log = Self {
            dir,
            manifest,
            file,
            last_seq: scan.events.last().map_or(0, |e| e.seq),
            recovered_tail: scan.torn_tail,
        };
        if log.manifest.event_count != log.last_seq {
            log.manifest.event_count = log.last_seq;
            log.write_manifest()?;
        }
        Ok((log, scan.events))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &SessionManifest {
        &self.manifest
    }

    pub fn session_id(&self) -> &str {
        &self.manifest.session_id
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    /// Bytes dropped from a torn tail when the log was opened.
    pub fn recovered_tail(&self) -> u64 {
        self.recovered_tail
    }

    fn write_manifest(&self) -> Result<()> {
        write_atomic(&self.dir.join(MANIFEST), &serde_json::to_vec_pretty(&self.manifest)?)
    }

    /// Appends one event; its seq must follow the last one.
    pub fn append(&mut self, event: &SessionEvent) -> Result<u64> {
        self.append_batch(std::slice::from_ref(event))?;
        Ok(event.seq)
    }

    /// Appends events in order and syncs once. Nothing is written if any
    /// seq is out of order.
    pub fn append_batch(&mut self, events: &[SessionEvent]) -> Result<()> {
        if events.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::new();
        let mut expected = self.last_seq + 1;
        for e in events {
            if e.seq != expected {
                return Err(StoreError::Integrity(format!("append out of order: expected seq {expected}, got {}", e.seq)));
            }
            serde_json::to_writer(&mut buf, e)?;
            buf.push(b'\n');
            expected += 1;
        }
        self.file.write_all(&buf)?;
        self.file.sync_data()?;
        self.last_seq = expected - 1;
        self.manifest.event_count = self.last_seq;
        self.write_manifest()
    }

    /// Re-reads the committed events from disk.
    pub fn read_events(&self) -> Result<Vec<SessionEvent>> {
        Ok(scan_log(&fs::read(self.dir.join(EVENTS))?)?.events)
    }

    /// Stores bytes under their content hash; storing twice is a no-op.
    pub fn store_blob(&mut self, bytes: &[u8]) -> Result<ImageRef> {
        let hash = content_hash(bytes);
        let image_ref = blob_ref(bytes);
        let path = self.dir.join(BLOBS).join(format!("{hash}.{}", blob_extension(bytes)));
        if !path.exists() {
            fs::create_dir_all(self.dir.join(BLOBS))?;
            write_atomic(&path, bytes)?;
        }
        if self.manifest.blob_index.get(image_ref.as_str()) != Some(&hash) {
            self.manifest.blob_index.insert(image_ref.as_str().to_string(), hash);
            self.write_manifest()?;
        }
        Ok(image_ref)
    }

    pub fn load_blob(&self, image_ref: &ImageRef) -> Result<Vec<u8>> {
        let hash = self
            .manifest
            .blob_index
            .get(image_ref.as_str())
            .ok_or_else(|| StoreError::UnknownBlob(image_ref.to_string()))?;
        for ext in ["png", "jpg", "bin"] {
            let path = self.dir.join(BLOBS).join(format!("{hash}.{ext}"));
            if path.exists() {
                let bytes = fs::read(path)?;
                if &content_hash(&bytes) != hash {
                    return Err(StoreError::Integrity(format!("blob {image_ref} does not match its hash")));
                }
                return Ok(bytes);
            }
        }
        Err(StoreError::UnknownBlob(image_ref.to_string()))
    }
}
