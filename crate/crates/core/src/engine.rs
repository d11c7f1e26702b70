//! One session's engine: capture, chat and editing pipelines.
//!
//! Every operation builds its events against a scratch copy of the state,
//! using the same [`SessionState::apply`] that replay uses, then appends the
//! batch and publishes the new state. A failed operation writes nothing.
//! Writers are serialized per session; readers take the published state and
//! never wait on a writer.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use serde::{Deserialize, Serialize};

use crate::analyzer::{AnalyzerAdapter, ChatTurn, ContentInput, ImageInput, Module, EMPTY_SUMMARY, MAX_SUMMARY_CHARS};
use crate::error::{AnalyzerError, EngineError, StoreError};
use crate::filter::{phash, stage2_autohide, FilterConfig, FilterDecision, FilterOutcome, PerceptualHash};
use crate::model::{
    Branch, BranchId, CrossLink, GroupName, ImageRef, MemoryId, MemoryItem, Provenance, RelevanceJudgment, Source, Timestamp,
};
use crate::probe::{build_variants, compare_contexts, complete_with_responses, Choice, GateDecision, PreferenceRecord, ProbeConfig};
use crate::retrieval::{parse_references, retrieve, Query, ReferenceTag, RetrievalConfig};
use crate::store::{
    blob_ref, AnalysisRecord, ApplyError, CaptureRecord, ChatRecord, DeleteRecord, EditRecord, EvolutionRecord, EventPayload, GroupRecord,
    MoveRecord, PlacementRecord, ProbeFunnel, ProbeRecord, ReorgRecord, SessionEvent, SessionLog, SessionManifest, SessionState, SessionStore,
    SummaryOrigin, SummaryRecord, VisibilityReason, VisibilityRecord,
};
use crate::tree::{MemoryEdit, PlacementConfig, PlacementDecision, PlacementTarget};

type Result<T> = std::result::Result<T, EngineError>;

/// Source of event timestamps.
pub type Clock = Arc<dyn Fn() -> Timestamp + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| {
        let ms = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as i64);
        Timestamp(ms)
    })
}

/// Every tunable threshold of the engine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct EngineConfig {
    pub placement: PlacementConfig,
    pub retrieval: RetrievalConfig,
    pub filter: FilterConfig,
    pub probe: ProbeConfig,
    /// Recent memories per cluster in the summarization snapshot.
    pub snapshot_recent: usize,
    /// Most recent memories a new capture is scored against.
    pub related_candidates: usize,
    /// Chat turns replayed to the model as history.
    pub history_turns: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            placement: PlacementConfig::default(),
            retrieval: RetrievalConfig::default(),
            filter: FilterConfig::default(),
            probe: ProbeConfig::default(),
            snapshot_recent: 5,
            related_candidates: 100,
            history_turns: 20,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SnippetInput {
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default, skip_serializing)]
    pub image: Option<Vec<u8>>,
    #[serde(default)]
    pub user_memo: Option<String>,
    #[serde(default)]
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationInput {
    pub image: Vec<u8>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChatInput {
    pub message: String,
    #[serde(default)]
    pub explicit_memory_ids: Vec<MemoryId>,
    #[serde(default)]
    pub explicit_branch_ids: Vec<BranchId>,
    #[serde(default)]
    pub probe: bool,
}

/// Result of a capture. A discarded observation has no memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CaptureOutcome {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory: Option<MemoryItem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<PlacementDecision>,
    /// Existing memories refined by this capture.
    #[serde(default)]
    pub evolved: Vec<MemoryId>,
    /// Filter decisions, stage 1 first.
    #[serde(default)]
    pub filter: Vec<FilterDecision>,
    pub version: u64,
}

impl CaptureOutcome {
    pub fn memory_id(&self) -> Option<&MemoryId> {
        self.memory.as_ref().map(|m| &m.id)
    }

    pub fn discarded(&self) -> bool {
        self.filter.iter().any(|d| d.outcome == FilterOutcome::Discard)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProbeCandidates {
    pub response_a: String,
    pub response_b: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChatOutcome {
    pub query_id: String,
    pub response: String,
    pub references: Vec<ReferenceTag>,
    pub context_memory_ids: Vec<MemoryId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateDecision>,
    /// Both responses, when the user is asked to choose.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<ProbeCandidates>,
    /// The exchange stored as a chat memory.
    pub chat_memory: MemoryItem,
    pub version: u64,
}

impl ChatOutcome {
    pub fn awaits_choice(&self) -> bool {
        self.candidates.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BranchView {
    #[serde(flatten)]
    pub branch: Branch,
    pub memory_ids: Vec<MemoryId>,
    pub child_ids: Vec<BranchId>,
}

/// Whole-tree view for the canvas. Hidden memories are included with their
/// flag set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TreeView {
    pub session_id: String,
    /// Seq of the last event.
    pub version: u64,
    /// Seq of the last event that changed the tree.
    pub tree_version: u64,
    pub branches: Vec<BranchView>,
    pub unassigned: Vec<MemoryId>,
    pub memories: Vec<MemoryItem>,
    pub links: Vec<CrossLink>,
    pub pending_choices: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TimelineView {
    pub version: u64,
    /// Oldest capture first.
    pub memories: Vec<MemoryItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SummaryView {
    pub summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<SummaryOrigin>,
    /// True when the tree changed after the summary was written.
    pub stale: bool,
    pub tree_version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReorgOutcome {
    pub plan: crate::model::ReorgPlan,
    pub created_branches: Vec<BranchId>,
    pub version: u64,
}

#[derive(Debug, Default)]
struct MemoryBackend {
    events: Vec<SessionEvent>,
    blobs: BTreeMap<String, Vec<u8>>,
}

#[derive(Debug)]
enum Backend {
    Memory(MemoryBackend),
    Disk(SessionLog),
}

impl Backend {
    fn append(&mut self, events: &[SessionEvent]) -> std::result::Result<(), StoreError> {
        match self {
            Backend::Memory(m) => {
                m.events.extend_from_slice(events);
                Ok(())
            }
            Backend::Disk(log) => log.append_batch(events),
        }
    }

    fn store_blob(&mut self, bytes: &[u8]) -> std::result::Result<ImageRef, StoreError> {
        match self {
            Backend::Memory(m) => {
                let r = blob_ref(bytes);
                m.blobs.insert(r.as_str().to_string(), bytes.to_vec());
                Ok(r)
            }
            Backend::Disk(log) => log.store_blob(bytes),
        }
    }
}

/// Events staged against a scratch state.
struct Txn {
    state: SessionState,
    events: Vec<SessionEvent>,
    at: Timestamp,
    blobs: Vec<Vec<u8>>,
}

impl Txn {
    fn push(&mut self, payload: EventPayload) -> Result<crate::store::Applied> {
        let event = SessionEvent::new(self.state.last_seq + 1, self.at, payload);
        let applied = self.state.apply(&event).map_err(|e| match e {
            ApplyError::Tree(t) => EngineError::Tree(t),
            ApplyError::Invalid(s) => EngineError::Store(StoreError::Integrity(s)),
        })?;
        self.events.push(event);
        Ok(applied)
    }
}

fn image_mime(bytes: &[u8]) -> Result<&'static str> {
    match image::guess_format(bytes) {
        Ok(image::ImageFormat::Png) => Ok("image/png"),
        Ok(image::ImageFormat::Jpeg) => Ok("image/jpeg"),
        _ => Err(EngineError::Argument("image must be PNG or JPEG".into())),
    }
}

fn non_empty(s: Option<String>) -> Option<String> {
    s.map(|t| t.trim().to_string()).filter(|t| !t.is_empty())
}

pub struct Session {
    id: String,
    analyzer: AnalyzerAdapter,
    config: EngineConfig,
    clock: Clock,
    writer: Mutex<Backend>,
    state: RwLock<Arc<SessionState>>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session").field("id", &self.id).field("analyzer", &self.analyzer).finish()
    }
}

impl Session {
    fn build(id: &str, analyzer: AnalyzerAdapter, config: EngineConfig, backend: Backend, state: SessionState) -> Self {
        Self {
            id: id.to_string(),
            analyzer,
            config,
            clock: system_clock(),
            writer: Mutex::new(backend),
            state: RwLock::new(Arc::new(state)),
        }
    }

    /// A session whose log lives only in memory.
    pub fn in_memory(id: &str, analyzer: AnalyzerAdapter, config: EngineConfig) -> Self {
        let state = SessionState::new(id, config.filter.ring_capacity);
        Self::build(id, analyzer, config, Backend::Memory(MemoryBackend::default()), state)
    }

    /// Rebuilds an in-memory session from recorded events.
    pub fn from_events(id: &str, events: Vec<SessionEvent>, analyzer: AnalyzerAdapter, config: EngineConfig) -> Result<Self> {
        let state = crate::store::replay(id, &events, config.filter.ring_capacity)?;
        let backend = Backend::Memory(MemoryBackend {
            events,
            blobs: BTreeMap::new(),
        });
        Ok(Self::build(id, analyzer, config, backend, state))
    }

    pub fn create(store: &SessionStore, id: &str, analyzer: AnalyzerAdapter, config: EngineConfig, now: Timestamp) -> Result<Self> {
        let log = store.create(id, now)?;
        let state = SessionState::new(id, config.filter.ring_capacity);
        Ok(Self::build(id, analyzer, config, Backend::Disk(log), state))
    }

    /// Opens a stored session by replaying its log.
    pub fn open(store: &SessionStore, id: &str, analyzer: AnalyzerAdapter, config: EngineConfig) -> Result<Self> {
        let (log, events) = store.open_session(id)?;
        let state = crate::store::replay(id, &events, config.filter.ring_capacity)?;
        Ok(Self::build(id, analyzer, config, Backend::Disk(log), state))
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn analyzer(&self) -> &AnalyzerAdapter {
        &self.analyzer
    }

    /// The latest committed state.
    pub fn state(&self) -> Arc<SessionState> {
        self.state.read().expect("state lock").clone()
    }

    fn lock_writer(&self) -> MutexGuard<'_, Backend> {
        self.writer.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// All committed events, oldest first.
    pub fn events(&self) -> Result<Vec<SessionEvent>> {
        match &*self.lock_writer() {
            Backend::Memory(m) => Ok(m.events.clone()),
            Backend::Disk(log) => Ok(log.read_events()?),
        }
    }

    pub fn manifest(&self) -> SessionManifest {
        match &*self.lock_writer() {
            Backend::Disk(log) => log.manifest().clone(),
            Backend::Memory(m) => SessionManifest {
                session_id: self.id.clone(),
                created_at: m.events.first().map_or(Timestamp(0), |e| e.at),
                schema_version: crate::store::LOG_SCHEMA.to_string(),
                event_count: m.events.len() as u64,
                blob_index: m.blobs.keys().map(|k| (k.clone(), k.trim_start_matches("sha256-").to_string())).collect(),
            },
        }
    }

    pub fn load_blob(&self, image_ref: &ImageRef) -> Result<Vec<u8>> {
        match &*self.lock_writer() {
            Backend::Disk(log) => Ok(log.load_blob(image_ref)?),
            Backend::Memory(m) => m
                .blobs
                .get(image_ref.as_str())
                .cloned()
                .ok_or_else(|| StoreError::UnknownBlob(image_ref.to_string()).into()),
        }
    }

    /// Replays the committed log and checks it lands on the live tree.
    pub fn verify_replay(&self) -> Result<bool> {
        let events = self.events()?;
        let replayed = crate::store::replay(&self.id, &events, self.config.filter.ring_capacity)?;
        Ok(replayed.tree.to_canonical_json() == self.state().tree.to_canonical_json())
    }

    fn begin<'a>(&'a self, guard: &MutexGuard<'a, Backend>) -> Txn {
        let _ = guard;
        let state = (*self.state()).clone();
        let now = (self.clock)();
        let at = state.last_at.map_or(now, |last| now.max(last));
        Txn {
            state,
            events: Vec::new(),
            at,
            blobs: Vec::new(),
        }
    }

    fn commit(&self, mut guard: MutexGuard<'_, Backend>, txn: Txn) -> Result<Arc<SessionState>> {
        for bytes in &txn.blobs {
            guard.store_blob(bytes)?;
        }
        guard.append(&txn.events)?;
        let state = Arc::new(txn.state);
        *self.state.write().expect("state lock") = state.clone();
        Ok(state)
    }

    /// Runs analysis, placement and evolution for a new memory.
    fn place_new(
        &self,
        txn: &mut Txn,
        draft: MemoryItem,
        hash: Option<&PerceptualHash>,
        stage1: Option<FilterDecision>,
        content: &ContentInput,
    ) -> Result<(PlacementDecision, Vec<MemoryId>, Vec<RelevanceJudgment>)> {
        let analysis = self.analyzer.analyze_content(content)?;
        let id = draft.id.clone();
        txn.push(EventPayload::Capture(CaptureRecord {
            memory: Some(draft),
            perceptual_hash: hash.map(PerceptualHash::to_hex),
            stage1,
        }))?;
        txn.push(EventPayload::Analysis(AnalysisRecord {
            module: Module::ContentAnalysis,
            memory_id: Some(id.clone()),
            output: serde_json::to_value(&analysis).map_err(StoreError::from)?,
        }))?;

        let item = txn.state.pending[&id].clone();
        let tree = &txn.state.tree;
        let mut candidates: Vec<&MemoryItem> = tree.memories().filter(|m| !m.archived).collect();
        candidates.sort_by(|a, b| b.sequence.cmp(&a.sequence));
        candidates.truncate(self.config.related_candidates);
        let judgments = self.analyzer.score_related(&item, &candidates, tree)?;

        let mut decision = tree.decide_placement(&judgments)?;
        let new_branch = match decision.target {
            PlacementTarget::NewBranch => {
                decision.created_branch = Some(tree.next_branch_id());
                Some(self.name_for_new_branch(&item)?)
            }
            PlacementTarget::Existing(_) => None,
        };
        txn.push(EventPayload::Placement(PlacementRecord {
            memory_id: id.clone(),
            judgments: judgments.clone(),
            new_branch,
            strong_link_threshold: self.config.placement.strong_link_threshold,
            decision: decision.clone(),
        }))?;

        let mut evolved = Vec::new();
        if judgments.iter().any(|j| j.suggest_tags.is_some() || j.suggest_context.is_some()) {
            let changed = txn.state.tree.preview_evolution(&judgments)?;
            txn.push(EventPayload::Evolution(EvolutionRecord {
                source_memory_id: id,
                judgments: judgments.clone(),
                changed: changed.clone(),
            }))?;
            evolved = changed;
        }
        Ok((decision, evolved, judgments))
    }

    /// Names a branch created for a single memory. Invalid provider output
    /// falls back to the memory title; transport problems propagate.
    fn name_for_new_branch(&self, item: &MemoryItem) -> Result<GroupName> {
        match self.analyzer.name_group(&[item]) {
            Ok(name) => Ok(name),
            Err(AnalyzerError::Validation(problem)) => {
                tracing::warn!(%problem, "group naming failed; using the memory title");
                Ok(GroupName::new(item.title.clone(), ""))
            }
            Err(e) => Err(e.into()),
        }
    }

    fn new_draft(&self, txn: &Txn, source: Source, provenance: Provenance) -> MemoryItem {
        let mut draft = MemoryItem::new(txn.state.tree.next_memory_id(), source, "", txn.at);
        draft.provenance = provenance;
        draft
    }

    /// Captures a snippet: text or an image, with an optional memo.
    pub fn capture_snippet(&self, input: SnippetInput) -> Result<CaptureOutcome> {
        let text = non_empty(input.text);
        if text.is_none() && input.image.is_none() {
            return Err(EngineError::Argument("a snippet needs text or an image".into()));
        }
        let image = match input.image {
            Some(bytes) => Some(ImageInput {
                image_ref: blob_ref(&bytes),
                mime: image_mime(&bytes)?.to_string(),
                bytes,
            }),
            None => None,
        };
        let guard = self.lock_writer();
        let mut txn = self.begin(&guard);
        let mut draft = self.new_draft(&txn, Source::Snippet, input.provenance.clone());
        draft.raw_text = text.clone();
        draft.user_memo = non_empty(input.user_memo);
        draft.image_ref = image.as_ref().map(|i| i.image_ref.clone());
        let id = draft.id.clone();
        let content = ContentInput {
            text,
            image,
            provenance: input.provenance,
        };
        let (placement, evolved, _) = self.place_new(&mut txn, draft, None, None, &content)?;
        if let Some(img) = content.image {
            txn.blobs.push(img.bytes);
        }
        let state = self.commit(guard, txn)?;
        Ok(CaptureOutcome {
            memory: state.tree.memory(&id).cloned(),
            placement: Some(placement),
            evolved,
            filter: Vec::new(),
            version: state.last_seq,
        })
    }

    /// Captures a passive screen observation through both filter stages.
    /// A stage-1 discard makes no analyzer call.
    pub fn capture_observation(&self, input: ObservationInput) -> Result<CaptureOutcome> {
        let mime = image_mime(&input.image)?;
        let hash = phash(&input.image)?;
        let guard = self.lock_writer();
        let mut txn = self.begin(&guard);
        let stage1 = txn.state.ring.check(&hash, self.config.filter.dedup_hamming);
        if stage1.outcome == FilterOutcome::Discard {
            txn.push(EventPayload::Capture(CaptureRecord {
                memory: None,
                perceptual_hash: Some(hash.to_hex()),
                stage1: Some(stage1.clone()),
            }))?;
            let state = self.commit(guard, txn)?;
            return Ok(CaptureOutcome {
                memory: None,
                placement: None,
                evolved: Vec::new(),
                filter: vec![stage1],
                version: state.last_seq,
            });
        }

        let image_ref = blob_ref(&input.image);
        let mut draft = self.new_draft(&txn, Source::Observation, input.provenance.clone());
        draft.image_ref = Some(image_ref.clone());
        draft.perceptual_hash = Some(hash.to_hex());
        let id = draft.id.clone();
        let content = ContentInput {
            text: None,
            image: Some(ImageInput {
                image_ref,
                mime: mime.to_string(),
                bytes: input.image,
            }),
            provenance: input.provenance,
        };
        let (placement, evolved, judgments) = self.place_new(&mut txn, draft, Some(&hash), Some(stage1.clone()), &content)?;

        let stage2 = stage2_autohide(&txn.state.tree, &id, &judgments, &self.config.filter)?;
        if stage2.outcome == FilterOutcome::Hide {
            txn.push(EventPayload::Visibility(VisibilityRecord {
                memory_id: id.clone(),
                hidden: true,
                archived: false,
                reason: VisibilityReason::Autohide,
                decision: Some(stage2.clone()),
            }))?;
        }
        if let Some(img) = content.image {
            txn.blobs.push(img.bytes);
        }
        let state = self.commit(guard, txn)?;
        Ok(CaptureOutcome {
            memory: state.tree.memory(&id).cloned(),
            placement: Some(placement),
            evolved,
            filter: vec![stage1, stage2],
            version: state.last_seq,
        })
    }

    fn check_explicit(&self, state: &SessionState, input: &ChatInput) -> Result<()> {
        for id in &input.explicit_memory_ids {
            if state.tree.memory(id).is_none() {
                return Err(EngineError::Argument(format!("unknown memory {id}")));
            }
        }
        for id in &input.explicit_branch_ids {
            if state.tree.branch(id).is_none() {
                return Err(EngineError::Argument(format!("unknown branch {id}")));
            }
        }
        Ok(())
    }

    /// Answers a chat message with retrieved context and stores the
    /// exchange as a chat memory. With `probe`, a snippet-free variant is
    /// generated too and both answers are returned when they differ enough.
    pub fn chat(&self, input: ChatInput) -> Result<ChatOutcome> {
        let message = input.message.trim().to_string();
        if message.is_empty() {
            return Err(EngineError::Argument("chat message is empty".into()));
        }
        let guard = self.lock_writer();
        let mut txn = self.begin(&guard);
        self.check_explicit(&txn.state, &input)?;
        let query = Query {
            text: message.clone(),
            explicit_memory_ids: input.explicit_memory_ids.clone(),
            explicit_branch_ids: input.explicit_branch_ids.clone(),
            now: txn.at,
        };
        let history: Vec<ChatTurn> = {
            let h = &txn.state.history;
            h[h.len().saturating_sub(self.config.history_turns)..].to_vec()
        };
        let query_id = txn.state.next_query_id();

        let (response, context_ids, probe) = if input.probe {
            let (a, b) = build_variants(&txn.state.tree, &query, &self.config.retrieval)?;
            let gate = compare_contexts(&a, &b, &self.config.probe);
            let (response_a, response_b, gate) = if gate.stage1_equivalent {
                (self.analyzer.chat_complete(&history, &a.rendered_text, &message)?, None, gate)
            } else {
                let (ra, rb) = std::thread::scope(|s| {
                    let handle = s.spawn(|| self.analyzer.chat_complete(&history, &b.rendered_text, &message));
                    let ra = self.analyzer.chat_complete(&history, &a.rendered_text, &message);
                    (ra, handle.join().expect("chat worker panicked"))
                });
                let (ra, rb) = (ra?, rb?);
                let gate = complete_with_responses(gate, &ra, &rb, &self.config.probe)?;
                (ra, Some(rb), gate)
            };
            let record = ProbeRecord {
                query_id: query_id.clone(),
                decision: gate,
                variant_a: a.memory_ids.clone(),
                variant_b: b.memory_ids.clone(),
                response_a: response_a.clone(),
                response_b,
            };
            (response_a, a.memory_ids, Some(record))
        } else {
            let bundle = retrieve(&txn.state.tree, &query, &self.config.retrieval)?;
            let response = self.analyzer.chat_complete(&history, &bundle.rendered_text, &message)?;
            (response, bundle.memory_ids(), None)
        };

        let references = parse_references(&response);
        txn.push(EventPayload::Chat(ChatRecord {
            query_id: query_id.clone(),
            message: message.clone(),
            response: response.clone(),
            references: references.clone(),
            explicit_memory_ids: input.explicit_memory_ids,
            explicit_branch_ids: input.explicit_branch_ids,
            context_memory_ids: context_ids.clone(),
        }))?;
        let (gate, candidates) = match probe {
            Some(record) => {
                let candidates = match (&record.response_b, record.awaits_choice()) {
                    (Some(b), true) => Some(ProbeCandidates {
                        response_a: record.response_a.clone(),
                        response_b: b.clone(),
                    }),
                    _ => None,
                };
                let gate = record.decision.clone();
                txn.push(EventPayload::Probe(record))?;
                (Some(gate), candidates)
            }
            None => (None, None),
        };

        let exchange = format!("{message}\n\n{response}");
        let mut draft = self.new_draft(&txn, Source::Chat, Provenance::new("chat", "", None));
        draft.raw_text = Some(exchange.clone());
        let chat_id = draft.id.clone();
        let content = ContentInput {
            text: Some(exchange),
            image: None,
            provenance: draft.provenance.clone(),
        };
        self.place_new(&mut txn, draft, None, None, &content)?;

        let state = self.commit(guard, txn)?;
        Ok(ChatOutcome {
            query_id,
            response,
            references,
            context_memory_ids: context_ids,
            gate,
            candidates,
            chat_memory: state.tree.memory(&chat_id).cloned().expect("chat memory committed"),
            version: state.last_seq,
        })
    }

    /// Records which of the two shown responses the user preferred.
    pub fn choose(&self, query_id: &str, chosen: Choice) -> Result<PreferenceRecord> {
        let guard = self.lock_writer();
        let mut txn = self.begin(&guard);
        let awaiting = txn.state.probes.get(query_id).is_some_and(|p| p.awaits_choice());
        if !awaiting {
            return Err(EngineError::Conflict(format!("no response pair is pending for {query_id}")));
        }
        if txn.state.preferences.contains_key(query_id) {
            return Err(EngineError::Conflict(format!("a choice for {query_id} was already recorded")));
        }
        let record = PreferenceRecord {
            query_id: query_id.to_string(),
            chosen,
            shown_at: txn.state.probe_shown_at[query_id],
            chosen_at: txn.at,
        };
        txn.push(EventPayload::Preference(record.clone()))?;
        self.commit(guard, txn)?;
        Ok(record)
    }

    fn single(&self, payload: EventPayload) -> Result<Arc<SessionState>> {
        let guard = self.lock_writer();
        let mut txn = self.begin(&guard);
        txn.push(payload)?;
        self.commit(guard, txn)
    }

    pub fn move_memory(&self, memory_id: &MemoryId, branch_id: Option<&BranchId>) -> Result<Arc<SessionState>> {
        self.single(EventPayload::Move(MoveRecord::Memory {
            memory_id: memory_id.clone(),
            branch_id: branch_id.cloned(),
        }))
    }

    pub fn move_branch(&self, branch_id: &BranchId, parent_id: Option<&BranchId>) -> Result<Arc<SessionState>> {
        self.single(EventPayload::Move(MoveRecord::Branch {
            branch_id: branch_id.clone(),
            parent_id: parent_id.cloned(),
        }))
    }

    /// Groups memories into a new branch. Without a name the analyzer
    /// proposes one.
    pub fn group(&self, memory_ids: &[MemoryId], name: Option<String>) -> Result<BranchId> {
        if memory_ids.is_empty() {
            return Err(EngineError::Argument("cannot group an empty selection".into()));
        }
        let guard = self.lock_writer();
        let mut txn = self.begin(&guard);
        let name = match non_empty(name) {
            Some(n) => GroupName::new(n, ""),
            None => {
                let mut items = Vec::with_capacity(memory_ids.len());
                for id in memory_ids {
                    let m = txn
                        .state
                        .tree
                        .memory(id)
                        .ok_or_else(|| crate::error::TreeError::Integrity(format!("unknown memory {id}")))?;
                    items.push(m);
                }
                items.sort_by_key(|m| m.sequence);
                let name = self.analyzer.name_group(&items)?;
                txn.push(EventPayload::Analysis(AnalysisRecord {
                    module: Module::GroupNaming,
                    memory_id: None,
                    output: serde_json::to_value(&name).map_err(StoreError::from)?,
                }))?;
                name
            }
        };
        let branch_id = txn.state.tree.next_branch_id();
        txn.push(EventPayload::Group(GroupRecord {
            memory_ids: memory_ids.to_vec(),
            name,
            branch_id: branch_id.clone(),
        }))?;
        self.commit(guard, txn)?;
        Ok(branch_id)
    }

    /// Asks the analyzer to restructure the selection and applies the plan.
    /// A plan that fails validation is an argument error.
    pub fn reorganize(&self, instruction: &str, memory_ids: &[MemoryId], branch_ids: &[BranchId]) -> Result<ReorgOutcome> {
        let guard = self.lock_writer();
        let mut txn = self.begin(&guard);
        let tree = &txn.state.tree;
        let mut memories = Vec::new();
        for id in memory_ids {
            memories.push(tree.memory(id).ok_or_else(|| crate::error::TreeError::Integrity(format!("unknown memory {id}")))?);
        }
        let mut branches = Vec::new();
        for id in branch_ids {
            branches.push(tree.branch(id).ok_or_else(|| crate::error::TreeError::Integrity(format!("unknown branch {id}")))?);
        }
        let plan = match self.analyzer.plan_reorg(instruction, &memories, &branches, tree) {
            Ok(plan) => plan,
            Err(AnalyzerError::Validation(problem)) => return Err(EngineError::Argument(format!("invalid reorganization plan: {problem}"))),
            Err(e) => return Err(e.into()),
        };
        tree.validate_reorg_plan(&plan)
            .map_err(|e| EngineError::Argument(format!("invalid reorganization plan: {e}")))?;
        let created: Vec<BranchId> = (0..plan.groups.len() as u64).map(|i| tree.branch_id_at(i)).collect();
        let instruction = Some(instruction.trim().to_string()).filter(|s| !s.is_empty());
        txn.push(EventPayload::Reorg(ReorgRecord {
            instruction,
            plan: plan.clone(),
            created_branches: created.clone(),
        }))?;
        let state = self.commit(guard, txn)?;
        Ok(ReorgOutcome {
            plan,
            created_branches: created,
            version: state.last_seq,
        })
    }

    pub fn edit_memory(&self, memory_id: &MemoryId, edit: MemoryEdit) -> Result<MemoryItem> {
        let state = self.single(EventPayload::Edit(EditRecord::Memory {
            memory_id: memory_id.clone(),
            edit,
        }))?;
        Ok(state.tree.memory(memory_id).cloned().expect("edited memory exists"))
    }

    pub fn rename_branch(&self, branch_id: &BranchId, name: GroupName) -> Result<Branch> {
        if name.name.trim().is_empty() {
            return Err(EngineError::Argument("branch name must not be empty".into()));
        }
        let state = self.single(EventPayload::Edit(EditRecord::Branch {
            branch_id: branch_id.clone(),
            name,
        }))?;
        Ok(state.tree.branch(branch_id).cloned().expect("renamed branch exists"))
    }

    pub fn set_visibility(&self, memory_id: &MemoryId, hidden: bool, archived: bool) -> Result<MemoryItem> {
        let state = self.single(EventPayload::Visibility(VisibilityRecord {
            memory_id: memory_id.clone(),
            hidden,
            archived,
            reason: VisibilityReason::User,
            decision: None,
        }))?;
        Ok(state.tree.memory(memory_id).cloned().expect("memory exists"))
    }

    pub fn delete_memory(&self, memory_id: &MemoryId) -> Result<Arc<SessionState>> {
        self.single(EventPayload::Delete(DeleteRecord::Memory {
            memory_id: memory_id.clone(),
        }))
    }

    pub fn delete_branch(&self, branch_id: &BranchId) -> Result<Arc<SessionState>> {
        self.single(EventPayload::Delete(DeleteRecord::Branch {
            branch_id: branch_id.clone(),
        }))
    }

    /// Regenerates the focus summary from a snapshot of the tree.
    pub fn refresh_summary(&self) -> Result<SummaryView> {
        let guard = self.lock_writer();
        let mut txn = self.begin(&guard);
        let snapshot = txn
            .state
            .tree
            .tree_snapshot(self.config.snapshot_recent, self.config.placement.strong_link_threshold)?;
        let summary = self.analyzer.summarize_context(&snapshot)?;
        txn.push(EventPayload::Summary(SummaryRecord {
            summary: summary.summary,
            origin: SummaryOrigin::Analyzer,
        }))?;
        let state = self.commit(guard, txn)?;
        Ok(summary_view(&state))
    }

    /// Replaces the focus summary with user-written text.
    pub fn set_summary(&self, text: &str) -> Result<SummaryView> {
        let text = text.trim();
        if text.is_empty() || text.chars().count() > MAX_SUMMARY_CHARS {
            return Err(EngineError::Argument(format!("summary must be 1-{MAX_SUMMARY_CHARS} characters")));
        }
        let state = self.single(EventPayload::Summary(SummaryRecord {
            summary: text.to_string(),
            origin: SummaryOrigin::User,
        }))?;
        Ok(summary_view(&state))
    }

    pub fn summary(&self) -> SummaryView {
        summary_view(&self.state())
    }

    pub fn tree_view(&self) -> TreeView {
        tree_view(&self.id, &self.state())
    }

    pub fn timeline(&self) -> TimelineView {
        let state = self.state();
        let mut memories: Vec<MemoryItem> = state.tree.memories().cloned().collect();
        memories.sort_by(|a, b| a.captured_at.cmp(&b.captured_at).then(a.sequence.cmp(&b.sequence)));
        TimelineView {
            version: state.last_seq,
            memories,
        }
    }

    pub fn funnel(&self) -> ProbeFunnel {
        self.state().funnel
    }

    pub fn canonical_tree(&self) -> String {
        self.state().tree.to_canonical_json()
    }
}

fn summary_view(state: &SessionState) -> SummaryView {
    match &state.summary {
        Some(s) => SummaryView {
            summary: s.summary.clone(),
            origin: Some(s.origin),
            stale: state.summary_seq < state.tree_seq,
            tree_version: state.tree_seq,
        },
        None => SummaryView {
            summary: EMPTY_SUMMARY.to_string(),
            origin: None,
            stale: !state.tree.is_empty(),
            tree_version: state.tree_seq,
        },
    }
}

pub fn tree_view(session_id: &str, state: &SessionState) -> TreeView {
    let tree = &state.tree;
    let branches = tree
        .branches_by_creation()
        .into_iter()
        .map(|b| BranchView {
            branch: b.clone(),
            memory_ids: tree.members(&b.id).into_iter().map(|m| m.id.clone()).collect(),
            child_ids: tree.children(&b.id).into_iter().map(|c| c.id.clone()).collect(),
        })
        .collect();
    let memories: Vec<MemoryItem> = tree.memories_by_sequence().into_iter().cloned().collect();
    let unassigned = memories.iter().filter(|m| m.branch_id.is_none()).map(|m| m.id.clone()).collect();
    TreeView {
        session_id: session_id.to_string(),
        version: state.last_seq,
        tree_version: state.tree_seq,
        branches,
        unassigned,
        memories,
        links: tree.links().cloned().collect(),
        pending_choices: state.pending_choices().into_iter().map(|p| p.query_id.clone()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyzer::MockProvider;
    use std::sync::atomic::{AtomicI64, Ordering};

    fn ticking_clock() -> Clock {
        let t = Arc::new(AtomicI64::new(1_700_000_000_000));
        Arc::new(move || Timestamp(t.fetch_add(60_000, Ordering::SeqCst)))
    }

    fn session() -> (Session, Arc<MockProvider>) {
        let mock = Arc::new(MockProvider::new());
        let s = Session::in_memory("t", AnalyzerAdapter::new(mock.clone()), EngineConfig::default()).with_clock(ticking_clock());
        (s, mock)
    }

    fn snippet(text: &str, memo: Option<&str>) -> SnippetInput {
        SnippetInput {
            text: Some(text.to_string()),
            image: None,
            user_memo: memo.map(str::to_string),
            provenance: Provenance::new("Browser", "Docs", Some("https://example.org")),
        }
    }

    #[test]
    fn snippet_capture_places_and_replays() {
        let (s, _) = session();
        let a = s.capture_snippet(snippet("rust borrow checker lifetimes explained", Some("read later"))).unwrap();
        let m = a.memory.clone().unwrap();
        assert_eq!(m.source, Source::Snippet);
        assert_eq!(m.user_memo.as_deref(), Some("read later"));
        assert_eq!(a.placement.as_ref().unwrap().target, PlacementTarget::NewBranch);
        let b = s.capture_snippet(snippet("rust lifetimes and the borrow checker", None)).unwrap();
        assert_eq!(b.memory.unwrap().branch_id, m.branch_id);
        assert!(s.verify_replay().unwrap());
    }

    #[test]
    fn failed_analysis_writes_nothing() {
        let (s, mock) = session();
        mock.fail(Module::ContentAnalysis, AnalyzerError::Unavailable("offline".into()));
        let err = s.capture_snippet(snippet("anything", None)).unwrap_err();
        assert!(matches!(err, EngineError::Analyzer(AnalyzerError::Unavailable(_))));
        assert!(s.events().unwrap().is_empty());
        assert_eq!(s.state().last_seq, 0);
    }

    #[test]
    fn chat_stores_exchange_and_history() {
        let (s, _) = session();
        let cap = s.capture_snippet(snippet("quarterly budget spreadsheet review", None)).unwrap();
        let id = cap.memory_id().unwrap().clone();
        let out = s
            .chat(ChatInput {
                message: "what about the budget?".into(),
                explicit_memory_ids: vec![id.clone()],
                ..Default::default()
            })
            .unwrap();
        assert_eq!(out.query_id, "q_000001");
        assert_eq!(out.chat_memory.source, Source::Chat);
        assert!(out.context_memory_ids.contains(&id));
        assert_eq!(s.state().history.len(), 2);
        let bad = s.chat(ChatInput {
            message: "x".into(),
            explicit_memory_ids: vec!["mem_999999".into()],
            ..Default::default()
        });
        assert!(matches!(bad, Err(EngineError::Argument(_))));
        assert!(s.verify_replay().unwrap());
    }

    #[test]
    fn probe_on_snippet_free_tree_is_single() {
        let (s, mock) = session();
        let out = s
            .chat(ChatInput {
                message: "hello there".into(),
                probe: true,
                ..Default::default()
            })
            .unwrap();
        let gate = out.gate.unwrap();
        assert!(gate.stage1_equivalent);
        assert!(out.candidates.is_none());
        assert_eq!(mock.calls(Module::Chat), 1);
        assert!(matches!(s.choose(&out.query_id, Choice::A), Err(EngineError::Conflict(_))));
    }

    #[test]
    fn group_and_summary() {
        let (s, _) = session();
        let a = s.capture_snippet(snippet("alpha beta gamma", None)).unwrap();
        let b = s.capture_snippet(snippet("delta epsilon zeta", None)).unwrap();
        let ids = vec![a.memory_id().unwrap().clone(), b.memory_id().unwrap().clone()];
        let branch = s.group(&ids, None).unwrap();
        let view = s.tree_view();
        let bv = view.branches.iter().find(|v| v.branch.id == branch).unwrap();
        assert_eq!(bv.memory_ids.len(), 2);
        assert!(s.summary().stale);
        let sum = s.refresh_summary().unwrap();
        assert!(!sum.stale);
        assert!(sum.summary.chars().count() <= MAX_SUMMARY_CHARS);
        assert!(s.verify_replay().unwrap());
    }
}
