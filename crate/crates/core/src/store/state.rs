//! Session state rebuilt by folding log events.
//!
//! The live engine applies its own events through [`SessionState::apply`],
//! so a replayed log always lands on the state the engine reported.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::events::*;
use crate::analyzer::{ChatTurn, ContentAnalysis, Module};
use crate::error::{StoreError, TreeError};
use crate::filter::{DedupRing, FilterOutcome, PerceptualHash};
use crate::model::{BranchId, GroupName, MemoryId, MemoryItem, Timestamp};
use crate::probe::{Choice, PreferenceRecord};
use crate::tree::{MemoryTree, PlacementConfig, PlacementDecision};

/// Counts behind the preference-probe funnel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProbeFunnel {
    pub queries: u64,
    pub probed: u64,
    pub stage1_equivalent: u64,
    pub triggered: u64,
    pub chosen_full: u64,
    pub chosen_no_snippet: u64,
}

/// Why an event could not be applied.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ApplyError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("{0}")]
    Invalid(String),
}

impl From<String> for ApplyError {
    fn from(s: String) -> Self {
        ApplyError::Invalid(s)
    }
}

impl From<&str> for ApplyError {
    fn from(s: &str) -> Self {
        ApplyError::Invalid(s.to_string())
    }
}

/// What applying one event produced, for callers that need it.
#[derive(Debug, Clone, PartialEq)]
pub enum Applied {
    Nothing,
    Placed(PlacementDecision),
    Evolved(Vec<MemoryId>),
    Grouped(BranchId),
    Reorganized(Vec<BranchId>),
    Deleted(MemoryItem),
}

#[derive(Debug, Clone)]
pub struct SessionState {
    pub tree: MemoryTree,
    pub ring: DedupRing,
    pub last_seq: u64,
    pub last_at: Option<Timestamp>,
    /// Captures whose placement has not been applied yet.
    pub pending: BTreeMap<MemoryId, MemoryItem>,
    pub history: Vec<ChatTurn>,
    pub chat_count: u64,
    pub probes: BTreeMap<String, ProbeRecord>,
    pub preferences: BTreeMap<String, PreferenceRecord>,
    pub summary: Option<SummaryRecord>,
    /// Seq of the event that set the current summary.
    pub summary_seq: u64,
    /// Seq of the last event that changed the tree.
    pub tree_seq: u64,
    /// When each probe's responses were produced.
    pub probe_shown_at: BTreeMap<String, Timestamp>,
    pub funnel: ProbeFunnel,
    pub discarded_observations: u64,
}

impl SessionState {
    pub fn new(session_id: &str, ring_capacity: usize) -> Self {
        Self {
            tree: MemoryTree::new(session_id),
            ring: DedupRing::new(ring_capacity),
            last_seq: 0,
            last_at: None,
            pending: BTreeMap::new(),
            history: Vec::new(),
            chat_count: 0,
            probes: BTreeMap::new(),
            preferences: BTreeMap::new(),
            summary: None,
            summary_seq: 0,
            tree_seq: 0,
            probe_shown_at: BTreeMap::new(),
            funnel: ProbeFunnel::default(),
            discarded_observations: 0,
        }
    }

    /// Query ids still waiting for a side-by-side choice.
    pub fn pending_choices(&self) -> Vec<&ProbeRecord> {
        self.probes
            .values()
            .filter(|p| p.awaits_choice() && !self.preferences.contains_key(&p.query_id))
            .collect()
    }

    pub fn next_query_id(&self) -> String {
        format!("q_{:06}", self.chat_count + 1)
    }

    /// Folds one event into the state. On error the state may be partially
    /// updated; callers apply to a scratch copy.
    pub fn apply(&mut self, event: &SessionEvent) -> Result<Applied, ApplyError> {
        if event.schema != LOG_SCHEMA {
            return Err(format!("unsupported schema {}", event.schema).into());
        }
        if event.seq != self.last_seq + 1 {
            return Err(format!("expected seq {}, found {}", self.last_seq + 1, event.seq).into());
        }
        let out = self.apply_payload(&event.payload, event.at)?;
        if event.payload.changes_tree() {
            self.tree_seq = event.seq;
        }
        if matches!(event.payload, EventPayload::Summary(_)) {
            self.summary_seq = event.seq;
        }
        if let EventPayload::Probe(p) = &event.payload {
            self.probe_shown_at.insert(p.query_id.clone(), event.at);
        }
        self.last_seq = event.seq;
        self.last_at = Some(event.at);
        Ok(out)
    }

    fn apply_payload(&mut self, payload: &EventPayload, at: Timestamp) -> Result<Applied, ApplyError> {
        match payload {
            EventPayload::Capture(c) => {
                let discarded = c.stage1.as_ref().is_some_and(|d| d.outcome == FilterOutcome::Discard);
                if discarded {
                    if c.memory.is_some() {
                        return Err("a discarded capture cannot carry a memory".into());
                    }
                    self.discarded_observations += 1;
                    return Ok(Applied::Nothing);
                }
                let Some(m) = &c.memory else {
                    return Err("capture has neither a memory nor a discard decision".into());
                };
                if self.tree.memory(&m.id).is_some() {
                    return Err(format!("memory {} already exists", m.id).into());
                }
                if let Some(hex) = &c.perceptual_hash {
                    let h = PerceptualHash::from_hex(hex).map_err(|e| e.to_string())?;
                    self.ring.accept(h, Some(m.id.clone()));
                }
                self.pending.insert(m.id.clone(), m.clone());
                Ok(Applied::Nothing)
            }
            EventPayload::Analysis(a) => {
                if a.module == Module::ContentAnalysis {
                    let id = a.memory_id.as_ref().ok_or("content analysis without a memory id")?;
                    let draft = self.pending.get_mut(id).ok_or_else(|| format!("no pending capture {id}"))?;
                    let c: ContentAnalysis = serde_json::from_value(a.output.clone()).map_err(|e| format!("bad content analysis: {e}"))?;
                    draft.title = c.title;
                    draft.summary = c.content;
                    draft.context_sentence = c.context;
                    draft.tags = c.tags;
                }
                Ok(Applied::Nothing)
            }
            EventPayload::Placement(p) => {
                let draft = self.pending.remove(&p.memory_id).ok_or_else(|| format!("no pending capture {}", p.memory_id))?;
                let config = PlacementConfig {
                    strong_link_threshold: p.strong_link_threshold,
                };
                let name = p.new_branch.clone().unwrap_or_else(|| GroupName::new("", ""));
                let decision = self.tree.insert_memory(draft, &p.judgments, &config, at, |_| name)?;
                if decision != p.decision {
                    return Err(format!("placement of {} diverged from the recorded decision", p.memory_id).into());
                }
                Ok(Applied::Placed(decision))
            }
            EventPayload::Evolution(e) => {
                let changed = self.tree.apply_evolution(&e.judgments)?;
                if changed != e.changed {
                    return Err("evolution changed a different set of memories than recorded".into());
                }
                Ok(Applied::Evolved(changed))
            }
            EventPayload::Move(MoveRecord::Memory { memory_id, branch_id }) => {
                self.tree.move_memory(memory_id, branch_id.as_ref())?;
                Ok(Applied::Nothing)
            }
            EventPayload::Move(MoveRecord::Branch { branch_id, parent_id }) => {
                self.tree.move_branch(branch_id, parent_id.as_ref())?;
                Ok(Applied::Nothing)
            }
            EventPayload::Group(g) => {
                let id = self.tree.group_memories(&g.memory_ids, g.name.clone(), at)?;
                if id != g.branch_id {
                    return Err(format!("group created {id}, log says {}", g.branch_id).into());
                }
                Ok(Applied::Grouped(id))
            }
            EventPayload::Reorg(r) => {
                let created = self.tree.apply_reorg_plan(&r.plan, at)?;
                if created != r.created_branches {
                    return Err("reorganization created different branches than recorded".into());
                }
                Ok(Applied::Reorganized(created))
            }
            EventPayload::Visibility(v) => {
                self.tree.set_visibility(&v.memory_id, v.hidden, v.archived)?;
                Ok(Applied::Nothing)
            }
            EventPayload::Edit(EditRecord::Memory { memory_id, edit }) => {
                self.tree.edit_memory(memory_id, edit)?;
                Ok(Applied::Nothing)
            }
            EventPayload::Edit(EditRecord::Branch { branch_id, name }) => {
                self.tree.rename_branch(branch_id, name.clone())?;
                Ok(Applied::Nothing)
            }
            EventPayload::Delete(DeleteRecord::Memory { memory_id }) => {
                let removed = self.tree.delete_memory(memory_id)?;
                Ok(Applied::Deleted(removed))
            }
            EventPayload::Delete(DeleteRecord::Branch { branch_id }) => {
                self.tree.delete_branch(branch_id)?;
                Ok(Applied::Nothing)
            }
            EventPayload::Chat(c) => {
                let expected = self.next_query_id();
                if c.query_id != expected {
                    return Err(format!("chat query id {} out of order, expected {expected}", c.query_id).into());
                }
                self.chat_count += 1;
                self.funnel.queries += 1;
                self.history.extend(c.turns());
                Ok(Applied::Nothing)
            }
            EventPayload::Probe(p) => {
                if self.probes.contains_key(&p.query_id) {
                    return Err(format!("probe for {} recorded twice", p.query_id).into());
                }
                self.funnel.probed += 1;
                if p.decision.stage1_equivalent {
                    self.funnel.stage1_equivalent += 1;
                }
                if p.awaits_choice() {
                    self.funnel.triggered += 1;
                }
                self.probes.insert(p.query_id.clone(), p.clone());
                Ok(Applied::Nothing)
            }
            EventPayload::Preference(pref) => {
                let probe = self.probes.get(&pref.query_id).ok_or_else(|| format!("no probe for {}", pref.query_id))?;
                if !probe.awaits_choice() {
                    return Err(format!("probe {} did not show a pair", pref.query_id).into());
                }
                if self.preferences.contains_key(&pref.query_id) {
                    return Err(format!("choice for {} already recorded", pref.query_id).into());
                }
                match pref.chosen {
                    Choice::A => self.funnel.chosen_full += 1,
                    Choice::B => self.funnel.chosen_no_snippet += 1,
                }
                self.preferences.insert(pref.query_id.clone(), pref.clone());
                Ok(Applied::Nothing)
            }
            EventPayload::Summary(s) => {
                self.summary = Some(s.clone());
                Ok(Applied::Nothing)
            }
        }
    }
}

/// Rebuilds session state from a gapless log.
pub fn replay(session_id: &str, events: &[SessionEvent], ring_capacity: usize) -> Result<SessionState, StoreError> {
    let mut state = SessionState::new(session_id, ring_capacity);
    for e in events {
        state.apply(e).map_err(|err| StoreError::Replay {
            seq: e.seq,
            reason: err.to_string(),
        })?;
    }
    Ok(state)
}
