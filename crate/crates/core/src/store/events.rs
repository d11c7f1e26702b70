//! Records of the session log (`contexty-log/1`).

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analyzer::{ChatTurn, Module};
use crate::filter::FilterDecision;
use crate::model::{BranchId, GroupName, MemoryId, MemoryItem, RelevanceJudgment, ReorgPlan, Timestamp};
use crate::probe::{GateDecision, PreferenceRecord};
use crate::retrieval::ReferenceTag;
use crate::tree::{MemoryEdit, PlacementDecision};

pub const LOG_SCHEMA: &str = "contexty-log/1";

/// One line of the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub schema: String,
    pub seq: u64,
    pub at: Timestamp,
    #[serde(flatten)]
    pub payload: EventPayload,
}

impl SessionEvent {
    pub fn new(seq: u64, at: Timestamp, payload: EventPayload) -> Self {
        Self {
            schema: LOG_SCHEMA.to_string(),
            seq,
            at,
            payload,
        }
    }

    pub fn kind(&self) -> &'static str {
        self.payload.kind()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "camelCase")]
pub enum EventPayload {
    Capture(CaptureRecord),
    Analysis(AnalysisRecord),
    Placement(PlacementRecord),
    Evolution(EvolutionRecord),
    Move(MoveRecord),
    Group(GroupRecord),
    Reorg(ReorgRecord),
    Visibility(VisibilityRecord),
    Edit(EditRecord),
    Delete(DeleteRecord),
    Chat(ChatRecord),
    Probe(ProbeRecord),
    Preference(PreferenceRecord),
    Summary(SummaryRecord),
}

impl EventPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            EventPayload::Capture(_) => "capture",
            EventPayload::Analysis(_) => "analysis",
            EventPayload::Placement(_) => "placement",
            EventPayload::Evolution(_) => "evolution",
            EventPayload::Move(_) => "move",
            EventPayload::Group(_) => "group",
            EventPayload::Reorg(_) => "reorg",
            EventPayload::Visibility(_) => "visibility",
            EventPayload::Edit(_) => "edit",
            EventPayload::Delete(_) => "delete",
            EventPayload::Chat(_) => "chat",
            EventPayload::Probe(_) => "probe",
            EventPayload::Preference(_) => "preference",
            EventPayload::Summary(_) => "summary",
        }
    }

    /// Whether applying this payload can alter the memory tree.
    pub fn changes_tree(&self) -> bool {
        !matches!(
            self,
            EventPayload::Capture(_)
                | EventPayload::Analysis(_)
                | EventPayload::Chat(_)
                | EventPayload::Probe(_)
                | EventPayload::Preference(_)
                | EventPayload::Summary(_)
        )
    }
}

/// A capture before analysis. A stage-1 discard has no memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CaptureRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory: Option<MemoryItem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perceptual_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1: Option<FilterDecision>,
}

/// Validated analyzer output, kept so replay never calls a provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AnalysisRecord {
    pub module: Module,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_id: Option<MemoryId>,
    pub output: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PlacementRecord {
    pub memory_id: MemoryId,
    pub judgments: Vec<RelevanceJudgment>,
    /// Name used if the placement creates a branch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_branch: Option<GroupName>,
    pub strong_link_threshold: f64,
    pub decision: PlacementDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvolutionRecord {
    pub source_memory_id: MemoryId,
    pub judgments: Vec<RelevanceJudgment>,
    pub changed: Vec<MemoryId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "camelCase")]
pub enum MoveRecord {
    #[serde(rename_all = "camelCase")]
    Memory {
        memory_id: MemoryId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        branch_id: Option<BranchId>,
    },
    #[serde(rename_all = "camelCase")]
    Branch {
        branch_id: BranchId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        parent_id: Option<BranchId>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GroupRecord {
    pub memory_ids: Vec<MemoryId>,
    pub name: GroupName,
    pub branch_id: BranchId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReorgRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
    pub plan: ReorgPlan,
    pub created_branches: Vec<BranchId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisibilityReason {
    User,
    Autohide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct VisibilityRecord {
    pub memory_id: MemoryId,
    pub hidden: bool,
    pub archived: bool,
    pub reason: VisibilityReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<FilterDecision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "camelCase")]
pub enum EditRecord {
    #[serde(rename_all = "camelCase")]
    Memory { memory_id: MemoryId, edit: MemoryEdit },
    #[serde(rename_all = "camelCase")]
    Branch { branch_id: BranchId, name: GroupName },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "camelCase")]
pub enum DeleteRecord {
    #[serde(rename_all = "camelCase")]
    Memory { memory_id: MemoryId },
    #[serde(rename_all = "camelCase")]
    Branch { branch_id: BranchId },
}

/// One chat turn. The exchange itself is also stored as a chat memory by
/// the capture events that follow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChatRecord {
    pub query_id: String,
    pub message: String,
    pub response: String,
    #[serde(default)]
    pub references: Vec<ReferenceTag>,
    #[serde(default)]
    pub explicit_memory_ids: Vec<MemoryId>,
    #[serde(default)]
    pub explicit_branch_ids: Vec<BranchId>,
    #[serde(default)]
    pub context_memory_ids: Vec<MemoryId>,
}

impl ChatRecord {
    pub fn turns(&self) -> [ChatTurn; 2] {
        use crate::analyzer::ChatRole;
        [
            ChatTurn {
                role: ChatRole::User,
                content: self.message.clone(),
            },
            ChatTurn {
                role: ChatRole::Assistant,
                content: self.response.clone(),
            },
        ]
    }
}

/// Outcome of the preference probe for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProbeRecord {
    pub query_id: String,
    pub decision: GateDecision,
    pub variant_a: Vec<MemoryId>,
    pub variant_b: Vec<MemoryId>,
    pub response_a: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_b: Option<String>,
}

impl ProbeRecord {
    /// True when both responses were shown and a choice is awaited.
    pub fn awaits_choice(&self) -> bool {
        self.decision.shows_pair()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SummaryOrigin {
    Analyzer,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SummaryRecord {
    pub summary: String,
    pub origin: SummaryOrigin,
}
