//! Analyzer adapter: a provider-neutral contract for content analysis,
//! relatedness scoring, group naming, reorganization planning, context
//! summarization and chat.
//!
//! Providers only move JSON. The adapter builds the module inputs, checks
//! every answer against the module's invariants, clamps scores, and asks the
//! provider once to repair an invalid answer before giving up.

mod mock;
mod prompts;
mod remote;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use mock::{MockProvider, MOCK_MIN_SCORE, STOPWORDS};
pub use prompts::Module;
pub use remote::{RemoteConfig, RemoteProvider, DEFAULT_ANALYSIS_MODEL, DEFAULT_BASE_URL, DEFAULT_CHAT_MODEL};

use crate::error::AnalyzerError;
use crate::model::{Branch, BranchId, GroupName, ImageRef, MemoryId, MemoryItem, Provenance, RelevanceJudgment, ReorgPlan};
use crate::tree::{MemoryTree, Snapshot, MAX_REORG_GROUPS};

pub type Result<T> = std::result::Result<T, AnalyzerError>;

pub const MAX_TITLE_CHARS: usize = 24;
pub const MAX_JUDGMENTS: usize = 5;
pub const MAX_SUMMARY_CHARS: usize = 200;
pub const MAX_GROUP_NAME_WORDS: usize = 4;
pub const EMPTY_SUMMARY: &str = "No context yet.";

/// Image handed to the provider alongside the module input.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput {
    pub image_ref: ImageRef,
    pub mime: String,
    pub bytes: Vec<u8>,
}

/// One structured-output call.
#[derive(Debug, Clone)]
pub struct JsonRequest<'a> {
    pub module: Module,
    pub system_prompt: &'a str,
    pub input: Value,
    pub image: Option<&'a ImageInput>,
    /// Set on the repair attempt: what was wrong with the previous answer.
    pub repair: Option<RepairNote>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepairNote {
    pub previous_output: String,
    pub problem: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: ChatRole,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub history: Vec<ChatTurn>,
    /// Rendered context block; may be empty.
    pub context_block: String,
    pub user_message: String,
}

impl ChatRequest {
    /// The user message as sent: context block first, then the query.
    pub fn composed_message(&self) -> String {
        if self.context_block.trim().is_empty() {
            self.user_message.clone()
        } else {
            format!("{}\n{}", self.context_block.trim_end(), self.user_message)
        }
    }
}

/// Transport to a model. Implementations must be usable from several
/// threads at once.
pub trait Provider: Send + Sync {
    fn name(&self) -> &str;

    /// Sends one structured request and returns the parsed JSON answer.
    /// Unparseable output is reported as [`AnalyzerError::Validation`].
    fn complete_json(&self, request: &JsonRequest<'_>) -> Result<Value>;

    fn chat(&self, request: &ChatRequest) -> Result<String>;

    /// Whether calls may take long enough to warrant asynchronous handling.
    fn is_remote(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentAnalysis {
    pub title: String,
    pub content: String,
    pub context: String,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSummary {
    pub summary: String,
}

/// What is being analyzed: text, an image, or both.
#[derive(Debug, Clone, Default)]
pub struct ContentInput {
    pub text: Option<String>,
    pub image: Option<ImageInput>,
    pub provenance: Provenance,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct RawJudgment {
    id: String,
    score: f64,
    #[serde(default)]
    suggest_tags: Option<Vec<String>>,
    #[serde(default)]
    suggest_context: Option<String>,
}

#[derive(Debug, Deserialize)]
struct RawRelated {
    related: Vec<RawJudgment>,
}

fn parse<T: serde::de::DeserializeOwned>(v: &Value) -> std::result::Result<T, String> {
    serde_json::from_value(v.clone()).map_err(|e| format!("output does not match the module schema: {e}"))
}

fn normalize_tags(tags: &[String]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for t in tags {
        let t = t.trim();
        if !t.is_empty() && seen.insert(t.to_lowercase()) {
            out.push(t.to_string());
        }
    }
    out
}

fn validate_content(v: &Value) -> std::result::Result<ContentAnalysis, String> {
    let mut a: ContentAnalysis = parse(v)?;
    a.title = a.title.trim().to_string();
    a.tags = normalize_tags(&a.tags);
    if a.title.is_empty() {
        return Err("title is empty".into());
    }
    let n = a.title.chars().count();
    if n > MAX_TITLE_CHARS {
        return Err(format!("title has {n} characters, the limit is {MAX_TITLE_CHARS}"));
    }
    if !(3..=5).contains(&a.tags.len()) {
        return Err(format!("expected 3-5 distinct tags, got {}", a.tags.len()));
    }
    Ok(a)
}

fn validate_related(v: &Value, allowed: &[MemoryId]) -> std::result::Result<Vec<RelevanceJudgment>, String> {
    let raw: RawRelated = parse(v)?;
    let position: BTreeMap<&str, usize> = allowed.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut best: BTreeMap<usize, RelevanceJudgment> = BTreeMap::new();
    for r in raw.related {
        let Some(&pos) = position.get(r.id.as_str()) else {
            return Err(format!("unknown item id {}", r.id));
        };
        if r.score.is_nan() {
            return Err(format!("score for {} is not a number", r.id));
        }
        let mut j = RelevanceJudgment::new(r.id, r.score.clamp(0.0, 1.0));
        j.suggest_tags = r.suggest_tags.map(|t| normalize_tags(&t)).filter(|t| !t.is_empty());
        j.suggest_context = r.suggest_context.map(|c| c.trim().to_string()).filter(|c| !c.is_empty());
        match best.get(&pos) {
            Some(prev) if prev.score >= j.score => {}
            _ => {
                best.insert(pos, j);
            }
        }
    }
    let mut out: Vec<(usize, RelevanceJudgment)> = best.into_iter().collect();
    out.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    out.truncate(MAX_JUDGMENTS);
    Ok(out.into_iter().map(|(_, j)| j).collect())
}

fn validate_group_name(v: &Value) -> std::result::Result<GroupName, String> {
    let mut g: GroupName = parse(v)?;
    g.name = g.name.split_whitespace().collect::<Vec<_>>().join(" ");
    g.summary = g.summary.trim().to_string();
    if g.name.is_empty() {
        return Err("group name is empty".into());
    }
    let words = g.name.split(' ').count();
    if words > MAX_GROUP_NAME_WORDS {
        return Err(format!("group name has {words} words, the limit is {MAX_GROUP_NAME_WORDS}"));
    }
    Ok(g)
}

fn validate_plan(v: &Value, memories: &BTreeSet<&MemoryId>, branches: &BTreeSet<&BranchId>) -> std::result::Result<ReorgPlan, String> {
    let mut plan: ReorgPlan = parse(v)?;
    if plan.groups.is_empty() || plan.groups.len() > MAX_REORG_GROUPS {
        return Err(format!("plan must have 1-{MAX_REORG_GROUPS} groups, got {}", plan.groups.len()));
    }
    let mut seen_m = BTreeSet::new();
    let mut seen_b = BTreeSet::new();
    for g in &mut plan.groups {
        g.name = g.name.trim().to_string();
        if g.name.is_empty() {
            return Err("group name is empty".into());
        }
        if g.memory_ids.is_empty() && g.branch_ids.is_empty() {
            return Err(format!("group '{}' has no ids", g.name));
        }
        for m in &g.memory_ids {
            if !memories.contains(m) {
                return Err(format!("memory {m} was not among the selected items"));
            }
            if !seen_m.insert(m.clone()) {
                return Err(format!("memory {m} appears in more than one group"));
            }
        }
        for b in &g.branch_ids {
            if !branches.contains(b) {
                return Err(format!("branch {b} was not among the selected items"));
            }
            if !seen_b.insert(b.clone()) {
                return Err(format!("branch {b} appears in more than one group"));
            }
        }
    }
    Ok(plan)
}

fn validate_summary(v: &Value) -> std::result::Result<ContextSummary, String> {
    let mut s: ContextSummary = parse(v)?;
    s.summary = s.summary.trim().to_string();
    if s.summary.is_empty() {
        return Err("summary is empty".into());
    }
    let n = s.summary.chars().count();
    if n > MAX_SUMMARY_CHARS {
        return Err(format!("summary has {n} characters, the limit is {MAX_SUMMARY_CHARS}"));
    }
    Ok(s)
}

fn item_json(m: &MemoryItem) -> Value {
    json!({
        "id": m.id,
        "title": m.title,
        "content": m.summary,
        "context": m.context_sentence,
        "tags": m.tags,
        "type": m.source,
        "appName": m.provenance.app_name,
        "url": m.provenance.url,
    })
}

/// Validating front end over a [`Provider`].
#[derive(Clone)]
pub struct AnalyzerAdapter {
    provider: Arc<dyn Provider>,
}

impl std::fmt::Debug for AnalyzerAdapter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AnalyzerAdapter").field("provider", &self.provider.name()).finish()
    }
}

impl AnalyzerAdapter {
    pub fn new(provider: Arc<dyn Provider>) -> Self {
        Self { provider }
    }

    pub fn mock() -> Self {
        Self::new(Arc::new(MockProvider::new()))
    }

    pub fn provider(&self) -> &Arc<dyn Provider> {
        &self.provider
    }

    pub fn is_remote(&self) -> bool {
        self.provider.is_remote()
    }

    /// Runs one structured call with a single repair attempt.
    fn structured<T>(
        &self,
        module: Module,
        input: Value,
        image: Option<&ImageInput>,
        validate: impl Fn(&Value) -> std::result::Result<T, String>,
    ) -> Result<T> {
        let mut request = JsonRequest {
            module,
            system_prompt: module.system_prompt(),
            input,
            image,
            repair: None,
        };
        let mut last_problem = String::new();
        for attempt in 0..2 {
            let answer = match self.provider.complete_json(&request) {
                Ok(v) => v,
                Err(AnalyzerError::Validation(problem)) => {
                    last_problem = problem.clone();
                    request.repair = Some(RepairNote {
                        previous_output: String::new(),
                        problem,
                    });
                    continue;
                }
                Err(e) => return Err(e),
            };
            match validate(&answer) {
                Ok(v) => return Ok(v),
                Err(problem) => {
                    tracing::warn!(module = module.key(), attempt, %problem, "invalid analyzer output");
                    last_problem = problem.clone();
                    request.repair = Some(RepairNote {
                        previous_output: answer.to_string(),
                        problem,
                    });
                }
            }
        }
        Err(AnalyzerError::Validation(format!("{module}: {last_problem}")))
    }

    pub fn analyze_content(&self, input: &ContentInput) -> Result<ContentAnalysis> {
        let text = input.text.as_deref().map(str::trim).filter(|t| !t.is_empty());
        if text.is_none() && input.image.is_none() {
            return Err(AnalyzerError::Argument("content analysis needs text or an image".into()));
        }
        let payload = json!({
            "text": text,
            "imageRef": input.image.as_ref().map(|i| i.image_ref.as_str()),
            "appName": input.provenance.app_name,
            "windowTitle": input.provenance.window_title,
            "url": input.provenance.url,
        });
        self.structured(Module::ContentAnalysis, payload, input.image.as_ref(), validate_content)
    }

    /// Scores `new_item` against `existing`. Cluster names are looked up in
    /// `tree`. At most [`MAX_JUDGMENTS`] judgments come back, best first.
    pub fn score_related(&self, new_item: &MemoryItem, existing: &[&MemoryItem], tree: &MemoryTree) -> Result<Vec<RelevanceJudgment>> {
        if existing.iter().any(|m| m.id == new_item.id) {
            return Err(AnalyzerError::Argument(format!("{} is among the existing items", new_item.id)));
        }
        if existing.is_empty() {
            return Ok(Vec::new());
        }
        let existing_json: Vec<Value> = existing
            .iter()
            .map(|m| {
                let mut v = item_json(m);
                let cluster = m.branch_id.as_ref().and_then(|b| tree.branch(b));
                v["clusterId"] = json!(m.branch_id);
                v["clusterName"] = json!(cluster.map(|b| b.name.as_str()));
                v
            })
            .collect();
        let payload = json!({ "newItem": item_json(new_item), "existingItems": existing_json });
        let allowed: Vec<MemoryId> = existing.iter().map(|m| m.id.clone()).collect();
        self.structured(Module::PlacementEvolution, payload, None, |v| validate_related(v, &allowed))
    }

    /// Names a group. Items should be given oldest first.
    pub fn name_group(&self, items: &[&MemoryItem]) -> Result<GroupName> {
        if items.is_empty() {
            return Err(AnalyzerError::Argument("cannot name an empty group".into()));
        }
        let items: Vec<Value> = items
            .iter()
            .map(|m| json!({ "title": m.title, "content": m.summary, "tags": m.tags }))
            .collect();
        self.structured(Module::GroupNaming, json!({ "items": items }), None, validate_group_name)
    }

    /// Plans a reorganization of the selected memories and branches. The
    /// plan may only use the selected ids.
    pub fn plan_reorg(&self, instruction: &str, memories: &[&MemoryItem], branches: &[&Branch], tree: &MemoryTree) -> Result<ReorgPlan> {
        if memories.is_empty() && branches.is_empty() {
            return Err(AnalyzerError::Argument("nothing selected to reorganize".into()));
        }
        let mem_json: Vec<Value> = memories
            .iter()
            .map(|m| {
                json!({
                    "id": m.id, "title": m.title, "content": m.summary, "tags": m.tags,
                    "appName": m.provenance.app_name, "url": m.provenance.url, "parentId": m.branch_id,
                })
            })
            .collect();
        let branch_json: Vec<Value> = branches
            .iter()
            .map(|b| {
                let samples: Vec<&str> = tree.members(&b.id).iter().take(3).map(|m| m.title.as_str()).collect();
                json!({
                    "id": b.id, "name": b.name, "summary": b.summary, "tags": b.tags,
                    "parentId": b.parent_id, "sampleMemoryTitles": samples,
                })
            })
            .collect();
        let payload = json!({ "instruction": instruction, "memories": mem_json, "branches": branch_json });
        let mem_ids: BTreeSet<&MemoryId> = memories.iter().map(|m| &m.id).collect();
        let branch_ids: BTreeSet<&BranchId> = branches.iter().map(|b| &b.id).collect();
        self.structured(Module::Reorganization, payload, None, |v| validate_plan(v, &mem_ids, &branch_ids))
    }

    /// Summarizes the snapshot. An empty snapshot yields [`EMPTY_SUMMARY`]
    /// without a provider call.
    pub fn summarize_context(&self, snapshot: &Snapshot) -> Result<ContextSummary> {
        if snapshot.has_no_memories() {
            return Ok(ContextSummary {
                summary: EMPTY_SUMMARY.to_string(),
            });
        }
        let payload = serde_json::to_value(snapshot).map_err(|e| AnalyzerError::Argument(e.to_string()))?;
        self.structured(Module::ContextUnderstanding, payload, None, validate_summary)
    }

    /// Free-form chat; the answer is passed through untouched.
    pub fn chat_complete(&self, history: &[ChatTurn], context_block: &str, user_message: &str) -> Result<String> {
        if user_message.trim().is_empty() {
            return Err(AnalyzerError::Argument("chat message is empty".into()));
        }
        self.provider.chat(&ChatRequest {
            system_prompt: Module::Chat.system_prompt().to_string(),
            history: history.to_vec(),
            context_block: context_block.to_string(),
            user_message: user_message.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Source, Timestamp};

    #[test]
    fn related_output_is_clamped_deduplicated_and_truncated() {
        let allowed: Vec<MemoryId> = (0..8).map(|i| MemoryId::new(format!("m{i}"))).collect();
        let v = json!({"related": [
            {"id": "m0", "score": 1.7},
            {"id": "m1", "score": -0.2},
            {"id": "m2", "score": 0.3},
            {"id": "m2", "score": 0.6},
            {"id": "m3", "score": 0.5},
            {"id": "m4", "score": 0.4},
            {"id": "m5", "score": 0.45},
            {"id": "m6", "score": 0.1}
        ]});
        let out = validate_related(&v, &allowed).unwrap();
        let ids: Vec<&str> = out.iter().map(|j| j.related_id.as_str()).collect();
        assert_eq!(ids, ["m0", "m2", "m3", "m5", "m4"]);
        assert_eq!(out[0].score, 1.0);
        assert_eq!(out[1].score, 0.6);
    }

    #[test]
    fn related_output_rejects_unknown_ids_and_nan() {
        let allowed = vec![MemoryId::from("a")];
        assert!(validate_related(&json!({"related": [{"id": "zz", "score": 0.5}]}), &allowed).is_err());
        assert!(validate_related(&json!({"related": [{"id": "a", "score": f64::NAN}]}), &allowed).is_err());
        assert!(validate_related(&json!({"items": []}), &allowed).is_err());
        assert_eq!(validate_related(&json!({"related": []}), &allowed).unwrap(), vec![]);
    }

    #[test]
    fn content_validation() {
        let ok = json!({"title": "Budget", "content": "c", "context": "x", "tags": ["a", "b", " c "]});
        assert_eq!(validate_content(&ok).unwrap().tags, ["a", "b", "c"]);
        let long = json!({"title": "x".repeat(25), "content": "c", "context": "x", "tags": ["a", "b", "c"]});
        assert!(validate_content(&long).is_err());
        let exact = json!({"title": "é".repeat(24), "content": "c", "context": "x", "tags": ["a", "b", "c"]});
        assert!(validate_content(&exact).is_ok());
        let dup = json!({"title": "t", "content": "c", "context": "x", "tags": ["a", "A", "b"]});
        assert!(validate_content(&dup).is_err());
        let many = json!({"title": "t", "content": "c", "context": "x", "tags": ["a", "b", "c", "d", "e", "f"]});
        assert!(validate_content(&many).is_err());
    }

    #[test]
    fn plan_validation_limits_ids_to_selection() {
        let m1 = MemoryId::from("m1");
        let m2 = MemoryId::from("m2");
        let mems: BTreeSet<&MemoryId> = [&m1, &m2].into_iter().collect();
        let none = BTreeSet::new();
        let good = json!({"groups": [{"name": "A", "memoryIds": ["m1"], "branchIds": []}]});
        assert!(validate_plan(&good, &mems, &none).is_ok());
        let unknown = json!({"groups": [{"name": "A", "memoryIds": ["m9"]}]});
        assert!(validate_plan(&unknown, &mems, &none).is_err());
        let dup = json!({"groups": [{"name": "A", "memoryIds": ["m1"]}, {"name": "B", "memoryIds": ["m1"]}]});
        assert!(validate_plan(&dup, &mems, &none).is_err());
        let empty = json!({"groups": [{"name": "A", "memoryIds": []}]});
        assert!(validate_plan(&empty, &mems, &none).is_err());
        let groups: Vec<Value> = (0..9).map(|i| json!({"name": format!("G{i}"), "memoryIds": []})).collect();
        assert!(validate_plan(&json!({ "groups": groups }), &mems, &none).is_err());
    }

    #[test]
    fn summary_and_group_name_limits() {
        assert!(validate_summary(&json!({"summary": "x".repeat(200)})).is_ok());
        assert!(validate_summary(&json!({"summary": "x".repeat(201)})).is_err());
        assert!(validate_summary(&json!({"summary": "  "})).is_err());
        assert!(validate_group_name(&json!({"name": "Japan Trip Budget", "summary": ""})).is_ok());
        assert!(validate_group_name(&json!({"name": "One Two Three Four Five", "summary": ""})).is_err());
    }

    #[test]
    fn empty_inputs_are_argument_errors() {
        let a = AnalyzerAdapter::mock();
        let err = a.analyze_content(&ContentInput::default()).unwrap_err();
        assert!(matches!(err, AnalyzerError::Argument(_)));
        let tree = MemoryTree::new("s");
        let item = MemoryItem::new("n", Source::Snippet, "t", Timestamp(0));
        assert_eq!(a.score_related(&item, &[], &tree).unwrap(), vec![]);
        assert!(a.score_related(&item, &[&item], &tree).is_err());
        assert!(a.name_group(&[]).is_err());
    }
}
