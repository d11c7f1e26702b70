//! Chat-context retrieval: composite lexical/tag/recency scoring, merging of
//! explicit references with automatically ranked memories, rendering of the
//! context block, and parsing of citations in responses.
//!
//! The score of memory `m` for query `q` is
//!
//! ```text
//! overlap  = |tokens(q) ∩ tokens(m)| / |tokens(q)|
//! tagBoost = 0.2 if some tag of m occurs (case-insensitively) inside q, else 0
//! recency  = 0.15 * max(0, 1 - age / 30 days)
//! ```
//!
//! plus an optional snippet boost that defaults to zero.

mod format;
mod refs;
mod tokens;

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

pub use format::{format_context, CLUSTER_HEADER, CONTEXT_FORMAT_VERSION, MEMORY_HEADER};
pub use refs::{cluster_reference, memory_reference, parse_references, sanitize_label, ReferenceKind, ReferenceTag};
pub use tokens::{tokenize, tokenize_seq};

use crate::error::RetrievalError;
use crate::model::{BranchId, MemoryId, MemoryItem, Source, Timestamp};
use crate::tree::MemoryTree;

type Result<T> = std::result::Result<T, RetrievalError>;

pub const TAG_BOOST: f64 = 0.2;
pub const RECENCY_WEIGHT: f64 = 0.15;
pub const RECENCY_WINDOW_DAYS: i64 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RetrievalConfig {
    /// Maximum number of memory entries in a bundle.
    pub slot_limit: usize,
    /// Representatives taken from each explicitly referenced branch.
    pub rep_count: usize,
    /// Additive boost for snippet memories. Zero keeps the plain formula.
    pub source_boost: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            slot_limit: 8,
            rep_count: 3,
            source_boost: 0.0,
        }
    }
}

/// A chat query plus the user's explicit references.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Query {
    pub text: String,
    #[serde(default)]
    pub explicit_memory_ids: Vec<MemoryId>,
    #[serde(default)]
    pub explicit_branch_ids: Vec<BranchId>,
    pub now: Timestamp,
}

impl Query {
    pub fn new(text: impl Into<String>, now: Timestamp) -> Self {
        Self {
            text: text.into(),
            now,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScoreComponents {
    pub token_overlap: f64,
    pub tag_boost: f64,
    pub recency: f64,
    #[serde(default)]
    pub source_boost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScoredMemory {
    pub memory_id: MemoryId,
    pub score: f64,
    pub components: ScoreComponents,
}

/// Which memories a retrieval pass may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RetrievalScope {
    /// Drop snippet memories and every memo from scoring and selection.
    pub exclude_snippets: bool,
}

impl RetrievalScope {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn without_snippets() -> Self {
        Self { exclude_snippets: true }
    }

    fn admits(&self, m: &MemoryItem) -> bool {
        !m.archived && !(self.exclude_snippets && m.source == Source::Snippet)
    }
}

/// Text fields that feed `tokens(m)`.
pub fn memory_text_fields(m: &MemoryItem, include_memo: bool) -> Vec<&str> {
    let mut fields = vec![m.title.as_str(), m.summary.as_str(), m.context_sentence.as_str()];
    if include_memo {
        if let Some(memo) = &m.user_memo {
            fields.push(memo);
        }
    }
    if let Some(raw) = &m.raw_text {
        fields.push(raw);
    }
    fields.extend(m.tags.iter().map(String::as_str));
    fields.push(&m.provenance.app_name);
    fields.push(&m.provenance.window_title);
    if let Some(url) = &m.provenance.url {
        fields.push(url);
    }
    fields
}

pub fn memory_tokens(m: &MemoryItem, include_memo: bool) -> BTreeSet<String> {
    tokenize(&memory_text_fields(m, include_memo).join(" "))
}

/// Scorer with the query side precomputed.
#[derive(Debug, Clone)]
pub struct QueryScorer {
    query_tokens: BTreeSet<String>,
    query_lower: String,
    now: Timestamp,
    config: RetrievalConfig,
    include_memo: bool,
}

impl QueryScorer {
    pub fn new(query: &str, now: Timestamp, config: &RetrievalConfig) -> Result<Self> {
        let query_tokens = tokenize(query);
        if query_tokens.is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        Ok(Self {
            query_tokens,
            query_lower: query.to_lowercase(),
            now,
            config: *config,
            include_memo: true,
        })
    }

    fn with_scope(mut self, scope: RetrievalScope) -> Self {
        self.include_memo = !scope.exclude_snippets;
        self
    }

    pub fn score(&self, m: &MemoryItem) -> ScoredMemory {
        let mem_tokens = memory_tokens(m, self.include_memo);
        let shared = self.query_tokens.intersection(&mem_tokens).count();
        let token_overlap = shared as f64 / self.query_tokens.len() as f64;

        let tag_hit = m.tags.iter().any(|t| {
            let t = t.trim().to_lowercase();
            !t.is_empty() && self.query_lower.contains(&t)
        });
        let tag_boost = if tag_hit { TAG_BOOST } else { 0.0 };

        let window = (RECENCY_WINDOW_DAYS * Timestamp::MS_PER_DAY) as f64;
        let age = (self.now.0 - m.captured_at.0).max(0) as f64;
        let recency = RECENCY_WEIGHT * (1.0 - age / window).max(0.0);

        let source_boost = if m.source == Source::Snippet {
            self.config.source_boost
        } else {
            0.0
        };

        ScoredMemory {
            memory_id: m.id.clone(),
            score: token_overlap + tag_boost + recency + source_boost,
            components: ScoreComponents {
                token_overlap,
                tag_boost,
                recency,
                source_boost,
            },
        }
    }
}

/// Scores one memory against a query.
pub fn score_memory(memory: &MemoryItem, query: &str, now: Timestamp, config: &RetrievalConfig) -> Result<ScoredMemory> {
    if memory.archived {
        return Err(RetrievalError::Argument(format!("memory {} is archived", memory.id)));
    }
    Ok(QueryScorer::new(query, now, config)?.score(memory))
}

/// Up to `rep_count` most recent non-archived members of a branch.
pub fn resolve_branch_refs(tree: &MemoryTree, branch: &BranchId, rep_count: usize) -> Result<Vec<MemoryId>> {
    resolve_branch_refs_scoped(tree, branch, rep_count, RetrievalScope::full())
}

fn resolve_branch_refs_scoped(
    tree: &MemoryTree,
    branch: &BranchId,
    rep_count: usize,
    scope: RetrievalScope,
) -> Result<Vec<MemoryId>> {
    if tree.branch(branch).is_none() {
        return Err(RetrievalError::Integrity(format!("unknown branch {branch}")));
    }
    Ok(tree
        .members(branch)
        .into_iter()
        .filter(|m| scope.admits(m))
        .take(rep_count)
        .map(|m| m.id.clone())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "kind", content = "id")]
pub enum EntryTarget {
    Memory(MemoryId),
    Branch(BranchId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ContextEntry {
    pub target: EntryTarget,
    pub mention: bool,
}

/// Ordered context handed to the chat model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ContextBundle {
    pub entries: Vec<ContextEntry>,
    /// Scores of the automatically retrieved entries, in entry order.
    #[serde(default)]
    pub scores: Vec<ScoredMemory>,
    pub rendered_text: String,
}

impl ContextBundle {
    pub fn memory_ids(&self) -> Vec<MemoryId> {
        self.entries
            .iter()
            .filter_map(|e| match &e.target {
                EntryTarget::Memory(id) => Some(id.clone()),
                EntryTarget::Branch(_) => None,
            })
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Ranks every admissible memory: score descending, then newest capture,
/// then id. An empty query ranks by recency alone.
pub fn rank_memories(tree: &MemoryTree, query: &Query, config: &RetrievalConfig, scope: RetrievalScope) -> Vec<ScoredMemory> {
    let candidates = tree.memories().filter(|m| scope.admits(m));
    let mut ranked: Vec<(ScoredMemory, Timestamp)> = match QueryScorer::new(&query.text, query.now, config) {
        Ok(scorer) => {
            let scorer = scorer.with_scope(scope);
            candidates.map(|m| (scorer.score(m), m.captured_at)).collect()
        }
        Err(_) => candidates
            .map(|m| {
                let zero = ScoreComponents {
                    token_overlap: 0.0,
                    tag_boost: 0.0,
                    recency: 0.0,
                    source_boost: 0.0,
                };
                (
                    ScoredMemory {
                        memory_id: m.id.clone(),
                        score: 0.0,
                        components: zero,
                    },
                    m.captured_at,
                )
            })
            .collect(),
    };
    ranked.sort_by(|(a, ta), (b, tb)| {
        b.score
            .total_cmp(&a.score)
            .then(tb.cmp(ta))
            .then(a.memory_id.cmp(&b.memory_id))
    });
    ranked.into_iter().map(|(s, _)| s).collect()
}

/// Builds the context bundle for a query over the whole tree.
pub fn retrieve(tree: &MemoryTree, query: &Query, config: &RetrievalConfig) -> Result<ContextBundle> {
    retrieve_scoped(tree, query, config, RetrievalScope::full())
}

/// Builds a context bundle restricted to `scope`.
///
/// Explicit memories come first, then representatives of explicit branches,
/// all flagged as mentions; ranked memories fill the remaining slots.
/// Branch entries head the bundle and do not consume slots.
pub fn retrieve_scoped(tree: &MemoryTree, query: &Query, config: &RetrievalConfig, scope: RetrievalScope) -> Result<ContextBundle> {
    if config.slot_limit == 0 {
        return Err(RetrievalError::Argument("slot limit must be at least 1".into()));
    }
    for id in &query.explicit_memory_ids {
        if tree.memory(id).is_none() {
            return Err(RetrievalError::Integrity(format!("unknown memory {id}")));
        }
    }
    let mut entries = Vec::new();
    let mut taken: HashSet<MemoryId> = HashSet::new();
    let mut explicit: Vec<MemoryId> = Vec::new();

    for id in &query.explicit_memory_ids {
        if scope.admits(tree.memory(id).expect("checked")) && taken.insert(id.clone()) {
            explicit.push(id.clone());
        }
    }
    let mut seen_branches = HashSet::new();
    for b in &query.explicit_branch_ids {
        let reps = resolve_branch_refs_scoped(tree, b, config.rep_count, scope)?;
        if seen_branches.insert(b.clone()) {
            entries.push(ContextEntry {
                target: EntryTarget::Branch(b.clone()),
                mention: true,
            });
        }
        for id in reps {
            if taken.insert(id.clone()) {
                explicit.push(id);
            }
        }
    }
    explicit.truncate(config.slot_limit);
    let remaining = config.slot_limit - explicit.len();
    entries.extend(explicit.into_iter().map(|id| ContextEntry {
        target: EntryTarget::Memory(id),
        mention: true,
    }));

    let scores: Vec<ScoredMemory> = rank_memories(tree, query, config, scope)
        .into_iter()
        .filter(|s| !taken.contains(&s.memory_id))
        .take(remaining)
        .collect();
    entries.extend(scores.iter().map(|s| ContextEntry {
        target: EntryTarget::Memory(s.memory_id.clone()),
        mention: false,
    }));

    let mut bundle = ContextBundle {
        entries,
        scores,
        rendered_text: String::new(),
    };
    bundle.rendered_text = format_context(&bundle, tree);
    Ok(bundle)
}
