//! The hierarchical memory structure: memories grouped into branches, with
//! scored cross-links between related memories.
//!
//! Every mutation goes through a method on [`MemoryTree`]. Methods validate
//! all referenced ids before touching state, so a failed call leaves the tree
//! unchanged.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::TreeError;
use crate::model::{Branch, BranchId, CrossLink, GroupName, MemoryId, MemoryItem, RelevanceJudgment, ReorgPlan, Source, Timestamp};

/// Schema tag written into every canonical tree document.
pub const TREE_SCHEMA: &str = "contexty/1";

/// Maximum number of groups accepted in a reorganization plan.
pub const MAX_REORG_GROUPS: usize = 8;

type Result<T> = std::result::Result<T, TreeError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PlacementConfig {
    /// Judgments at or above this score create a [`CrossLink`].
    pub strong_link_threshold: f64,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            strong_link_threshold: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "kind", content = "branchId")]
pub enum PlacementTarget {
    Existing(BranchId),
    NewBranch,
}

/// Outcome of automatic placement, with the aggregated per-branch scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PlacementDecision {
    pub target: PlacementTarget,
    pub branch_scores: BTreeMap<BranchId, f64>,
    /// Set when the decision created a fresh branch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_branch: Option<BranchId>,
}

impl PlacementDecision {
    /// Branch the memory ended up in.
    pub fn assigned_branch(&self) -> Option<&BranchId> {
        match &self.target {
            PlacementTarget::Existing(b) => Some(b),
            PlacementTarget::NewBranch => self.created_branch.as_ref(),
        }
    }
}

/// User edit of a memory card. `None` fields are left untouched.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MemoryEdit {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_sentence: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_memo: Option<String>,
}

/// The memory structure of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryTree {
    session_id: String,
    memories: BTreeMap<MemoryId, MemoryItem>,
    branches: BTreeMap<BranchId, Branch>,
    links: BTreeMap<(MemoryId, MemoryId), CrossLink>,
    next_sequence: u64,
    next_branch_ordinal: u64,
}

impl MemoryTree {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            memories: BTreeMap::new(),
            branches: BTreeMap::new(),
            links: BTreeMap::new(),
            next_sequence: 1,
            next_branch_ordinal: 1,
        }
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn memory(&self, id: &MemoryId) -> Option<&MemoryItem> {
        self.memories.get(id)
    }

    pub fn branch(&self, id: &BranchId) -> Option<&Branch> {
        self.branches.get(id)
    }

    /// Memories in id order.
    pub fn memories(&self) -> impl Iterator<Item = &MemoryItem> {
        self.memories.values()
    }

    /// Branches in id order.
    pub fn branches(&self) -> impl Iterator<Item = &Branch> {
        self.branches.values()
    }

    pub fn links(&self) -> impl Iterator<Item = &CrossLink> {
        self.links.values()
    }

    pub fn len(&self) -> usize {
        self.memories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memories.is_empty()
    }

    /// Memories ordered by insertion sequence, oldest first.
    pub fn memories_by_sequence(&self) -> Vec<&MemoryItem> {
        let mut v: Vec<_> = self.memories.values().collect();
        v.sort_by_key(|m| m.sequence);
        v
    }

    /// Branches ordered by creation.
    pub fn branches_by_creation(&self) -> Vec<&Branch> {
        let mut v: Vec<_> = self.branches.values().collect();
        v.sort_by_key(|b| b.ordinal);
        v
    }

    /// Members of a branch, newest first.
    pub fn members(&self, branch: &BranchId) -> Vec<&MemoryItem> {
        let mut v: Vec<_> = self
            .memories
            .values()
            .filter(|m| m.branch_id.as_ref() == Some(branch))
            .collect();
        v.sort_by(|a, b| b.sequence.cmp(&a.sequence));
        v
    }

    pub fn children(&self, branch: &BranchId) -> Vec<&Branch> {
        let mut v: Vec<_> = self
            .branches
            .values()
            .filter(|b| b.parent_id.as_ref() == Some(branch))
            .collect();
        v.sort_by_key(|b| b.ordinal);
        v
    }

    pub fn link(&self, a: &MemoryId, b: &MemoryId) -> Option<&CrossLink> {
        self.links.get(&link_key(a, b))
    }

    /// Id the next inserted memory should carry.
    pub fn next_memory_id(&self) -> MemoryId {
        MemoryId(format!("mem_{:06}", self.next_sequence))
    }

    pub fn next_sequence(&self) -> u64 {
        self.next_sequence
    }

    /// Id the next created branch will carry.
    pub fn next_branch_id(&self) -> BranchId {
        self.branch_id_at(0)
    }

    /// Id of the branch created `offset` creations from now.
    pub fn branch_id_at(&self, offset: u64) -> BranchId {
        BranchId(format!("br_{:04}", self.next_branch_ordinal + offset))
    }

    fn allocate_branch(&mut self, group: GroupName, tags: Vec<String>, parent: Option<BranchId>, now: Timestamp) -> BranchId {
        let ordinal = self.next_branch_ordinal;
        self.next_branch_ordinal += 1;
        let id = BranchId(format!("br_{ordinal:04}"));
        self.branches.insert(
            id.clone(),
            Branch {
                id: id.clone(),
                name: group.name,
                summary: group.summary,
                tags,
                parent_id: parent,
                created_at: now,
                ordinal,
            },
        );
        id
    }

    fn require_memory(&self, id: &MemoryId) -> Result<()> {
        if self.memories.contains_key(id) {
            Ok(())
        } else {
            Err(TreeError::Integrity(format!("unknown memory {id}")))
        }
    }

    fn require_branch(&self, id: &BranchId) -> Result<()> {
        if self.branches.contains_key(id) {
            Ok(())
        } else {
            Err(TreeError::Integrity(format!("unknown branch {id}")))
        }
    }

    fn validate_judgments(&self, judgments: &[RelevanceJudgment]) -> Result<()> {
        for j in judgments {
            self.require_memory(&j.related_id)?;
            if !(0.0..=1.0).contains(&j.score) {
                return Err(TreeError::Argument(format!(
                    "judgment score {} for {} outside [0,1]",
                    j.score, j.related_id
                )));
            }
        }
        Ok(())
    }

    /// Aggregates judgment scores per branch and picks the target.
    ///
    /// Ties on the summed score go to the branch holding the single highest
    /// judgment, then to the most recently created branch.
    pub fn decide_placement(&self, judgments: &[RelevanceJudgment]) -> Result<PlacementDecision> {
        self.validate_judgments(judgments)?;
        let mut sums: BTreeMap<BranchId, f64> = BTreeMap::new();
        let mut peaks: HashMap<BranchId, f64> = HashMap::new();
        for j in judgments {
            let Some(branch) = self.memories[&j.related_id].branch_id.clone() else {
                continue;
            };
            *sums.entry(branch.clone()).or_insert(0.0) += j.score;
            let peak = peaks.entry(branch).or_insert(0.0);
            if j.score > *peak {
                *peak = j.score;
            }
        }

        let best = sums
            .iter()
            .max_by(|(a, sa), (b, sb)| {
                sa.total_cmp(sb)
                    .then(peaks[*a].total_cmp(&peaks[*b]))
                    .then(self.branches[*a].ordinal.cmp(&self.branches[*b].ordinal))
            })
            .map(|(b, s)| (b.clone(), *s));

        let target = match best {
            Some((b, s)) if s > 0.0 => PlacementTarget::Existing(b),
            _ => PlacementTarget::NewBranch,
        };
        Ok(PlacementDecision {
            target,
            branch_scores: sums,
            created_branch: None,
        })
    }

    /// Inserts a freshly analyzed memory and places it.
    ///
    /// `name_new_branch` is only called when no branch scores above zero.
    /// The item's `sequence` and `branch_id` are overwritten.
    pub fn insert_memory(
        &mut self,
        mut item: MemoryItem,
        judgments: &[RelevanceJudgment],
        config: &PlacementConfig,
        now: Timestamp,
        name_new_branch: impl FnOnce(&MemoryItem) -> GroupName,
    ) -> Result<PlacementDecision> {
        if self.memories.contains_key(&item.id) {
            return Err(TreeError::Conflict(format!("memory {} already exists", item.id)));
        }
        if item.source != Source::Snippet && item.user_memo.is_some() {
            return Err(TreeError::Argument(format!("{} memories cannot carry a memo", item.source)));
        }
        let mut decision = self.decide_placement(judgments)?;

        item.sequence = self.next_sequence;
        self.next_sequence += 1;

        let branch = match &decision.target {
            PlacementTarget::Existing(b) => b.clone(),
            PlacementTarget::NewBranch => {
                let mut group = name_new_branch(&item);
                if group.name.trim().is_empty() {
                    group.name = fallback_name(&item);
                }
                let created = self.allocate_branch(group, item.tags.clone(), None, now);
                decision.created_branch = Some(created.clone());
                created
            }
        };
        item.branch_id = Some(branch);

        let new_id = item.id.clone();
        self.memories.insert(new_id.clone(), item);

        for j in judgments {
            if j.score >= config.strong_link_threshold && j.related_id != new_id {
                let key = link_key(&new_id, &j.related_id);
                let score = self.links.get(&key).map_or(j.score, |l| l.score.max(j.score));
                self.links.insert(
                    key.clone(),
                    CrossLink {
                        memory_a: key.0,
                        memory_b: key.1,
                        score,
                    },
                );
            }
        }
        Ok(decision)
    }

    /// Computes the refinements `judgments` would make, without applying
    /// them: the new tags and context for each memory that would change,
    /// ordered by sequence.
    fn plan_evolution(&self, judgments: &[RelevanceJudgment]) -> Result<Vec<(MemoryId, Vec<String>, String)>> {
        for j in judgments {
            self.require_memory(&j.related_id)?;
        }
        let mut work: BTreeMap<MemoryId, (Vec<String>, String, bool)> = BTreeMap::new();
        for j in judgments {
            let m = &self.memories[&j.related_id];
            let (tags, context, touched) = work
                .entry(j.related_id.clone())
                .or_insert_with(|| (m.tags.clone(), m.context_sentence.clone(), false));
            if let Some(suggested) = &j.suggest_tags {
                for tag in suggested {
                    let tag = tag.trim();
                    if !tag.is_empty() && !tags.iter().any(|t| t == tag) {
                        tags.push(tag.to_string());
                        *touched = true;
                    }
                }
            }
            if let Some(ctx) = &j.suggest_context {
                let ctx = ctx.trim();
                if !ctx.is_empty() && context != ctx {
                    *context = ctx.to_string();
                    *touched = true;
                }
            }
        }
        let mut out: Vec<_> = work
            .into_iter()
            .filter(|(_, (_, _, touched))| *touched)
            .map(|(id, (tags, context, _))| (id, tags, context))
            .collect();
        out.sort_by_key(|(id, _, _)| self.memories[id].sequence);
        Ok(out)
    }

    /// Memories [`MemoryTree::apply_evolution`] would change, in sequence
    /// order.
    pub fn preview_evolution(&self, judgments: &[RelevanceJudgment]) -> Result<Vec<MemoryId>> {
        Ok(self.plan_evolution(judgments)?.into_iter().map(|(id, _, _)| id).collect())
    }

    /// Applies suggested tag and context refinements to existing memories.
    ///
    /// Returns the memories that actually changed, ordered by sequence. Only
    /// those get the "updated" badge.
    pub fn apply_evolution(&mut self, judgments: &[RelevanceJudgment]) -> Result<Vec<MemoryId>> {
        let plan = self.plan_evolution(judgments)?;
        let mut changed = Vec::with_capacity(plan.len());
        for (id, tags, context) in plan {
            let m = self.memories.get_mut(&id).expect("validated");
            m.tags = tags;
            m.context_sentence = context;
            m.updated_badge = true;
            changed.push(id);
        }
        Ok(changed)
    }

    /// Moves a memory to another branch, or unassigns it when `target` is
    /// `None`. Source branches are kept even when left empty.
    pub fn move_memory(&mut self, memory: &MemoryId, target: Option<&BranchId>) -> Result<()> {
        self.require_memory(memory)?;
        if let Some(b) = target {
            self.require_branch(b)?;
        }
        self.memories.get_mut(memory).expect("validated").branch_id = target.cloned();
        Ok(())
    }

    /// Reparents a branch. Rejects moves that would create a cycle.
    pub fn move_branch(&mut self, branch: &BranchId, parent: Option<&BranchId>) -> Result<()> {
        self.require_branch(branch)?;
        if let Some(p) = parent {
            self.require_branch(p)?;
            let mut cursor = Some(p.clone());
            while let Some(c) = cursor {
                if &c == branch {
                    return Err(TreeError::Validation(format!(
                        "moving {branch} under {p} would create a cycle"
                    )));
                }
                cursor = self.branches[&c].parent_id.clone();
            }
        }
        self.branches.get_mut(branch).expect("validated").parent_id = parent.cloned();
        Ok(())
    }

    /// Creates a new branch holding the given memories.
    pub fn group_memories(&mut self, ids: &[MemoryId], name: GroupName, now: Timestamp) -> Result<BranchId> {
        if ids.is_empty() {
            return Err(TreeError::Argument("cannot group an empty selection".into()));
        }
        for id in ids {
            self.require_memory(id)?;
        }
        if name.name.trim().is_empty() {
            return Err(TreeError::Argument("group name must not be empty".into()));
        }
        let tags = self.dominant_tags(ids);
        let branch = self.allocate_branch(name, tags, None, now);
        for id in ids {
            self.memories.get_mut(id).expect("validated").branch_id = Some(branch.clone());
        }
        Ok(branch)
    }

    /// Checks a plan against the tree without applying it.
    pub fn validate_reorg_plan(&self, plan: &ReorgPlan) -> Result<()> {
        if plan.groups.is_empty() || plan.groups.len() > MAX_REORG_GROUPS {
            return Err(TreeError::Validation(format!(
                "plan must have 1-{MAX_REORG_GROUPS} groups, got {}",
                plan.groups.len()
            )));
        }
        let mut seen_mem = BTreeSet::new();
        let mut seen_branch = BTreeSet::new();
        for g in &plan.groups {
            if g.name.trim().is_empty() {
                return Err(TreeError::Validation("group name must not be empty".into()));
            }
            if g.memory_ids.is_empty() && g.branch_ids.is_empty() {
                return Err(TreeError::Validation(format!("group '{}' has no ids", g.name)));
            }
            for m in &g.memory_ids {
                if !seen_mem.insert(m) {
                    return Err(TreeError::Validation(format!("memory {m} appears in more than one group")));
                }
            }
            for b in &g.branch_ids {
                if !seen_branch.insert(b) {
                    return Err(TreeError::Validation(format!("branch {b} appears in more than one group")));
                }
            }
        }
        for m in seen_mem {
            self.require_memory(m)?;
        }
        for b in seen_branch {
            self.require_branch(b)?;
        }
        Ok(())
    }

    /// Applies a validated reorganization plan; returns the new branches in
    /// plan order.
    pub fn apply_reorg_plan(&mut self, plan: &ReorgPlan, now: Timestamp) -> Result<Vec<BranchId>> {
        self.validate_reorg_plan(plan)?;
        let mut created = Vec::with_capacity(plan.groups.len());
        for g in &plan.groups {
            let tags = self.dominant_tags(&g.memory_ids);
            let branch = self.allocate_branch(GroupName::new(g.name.trim(), ""), tags, None, now);
            for m in &g.memory_ids {
                self.memories.get_mut(m).expect("validated").branch_id = Some(branch.clone());
            }
            for b in &g.branch_ids {
                self.branches.get_mut(b).expect("validated").parent_id = Some(branch.clone());
            }
            created.push(branch);
        }
        Ok(created)
    }

    pub fn set_visibility(&mut self, memory: &MemoryId, hidden: bool, archived: bool) -> Result<()> {
        self.require_memory(memory)?;
        let m = self.memories.get_mut(memory).expect("validated");
        m.hidden = hidden;
        m.archived = archived;
        Ok(())
    }

    pub fn edit_memory(&mut self, memory: &MemoryId, edit: &MemoryEdit) -> Result<()> {
        self.require_memory(memory)?;
        let m = self.memories.get_mut(memory).expect("validated");
        if edit.user_memo.is_some() && m.source != Source::Snippet {
            return Err(TreeError::Argument(format!("{} memories cannot carry a memo", m.source)));
        }
        if let Some(t) = &edit.title {
            m.title = t.clone();
        }
        if let Some(s) = &edit.summary {
            m.summary = s.clone();
        }
        if let Some(c) = &edit.context_sentence {
            m.context_sentence = c.clone();
        }
        if let Some(tags) = &edit.tags {
            m.tags = tags.clone();
        }
        if let Some(memo) = &edit.user_memo {
            m.user_memo = Some(memo.clone());
        }
        Ok(())
    }

    pub fn rename_branch(&mut self, branch: &BranchId, name: GroupName) -> Result<()> {
        self.require_branch(branch)?;
        if name.name.trim().is_empty() {
            return Err(TreeError::Argument("branch name must not be empty".into()));
        }
        let b = self.branches.get_mut(branch).expect("validated");
        b.name = name.name;
        b.summary = name.summary;
        Ok(())
    }

    /// Removes a memory and every link touching it.
    pub fn delete_memory(&mut self, memory: &MemoryId) -> Result<MemoryItem> {
        self.require_memory(memory)?;
        self.links.retain(|(a, b), _| a != memory && b != memory);
        Ok(self.memories.remove(memory).expect("validated"))
    }

    /// Removes a branch. Its memories become unassigned and its children are
    /// lifted to the deleted branch's parent.
    pub fn delete_branch(&mut self, branch: &BranchId) -> Result<()> {
        self.require_branch(branch)?;
        let removed = self.branches.remove(branch).expect("validated");
        for m in self.memories.values_mut() {
            if m.branch_id.as_ref() == Some(branch) {
                m.branch_id = None;
            }
        }
        for b in self.branches.values_mut() {
            if b.parent_id.as_ref() == Some(branch) {
                b.parent_id = removed.parent_id.clone();
            }
        }
        Ok(())
    }

    fn dominant_tags(&self, ids: &[MemoryId]) -> Vec<String> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for id in ids {
            if let Some(m) = self.memories.get(id) {
                for t in &m.tags {
                    *counts.entry(t.as_str()).or_default() += 1;
                }
            }
        }
        let mut v: Vec<_> = counts.into_iter().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        v.into_iter().take(5).map(|(t, _)| t.to_string()).collect()
    }

    /// Compact view of the tree for context summarization.
    ///
    /// Hidden and archived memories are left out. Branches appear in creation
    /// order, memories newest first.
    pub fn tree_snapshot(&self, recent_limit: usize, strong_link_threshold: f64) -> Result<Snapshot> {
        if recent_limit == 0 {
            return Err(TreeError::Argument("recent limit must be at least 1".into()));
        }
        let visible = |m: &&MemoryItem| !m.hidden && !m.archived;
        let clusters = self
            .branches_by_creation()
            .into_iter()
            .map(|b| SnapshotCluster {
                id: b.id.clone(),
                name: b.name.clone(),
                summary: b.summary.clone(),
                tags: b.tags.clone(),
                parent_id: b.parent_id.clone(),
                memories: self
                    .members(&b.id)
                    .into_iter()
                    .filter(visible)
                    .take(recent_limit)
                    .map(SnapshotMemory::from)
                    .collect(),
            })
            .collect();
        let mut unclustered: Vec<_> = self
            .memories
            .values()
            .filter(|m| m.branch_id.is_none())
            .filter(visible)
            .collect();
        unclustered.sort_by(|a, b| b.sequence.cmp(&a.sequence));
        let unclustered = unclustered
            .into_iter()
            .take(recent_limit)
            .map(SnapshotMemory::from)
            .collect();

        let strong_links = self
            .links
            .values()
            .filter(|l| l.score >= strong_link_threshold)
            .filter_map(|l| {
                let a = self.memories.get(&l.memory_a)?;
                let b = self.memories.get(&l.memory_b)?;
                (!a.archived && !b.archived).then(|| StrongLink {
                    from: a.title.clone(),
                    to: b.title.clone(),
                    score: l.score,
                })
            })
            .collect();

        Ok(Snapshot {
            clusters,
            unclustered,
            strong_links,
        })
    }

    /// Canonical UTF-8 serialization used for persistence and replay checks.
    pub fn to_canonical_json(&self) -> String {
        let doc = CanonicalTree {
            schema: TREE_SCHEMA.to_string(),
            session_id: self.session_id.clone(),
            next_sequence: self.next_sequence,
            next_branch_ordinal: self.next_branch_ordinal,
            memories: self.memories.values().cloned().collect(),
            branches: self.branches.values().cloned().collect(),
            links: self.links.values().cloned().collect(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("tree serializes");
        s.push('\n');
        s
    }

    /// Parses a canonical document and rechecks referential integrity.
    pub fn from_canonical_json(text: &str) -> Result<Self> {
        let doc: CanonicalTree =
            serde_json::from_str(text).map_err(|e| TreeError::Validation(format!("bad tree document: {e}")))?;
        if doc.schema != TREE_SCHEMA {
            return Err(TreeError::Validation(format!("unsupported schema {}", doc.schema)));
        }
        let tree = MemoryTree {
            session_id: doc.session_id,
            memories: doc.memories.into_iter().map(|m| (m.id.clone(), m)).collect(),
            branches: doc.branches.into_iter().map(|b| (b.id.clone(), b)).collect(),
            links: doc
                .links
                .into_iter()
                .map(|l| ((l.memory_a.clone(), l.memory_b.clone()), l))
                .collect(),
            next_sequence: doc.next_sequence,
            next_branch_ordinal: doc.next_branch_ordinal,
        };
        tree.check_integrity()?;
        Ok(tree)
    }

    /// Verifies every cross-reference in the tree.
    pub fn check_integrity(&self) -> Result<()> {
        for m in self.memories.values() {
            if let Some(b) = &m.branch_id {
                self.require_branch(b)?;
            }
        }
        for b in self.branches.values() {
            let mut cursor = b.parent_id.clone();
            let mut steps = 0;
            while let Some(p) = cursor {
                self.require_branch(&p)?;
                steps += 1;
                if steps > self.branches.len() {
                    return Err(TreeError::Integrity(format!("branch {} is part of a cycle", b.id)));
                }
                cursor = self.branches[&p].parent_id.clone();
            }
        }
        for l in self.links.values() {
            self.require_memory(&l.memory_a)?;
            self.require_memory(&l.memory_b)?;
            if l.memory_a == l.memory_b {
                return Err(TreeError::Integrity(format!("self link on {}", l.memory_a)));
            }
        }
        Ok(())
    }
}

fn fallback_name(item: &MemoryItem) -> String {
    if item.title.trim().is_empty() {
        "Untitled".to_string()
    } else {
        item.title.trim().to_string()
    }
}

fn link_key(a: &MemoryId, b: &MemoryId) -> (MemoryId, MemoryId) {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct CanonicalTree {
    schema: String,
    session_id: String,
    next_sequence: u64,
    next_branch_ordinal: u64,
    memories: Vec<MemoryItem>,
    branches: Vec<Branch>,
    links: Vec<CrossLink>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SnapshotMemory {
    pub id: MemoryId,
    pub title: String,
    pub content: String,
    pub context: String,
    pub source: Source,
    pub sequence_number: u64,
}

impl From<&MemoryItem> for SnapshotMemory {
    fn from(m: &MemoryItem) -> Self {
        Self {
            id: m.id.clone(),
            title: m.title.clone(),
            content: m.summary.clone(),
            context: m.context_sentence.clone(),
            source: m.source,
            sequence_number: m.sequence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SnapshotCluster {
    pub id: BranchId,
    pub name: String,
    pub summary: String,
    pub tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<BranchId>,
    pub memories: Vec<SnapshotMemory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrongLink {
    pub from: String,
    pub to: String,
    pub score: f64,
}

/// Serialized tree view handed to context summarization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Snapshot {
    pub clusters: Vec<SnapshotCluster>,
    pub unclustered: Vec<SnapshotMemory>,
    pub strong_links: Vec<StrongLink>,
}

impl Snapshot {
    /// True when no memory is visible anywhere in the snapshot.
    pub fn has_no_memories(&self) -> bool {
        self.unclustered.is_empty() && self.clusters.iter().all(|c| c.memories.is_empty())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ReorgGroup, Timestamp};

    fn t(ms: i64) -> Timestamp {
        Timestamp(ms)
    }

    fn item(id: &str) -> MemoryItem {
        MemoryItem::new(id, Source::Snippet, format!("Title {id}"), t(0))
    }

    fn namer(name: &'static str) -> impl FnOnce(&MemoryItem) -> GroupName {
        move |_| GroupName::new(name, "")
    }

    /// Tree with b1 = {m1, m2}, b2 = {m3}.
    fn seeded() -> MemoryTree {
        let mut tree = MemoryTree::new("s");
        let cfg = PlacementConfig::default();
        tree.insert_memory(item("m1"), &[], &cfg, t(1), namer("One")).unwrap();
        tree.insert_memory(item("m2"), &[RelevanceJudgment::new("m1", 0.5)], &cfg, t(2), namer("x"))
            .unwrap();
        tree.insert_memory(item("m3"), &[], &cfg, t(3), namer("Two")).unwrap();
        tree
    }

    #[test]
    fn placement_sums_scores_per_branch() {
        let mut tree = seeded();
        let b1 = tree.memory(&"m1".into()).unwrap().branch_id.clone().unwrap();
        let b2 = tree.memory(&"m3".into()).unwrap().branch_id.clone().unwrap();
        let js = vec![
            RelevanceJudgment::new("m1", 0.5),
            RelevanceJudgment::new("m2", 0.4),
            RelevanceJudgment::new("m3", 0.3),
        ];
        let d = tree
            .insert_memory(item("m4"), &js, &PlacementConfig::default(), t(4), namer("x"))
            .unwrap();
        assert_eq!(d.target, PlacementTarget::Existing(b1.clone()));
        assert!((d.branch_scores[&b1] - 0.9).abs() < 1e-12);
        assert!((d.branch_scores[&b2] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn no_judgments_creates_branch_named_by_callback() {
        let mut tree = MemoryTree::new("s");
        let d = tree
            .insert_memory(item("m1"), &[], &PlacementConfig::default(), t(1), namer("Fresh Branch"))
            .unwrap();
        assert_eq!(d.target, PlacementTarget::NewBranch);
        let b = d.created_branch.unwrap();
        assert_eq!(tree.branch(&b).unwrap().name, "Fresh Branch");
    }

    #[test]
    fn empty_callback_name_falls_back_to_title() {
        let mut tree = MemoryTree::new("s");
        let d = tree
            .insert_memory(item("m1"), &[], &PlacementConfig::default(), t(1), namer(""))
            .unwrap();
        assert_eq!(tree.branch(&d.created_branch.unwrap()).unwrap().name, "Title m1");
    }

    #[test]
    fn zero_scores_create_new_branch() {
        let mut tree = seeded();
        let d = tree
            .insert_memory(
                item("m4"),
                &[RelevanceJudgment::new("m1", 0.0)],
                &PlacementConfig::default(),
                t(4),
                namer("New"),
            )
            .unwrap();
        assert_eq!(d.target, PlacementTarget::NewBranch);
    }

    #[test]
    fn tie_prefers_single_highest_judgment_then_newest_branch() {
        let tree = seeded();
        let b1 = tree.memory(&"m1".into()).unwrap().branch_id.clone().unwrap();
        let b2 = tree.memory(&"m3".into()).unwrap().branch_id.clone().unwrap();
        // b1: 0.25 + 0.25, b2: 0.5 -> same sum, b2 holds the larger single score.
        let d = tree
            .decide_placement(&[
                RelevanceJudgment::new("m1", 0.25),
                RelevanceJudgment::new("m2", 0.25),
                RelevanceJudgment::new("m3", 0.5),
            ])
            .unwrap();
        assert_eq!(d.target, PlacementTarget::Existing(b2.clone()));
        // Full tie -> newest branch (b2).
        let d = tree
            .decide_placement(&[RelevanceJudgment::new("m1", 0.4), RelevanceJudgment::new("m3", 0.4)])
            .unwrap();
        assert_eq!(d.target, PlacementTarget::Existing(b2));
        let _ = b1;
    }

    #[test]
    fn unknown_judgment_and_duplicate_item_are_rejected() {
        let mut tree = seeded();
        let before = tree.clone();
        let err = tree
            .insert_memory(
                item("m9"),
                &[RelevanceJudgment::new("nope", 0.3)],
                &PlacementConfig::default(),
                t(9),
                namer("x"),
            )
            .unwrap_err();
        assert!(matches!(err, TreeError::Integrity(_)));
        let err = tree
            .insert_memory(item("m1"), &[], &PlacementConfig::default(), t(9), namer("x"))
            .unwrap_err();
        assert!(matches!(err, TreeError::Conflict(_)));
        assert_eq!(tree, before);
    }

    #[test]
    fn strong_judgments_create_links() {
        let mut tree = seeded();
        tree.insert_memory(
            item("m4"),
            &[RelevanceJudgment::new("m1", 0.8), RelevanceJudgment::new("m3", 0.79)],
            &PlacementConfig::default(),
            t(4),
            namer("x"),
        )
        .unwrap();
        assert!(tree.link(&"m4".into(), &"m1".into()).is_some());
        assert!(tree.link(&"m1".into(), &"m4".into()).is_some());
        assert!(tree.link(&"m4".into(), &"m3".into()).is_none());
    }

    #[test]
    fn observation_memo_is_rejected() {
        let mut tree = MemoryTree::new("s");
        let obs = MemoryItem::new("o1", Source::Observation, "Obs", t(0)).with_memo("nope");
        assert!(tree
            .insert_memory(obs, &[], &PlacementConfig::default(), t(0), namer("x"))
            .is_err());
    }

    #[test]
    fn evolution_unions_tags_and_badges_only_real_changes() {
        let mut tree = MemoryTree::new("s");
        let m = item("m1").with_tags(["research"]);
        tree.insert_memory(m, &[], &PlacementConfig::default(), t(1), namer("R"))
            .unwrap();

        let changed = tree
            .apply_evolution(&[RelevanceJudgment::new("m1", 0.9).with_tags(["research"])])
            .unwrap();
        assert!(changed.is_empty());
        assert!(!tree.memory(&"m1".into()).unwrap().updated_badge);

        let changed = tree
            .apply_evolution(&[RelevanceJudgment::new("m1", 0.9).with_tags(["arxiv"])])
            .unwrap();
        assert_eq!(changed, vec![MemoryId::from("m1")]);
        let m = tree.memory(&"m1".into()).unwrap();
        assert_eq!(m.tags, vec!["research", "arxiv"]);
        assert!(m.updated_badge);
    }

    #[test]
    fn evolution_replaces_context_and_orders_by_sequence() {
        let mut tree = seeded();
        let changed = tree
            .apply_evolution(&[
                RelevanceJudgment::new("m3", 0.9).with_context("new ctx"),
                RelevanceJudgment::new("m1", 0.9).with_context("other ctx"),
            ])
            .unwrap();
        assert_eq!(changed, vec![MemoryId::from("m1"), MemoryId::from("m3")]);
        assert_eq!(tree.memory(&"m3".into()).unwrap().context_sentence, "new ctx");
        assert!(tree.apply_evolution(&[RelevanceJudgment::new("zz", 0.1)]).is_err());
    }

    #[test]
    fn move_keeps_empty_source_branch() {
        let mut tree = seeded();
        let b2 = tree.memory(&"m3".into()).unwrap().branch_id.clone().unwrap();
        let b1 = tree.memory(&"m1".into()).unwrap().branch_id.clone().unwrap();
        tree.move_memory(&"m3".into(), Some(&b1)).unwrap();
        assert_eq!(tree.memory(&"m3".into()).unwrap().branch_id, Some(b1.clone()));
        assert!(tree.branch(&b2).is_some());
        assert!(tree.members(&b2).is_empty());

        let before = tree.clone();
        tree.move_memory(&"m3".into(), Some(&b1)).unwrap();
        assert_eq!(tree, before);

        tree.move_memory(&"m3".into(), None).unwrap();
        assert_eq!(tree.memory(&"m3".into()).unwrap().branch_id, None);
        assert!(tree.move_memory(&"m3".into(), Some(&"br_9999".into())).is_err());
        assert!(tree.move_memory(&"zz".into(), None).is_err());
    }

    #[test]
    fn move_branch_rejects_cycles() {
        let mut tree = seeded();
        let b1 = tree.memory(&"m1".into()).unwrap().branch_id.clone().unwrap();
        let b2 = tree.memory(&"m3".into()).unwrap().branch_id.clone().unwrap();
        tree.move_branch(&b2, Some(&b1)).unwrap();
        assert!(matches!(tree.move_branch(&b1, Some(&b2)), Err(TreeError::Validation(_))));
        assert!(tree.move_branch(&b1, Some(&b1)).is_err());
        assert_eq!(tree.children(&b1).len(), 1);
    }

    #[test]
    fn group_reassigns_members() {
        let mut tree = seeded();
        let b = tree
            .group_memories(&["m1".into(), "m3".into()], GroupName::new("Travel Planning", "s"), t(10))
            .unwrap();
        assert_eq!(tree.branch(&b).unwrap().name, "Travel Planning");
        assert_eq!(tree.members(&b).len(), 2);
        assert!(matches!(
            tree.group_memories(&[], GroupName::new("X", ""), t(10)),
            Err(TreeError::Argument(_))
        ));
    }

    #[test]
    fn reorg_validation() {
        let mut tree = seeded();
        let b1 = tree.memory(&"m1".into()).unwrap().branch_id.clone().unwrap();
        let dup = ReorgPlan {
            groups: vec![
                ReorgGroup { name: "A".into(), memory_ids: vec!["m1".into()], branch_ids: vec![] },
                ReorgGroup { name: "B".into(), memory_ids: vec!["m1".into()], branch_ids: vec![] },
            ],
        };
        assert!(matches!(tree.apply_reorg_plan(&dup, t(5)), Err(TreeError::Validation(_))));
        let unknown = ReorgPlan {
            groups: vec![ReorgGroup { name: "A".into(), memory_ids: vec!["zz".into()], branch_ids: vec![] }],
        };
        assert!(matches!(tree.apply_reorg_plan(&unknown, t(5)), Err(TreeError::Integrity(_))));
        assert!(matches!(
            tree.apply_reorg_plan(&ReorgPlan { groups: vec![] }, t(5)),
            Err(TreeError::Validation(_))
        ));
        let nine = ReorgPlan {
            groups: (0..9)
                .map(|i| ReorgGroup { name: format!("G{i}"), memory_ids: vec![], branch_ids: vec![b1.clone()] })
                .collect(),
        };
        assert!(matches!(tree.apply_reorg_plan(&nine, t(5)), Err(TreeError::Validation(_))));
        let empty_group = ReorgPlan {
            groups: vec![ReorgGroup { name: "A".into(), memory_ids: vec![], branch_ids: vec![] }],
        };
        assert!(tree.apply_reorg_plan(&empty_group, t(5)).is_err());

        let ok = ReorgPlan {
            groups: vec![ReorgGroup { name: "Work".into(), memory_ids: vec!["m3".into()], branch_ids: vec![b1.clone()] }],
        };
        let created = tree.apply_reorg_plan(&ok, t(5)).unwrap();
        assert_eq!(created.len(), 1);
        assert_eq!(tree.memory(&"m3".into()).unwrap().branch_id, Some(created[0].clone()));
        assert_eq!(tree.branch(&b1).unwrap().parent_id, Some(created[0].clone()));
    }

    #[test]
    fn visibility_flags() {
        let mut tree = seeded();
        tree.set_visibility(&"m1".into(), true, false).unwrap();
        let snap = tree.tree_snapshot(10, 0.8).unwrap();
        assert!(snap.clusters.iter().flat_map(|c| &c.memories).all(|m| m.id.as_str() != "m1"));
        tree.set_visibility(&"m1".into(), false, false).unwrap();
        let snap = tree.tree_snapshot(10, 0.8).unwrap();
        assert!(snap.clusters.iter().flat_map(|c| &c.memories).any(|m| m.id.as_str() == "m1"));
        assert!(tree.set_visibility(&"zz".into(), true, true).is_err());
    }

    #[test]
    fn snapshot_orders_and_limits() {
        assert!(MemoryTree::new("s").tree_snapshot(3, 0.8).unwrap().has_no_memories());
        assert!(MemoryTree::new("s").tree_snapshot(0, 0.8).is_err());
        let tree = seeded();
        let snap = tree.tree_snapshot(5, 0.8).unwrap();
        assert_eq!(snap.clusters.len(), 2);
        let first: Vec<_> = snap.clusters[0].memories.iter().map(|m| m.id.as_str()).collect();
        assert_eq!(first, vec!["m2", "m1"]);
        let snap = tree.tree_snapshot(1, 0.8).unwrap();
        assert_eq!(snap.clusters[0].memories.len(), 1);
    }

    #[test]
    fn delete_branch_lifts_children_and_unassigns() {
        let mut tree = seeded();
        let b1 = tree.memory(&"m1".into()).unwrap().branch_id.clone().unwrap();
        let b2 = tree.memory(&"m3".into()).unwrap().branch_id.clone().unwrap();
        tree.move_branch(&b2, Some(&b1)).unwrap();
        tree.delete_branch(&b1).unwrap();
        assert_eq!(tree.branch(&b2).unwrap().parent_id, None);
        assert_eq!(tree.memory(&"m1".into()).unwrap().branch_id, None);
        tree.check_integrity().unwrap();
    }

    #[test]
    fn canonical_json_round_trips() {
        let mut tree = seeded();
        tree.insert_memory(
            item("m4"),
            &[RelevanceJudgment::new("m1", 0.95)],
            &PlacementConfig::default(),
            t(4),
            namer("x"),
        )
        .unwrap();
        let text = tree.to_canonical_json();
        assert!(text.contains("\"schema\": \"contexty/1\""));
        let back = MemoryTree::from_canonical_json(&text).unwrap();
        assert_eq!(back, tree);
        assert_eq!(back.to_canonical_json(), text);
    }
}
