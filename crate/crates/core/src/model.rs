//! Domain types shared by every module: memories, branches, links and the
//! analyzer's judgments.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Milliseconds since the Unix epoch, UTC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub const MS_PER_DAY: i64 = 86_400_000;

    pub fn millis(self) -> i64 {
        self.0
    }

    pub fn plus_days(self, days: f64) -> Timestamp {
        Timestamp(self.0 + (days * Self::MS_PER_DAY as f64).round() as i64)
    }
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
    };
}

string_id!(
    /// Identifier of a [`MemoryItem`].
    MemoryId
);
string_id!(
    /// Identifier of a [`Branch`].
    BranchId
);
string_id!(
    /// Content address of a stored image blob.
    ImageRef
);

/// Capture channel a memory came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Snippet,
    Observation,
    Chat,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Snippet => "snippet",
            Source::Observation => "observation",
            Source::Chat => "chat",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where a capture happened.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Provenance {
    #[serde(default)]
    pub app_name: String,
    #[serde(default)]
    pub window_title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
}

impl Provenance {
    pub fn new(app_name: impl Into<String>, window_title: impl Into<String>, url: Option<&str>) -> Self {
        Self {
            app_name: app_name.into(),
            window_title: window_title.into(),
            url: url.map(str::to_string),
        }
    }
}

/// One captured unit of user context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MemoryItem {
    pub id: MemoryId,
    pub source: Source,
    pub title: String,
    /// Detailed description produced by content analysis.
    pub summary: String,
    pub context_sentence: String,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<ImageRef>,
    /// In-situ memo; only snippets carry one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_memo: Option<String>,
    pub provenance: Provenance,
    pub captured_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_id: Option<BranchId>,
    #[serde(default)]
    pub hidden: bool,
    #[serde(default)]
    pub archived: bool,
    #[serde(default)]
    pub updated_badge: bool,
    /// Hex-encoded 256-bit perceptual hash (observations only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perceptual_hash: Option<String>,
    /// Assigned by the tree on insertion.
    #[serde(default)]
    pub sequence: u64,
}

impl MemoryItem {
    /// A bare item with empty analysis fields, useful for tests and for
    /// building an item before analysis results arrive.
    pub fn new(id: impl Into<MemoryId>, source: Source, title: impl Into<String>, captured_at: Timestamp) -> Self {
        Self {
            id: id.into(),
            source,
            title: title.into(),
            summary: String::new(),
            context_sentence: String::new(),
            tags: Vec::new(),
            raw_text: None,
            image_ref: None,
            user_memo: None,
            provenance: Provenance::default(),
            captured_at,
            branch_id: None,
            hidden: false,
            archived: false,
            updated_badge: false,
            perceptual_hash: None,
            sequence: 0,
        }
    }

    pub fn with_tags<I, S>(mut self, tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.tags = tags.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_summary(mut self, summary: impl Into<String>) -> Self {
        self.summary = summary.into();
        self
    }

    pub fn with_context(mut self, context: impl Into<String>) -> Self {
        self.context_sentence = context.into();
        self
    }

    pub fn with_memo(mut self, memo: impl Into<String>) -> Self {
        self.user_memo = Some(memo.into());
        self
    }

    pub fn with_raw_text(mut self, raw: impl Into<String>) -> Self {
        self.raw_text = Some(raw.into());
        self
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }
}

impl From<String> for MemoryId {
    fn from(s: String) -> Self {
        MemoryId(s)
    }
}

impl From<String> for BranchId {
    fn from(s: String) -> Self {
        BranchId(s)
    }
}

/// A named semantic group of memories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Branch {
    pub id: BranchId,
    pub name: String,
    pub summary: String,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<BranchId>,
    pub created_at: Timestamp,
    /// Creation order within the tree; later branches have larger ordinals.
    pub ordinal: u64,
}

/// Scored relation between two memories. `memory_a < memory_b` always.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CrossLink {
    pub memory_a: MemoryId,
    pub memory_b: MemoryId,
    pub score: f64,
}

/// Analyzer output relating a new item to an existing one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RelevanceJudgment {
    pub related_id: MemoryId,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggest_tags: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggest_context: Option<String>,
}

impl RelevanceJudgment {
    pub fn new(related_id: impl Into<MemoryId>, score: f64) -> Self {
        Self {
            related_id: related_id.into(),
            score,
            suggest_tags: None,
            suggest_context: None,
        }
    }

    pub fn with_tags<I, S>(mut self, tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.suggest_tags = Some(tags.into_iter().map(Into::into).collect());
        self
    }

    pub fn with_context(mut self, context: impl Into<String>) -> Self {
        self.suggest_context = Some(context.into());
        self
    }
}

/// Name and one-line summary for a branch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupName {
    pub name: String,
    pub summary: String,
}

impl GroupName {
    pub fn new(name: impl Into<String>, summary: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            summary: summary.into(),
        }
    }
}

/// One group in a reorganization plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReorgGroup {
    pub name: String,
    #[serde(default)]
    pub memory_ids: Vec<MemoryId>,
    #[serde(default)]
    pub branch_ids: Vec<BranchId>,
}

/// Analyzer-proposed restructuring of selected memories and branches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReorgPlan {
    pub groups: Vec<ReorgGroup>,
}
