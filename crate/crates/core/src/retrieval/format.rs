//! Rendering of a [`ContextBundle`] into the text block prepended to chat
//! queries (`ctxfmt/1`).
//!
//! ```text
//! Cluster Context (explicitly referenced groups):
//! - [CLUSTER|MENTION] id=br_0001
//!   name: Travel Planning
//!   summary: ...
//!   tags: travel, japan
//!   members: 4 items
//!   (reference as: (((cluster: Travel Planning(br_0001)))))
//!
//! Memory Context:
//! - [SNIPPET|MENTION] id=mem_000002
//!   title: Trip Budget
//!   context: ...
//!   summary: ...
//!   tags: travel, budget
//!   memo: ...
//!   (reference as: (((Trip Budget(mem_000002)))))
//! ```

use std::fmt::Write as _;

use super::refs::{cluster_reference, memory_reference};
use super::{ContextBundle, EntryTarget};
use crate::tree::MemoryTree;

pub const CONTEXT_FORMAT_VERSION: &str = "ctxfmt/1";

pub const CLUSTER_HEADER: &str = "Cluster Context (explicitly referenced groups):";
pub const MEMORY_HEADER: &str = "Memory Context:";

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Renders the bundle. Entries that no longer resolve are skipped; an empty
/// bundle renders as the empty string.
pub fn format_context(bundle: &ContextBundle, tree: &MemoryTree) -> String {
    let mut clusters = String::new();
    let mut memories = String::new();

    for entry in &bundle.entries {
        match &entry.target {
            EntryTarget::Branch(id) => {
                let Some(b) = tree.branch(id) else { continue };
                let members = tree.members(id).iter().filter(|m| !m.archived).count();
                let marker = if entry.mention { "CLUSTER|MENTION" } else { "CLUSTER" };
                let _ = writeln!(clusters, "- [{marker}] id={id}");
                let _ = writeln!(clusters, "  name: {}", one_line(&b.name));
                let _ = writeln!(clusters, "  summary: {}", one_line(&b.summary));
                let _ = writeln!(clusters, "  tags: {}", b.tags.join(", "));
                let _ = writeln!(clusters, "  members: {members} items");
                let _ = writeln!(clusters, "  (reference as: {})", cluster_reference(&b.name, id.as_str()));
            }
            EntryTarget::Memory(id) => {
                let Some(m) = tree.memory(id) else { continue };
                let source = m.source.as_str().to_uppercase();
                let marker = if entry.mention { format!("{source}|MENTION") } else { source };
                let _ = writeln!(memories, "- [{marker}] id={id}");
                let _ = writeln!(memories, "  title: {}", one_line(&m.title));
                let _ = writeln!(memories, "  context: {}", one_line(&m.context_sentence));
                let _ = writeln!(memories, "  summary: {}", one_line(&m.summary));
                let _ = writeln!(memories, "  tags: {}", m.tags.join(", "));
                if let Some(memo) = &m.user_memo {
                    let _ = writeln!(memories, "  memo: {}", one_line(memo));
                }
                let _ = writeln!(memories, "  (reference as: {})", memory_reference(&m.title, id.as_str()));
            }
        }
    }

    let mut out = String::new();
    if !clusters.is_empty() {
        out.push_str(CLUSTER_HEADER);
        out.push('\n');
        out.push_str(&clusters);
    }
    if !memories.is_empty() {
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(MEMORY_HEADER);
        out.push('\n');
        out.push_str(&memories);
    }
    out
}
