//! Inline citation grammar used in assistant responses:
//! `(((title(id))))` for memories and `(((cluster: name(branchId))))` for
//! branches.

use std::ops::Range;

use serde::{Deserialize, Serialize};

const OPEN: &str = "(((";
const CLOSE: &str = "))))";
const CLUSTER_PREFIX: &str = "cluster:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceKind {
    Memory,
    Cluster,
}

/// One citation found in a response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReferenceTag {
    pub kind: ReferenceKind,
    pub label: String,
    pub ref_id: String,
    /// Character (not byte) offsets of the whole tag in the source text.
    pub span: Range<usize>,
}

/// Characters allowed in a reference id.
pub fn is_id_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | ':')
}

/// Makes a label safe to embed in a tag: parentheses become brackets and
/// line breaks become spaces.
pub fn sanitize_label(label: &str) -> String {
    let cleaned: String = label
        .chars()
        .map(|c| match c {
            '(' => '[',
            ')' => ']',
            '\n' | '\r' | '\t' => ' ',
            c => c,
        })
        .collect();
    let trimmed = cleaned.trim();
    if trimmed.is_empty() {
        "Untitled".to_string()
    } else {
        trimmed.to_string()
    }
}

pub fn memory_reference(title: &str, id: &str) -> String {
    format!("{OPEN}{}({id}{CLOSE}", sanitize_label(title))
}

pub fn cluster_reference(name: &str, id: &str) -> String {
    format!("{OPEN}{CLUSTER_PREFIX} {}({id}{CLOSE}", sanitize_label(name))
}

/// Extracts every well-formed tag, left to right, without overlaps.
/// Anything malformed is skipped.
pub fn parse_references(text: &str) -> Vec<ReferenceTag> {
    let mut out = Vec::new();
    let mut pos = 0;
    while let Some(found) = text[pos..].find(OPEN) {
        let mut start = pos + found;
        // Within a run of '(' the tag opens at the last three.
        let run_end = start + text[start..].chars().take_while(|&c| c == '(').count();
        start = run_end - OPEN.len();
        let body_start = run_end;

        let Some(close_rel) = text[body_start..].find(CLOSE) else {
            break;
        };
        let body_end = body_start + close_rel;
        let body = &text[body_start..body_end];

        // A nested opener means the outer one was never closed.
        if let Some(inner) = body.rfind(OPEN) {
            pos = body_start + inner;
            continue;
        }

        match parse_body(body) {
            Some((kind, label, ref_id)) => {
                let end = body_end + CLOSE.len();
                let char_start = text[..start].chars().count();
                let char_len = text[start..end].chars().count();
                out.push(ReferenceTag {
                    kind,
                    label,
                    ref_id,
                    span: char_start..char_start + char_len,
                });
                pos = end;
            }
            None => pos = body_start,
        }
    }
    out
}

fn parse_body(body: &str) -> Option<(ReferenceKind, String, String)> {
    let paren = body.rfind('(')?;
    let id = &body[paren + 1..];
    if id.is_empty() || !id.chars().all(is_id_char) {
        return None;
    }
    let mut label = body[..paren].trim();
    let kind = match label.strip_prefix(CLUSTER_PREFIX) {
        Some(rest) => {
            label = rest.trim();
            ReferenceKind::Cluster
        }
        None => ReferenceKind::Memory,
    };
    if label.is_empty() || label.contains(')') || label.contains('(') {
        return None;
    }
    Some((kind, label.to_string(), id.to_string()))
}
