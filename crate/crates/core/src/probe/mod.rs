//! Snippet-ablation preference probe.
//!
//! For a query two contexts are retrieved: one from the full tree and one
//! with every snippet (and with it every memo) removed. A context-level gate
//! skips the probe when the two contexts are near-identical; otherwise both
//! responses are generated and a response-level gate on normalized
//! compression distance decides whether the user is asked to pick one.

mod calibration;
mod metrics;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use calibration::{
    run_calibration, CalibrationCorpus, CalibrationPair, CalibrationReport, CompressorInfo, HistogramBin, MetricSummary,
    PairMetrics, CALIBRATION_SCHEMA,
};
pub use metrics::{gzip_len, jaccard, lcs_len, ncd, rouge_l, GZIP_LEVEL};

use crate::error::{ProbeError, RetrievalError};
use crate::model::{MemoryId, Timestamp};
use crate::retrieval::{retrieve_scoped, tokenize, ContextBundle, Query, RetrievalConfig, RetrievalScope, CLUSTER_HEADER, MEMORY_HEADER};
use crate::tree::MemoryTree;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProbeConfig {
    /// Memory-level Jaccard at or above which contexts may be equivalent.
    pub jmem: f64,
    /// Token-level Jaccard at or above which contexts may be equivalent.
    pub jtok: f64,
    /// Responses are shown side by side only when NCD exceeds this.
    pub tau: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            jmem: 0.85,
            jtok: 0.92,
            tau: 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VariantLabel {
    #[serde(rename = "A_full")]
    AFull,
    #[serde(rename = "B_noSnippet")]
    BNoSnippet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ContextVariant {
    pub label: VariantLabel,
    pub memory_ids: Vec<MemoryId>,
    pub rendered_text: String,
    #[serde(skip)]
    pub bundle: ContextBundle,
}

impl ContextVariant {
    fn from_bundle(label: VariantLabel, bundle: ContextBundle) -> Self {
        Self {
            label,
            memory_ids: bundle.memory_ids(),
            rendered_text: bundle.rendered_text.clone(),
            bundle,
        }
    }

    /// Tokens of the rendered context with the fixed template removed.
    pub fn content_tokens(&self) -> BTreeSet<String> {
        tokenize(&strip_template(&self.rendered_text))
    }
}

/// Keeps only the field values of a rendered context block: section
/// headers, entry marker lines, field labels and reference hints go.
pub fn strip_template(rendered: &str) -> String {
    let mut out = String::new();
    for line in rendered.lines() {
        if line == CLUSTER_HEADER || line == MEMORY_HEADER || line.starts_with("- [") {
            continue;
        }
        let body = line.trim_start();
        if body.starts_with("(reference as:") {
            continue;
        }
        let value = match body.split_once(": ") {
            Some((label, value)) if !label.contains(' ') => value,
            _ => body,
        };
        out.push_str(value);
        out.push('\n');
    }
    out
}

/// Retrieves the full context and the snippet-free context with identical
/// settings.
pub fn build_variants(tree: &MemoryTree, query: &Query, config: &RetrievalConfig) -> Result<(ContextVariant, ContextVariant), RetrievalError> {
    let a = retrieve_scoped(tree, query, config, RetrievalScope::full())?;
    let b = retrieve_scoped(tree, query, config, RetrievalScope::without_snippets())?;
    Ok((
        ContextVariant::from_bundle(VariantLabel::AFull, a),
        ContextVariant::from_bundle(VariantLabel::BNoSnippet, b),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SimilarityReport {
    pub jaccard_mem: f64,
    pub jaccard_tok: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ncd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GateDecision {
    pub stage1_equivalent: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2_show: Option<bool>,
    pub report: SimilarityReport,
}

impl GateDecision {
    /// True when both responses should be shown for a choice.
    pub fn shows_pair(&self) -> bool {
        self.stage2_show == Some(true)
    }
}

/// Context-level gate: equivalent iff both Jaccard scores meet their
/// thresholds (inclusive).
pub fn stage1_gate(jaccard_mem: f64, jaccard_tok: f64, config: &ProbeConfig) -> bool {
    jaccard_mem >= config.jmem && jaccard_tok >= config.jtok
}

/// Response-level gate: show both iff NCD is strictly above tau.
pub fn stage2_gate(response_a: &str, response_b: &str, tau: f64) -> Result<bool, ProbeError> {
    Ok(ncd(response_a.as_bytes(), response_b.as_bytes())? > tau)
}

/// Compares two variants and applies the context-level gate.
pub fn compare_contexts(a: &ContextVariant, b: &ContextVariant, config: &ProbeConfig) -> GateDecision {
    let mem_a: BTreeSet<_> = a.memory_ids.iter().cloned().collect();
    let mem_b: BTreeSet<_> = b.memory_ids.iter().cloned().collect();
    let report = SimilarityReport {
        jaccard_mem: jaccard(&mem_a, &mem_b),
        jaccard_tok: jaccard(&a.content_tokens(), &b.content_tokens()),
        ncd: None,
        rouge_l: None,
    };
    GateDecision {
        stage1_equivalent: stage1_gate(report.jaccard_mem, report.jaccard_tok, config),
        stage2_show: None,
        report,
    }
}

/// Completes a decision that passed stage 1 with the two responses.
pub fn complete_with_responses(mut decision: GateDecision, response_a: &str, response_b: &str, config: &ProbeConfig) -> Result<GateDecision, ProbeError> {
    if decision.stage1_equivalent {
        return Err(ProbeError::Argument("contexts were equivalent; no second response is compared".into()));
    }
    let d = ncd(response_a.as_bytes(), response_b.as_bytes())?;
    decision.report.ncd = Some(d);
    decision.report.rouge_l = Some(rouge_l(response_a, response_b));
    decision.stage2_show = Some(d > config.tau);
    Ok(decision)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
}

/// The user's pick between the two shown responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PreferenceRecord {
    pub query_id: String,
    pub chosen: Choice,
    pub shown_at: Timestamp,
    pub chosen_at: Timestamp,
}
