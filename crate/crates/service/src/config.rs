//! Service configuration: a TOML file plus environment overrides.
//!
//! Every key can be overridden by `CONTEXTY_<SECTION>_<KEY>`, for example
//! `CONTEXTY_DEDUP_HAMMING=12` or `CONTEXTY_PROBE_TAU=0.65`.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use contexty_core::engine::EngineConfig;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub bind: SocketAddr,
    pub data_dir: PathBuf,
    /// Environment variable holding the bearer token.
    pub token_env: String,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 7878)),
            data_dir: PathBuf::from("contexty-data"),
            token_env: "CONTEXTY_TOKEN".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzerSection {
    pub provider: ProviderKind,
}

impl Default for AnalyzerSection {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Mock,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DedupSection {
    pub hamming: u32,
    pub ring: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutohideSection {
    pub sigma: f64,
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub jmem: f64,
    pub jtok: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub slot_limit: usize,
    pub rep_count: usize,
    pub source_boost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementSection {
    pub strong_link: f64,
    pub related_candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummarySection {
    pub recent: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatSection {
    pub history_turns: usize,
}

macro_rules! defaults_from_engine {
    ($($section:ident => |$c:ident| $body:expr;)*) => {
        $(impl Default for $section {
            fn default() -> Self {
                let $c = EngineConfig::default();
                $body
            }
        })*
    };
}

defaults_from_engine! {
    DedupSection => |c| DedupSection { hamming: c.filter.dedup_hamming, ring: c.filter.ring_capacity };
    AutohideSection => |c| AutohideSection { sigma: c.filter.autohide_sigma, window: c.filter.autohide_window };
    ProbeSection => |c| ProbeSection { jmem: c.probe.jmem, jtok: c.probe.jtok, tau: c.probe.tau };
    RetrievalSection => |c| RetrievalSection {
        slot_limit: c.retrieval.slot_limit,
        rep_count: c.retrieval.rep_count,
        source_boost: c.retrieval.source_boost,
    };
    PlacementSection => |c| PlacementSection {
        strong_link: c.placement.strong_link_threshold,
        related_candidates: c.related_candidates,
    };
    SummarySection => |c| SummarySection { recent: c.snapshot_recent };
    ChatSection => |c| ChatSection { history_turns: c.history_turns };
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub server: ServerSection,
    pub analyzer: AnalyzerSection,
    pub dedup: DedupSection,
    pub autohide: AutohideSection,
    pub probe: ProbeSection,
    pub retrieval: RetrievalSection,
    pub placement: PlacementSection,
    pub summary: SummarySection,
    pub chat: ChatSection,
}

impl ServiceConfig {
    /// Reads `path` (if given) and applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ApiError> {
        Self::load_with(path, |k| std::env::var(k).ok())
    }

    pub fn load_with(path: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> Result<Self, ApiError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| ApiError::bad_request(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_with(&text, env)
    }

    pub fn from_toml_with(text: &str, env: impl Fn(&str) -> Option<String>) -> Result<Self, ApiError> {
        let parsed: ServiceConfig = toml::from_str(text).map_err(|e| ApiError::bad_request(format!("invalid config: {e}")))?;
        let mut doc = toml::Value::try_from(&parsed).map_err(|e| ApiError::internal(e.to_string()))?;
        let sections = doc.as_table_mut().expect("config serializes to a table");
        for (section, body) in sections.iter_mut() {
            let Some(table) = body.as_table_mut() else { continue };
            for (key, value) in table.iter_mut() {
                let var = format!("CONTEXTY_{}_{}", section.to_uppercase(), key.to_uppercase());
                if let Some(raw) = env(&var) {
                    *value = override_value(value, raw.trim()).ok_or_else(|| ApiError::bad_request(format!("{var}: cannot parse {raw:?}")))?;
                }
            }
        }
        let cfg: ServiceConfig = doc.try_into().map_err(|e: toml::de::Error| ApiError::bad_request(format!("invalid override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ApiError> {
        let unit = [
            ("autohide.sigma", self.autohide.sigma),
            ("probe.jmem", self.probe.jmem),
            ("probe.jtok", self.probe.jtok),
            ("probe.tau", self.probe.tau),
            ("placement.strong_link", self.placement.strong_link),
        ];
        for (key, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(ApiError::bad_request(format!("{key} must lie in [0, 1], got {v}")));
            }
        }
        if self.retrieval.slot_limit == 0 || self.summary.recent == 0 || self.dedup.ring == 0 {
            return Err(ApiError::bad_request("slot_limit, summary.recent and dedup.ring must be positive"));
        }
        Ok(())
    }

    pub fn engine(&self) -> EngineConfig {
        let mut c = EngineConfig::default();
        c.filter.dedup_hamming = self.dedup.hamming;
        c.filter.ring_capacity = self.dedup.ring;
        c.filter.autohide_sigma = self.autohide.sigma;
        c.filter.autohide_window = self.autohide.window;
        c.probe.jmem = self.probe.jmem;
        c.probe.jtok = self.probe.jtok;
        c.probe.tau = self.probe.tau;
        c.retrieval.slot_limit = self.retrieval.slot_limit;
        c.retrieval.rep_count = self.retrieval.rep_count;
        c.retrieval.source_boost = self.retrieval.source_boost;
        c.placement.strong_link_threshold = self.placement.strong_link;
        c.related_candidates = self.placement.related_candidates;
        c.snapshot_recent = self.summary.recent;
        c.history_turns = self.chat.history_turns;
        c
    }
}

fn override_value(current: &toml::Value, raw: &str) -> Option<toml::Value> {
    Some(match current {
        toml::Value::Integer(_) => toml::Value::Integer(raw.parse().ok()?),
        toml::Value::Float(_) => toml::Value::Float(raw.parse().ok()?),
        toml::Value::Boolean(_) => toml::Value::Boolean(raw.parse().ok()?),
        _ => toml::Value::String(raw.to_string()),
    })
}
