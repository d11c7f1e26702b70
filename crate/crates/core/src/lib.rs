//! Context-memory engine.
//!
//! Captured context items (snippets with memos, passive screen observations,
//! chat exchanges) are analyzed, placed into a hierarchical memory tree,
//! ranked for chat context, filtered for redundancy, and used to drive a
//! snippet-ablation preference probe. Every mutation is recorded in an
//! append-only session log that replays to the same tree.

pub mod analyzer;
pub mod engine;
pub mod error;
pub mod filter;
pub mod model;
pub mod probe;
pub mod retrieval;
pub mod store;
pub mod tree;

pub use error::{AnalyzerError, EngineError, FilterError, ProbeError, RetrievalError, StoreError, TreeError};
pub use model::*;
