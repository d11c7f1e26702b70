//! Local HTTP service and CLI for the contexty engine.

pub mod api;
pub mod cli;
pub mod config;
pub mod error;

pub use api::{router, AppState, Shared};
pub use config::ServiceConfig;
pub use error::{ApiError, ErrorCode};
