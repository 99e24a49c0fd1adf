//! Evaluation service: configuration, runtime and HTTP API around
//! `autoeval-core`.

pub mod api;
pub mod config;
pub mod runtime;

pub use config::{ConfigError, ServiceConfig};
pub use runtime::Runtime;
