//! HTTP API, project store and command line for intent-guided fine-tuning.

pub mod api;
pub mod cli;
pub mod config;
pub mod error;
pub mod llm;
pub mod workspace;

pub use api::router;
pub use config::ServiceConfig;
pub use error::{ErrorBody, ServiceError, ServiceResult};
pub use workspace::Workspace;
