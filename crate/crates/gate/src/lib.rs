//! Service API and command-line client for swdist.
//!
//! [`api::router`] exposes one orchestrator over HTTP; [`cli`] drives it
//! either remotely or in-process against a local state directory.

pub mod api;
pub mod cli;
pub mod client;
pub mod config;
pub mod error;
pub mod release;
pub mod server;

pub use api::{router, AppState};
pub use config::GateConfig;
pub use error::ApiError;
