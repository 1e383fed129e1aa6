//! Command line and HTTP API for trialwatch runs.

pub mod api;
pub mod cli;
pub mod error;
pub mod serve;
pub mod webhook;

pub use api::{router, AppState};
pub use error::{GatewayError, Result};
