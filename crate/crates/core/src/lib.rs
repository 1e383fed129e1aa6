//! Deterministic simulator and decision service for two mobile-health
//! micro-randomized trials, with fault injection, monitoring and an
//! auditable store.

pub mod clock;
pub mod decision;
pub mod error;
pub mod faults;
pub mod linalg;
pub mod schedule;
pub mod sentinel;
pub mod run;
pub mod sim;
pub mod store;

pub use error::{Error, Result};
