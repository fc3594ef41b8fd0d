//! Threaded runtime, file formats and command-line front end for the
//! ensemble federated learning simulator in `eflsim-core`.
//!
//! * [`channel`]: ordered point-to-point links with a per-round byte ledger.
//! * [`network`]: runs each node's round on a worker pool over those links.
//! * [`config`], [`experiment`]: TOML experiments and their outputs.
//! * [`csvio`], [`trace`], [`report`]: on-disk formats.

pub mod channel;
pub mod cli;
pub mod config;
pub mod csvio;
pub mod error;
pub mod experiment;
pub mod network;
pub mod report;
pub mod trace;

pub use error::{Result, SimError};
