//! Core of the ensemble federated learning simulator.
//!
//! Everything here is pure computation over in-memory values: the recursive
//! model representation, the learner roster and its training loop, metrics,
//! node partitioning, best-two selection, the node and server sides of the
//! round protocol, and the canonical wire encoding. IO, threads and the CLI
//! live in the `eflsim` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod codec;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod learners;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod node;
pub mod seed;
pub mod server;

pub use error::{EflError, Result};
pub use linalg::Matrix;
pub use model::{FusionRule, ModelId, ModelTree, Origin, ParamVector};
