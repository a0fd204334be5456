//! Deterministic simulator for a two-level persistent-memory machine:
//! `P` virtual processors, each with a small ephemeral memory that is lost on
//! a fault, sharing a block-granular persistent memory that survives every
//! fault. Programs are structured as *capsules* — restartable sections that
//! re-enter from their beginning after a soft fault — and the library layers
//! a fault-tolerant work-stealing scheduler, single-processor machine-model
//! simulations, and fork-join algorithms on top, with external-transfer cost
//! accounting throughout.
//!
//! Everything is single-threaded and virtual-time: concurrency is an
//! interleaving of persistent-memory accesses chosen by a pluggable strategy,
//! so every run is reproducible from its seed and every small scenario can be
//! explored exhaustively.

pub mod algos;
pub mod capsule;
pub mod config;
pub mod error;
pub mod explore;
pub mod fault;
pub mod history;
pub mod machine;
pub mod mem;
pub mod metrics;
pub mod sched;
pub mod sim;
pub mod trace;
pub mod verify;

pub use error::{ModelError, RunError};
pub use machine::{Machine, RunOutcome, Strategy};
pub use mem::{MachineConfig, Word};
pub use metrics::CostReport;

/// Identifies one virtual processor.
pub type ProcId = usize;
