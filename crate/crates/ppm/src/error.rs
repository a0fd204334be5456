//! Error types. Model violations halt a run with a diagnostic: the simulator
//! is a checker, not a forgiving runtime.

use thiserror::Error;

use crate::ProcId;

/// A violation of the machine model or of capsule discipline. Any of these
/// aborts the run that raised it.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("block index {block} out of range (persistent memory has {blocks} blocks)")]
    BlockOutOfRange { block: usize, blocks: usize },
    #[error("word address {addr} out of range (persistent memory has {words} words)")]
    WordOutOfRange { addr: usize, words: usize },
    #[error("write of {len} words at {addr} crosses a block boundary")]
    UnalignedWrite { addr: usize, len: usize },
    #[error("processor {0} is dead but was asked to act")]
    DeadProcessor(ProcId),
    #[error("processor {0} installed twice in one capsule")]
    DoubleInstall(ProcId),
    #[error("install target {0} is not a valid closure address")]
    BadInstallTarget(u64),
    #[error("capsule step for key {0} returned without installing or halting")]
    EndWithoutInstall(u64),
    #[error("no step procedure registered under key {0}")]
    UnknownKey(u64),
    #[error("unknown capsule id {0}")]
    UnknownCapsule(u64),
    #[error("allocator exhausted: requested {requested} words, {available} left in arena")]
    OutOfMemory { requested: usize, available: usize },
    #[error("capsule replay diverged at access {index}: expected {expected}, got {got}")]
    ReplayDiverged {
        index: usize,
        expected: String,
        got: String,
    },
    #[error("deque overflow: bottom reached capacity {capacity}")]
    DequeOverflow { capacity: usize },
    #[error("getActiveCapsule called on live processor {0}")]
    ActiveCapsuleOfLive(ProcId),
    #[error("invalid machine configuration: {0}")]
    BadConfig(String),
    #[error("{0}")]
    Other(String),
}

/// Failure of a whole machine run.
#[derive(Debug, Error)]
pub enum RunError {
    #[error("step budget of {budget} exhausted")]
    Timeout {
        budget: u64,
        /// Cost report for the truncated run.
        partial: Box<crate::metrics::CostReport>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Refusal of a bounded checker to run on an oversized input.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("input exceeds checker scale guard: {0}")]
pub struct ScaleGuard(pub String);
