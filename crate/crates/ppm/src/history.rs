//! The history of a run: the serialized sequence of persistent-memory
//! instructions from all processors, including fault-induced repeats,
//! together with capsule boundary events. Checkers (write-after-read scans,
//! race scans, atomic-idempotence checking, sequential-consistency
//! witnessing) all operate on this structure.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::ScaleGuard;
use crate::fault::FaultKind;
use crate::mem::{AccessKind, AccessLog, AccessRecord, Word};
use crate::ProcId;

/// One persistent-memory (or logged ephemeral) instruction with its operands
/// and observed result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum HistOp {
    /// Block read; `data` is what it returned.
    Read { block: usize, data: Vec<Word> },
    /// Write of a word range inside one block.
    Write { addr: usize, data: Vec<Word> },
    /// Compare-and-swap / compare-and-modify on one word. The two are
    /// distinguished because a CAM's success is invisible to the program.
    Cas {
        addr: usize,
        expected: Word,
        new: Word,
        success: bool,
    },
    Cam {
        addr: usize,
        expected: Word,
        new: Word,
        success: bool,
    },
    /// Restart-pointer installation for `slot`; ends the writing capsule.
    Install { slot: ProcId, closure: Word },
    /// Ephemeral accesses; free, but logged for well-formedness checks.
    LocalRead { word: usize },
    LocalWrite { word: usize },
}

impl HistOp {
    pub fn kind(&self) -> AccessKind {
        match self {
            HistOp::Read { .. } => AccessKind::ExtRead,
            HistOp::Write { .. } | HistOp::Install { .. } => AccessKind::ExtWrite,
            HistOp::Cas { .. } => AccessKind::Cas,
            HistOp::Cam { .. } => AccessKind::Cam,
            HistOp::LocalRead { .. } => AccessKind::LocalRead,
            HistOp::LocalWrite { .. } => AccessKind::LocalWrite,
        }
    }

    pub fn is_external(&self) -> bool {
        self.kind().is_external()
    }
}

/// One executed instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistRecord {
    pub ts: u64,
    pub proc: ProcId,
    /// Capsule instance id.
    pub capsule: u64,
    pub op: HistOp,
}

/// Capsule boundary events as they appear in the trace stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryKind {
    Install,
    Restart,
    Fault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryEvent {
    pub ts: u64,
    pub proc: ProcId,
    pub capsule: u64,
    pub kind: BoundaryKind,
    /// For faults, whether it was soft or hard.
    pub fault: Option<FaultKind>,
}

/// Metadata for one capsule instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapsuleMeta {
    pub id: u64,
    pub proc: ProcId,
    /// Registry key of the step procedure.
    pub key: u64,
    /// Closure address it ran from.
    pub closure: Word,
    /// Timestamp at which it was installed (its invocation point). The
    /// first capsule of a processor is invoked at run start (ts 0).
    pub invocation_ts: u64,
    /// Timestamp of the install that ended it; `None` while open.
    pub response_ts: Option<u64>,
    /// Times this capsule started executing (1 = no faults).
    pub attempts: u64,
    /// External transfers in the final (completing) attempt, including the
    /// fixed capsule start charge.
    pub final_transfers: u64,
    /// External transfers across all attempts, including restart charges.
    pub total_transfers: u64,
    /// Host-side operation count proxy (used for capsule-work shape checks
    /// where the bound is in operations rather than transfers).
    pub op_count: u64,
}

/// Full run history.
#[derive(Debug, Clone, Default)]
pub struct History {
    pub records: Vec<HistRecord>,
    pub boundaries: Vec<BoundaryEvent>,
    pub capsules: BTreeMap<u64, CapsuleMeta>,
    pub block_words: usize,
}

impl History {
    pub fn new(block_words: usize) -> Self {
        History {
            block_words,
            ..Default::default()
        }
    }

    /// Project to the flat access-log form (one record per instruction,
    /// block indices for block transfers, word indices for CAS/CAM and
    /// ephemeral accesses).
    pub fn access_log(&self) -> AccessLog {
        let mut log = AccessLog::new();
        for r in &self.records {
            let index = match &r.op {
                HistOp::Read { block, .. } => *block,
                HistOp::Write { addr, .. } => addr / self.block_words,
                HistOp::Cas { addr, .. } | HistOp::Cam { addr, .. } => *addr,
                // Installs target the per-processor restart slot, logged as a
                // pseudo-block past the end of data memory.
                HistOp::Install { slot, .. } => usize::MAX - slot,
                HistOp::LocalRead { word } | HistOp::LocalWrite { word } => *word,
            };
            log.push(AccessRecord {
                proc: r.proc,
                capsule: r.capsule,
                kind: r.op.kind(),
                index,
                ts: r.ts,
            });
        }
        log
    }

    /// Records belonging to one capsule instance.
    pub fn of_capsule(&self, capsule: u64) -> Vec<&HistRecord> {
        self.records.iter().filter(|r| r.capsule == capsule).collect()
    }
}

/// Memory image the history replays against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemImage {
    pub words: Vec<Word>,
    pub restart_slots: Vec<Word>,
}

impl MemImage {
    /// Apply `op` and report whether its recorded result still matches.
    pub fn apply(&mut self, op: &HistOp) -> bool {
        match op {
            HistOp::Read { block, data } => {
                // A read record carries the full block it returned.
                let b = data.len();
                let lo = block * b;
                self.words[lo..lo + b] == data[..]
            }
            HistOp::Write { addr, data } => {
                self.words[*addr..*addr + data.len()].copy_from_slice(data);
                true
            }
            HistOp::Cas {
                addr,
                expected,
                new,
                success,
            }
            | HistOp::Cam {
                addr,
                expected,
                new,
                success,
            } => {
                let would = self.words[*addr] == *expected;
                if would {
                    self.words[*addr] = *new;
                }
                would == *success
            }
            HistOp::Install { slot, closure } => {
                self.restart_slots[*slot] = *closure;
                true
            }
            HistOp::LocalRead { .. } | HistOp::LocalWrite { .. } => true,
        }
    }
}

/// Search for a total order of the external operations that respects each
/// processor's program order and reproduces every recorded result, starting
/// from `initial`. This is the sequential-consistency witness; the machine
/// produces serialized histories by construction, so this is an independent
/// cross-check. Guarded to small traces.
pub fn seq_consistency_witness(
    history: &History,
    initial: &MemImage,
) -> Result<Option<Vec<usize>>, ScaleGuard> {
    let ext: Vec<(usize, &HistRecord)> = history
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.op.is_external())
        .collect();
    let procs: std::collections::BTreeSet<ProcId> = ext.iter().map(|(_, r)| r.proc).collect();
    if procs.len() > 3 {
        return Err(ScaleGuard(format!("{} processors, max 3", procs.len())));
    }
    if ext.len() > 12 {
        return Err(ScaleGuard(format!("{} external accesses, max 12", ext.len())));
    }
    // Per-processor queues in program order.
    let mut queues: BTreeMap<ProcId, Vec<usize>> = BTreeMap::new();
    for (i, r) in &ext {
        queues.entry(r.proc).or_default().push(*i);
    }
    let order: Vec<ProcId> = queues.keys().copied().collect();
    let mut cursors: Vec<usize> = vec![0; order.len()];
    let mut picked: Vec<usize> = Vec::with_capacity(ext.len());

    fn dfs(
        history: &History,
        queues: &BTreeMap<ProcId, Vec<usize>>,
        order: &[ProcId],
        cursors: &mut Vec<usize>,
        picked: &mut Vec<usize>,
        mem: &MemImage,
        remaining: usize,
    ) -> bool {
        if remaining == 0 {
            return true;
        }
        for (qi, proc) in order.iter().enumerate() {
            let queue = &queues[proc];
            if cursors[qi] >= queue.len() {
                continue;
            }
            let rec_idx = queue[cursors[qi]];
            let mut next = mem.clone();
            if next.apply(&history.records[rec_idx].op) {
                cursors[qi] += 1;
                picked.push(rec_idx);
                if dfs(history, queues, order, cursors, picked, &next, remaining - 1) {
                    return true;
                }
                picked.pop();
                cursors[qi] -= 1;
            }
        }
        false
    }

    let found = dfs(
        history,
        &queues,
        &order,
        &mut cursors,
        &mut picked,
        initial,
        ext.len(),
    );
    Ok(if found { Some(picked) } else { None })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(ts: u64, proc: ProcId, op: HistOp) -> HistRecord {
        HistRecord {
            ts,
            proc,
            capsule: proc as u64,
            op,
        }
    }

    #[test]
    fn witness_found_for_serial_history() {
        let mut h = History::new(1);
        h.records.push(rec(0, 0, HistOp::Write { addr: 0, data: vec![1] }));
        h.records.push(rec(1, 1, HistOp::Read { block: 0, data: vec![1] }));
        let initial = MemImage {
            words: vec![0; 4],
            restart_slots: vec![0; 2],
        };
        let witness = seq_consistency_witness(&h, &initial).unwrap();
        assert!(witness.is_some());
    }

    #[test]
    fn witness_rejects_impossible_reads() {
        // Both processors read 1 from a word nobody wrote.
        let mut h = History::new(1);
        h.records.push(rec(0, 0, HistOp::Read { block: 0, data: vec![1] }));
        h.records.push(rec(1, 1, HistOp::Read { block: 0, data: vec![1] }));
        let initial = MemImage {
            words: vec![0; 4],
            restart_slots: vec![0; 2],
        };
        assert!(seq_consistency_witness(&h, &initial).unwrap().is_none());
    }

    #[test]
    fn witness_respects_scale_guard() {
        let mut h = History::new(1);
        for i in 0..13 {
            h.records.push(rec(i, 0, HistOp::Write { addr: 0, data: vec![i] }));
        }
        let initial = MemImage {
            words: vec![0; 4],
            restart_slots: vec![0; 1],
        };
        assert!(seq_consistency_witness(&h, &initial).is_err());
    }
}
