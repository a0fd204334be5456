//! The two-level memory: a small per-processor ephemeral memory that is
//! scrambled on every fault, and a shared block-granular persistent memory
//! that survives all faults. External transfers (block reads, block or
//! partial-block writes, single-word CAS/CAM) are the only operations with
//! cost; ephemeral accesses are free but still logged so capsules can be
//! checked for write-after-read conflicts and well-formedness.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::ProcId;

/// Machine word. All simulated state is built from these.
pub type Word = u64;

/// Number of registers in the ephemeral register file. The model only asks
/// for a constant number; this one is configurable in principle but fixed
/// here so traces are comparable.
pub const REGISTERS: usize = 8;

/// Static machine shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineConfig {
    /// Processor count.
    pub p: usize,
    /// Ephemeral words per processor.
    pub m: usize,
    /// Persistent words (multiple of `b`).
    pub m_p: usize,
    /// Words per block.
    pub b: usize,
    /// Deque capacity in entries.
    pub s: usize,
}

impl MachineConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.p < 1 {
            return Err(ModelError::BadConfig("P must be at least 1".into()));
        }
        if self.b < 1 {
            return Err(ModelError::BadConfig("B must be at least 1".into()));
        }
        if self.m < self.b {
            return Err(ModelError::BadConfig(
                "M must fit at least one block (M >= B)".into(),
            ));
        }
        if self.m_p == 0 || self.m_p % self.b != 0 {
            return Err(ModelError::BadConfig(
                "M_p must be a nonzero multiple of B".into(),
            ));
        }
        if self.s < 2 {
            return Err(ModelError::BadConfig("S must be at least 2".into()));
        }
        Ok(())
    }

    /// Number of persistent blocks.
    pub fn blocks(&self) -> usize {
        self.m_p / self.b
    }
}

/// Shared persistent memory plus one restart-pointer slot per processor.
/// Content changes only through writes, CAS/CAM, and restart-pointer
/// installation; no fault ever clears it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersistentMemory {
    words: Vec<Word>,
    restart_slots: Vec<Word>,
    block_words: usize,
}

impl PersistentMemory {
    pub fn new(config: &MachineConfig) -> Self {
        PersistentMemory {
            words: vec![0; config.m_p],
            restart_slots: vec![0; config.p],
            block_words: config.b,
        }
    }

    pub fn words(&self) -> usize {
        self.words.len()
    }

    pub fn blocks(&self) -> usize {
        self.words.len() / self.block_words
    }

    pub fn block_words(&self) -> usize {
        self.block_words
    }

    fn check_block(&self, block: usize) -> Result<(), ModelError> {
        if block >= self.blocks() {
            return Err(ModelError::BlockOutOfRange {
                block,
                blocks: self.blocks(),
            });
        }
        Ok(())
    }

    fn check_word(&self, addr: usize) -> Result<(), ModelError> {
        if addr >= self.words.len() {
            return Err(ModelError::WordOutOfRange {
                addr,
                words: self.words.len(),
            });
        }
        Ok(())
    }

    /// Read a whole block.
    pub fn read_block(&self, block: usize) -> Result<&[Word], ModelError> {
        self.check_block(block)?;
        let lo = block * self.block_words;
        Ok(&self.words[lo..lo + self.block_words])
    }

    /// Replace a whole block.
    pub fn write_block(&mut self, block: usize, data: &[Word]) -> Result<(), ModelError> {
        self.check_block(block)?;
        assert_eq!(data.len(), self.block_words, "block write must supply B words");
        let lo = block * self.block_words;
        self.words[lo..lo + self.block_words].copy_from_slice(data);
        Ok(())
    }

    /// Write a word range that stays inside one block. Models a block write
    /// whose untouched words are preserved; costed identically to a full
    /// block write and treated as a write to that block by all conflict
    /// analyses.
    pub fn write_words(&mut self, addr: usize, data: &[Word]) -> Result<(), ModelError> {
        if data.is_empty() {
            return Ok(());
        }
        self.check_word(addr)?;
        self.check_word(addr + data.len() - 1)?;
        if addr / self.block_words != (addr + data.len() - 1) / self.block_words {
            return Err(ModelError::UnalignedWrite {
                addr,
                len: data.len(),
            });
        }
        self.words[addr..addr + data.len()].copy_from_slice(data);
        Ok(())
    }

    /// Peek a single word without modelling an access. For inspection,
    /// oracles, and checkers only.
    pub fn peek(&self, addr: usize) -> Result<Word, ModelError> {
        self.check_word(addr)?;
        Ok(self.words[addr])
    }

    /// Peek a word range (inspection only; may cross blocks).
    pub fn peek_range(&self, addr: usize, len: usize) -> Result<&[Word], ModelError> {
        if len == 0 {
            return Ok(&[]);
        }
        self.check_word(addr)?;
        self.check_word(addr + len - 1)?;
        Ok(&self.words[addr..addr + len])
    }

    /// Set up initial contents before a run begins. Not an access.
    pub fn poke(&mut self, addr: usize, value: Word) -> Result<(), ModelError> {
        self.check_word(addr)?;
        self.words[addr] = value;
        Ok(())
    }

    pub fn poke_range(&mut self, addr: usize, data: &[Word]) -> Result<(), ModelError> {
        if data.is_empty() {
            return Ok(());
        }
        self.check_word(addr)?;
        self.check_word(addr + data.len() - 1)?;
        self.words[addr..addr + data.len()].copy_from_slice(data);
        Ok(())
    }

    /// Atomic compare-and-swap on a single word. Returns whether the swap
    /// happened.
    pub fn cas(&mut self, addr: usize, expected: Word, new: Word) -> Result<bool, ModelError> {
        self.check_word(addr)?;
        if self.words[addr] == expected {
            self.words[addr] = new;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    pub fn restart_slot(&self, proc: ProcId) -> Word {
        self.restart_slots[proc]
    }

    pub fn set_restart_slot(&mut self, proc: ProcId, closure: Word) {
        self.restart_slots[proc] = closure;
    }

    /// Byte-exact snapshot of the data words, for persistence assertions.
    pub fn snapshot_words(&self) -> Vec<Word> {
        self.words.clone()
    }
}

/// Per-processor ephemeral memory: `M` words plus a small register file.
/// A fault sets every word and register to a seeded-random pattern and
/// clears the valid bits, so reading a location that was not rewritten
/// since the fault is detectable.
#[derive(Debug, Clone)]
pub struct EphemeralMemory {
    words: Vec<Word>,
    regs: [Word; REGISTERS],
    word_valid: Vec<bool>,
    reg_valid: [bool; REGISTERS],
}

impl EphemeralMemory {
    pub fn new(m: usize) -> Self {
        EphemeralMemory {
            words: vec![0; m],
            regs: [0; REGISTERS],
            word_valid: vec![true; m],
            reg_valid: [true; REGISTERS],
        }
    }

    /// Overwrite everything with an arbitrary (seeded) pattern and mark it
    /// all invalid.
    pub fn scramble<R: Rng>(&mut self, rng: &mut R) {
        for w in &mut self.words {
            *w = rng.gen();
        }
        for r in &mut self.regs {
            *r = rng.gen();
        }
        self.word_valid.fill(false);
        self.reg_valid.fill(false);
    }

    /// Returns the stored word and whether it has been written since the
    /// last fault.
    pub fn read(&self, index: usize) -> (Word, bool) {
        (self.words[index], self.word_valid[index])
    }

    pub fn write(&mut self, index: usize, value: Word) {
        self.words[index] = value;
        self.word_valid[index] = true;
    }

    pub fn read_reg(&self, index: usize) -> (Word, bool) {
        (self.regs[index], self.reg_valid[index])
    }

    pub fn write_reg(&mut self, index: usize, value: Word) {
        self.regs[index] = value;
        self.reg_valid[index] = true;
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Kind of a logged access.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccessKind {
    ExtRead,
    ExtWrite,
    Cas,
    Cam,
    LocalRead,
    LocalWrite,
}

impl AccessKind {
    pub fn is_external(self) -> bool {
        !matches!(self, AccessKind::LocalRead | AccessKind::LocalWrite)
    }

    /// Whether the access can modify persistent memory. CAS/CAM count as
    /// writes for conflict purposes whether or not they succeed.
    pub fn is_write_like(self) -> bool {
        matches!(self, AccessKind::ExtWrite | AccessKind::Cas | AccessKind::Cam)
    }
}

/// One logged access. `index` is a block index for external reads/writes and
/// a word index for CAS/CAM and ephemeral accesses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub proc: ProcId,
    /// Capsule instance that performed the access.
    pub capsule: u64,
    pub kind: AccessKind,
    pub index: usize,
    /// Logical timestamp; strictly increasing per processor (and globally,
    /// since the machine serializes).
    pub ts: u64,
}

/// Append-only access log.
#[derive(Debug, Clone, Default)]
pub struct AccessLog {
    records: Vec<AccessRecord>,
}

impl AccessLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: AccessRecord) {
        if let Some(last) = self.records.iter().rev().find(|r| r.proc == record.proc) {
            debug_assert!(record.ts > last.ts, "timestamps must increase per processor");
        }
        self.records.push(record);
    }

    pub fn records(&self) -> &[AccessRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }
}

/// Work counters. `w` counts transfers in final (completed) capsule
/// executions only, which is what a fault-free run would perform; `w_f`
/// counts every transfer actually performed, including fault-induced reruns
/// and restart charges. With fault probability zero the two are equal.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CostCounters {
    pub w: u64,
    pub w_f: u64,
    /// Per-processor totals, same convention as `w`/`w_f`.
    pub per_proc_w: Vec<u64>,
    pub per_proc_wf: Vec<u64>,
    /// Maximum capsule work observed: transfers in one faultless execution
    /// of a capsule, including its start charge.
    pub max_capsule_work: u64,
}

impl CostCounters {
    pub fn new(p: usize) -> Self {
        CostCounters {
            per_proc_w: vec![0; p],
            per_proc_wf: vec![0; p],
            ..Default::default()
        }
    }

    /// Record transfers that happened during an attempt that is now known
    /// to be the completing one.
    pub fn settle_final_attempt(&mut self, proc: ProcId, transfers: u64) {
        self.w += transfers;
        self.per_proc_w[proc] += transfers;
        self.max_capsule_work = self.max_capsule_work.max(transfers);
    }

    pub fn charge_total(&mut self, proc: ProcId, transfers: u64) {
        self.w_f += transfers;
        self.per_proc_wf[proc] += transfers;
    }

    /// Max over processors of total transfers (the fault-tolerant time
    /// measure for a fully parallel run).
    pub fn t_f(&self) -> u64 {
        self.per_proc_wf.iter().copied().max().unwrap_or(0)
    }

    pub fn t(&self) -> u64 {
        self.per_proc_w.iter().copied().max().unwrap_or(0)
    }
}

/// A write-after-read conflict: within one capsule, the first transfer from
/// a persistent block was a read and a later transfer wrote the same block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WarConflict {
    pub block: usize,
    pub read_ts: u64,
    pub write_ts: u64,
}

/// An ephemeral location whose first access in the capsule was a read, so a
/// restarted execution would observe scrambled state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WellFormednessViolation {
    pub word: usize,
    pub ts: u64,
}

/// Output of [`war_conflict_scan`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConflictReport {
    pub conflicts: Vec<WarConflict>,
    pub ill_formed: Vec<WellFormednessViolation>,
}

impl ConflictReport {
    pub fn is_conflict_free(&self) -> bool {
        self.conflicts.is_empty() && self.ill_formed.is_empty()
    }
}

/// Scan one capsule's accesses (its faultless run) for write-after-read
/// conflicts on persistent blocks and for reads of ephemeral state that was
/// not written first.
pub fn war_conflict_scan(log: &AccessLog, capsule: u64) -> Result<ConflictReport, ModelError> {
    let records: Vec<&AccessRecord> = log
        .records()
        .iter()
        .filter(|r| r.capsule == capsule)
        .collect();
    if records.is_empty() {
        return Err(ModelError::UnknownCapsule(capsule));
    }
    let mut report = ConflictReport::default();
    // Persistent side: exposed reads (first access to a block is a read)
    // followed by any write to the same block.
    let mut first_access: std::collections::BTreeMap<usize, (AccessKind, u64)> =
        std::collections::BTreeMap::new();
    let mut flagged: std::collections::BTreeSet<usize> = std::collections::BTreeSet::new();
    for r in records.iter().filter(|r| r.kind.is_external()) {
        match first_access.get(&r.index) {
            None => {
                first_access.insert(r.index, (r.kind, r.ts));
            }
            Some(&(first_kind, first_ts)) => {
                if first_kind == AccessKind::ExtRead
                    && r.kind.is_write_like()
                    && flagged.insert(r.index)
                {
                    report.conflicts.push(WarConflict {
                        block: r.index,
                        read_ts: first_ts,
                        write_ts: r.ts,
                    });
                }
            }
        }
    }
    // Ephemeral side: the first access to each word must be a write.
    let mut seen_local: std::collections::BTreeSet<usize> = std::collections::BTreeSet::new();
    for r in records.iter().filter(|r| !r.kind.is_external()) {
        if seen_local.insert(r.index) && r.kind == AccessKind::LocalRead {
            report.ill_formed.push(WellFormednessViolation {
                word: r.index,
                ts: r.ts,
            });
        }
    }
    Ok(report)
}

/// A pair of conflicting accesses: one from the capsule under scrutiny, one
/// foreign access that landed between the capsule's invocation and response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Race {
    pub own: AccessRecord,
    pub foreign: AccessRecord,
}

/// Output of [`race_scan`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RaceReport {
    pub races: Vec<Race>,
}

impl RaceReport {
    pub fn is_race_free(&self) -> bool {
        self.races.is_empty()
    }
}

fn external_block(r: &AccessRecord, block_words: usize) -> usize {
    match r.kind {
        AccessKind::ExtRead | AccessKind::ExtWrite => r.index,
        AccessKind::Cas | AccessKind::Cam => r.index / block_words,
        _ => usize::MAX,
    }
}

/// Scan for races: pairs of same-block external accesses, at least one a
/// write, where one side belongs to the capsule and the other is a foreign
/// access within the capsule's invocation-response window. The window is
/// `[first own ts, response_ts]`; pass the timestamp of the install that
/// ended the capsule (or `u64::MAX` while it is still open). `block_words`
/// maps CAS/CAM word indices onto blocks.
pub fn race_scan(
    log: &AccessLog,
    capsule: u64,
    response_ts: u64,
    block_words: usize,
) -> Result<RaceReport, ModelError> {
    let own: Vec<&AccessRecord> = log
        .records()
        .iter()
        .filter(|r| r.capsule == capsule && r.kind.is_external())
        .collect();
    if own.is_empty() {
        return Err(ModelError::UnknownCapsule(capsule));
    }
    let proc = own[0].proc;
    let invocation_ts = own[0].ts;
    let mut report = RaceReport::default();
    for r in own.iter() {
        for foreign in log.records().iter().filter(|f| {
            f.proc != proc
                && f.kind.is_external()
                && f.ts >= invocation_ts
                && f.ts <= response_ts
        }) {
            let own_block = external_block(r, block_words);
            let f_block = external_block(foreign, block_words);
            if own_block == f_block && (r.kind.is_write_like() || foreign.kind.is_write_like()) {
                report.races.push(Race {
                    own: **r,
                    foreign: *foreign,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> MachineConfig {
        MachineConfig {
            p: 2,
            m: 64,
            m_p: 64,
            b: 2,
            s: 8,
        }
    }

    #[test]
    fn config_invariants_enforced() {
        assert!(cfg().validate().is_ok());
        let mut c = cfg();
        c.p = 0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.m = 1; // smaller than B
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.m_p = 63; // not a multiple of B
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.s = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn block_read_returns_written_content() {
        let mut pm = PersistentMemory::new(&cfg());
        pm.write_block(0, &[7, 7]).unwrap();
        assert_eq!(pm.read_block(0).unwrap(), &[7, 7]);
        pm.write_block(3, &[1, 2]).unwrap();
        assert_eq!(pm.read_block(3).unwrap(), &[1, 2]);
    }

    #[test]
    fn out_of_range_block_is_a_model_violation() {
        let pm = PersistentMemory::new(&cfg());
        let blocks = pm.blocks();
        assert!(matches!(
            pm.read_block(blocks),
            Err(ModelError::BlockOutOfRange { .. })
        ));
    }

    #[test]
    fn single_word_block_write() {
        let mut c = cfg();
        c.b = 1;
        let mut pm = PersistentMemory::new(&c);
        pm.write_block(1, &[9]).unwrap();
        assert_eq!(pm.peek(1).unwrap(), 9);
    }

    #[test]
    fn partial_write_preserves_neighbors() {
        let mut c = cfg();
        c.b = 4;
        let mut pm = PersistentMemory::new(&c);
        pm.write_block(0, &[1, 2, 3, 4]).unwrap();
        pm.write_words(1, &[9, 9]).unwrap();
        assert_eq!(pm.read_block(0).unwrap(), &[1, 9, 9, 4]);
        // Crossing a block boundary is rejected.
        assert!(matches!(
            pm.write_words(3, &[5, 5]),
            Err(ModelError::UnalignedWrite { .. })
        ));
    }

    #[test]
    fn cas_swaps_only_on_match() {
        let mut pm = PersistentMemory::new(&cfg());
        pm.poke(5, 0).unwrap();
        assert!(pm.cas(5, 0, 7).unwrap());
        assert_eq!(pm.peek(5).unwrap(), 7);
        pm.poke(5, 3).unwrap();
        assert!(!pm.cas(5, 0, 7).unwrap());
        assert_eq!(pm.peek(5).unwrap(), 3);
    }

    #[test]
    fn scramble_marks_everything_invalid() {
        let mut eph = EphemeralMemory::new(16);
        eph.write(3, 42);
        assert_eq!(eph.read(3), (42, true));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        eph.scramble(&mut rng);
        let (_, valid) = eph.read(3);
        assert!(!valid);
        eph.write(3, 5);
        assert_eq!(eph.read(3), (5, true));
        // Scrambling is reproducible from the seed.
        let mut e1 = EphemeralMemory::new(16);
        let mut e2 = EphemeralMemory::new(16);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        e1.scramble(&mut r1);
        e2.scramble(&mut r2);
        assert_eq!(e1.read(0).0, e2.read(0).0);
    }

    fn rec(proc: ProcId, capsule: u64, kind: AccessKind, index: usize, ts: u64) -> AccessRecord {
        AccessRecord {
            proc,
            capsule,
            kind,
            index,
            ts,
        }
    }

    #[test]
    fn war_scan_flags_exposed_read_then_write() {
        let mut log = AccessLog::new();
        log.push(rec(0, 1, AccessKind::ExtRead, 3, 0));
        log.push(rec(0, 1, AccessKind::ExtWrite, 3, 1));
        let report = war_conflict_scan(&log, 1).unwrap();
        assert_eq!(report.conflicts.len(), 1);
        assert_eq!(report.conflicts[0].block, 3);
    }

    #[test]
    fn war_scan_accepts_write_first() {
        let mut log = AccessLog::new();
        log.push(rec(0, 1, AccessKind::ExtWrite, 3, 0));
        log.push(rec(0, 1, AccessKind::ExtRead, 3, 1));
        log.push(rec(0, 1, AccessKind::ExtWrite, 3, 2));
        assert!(war_conflict_scan(&log, 1).unwrap().is_conflict_free());
    }

    #[test]
    fn war_scan_accepts_disjoint_blocks() {
        let mut log = AccessLog::new();
        log.push(rec(0, 1, AccessKind::ExtRead, 1, 0));
        log.push(rec(0, 1, AccessKind::ExtWrite, 2, 1));
        assert!(war_conflict_scan(&log, 1).unwrap().is_conflict_free());
    }

    #[test]
    fn war_scan_reports_read_before_write_of_ephemeral_word() {
        let mut log = AccessLog::new();
        log.push(rec(0, 1, AccessKind::LocalRead, 4, 0));
        log.push(rec(0, 1, AccessKind::ExtWrite, 0, 1));
        let report = war_conflict_scan(&log, 1).unwrap();
        assert_eq!(report.ill_formed.len(), 1);
        assert_eq!(report.ill_formed[0].word, 4);
    }

    #[test]
    fn war_scan_unknown_capsule_errors() {
        let log = AccessLog::new();
        assert!(matches!(
            war_conflict_scan(&log, 99),
            Err(ModelError::UnknownCapsule(99))
        ));
    }

    #[test]
    fn race_scan_reports_foreign_write_in_window() {
        let mut log = AccessLog::new();
        log.push(rec(0, 1, AccessKind::ExtRead, 5, 0));
        log.push(rec(1, 2, AccessKind::ExtWrite, 5, 1));
        log.push(rec(0, 1, AccessKind::ExtWrite, 6, 2));
        let report = race_scan(&log, 1, 2, 1).unwrap();
        assert_eq!(report.races.len(), 1);
        assert_eq!(report.races[0].foreign.proc, 1);
    }

    #[test]
    fn race_scan_ignores_read_read_sharing() {
        let mut log = AccessLog::new();
        log.push(rec(0, 1, AccessKind::ExtRead, 5, 0));
        log.push(rec(1, 2, AccessKind::ExtRead, 5, 1));
        log.push(rec(0, 1, AccessKind::ExtWrite, 6, 2));
        assert!(race_scan(&log, 1, 2, 1).unwrap().is_race_free());
    }

    #[test]
    fn race_scan_ignores_writes_after_response() {
        let mut log = AccessLog::new();
        log.push(rec(0, 1, AccessKind::ExtRead, 5, 0));
        log.push(rec(0, 1, AccessKind::ExtWrite, 6, 1));
        // Foreign write lands after the capsule's response.
        log.push(rec(1, 2, AccessKind::ExtWrite, 5, 2));
        assert!(race_scan(&log, 1, 1, 1).unwrap().is_race_free());
    }
}
