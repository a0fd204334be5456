//! Capsules, closures, and the execution context handed to step procedures.
//!
//! A capsule is the run of one installed closure: a contiguous block of
//! persistent memory holding a step-procedure key, a continuation pointer,
//! arguments, and allocator state. Installing a closure (writing the
//! processor's restart pointer) ends the current capsule; a soft fault
//! re-enters the active capsule from its beginning with ephemeral state
//! scrambled.
//!
//! Step procedures are ordinary Rust functions registered under stable
//! integer keys. They must be deterministic functions of their closure
//! words, the values they read through the context, and the context's
//! `rand` stream. The machine re-executes a body from its start each time
//! the processor is granted progress, serving already-performed persistent
//! accesses from a replay log and suspending after each new one, so a
//! single logical execution is interleaved with other processors at
//! persistent-access granularity. A body therefore always exits through
//! [`CapsuleCtx::install`], one of the call helpers, or [`CapsuleCtx::halt`];
//! plain `Ok(())` is a model violation.
//!
//! Closure layout (word offsets from the closure base):
//!
//! ```text
//! 0            step key
//! 1            continuation closure address (0 = nil)
//! 2            argc
//! 3 .. 3+argc  arguments
//! 3+argc       allocation cursor for the capsule that runs this closure
//! 4+argc       arena end (exclusive bound for the cursor)
//! 5+argc       swap-partner closure address for tail-call loops (0 = none)
//! ```

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::ModelError;
use crate::fault::{mix, FaultEngine, FaultKind};
use crate::history::{BoundaryEvent, CapsuleMeta, HistOp, HistRecord, History};
use crate::machine::{DagShadow, ProcRuntime, RecordLevel};
use crate::mem::{CostCounters, MachineConfig, PersistentMemory, Word};
use crate::sched::{DequeWatch, SchedEventRec};
use crate::ProcId;

/// Stable identifier of a registered step procedure.
pub type StepKey = u64;

/// Why a step procedure stopped executing. Bodies propagate this with `?`;
/// only the machine consumes it.
#[derive(Debug)]
pub enum Trap {
    /// A new persistent access was performed; control returns to the
    /// machine so other processors can interleave.
    Suspend,
    /// A fault fired at the trial point before an access.
    Fault(FaultKind),
    /// The model was violated; the run aborts.
    Violation(ModelError),
}

impl From<ModelError> for Trap {
    fn from(e: ModelError) -> Self {
        Trap::Violation(e)
    }
}

/// Result type for step procedures.
pub type StepResult = Result<(), Trap>;

/// A registered step procedure.
pub type StepFn = Arc<dyn Fn(&mut CapsuleCtx<'_>) -> StepResult + Send + Sync>;

#[derive(Clone)]
pub struct StepEntry {
    pub f: StepFn,
    pub name: &'static str,
    /// Scheduler-internal capsules are excluded from user-DAG depth
    /// accounting.
    pub scheduler: bool,
}

/// Maps step keys to procedures. Keys are stable across runs; registering
/// the same key twice is a bug.
#[derive(Clone, Default)]
pub struct CapsuleRegistry {
    steps: BTreeMap<StepKey, StepEntry>,
}

impl CapsuleRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, key: StepKey, name: &'static str, f: F)
    where
        F: Fn(&mut CapsuleCtx<'_>) -> StepResult + Send + Sync + 'static,
    {
        self.insert(key, name, false, Arc::new(f));
    }

    pub fn register_scheduler<F>(&mut self, key: StepKey, name: &'static str, f: F)
    where
        F: Fn(&mut CapsuleCtx<'_>) -> StepResult + Send + Sync + 'static,
    {
        self.insert(key, name, true, Arc::new(f));
    }

    fn insert(&mut self, key: StepKey, name: &'static str, scheduler: bool, f: StepFn) {
        let prev = self.steps.insert(key, StepEntry { f, name, scheduler });
        assert!(prev.is_none(), "step key {key:#x} registered twice");
    }

    pub fn get(&self, key: StepKey) -> Option<&StepEntry> {
        self.steps.get(&key)
    }

    pub fn name(&self, key: StepKey) -> &'static str {
        self.steps.get(&key).map(|e| e.name).unwrap_or("?")
    }
}

impl std::fmt::Debug for CapsuleRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CapsuleRegistry")
            .field("keys", &self.steps.len())
            .finish()
    }
}

/// Offset of the first argument word.
pub const CLOSURE_ARGS: usize = 3;
/// Trailer words after the arguments: cursor, arena end, swap partner.
pub const CLOSURE_TRAILER: usize = 3;
/// Words occupied by a closure with `argc` arguments.
pub fn closure_size(argc: usize) -> usize {
    CLOSURE_ARGS + argc + CLOSURE_TRAILER
}

/// Capacity of a tail-call swap slot; bounds the argc of loop closures.
pub const SWAP_SLOT_WORDS: usize = 24;

/// Description of a closure to be materialized in persistent memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClosureSpec {
    pub key: StepKey,
    pub continuation: Word,
    pub args: Vec<Word>,
    pub cursor: Word,
    pub arena_end: Word,
    pub swap_partner: Word,
}

impl ClosureSpec {
    pub fn new(key: StepKey, continuation: Word, args: Vec<Word>) -> Self {
        ClosureSpec {
            key,
            continuation,
            args,
            cursor: 0,
            arena_end: 0,
            swap_partner: 0,
        }
    }

    pub fn words(&self) -> Vec<Word> {
        let mut w = Vec::with_capacity(closure_size(self.args.len()));
        w.push(self.key);
        w.push(self.continuation);
        w.push(self.args.len() as Word);
        w.extend_from_slice(&self.args);
        w.push(self.cursor);
        w.push(self.arena_end);
        w.push(self.swap_partner);
        w
    }

    pub fn size(&self) -> usize {
        closure_size(self.args.len())
    }
}

/// One completed persistent access of the current attempt, kept so body
/// re-executions can be served without re-touching memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplayEntry {
    Read { block: usize, data: Vec<Word> },
    SlotRead { slot: ProcId, value: Word },
    Write { addr: usize, data: Vec<Word> },
    Cam { addr: usize, expected: Word, new: Word },
    Install { closure: Word },
}

impl ReplayEntry {
    fn describe(&self) -> String {
        match self {
            ReplayEntry::Read { block, .. } => format!("read block {block}"),
            ReplayEntry::SlotRead { slot, .. } => format!("read restart slot {slot}"),
            ReplayEntry::Write { addr, data } => format!("write {} words at {addr}", data.len()),
            ReplayEntry::Cam { addr, .. } => format!("cam at {addr}"),
            ReplayEntry::Install { closure } => format!("install {closure}"),
        }
    }
}

/// Execution context for one step of one capsule body. All persistent
/// accesses, allocation, control transfer, and instrumentation go through
/// here. There is deliberately no `cas` that returns success: a capsule may
/// only compare-and-modify, and learn the outcome by reading in a later
/// capsule.
pub struct CapsuleCtx<'a> {
    pub(crate) cfg: &'a MachineConfig,
    pub(crate) seed: u64,
    pub(crate) pmem: &'a mut PersistentMemory,
    pub(crate) proc: &'a mut ProcRuntime,
    pub(crate) fault: &'a mut FaultEngine,
    pub(crate) hist: &'a mut History,
    pub(crate) counters: &'a mut CostCounters,
    pub(crate) clock: &'a mut u64,
    pub(crate) dag: &'a mut DagShadow,
    pub(crate) watch: &'a mut Option<DequeWatch>,
    pub(crate) events: &'a mut Vec<SchedEventRec>,
    pub(crate) violations: &'a mut Vec<String>,
    pub(crate) record: RecordLevel,
}

impl<'a> CapsuleCtx<'a> {
    // ---- closure access -------------------------------------------------

    pub fn proc_id(&self) -> ProcId {
        self.proc.id
    }

    pub fn config(&self) -> &MachineConfig {
        self.cfg
    }

    pub fn argc(&self) -> usize {
        self.proc.closure_words[2] as usize
    }

    pub fn arg(&self, i: usize) -> Word {
        self.proc.closure_words[CLOSURE_ARGS + i]
    }

    pub fn args(&self) -> &[Word] {
        &self.proc.closure_words[CLOSURE_ARGS..CLOSURE_ARGS + self.argc()]
    }

    pub fn continuation(&self) -> Word {
        self.proc.closure_words[1]
    }

    pub fn closure_addr(&self) -> Word {
        self.proc.closure_addr
    }

    /// Liveness oracle; free and unlogged.
    pub fn is_live(&self, proc: ProcId) -> bool {
        self.fault.is_live(proc)
    }

    /// Deterministic ephemeral randomness: stable across body re-executions
    /// within one attempt, fresh after every fault.
    pub fn rand(&mut self, bound: u64) -> u64 {
        let draw = self.proc.rand_draws;
        self.proc.rand_draws += 1;
        let v = mix(
            self.seed,
            mix(self.proc.id as u64, mix(self.proc.total_attempts, draw)),
        );
        if bound == 0 {
            v
        } else {
            v % bound
        }
    }

    // ---- internals -------------------------------------------------------

    fn in_new_territory(&self) -> bool {
        self.proc.replay_pos == self.proc.replay.len()
    }

    fn diverged(&self, got: String) -> Trap {
        let expected = self.proc.replay[self.proc.replay_pos].describe();
        Trap::Violation(ModelError::ReplayDiverged {
            index: self.proc.replay_pos,
            expected,
            got,
        })
    }

    /// Fault trial before a new persistent access.
    fn trial(&mut self) -> Result<(), Trap> {
        match self.fault.maybe_fault(self.proc.id) {
            None => Ok(()),
            Some(kind) => Err(Trap::Fault(kind)),
        }
    }

    fn charge(&mut self, transfers: u64) {
        self.counters.charge_total(self.proc.id, transfers);
        self.proc.attempt_transfers += transfers;
        if let Some(meta) = self.hist.capsules.get_mut(&self.proc.instance) {
            meta.total_transfers += transfers;
        }
    }

    fn log(&mut self, op: HistOp) -> u64 {
        let ts = *self.clock;
        *self.clock += 1;
        if self.record == RecordLevel::Full {
            self.hist.records.push(HistRecord {
                ts,
                proc: self.proc.id,
                capsule: self.proc.instance,
                op,
            });
        }
        ts
    }

    fn watch_write(&mut self, addr: usize, old: Word, new: Word, cam: bool) {
        if let Some(watch) = self.watch.as_mut() {
            watch.observe_write(addr, old, new, cam, self.proc.id, self.violations);
        }
    }

    // ---- persistent accesses --------------------------------------------

    /// Read one block into ephemeral space. One external transfer.
    pub fn read_block(&mut self, block: usize) -> Result<Vec<Word>, Trap> {
        if !self.in_new_territory() {
            let entry = self.proc.replay[self.proc.replay_pos].clone();
            if let ReplayEntry::Read { block: b, data } = entry {
                if b == block {
                    self.proc.replay_pos += 1;
                    return Ok(data);
                }
            }
            return Err(self.diverged(format!("read block {block}")));
        }
        self.trial()?;
        let data = self.pmem.read_block(block).map_err(Trap::from)?.to_vec();
        self.charge(1);
        self.log(HistOp::Read {
            block,
            data: data.clone(),
        });
        self.proc.replay.push(ReplayEntry::Read { block, data });
        self.proc.replay_pos += 1;
        Err(Trap::Suspend)
    }

    /// Read `n` words starting at `addr`; one transfer per touched block.
    pub fn read_words(&mut self, addr: usize, n: usize) -> Result<Vec<Word>, Trap> {
        let b = self.cfg.b;
        let mut out = Vec::with_capacity(n);
        let mut cur = addr;
        let end = addr + n;
        while cur < end {
            let block = cur / b;
            let data = self.read_block(block)?;
            let lo = cur - block * b;
            let hi = (end - block * b).min(b);
            out.extend_from_slice(&data[lo..hi]);
            cur = (block + 1) * b;
        }
        Ok(out)
    }

    pub fn read_word(&mut self, addr: usize) -> Result<Word, Trap> {
        Ok(self.read_words(addr, 1)?[0])
    }

    /// Write `data` starting at `addr`; one transfer per touched block.
    /// Words of a touched block outside the range are preserved.
    pub fn write_words(&mut self, addr: usize, data: &[Word]) -> Result<(), Trap> {
        let b = self.cfg.b;
        let mut cur = 0usize;
        while cur < data.len() {
            let a = addr + cur;
            let block = a / b;
            let room = (block + 1) * b - a;
            let len = room.min(data.len() - cur);
            self.write_segment(a, &data[cur..cur + len])?;
            cur += len;
        }
        Ok(())
    }

    fn write_segment(&mut self, addr: usize, data: &[Word]) -> Result<(), Trap> {
        if !self.in_new_territory() {
            let entry = self.proc.replay[self.proc.replay_pos].clone();
            if let ReplayEntry::Write { addr: a, data: d } = &entry {
                if *a == addr && d == data {
                    self.proc.replay_pos += 1;
                    return Ok(());
                }
            }
            return Err(self.diverged(format!("write {} words at {addr}", data.len())));
        }
        self.trial()?;
        for (i, w) in data.iter().enumerate() {
            let old = self.pmem.peek(addr + i).map_err(Trap::from)?;
            self.watch_write(addr + i, old, *w, false);
        }
        self.pmem.write_words(addr, data).map_err(Trap::from)?;
        self.charge(1);
        self.log(HistOp::Write {
            addr,
            data: data.to_vec(),
        });
        self.proc.replay.push(ReplayEntry::Write {
            addr,
            data: data.to_vec(),
        });
        self.proc.replay_pos += 1;
        Err(Trap::Suspend)
    }

    pub fn write_block(&mut self, block: usize, data: &[Word]) -> Result<(), Trap> {
        assert_eq!(data.len(), self.cfg.b, "block write must supply B words");
        self.write_words(block * self.cfg.b, data)
    }

    /// Compare-and-modify: atomically swap `addr` from `expected` to `new`
    /// if it matches. The capsule never sees whether it succeeded.
    pub fn cam(&mut self, addr: usize, expected: Word, new: Word) -> Result<(), Trap> {
        if !self.in_new_territory() {
            let entry = self.proc.replay[self.proc.replay_pos].clone();
            if let ReplayEntry::Cam {
                addr: a,
                expected: e,
                new: n,
            } = entry
            {
                if a == addr && e == expected && n == new {
                    self.proc.replay_pos += 1;
                    return Ok(());
                }
            }
            return Err(self.diverged(format!("cam at {addr}")));
        }
        self.trial()?;
        let old = self.pmem.peek(addr).map_err(Trap::from)?;
        let success = self.pmem.cas(addr, expected, new).map_err(Trap::from)?;
        if success {
            self.watch_write(addr, old, new, true);
        }
        self.charge(1);
        self.log(HistOp::Cam {
            addr,
            expected,
            new,
            success,
        });
        self.proc.replay.push(ReplayEntry::Cam {
            addr,
            expected,
            new,
        });
        self.proc.replay_pos += 1;
        Err(Trap::Suspend)
    }

    /// Read another processor's restart pointer. Only meaningful for dead
    /// processors (stealing their in-progress capsule); calling it on a
    /// live one is a model violation.
    pub fn read_restart_slot(&mut self, owner: ProcId) -> Result<Word, Trap> {
        if !self.in_new_territory() {
            let entry = self.proc.replay[self.proc.replay_pos].clone();
            if let ReplayEntry::SlotRead { slot, value } = entry {
                if slot == owner {
                    self.proc.replay_pos += 1;
                    return Ok(value);
                }
            }
            return Err(self.diverged(format!("read restart slot {owner}")));
        }
        if self.fault.is_live(owner) {
            return Err(Trap::Violation(ModelError::ActiveCapsuleOfLive(owner)));
        }
        self.trial()?;
        let value = self.pmem.restart_slot(owner);
        self.charge(1);
        self.log(HistOp::SlotRead { slot: owner, value });
        self.proc.replay.push(ReplayEntry::SlotRead { slot: owner, value });
        self.proc.replay_pos += 1;
        Err(Trap::Suspend)
    }

    // ---- control transfer -------------------------------------------------

    /// Install `closure` as this processor's restart pointer: the final
    /// persistent write of the capsule. The body must return this result.
    pub fn install(&mut self, closure: Word) -> StepResult {
        if !self.in_new_territory() {
            return Err(self.diverged(format!("install {closure}")));
        }
        if self.proc.installed.is_some() {
            return Err(Trap::Violation(ModelError::DoubleInstall(self.proc.id)));
        }
        if closure == 0 || closure as usize >= self.pmem.words() {
            return Err(Trap::Violation(ModelError::BadInstallTarget(closure)));
        }
        self.trial()?;
        self.charge(1);
        let ts = self.log(HistOp::Install {
            slot: self.proc.id,
            closure,
        });
        self.pmem.set_restart_slot(self.proc.id, closure);
        self.proc.replay.push(ReplayEntry::Install { closure });
        self.proc.replay_pos += 1;
        self.proc.installed = Some(closure);
        self.proc.installed_ts = ts;
        Err(Trap::Suspend)
    }

    /// End this processor's participation. Free: no persistent access.
    pub fn halt(&mut self) -> StepResult {
        self.proc.halted = true;
        Err(Trap::Suspend)
    }

    // ---- allocation --------------------------------------------------------

    /// Bump-allocate `n` words from the capsule's arena. Replayed attempts
    /// return identical addresses.
    pub fn alloc(&mut self, n: usize) -> Result<Word, Trap> {
        let addr = self.proc.alloc_cursor;
        let end = addr as usize + n;
        if end > self.proc.arena_end as usize {
            return Err(Trap::Violation(ModelError::OutOfMemory {
                requested: n,
                available: (self.proc.arena_end.saturating_sub(addr)) as usize,
            }));
        }
        self.proc.alloc_cursor = end as Word;
        Ok(addr)
    }

    pub fn alloc_cursor(&self) -> Word {
        self.proc.alloc_cursor
    }

    pub fn arena_end(&self) -> Word {
        self.proc.arena_end
    }

    /// Materialize a closure at a fresh address in the current arena. The
    /// closure inherits the running lineage's cursor (past itself) and
    /// arena unless the spec overrides them (cursor != 0).
    pub fn create_closure(&mut self, mut spec: ClosureSpec) -> Result<Word, Trap> {
        let addr = self.alloc(spec.size())?;
        if spec.cursor == 0 {
            spec.cursor = self.proc.alloc_cursor;
            spec.arena_end = self.proc.arena_end;
        }
        self.write_words(addr as usize, &spec.words())?;
        Ok(addr)
    }

    /// Materialize a closure with its own carved-out arena of `arena_words`
    /// words, taken from the current lineage. Used for forked children so
    /// sibling threads never collide.
    pub fn create_closure_with_arena(
        &mut self,
        mut spec: ClosureSpec,
        arena_words: usize,
    ) -> Result<Word, Trap> {
        let base = self.alloc(arena_words)?;
        if (spec.size()) > arena_words {
            return Err(Trap::Violation(ModelError::OutOfMemory {
                requested: spec.size(),
                available: arena_words,
            }));
        }
        spec.cursor = base + spec.size() as Word;
        spec.arena_end = base + arena_words as Word;
        self.write_words(base as usize, &spec.words())?;
        Ok(base)
    }

    /// Record a creation-time depth for a closure that will run as a forked
    /// child, so DAG depth does not flow through the thief's history.
    pub fn dag_record_spawn(&mut self, closure: Word) {
        let d = self.current_depth();
        let entry = self.dag.closure_depth.entry(closure).or_insert(d);
        *entry = (entry.0.max(d.0), entry.1.max(d.1));
    }

    fn current_depth(&self) -> (u64, u64) {
        (
            self.proc.depth.0 + self.proc.attempt_transfers,
            self.proc.depth.1
                + self
                    .hist
                    .capsules
                    .get(&self.proc.instance)
                    .map(|m| m.total_transfers)
                    .unwrap_or(0),
        )
    }

    /// Record one join arrival for depth accounting.
    pub fn dag_note_arrival(&mut self, token: Word) {
        let d = self.current_depth();
        let entry = self.dag.join_depth.entry(token).or_insert(d);
        *entry = (entry.0.max(d.0), entry.1.max(d.1));
    }

    /// Install the after-join continuation; its depth becomes the max over
    /// recorded arrivals and the installing thread.
    pub fn install_join(&mut self, closure: Word, token: Word) -> StepResult {
        self.proc.pending_join = Some(token);
        self.install(closure)
    }

    // ---- persistent calls ---------------------------------------------------

    /// Tail call: transfer to `key` with `args`, keeping the current
    /// continuation. Loops alternate between two fixed swap slots so a
    /// tail-recursive chain keeps O(1) live closures.
    pub fn tail_call(&mut self, key: StepKey, args: &[Word]) -> StepResult {
        let spec = ClosureSpec {
            key,
            continuation: self.continuation(),
            args: args.to_vec(),
            cursor: self.proc.alloc_cursor,
            arena_end: self.proc.arena_end,
            swap_partner: 0,
        };
        if spec.size() > SWAP_SLOT_WORDS {
            // Oversized frames fall back to ordinary allocation.
            let addr = self.create_closure(spec)?;
            return self.install(addr);
        }
        let (slot, partner) = if self.proc.swap_partner != 0 {
            (self.proc.swap_partner, self.proc.closure_addr)
        } else {
            let a = self.alloc(SWAP_SLOT_WORDS)?;
            let b = self.alloc(SWAP_SLOT_WORDS)?;
            (a, b)
        };
        let mut spec = spec;
        spec.cursor = self.proc.alloc_cursor;
        spec.swap_partner = partner;
        self.write_words(slot as usize, &spec.words())?;
        self.install(slot)
    }

    /// Force a capsule boundary: persist `saved` into a fresh closure for
    /// `resume_key` and install it.
    pub fn commit(&mut self, resume_key: StepKey, saved: &[Word]) -> StepResult {
        self.tail_call(resume_key, saved)
    }

    /// Persistent function call. Creates the continuation closure (running
    /// `resume_key` with `saved` followed by `result_slots` zeroed words)
    /// and the callee closure (running `callee_key` with `callee_args`
    /// followed by the result base address), then installs the callee.
    /// The callee chain finishes with [`CapsuleCtx::ret`].
    pub fn call(
        &mut self,
        callee_key: StepKey,
        callee_args: &[Word],
        resume_key: StepKey,
        saved: &[Word],
        result_slots: usize,
    ) -> StepResult {
        let mut cont_args = saved.to_vec();
        cont_args.extend(std::iter::repeat(0).take(result_slots));
        let cont_spec = ClosureSpec {
            key: resume_key,
            continuation: self.continuation(),
            args: cont_args,
            // Placeholder; ret() persists the final cursor into the
            // continuation before installing it.
            cursor: 1,
            arena_end: 1,
            swap_partner: 0,
        };
        let cont = self.create_closure(cont_spec)?;
        let result_base = cont + CLOSURE_ARGS as Word + saved.len() as Word;
        let mut args = callee_args.to_vec();
        args.push(result_base);
        let callee = self.create_closure(ClosureSpec::new(callee_key, cont, args))?;
        self.install(callee)
    }

    /// Return from a persistent call: write `results` into the caller's
    /// result slots, persist the allocation cursor into the continuation,
    /// and install it. By convention the result base is the callee's last
    /// argument (placed there by [`CapsuleCtx::call`]).
    pub fn ret(&mut self, results: &[Word]) -> StepResult {
        let cont = self.continuation();
        if cont == 0 {
            return Err(Trap::Violation(ModelError::Other(
                "ret with nil continuation".into(),
            )));
        }
        if !results.is_empty() {
            let result_base = self.arg(self.argc() - 1) as usize;
            self.write_words(result_base, results)?;
        }
        // Continuation trailer: cursor and arena of the ongoing lineage.
        let cont_argc = self.pmem.peek(cont as usize + 2).map_err(Trap::from)? as usize;
        let trailer = cont as usize + CLOSURE_ARGS + cont_argc;
        let cursor = self.proc.alloc_cursor;
        let arena = self.proc.arena_end;
        self.write_words(trailer, &[cursor, arena])?;
        self.install(cont)
    }

    // ---- ephemeral accesses ---------------------------------------------

    /// Read an ephemeral word: returns its content and whether it has been
    /// written since the last fault. Free.
    pub fn local_read(&mut self, index: usize) -> (Word, bool) {
        if self.in_new_territory() {
            self.log(HistOp::LocalRead { word: index });
        }
        self.proc.eph.read(index)
    }

    pub fn local_write(&mut self, index: usize, value: Word) {
        if self.in_new_territory() {
            self.log(HistOp::LocalWrite { word: index });
        }
        self.proc.eph_dirty = true;
        self.proc.eph.write(index, value);
    }

    pub fn reg_read(&mut self, index: usize) -> (Word, bool) {
        self.proc.eph.read_reg(index)
    }

    pub fn reg_write(&mut self, index: usize, value: Word) {
        self.proc.eph_dirty = true;
        self.proc.eph.write_reg(index, value);
    }

    // ---- instrumentation ---------------------------------------------------

    /// Scheduling hint: thieves yield before each steal attempt. Strategies
    /// may consume or ignore it.
    pub fn yield_hint(&mut self) {
        self.proc.yielded = true;
    }

    /// Emit a scheduler trace event (deduplicated across re-executions).
    pub fn emit(&mut self, event: SchedEventRec) {
        if self.in_new_territory() {
            self.events.push(event);
        }
    }

    /// Count host-side arithmetic toward the capsule's operation-count
    /// proxy (deduplicated across re-executions).
    pub fn count_ops(&mut self, n: u64) {
        if self.in_new_territory() {
            if let Some(meta) = self.hist.capsules.get_mut(&self.proc.instance) {
                meta.op_count += n;
            }
        }
    }
}

/// Boundary-event helper used by the machine.
pub(crate) fn boundary(
    ts: u64,
    proc: ProcId,
    capsule: u64,
    kind: crate::history::BoundaryKind,
    fault: Option<FaultKind>,
) -> BoundaryEvent {
    BoundaryEvent {
        ts,
        proc,
        capsule,
        kind,
        fault,
    }
}

/// Fresh capsule metadata.
pub(crate) fn new_meta(
    id: u64,
    proc: ProcId,
    key: StepKey,
    closure: Word,
    invocation_ts: u64,
) -> CapsuleMeta {
    CapsuleMeta {
        id,
        proc,
        key,
        closure,
        invocation_ts,
        response_ts: None,
        attempts: 1,
        final_transfers: 0,
        total_transfers: 0,
        op_count: 0,
    }
}
