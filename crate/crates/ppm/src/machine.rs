//! The parallel machine: interleaves virtual processors over shared
//! persistent memory with sequential consistency. One machine step grants
//! one processor one persistent access (or a fault, or a capsule
//! completion); a pluggable strategy decides the order. Everything is
//! deterministic given the configuration, fault model, and strategy seed.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::capsule::{boundary, new_meta, CapsuleCtx, CapsuleRegistry, StepKey, Trap};
use crate::error::{ModelError, RunError};
use crate::fault::{mix, FaultEngine, FaultKind, FaultModel};
use crate::history::{BoundaryKind, History};
use crate::mem::{CostCounters, EphemeralMemory, MachineConfig, PersistentMemory, Word};
use crate::metrics::CostReport;
use crate::sched::{DequeWatch, SchedEventRec};
use crate::ProcId;

/// How much of the run is retained. `Full` keeps every instruction record;
/// `CostOnly` keeps capsule metadata, events, and counters, which the large
/// statistical suites rely on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordLevel {
    Full,
    CostOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcStatus {
    Running,
    Halted,
    Dead,
}

/// Per-processor runtime state.
#[derive(Debug, Clone)]
pub struct ProcRuntime {
    pub id: ProcId,
    pub status: ProcStatus,
    pub eph: EphemeralMemory,
    pub(crate) eph_snapshot: EphemeralMemory,
    pub(crate) eph_dirty: bool,
    pub(crate) replay: Vec<crate::capsule::ReplayEntry>,
    pub(crate) replay_pos: usize,
    pub(crate) closure_addr: Word,
    pub(crate) closure_words: Vec<Word>,
    pub(crate) instance: u64,
    pub(crate) is_sched_capsule: bool,
    /// Monotone attempt nonce feeding the ephemeral rand stream.
    pub(crate) total_attempts: u64,
    pub(crate) attempt_transfers: u64,
    pub(crate) rand_draws: u64,
    pub(crate) installed: Option<Word>,
    pub(crate) installed_ts: u64,
    pub(crate) halted: bool,
    pub(crate) needs_begin: bool,
    pub(crate) alloc_cursor: Word,
    pub(crate) arena_end: Word,
    pub(crate) swap_partner: Word,
    /// DAG depth (faultless, fault-tolerant) at this capsule's entry.
    pub(crate) depth: (u64, u64),
    pub(crate) pending_join: Option<Word>,
    pub(crate) yielded: bool,
}

impl ProcRuntime {
    fn new(id: ProcId, m: usize) -> Self {
        ProcRuntime {
            id,
            status: ProcStatus::Running,
            eph: EphemeralMemory::new(m),
            eph_snapshot: EphemeralMemory::new(m),
            eph_dirty: false,
            replay: Vec::new(),
            replay_pos: 0,
            closure_addr: 0,
            closure_words: Vec::new(),
            instance: u64::MAX,
            is_sched_capsule: false,
            total_attempts: 0,
            attempt_transfers: 0,
            rand_draws: 0,
            installed: None,
            installed_ts: 0,
            halted: false,
            needs_begin: true,
            alloc_cursor: 0,
            arena_end: 0,
            swap_partner: 0,
            depth: (0, 0),
            pending_join: None,
            yielded: false,
        }
    }
}

/// Shadow DAG-depth bookkeeping (instrumentation; not part of the model).
#[derive(Debug, Clone, Default)]
pub struct DagShadow {
    /// Pending entry depth for closures created by forks or installs.
    pub closure_depth: BTreeMap<Word, (u64, u64)>,
    /// Max arrival depth per join token.
    pub join_depth: BTreeMap<Word, (u64, u64)>,
    /// Max over completed capsules of exit depth.
    pub max_depth: (u64, u64),
}

/// Interleaving strategy for normal (non-exhaustive) runs. Each round every
/// eligible processor is granted one step; the strategy fixes the order.
#[derive(Debug, Clone)]
pub enum Strategy {
    RoundRobin,
    /// Shuffled order each round, seeded.
    Random(u64),
    /// Explicit step sequence (processor ids); falls back to round-robin
    /// when exhausted. Ineligible entries are skipped.
    Scripted(Vec<ProcId>),
}

/// What one machine step did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    /// Performed one persistent access and suspended.
    Progress,
    /// Completed a capsule (its install was the access).
    CapsuleEnd,
    /// The processor halted.
    HaltedNow,
    Faulted(FaultKind),
    /// Processor was not eligible to run.
    Idle,
}

/// Summary of a finished run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: CostReport,
    /// Capsule instances executed (scheduler included).
    pub capsule_count: u64,
    /// Max attempts over all capsule instances.
    pub max_attempts: u64,
    /// Invariant violations collected by watchers (empty on healthy runs).
    pub violations: Vec<String>,
    pub rounds: u64,
    pub steps: u64,
}

/// The deterministic Parallel-PM executor.
#[derive(Clone)]
pub struct Machine {
    cfg: MachineConfig,
    seed: u64,
    pub(crate) pmem: PersistentMemory,
    pub(crate) procs: Vec<ProcRuntime>,
    pub(crate) fault: FaultEngine,
    registry: Arc<CapsuleRegistry>,
    pub(crate) hist: History,
    pub(crate) counters: CostCounters,
    clock: u64,
    next_instance: u64,
    pub(crate) dag: DagShadow,
    pub(crate) watch: Option<DequeWatch>,
    pub(crate) events: Vec<SchedEventRec>,
    pub(crate) violations: Vec<String>,
    record: RecordLevel,
    done_word: Option<usize>,
    scramble_count: u64,
    dag_meaningful: bool,
    rounds: u64,
    granted: u64,
    steps: u64,
}

impl std::fmt::Debug for Machine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Machine")
            .field("cfg", &self.cfg)
            .field("clock", &self.clock)
            .field("steps", &self.steps)
            .finish()
    }
}

impl Machine {
    pub fn new(cfg: MachineConfig, model: FaultModel, registry: Arc<CapsuleRegistry>) -> Self {
        cfg.validate().expect("invalid machine configuration");
        let seed = model.seed;
        let p = cfg.p;
        let m = cfg.m;
        Machine {
            pmem: PersistentMemory::new(&cfg),
            procs: (0..p).map(|i| ProcRuntime::new(i, m)).collect(),
            fault: FaultEngine::new(model, p),
            registry,
            hist: History::new(cfg.b),
            counters: CostCounters::new(p),
            clock: 0,
            next_instance: 0,
            dag: DagShadow::default(),
            watch: None,
            events: Vec::new(),
            violations: Vec::new(),
            record: RecordLevel::Full,
            done_word: None,
            scramble_count: 0,
            dag_meaningful: p == 1,
            rounds: 0,
            granted: 0,
            steps: 0,
            cfg,
            seed,
        }
    }

    pub fn config(&self) -> &MachineConfig {
        &self.cfg
    }

    pub fn pmem(&self) -> &PersistentMemory {
        &self.pmem
    }

    pub fn pmem_mut(&mut self) -> &mut PersistentMemory {
        &mut self.pmem
    }

    pub fn history(&self) -> &History {
        &self.hist
    }

    pub fn events(&self) -> &[SchedEventRec] {
        &self.events
    }

    pub fn violations(&self) -> &[String] {
        &self.violations
    }

    pub fn counters(&self) -> &CostCounters {
        &self.counters
    }

    pub fn fault_engine(&self) -> &FaultEngine {
        &self.fault
    }

    pub fn set_record_level(&mut self, level: RecordLevel) {
        self.record = level;
    }

    pub fn set_done_word(&mut self, addr: usize) {
        self.done_word = Some(addr);
    }

    pub fn set_deque_watch(&mut self, watch: DequeWatch) {
        self.watch = Some(watch);
    }

    pub fn set_dag_meaningful(&mut self, v: bool) {
        self.dag_meaningful = v;
    }

    pub fn proc_status(&self, p: ProcId) -> ProcStatus {
        self.procs[p].status
    }

    /// Set up a processor's first capsule. The closure must already be in
    /// persistent memory (setup pokes are not costed).
    pub fn boot_proc(&mut self, p: ProcId, closure: Word) -> Result<(), ModelError> {
        self.pmem.set_restart_slot(p, closure);
        self.begin_capsule(p, closure, 0)?;
        Ok(())
    }

    fn begin_capsule(&mut self, p: ProcId, closure: Word, invocation_ts: u64) -> Result<(), ModelError> {
        let size_guess = {
            let argc = self.pmem.peek(closure as usize + 2)? as usize;
            crate::capsule::closure_size(argc)
        };
        let words = self
            .pmem
            .peek_range(closure as usize, size_guess)?
            .to_vec();
        let key = words[0];
        let entry = self
            .registry
            .get(key)
            .ok_or(ModelError::UnknownKey(key))?;
        let is_sched = entry.scheduler;
        let id = self.next_instance;
        self.next_instance += 1;
        self.hist
            .capsules
            .insert(id, new_meta(id, p, key, closure, invocation_ts));
        let depth = self
            .dag
            .closure_depth
            .remove(&closure)
            .unwrap_or(self.procs[p].depth);
        let proc = &mut self.procs[p];
        proc.closure_addr = closure;
        proc.closure_words = words;
        proc.instance = id;
        proc.is_sched_capsule = is_sched;
        proc.replay.clear();
        proc.replay_pos = 0;
        proc.attempt_transfers = 0;
        proc.installed = None;
        proc.halted = false;
        proc.needs_begin = true;
        proc.pending_join = None;
        proc.depth = depth;
        Ok(())
    }

    /// Start (or restart) the current capsule attempt: charge the constant
    /// capsule start cost and snapshot ephemeral state.
    fn begin_attempt(&mut self, p: ProcId) {
        let proc = &mut self.procs[p];
        proc.needs_begin = false;
        proc.total_attempts += 1;
        proc.attempt_transfers = 0;
        proc.eph_snapshot = proc.eph.clone();
        proc.eph_dirty = false;
        // Fixed charge per attempt: restart pointer plus closure header.
        self.counters.charge_total(p, 2);
        self.procs[p].attempt_transfers += 2;
        if let Some(meta) = self.hist.capsules.get_mut(&self.procs[p].instance) {
            meta.total_transfers += 2;
        }
    }

    /// Grant `p` one step. Runs the capsule body with replay; the body
    /// performs at most one new persistent access before control returns.
    pub fn step_proc(&mut self, p: ProcId) -> Result<StepOutcome, ModelError> {
        if self.procs[p].status != ProcStatus::Running {
            return Ok(StepOutcome::Idle);
        }
        self.steps += 1;
        if self.procs[p].needs_begin {
            self.begin_attempt(p);
        }
        {
            let proc = &mut self.procs[p];
            proc.replay_pos = 0;
            proc.rand_draws = 0;
            proc.installed = None;
            if proc.eph_dirty {
                proc.eph = proc.eph_snapshot.clone();
                proc.eph_dirty = false;
            }
            let argc = proc.closure_words[2] as usize;
            proc.alloc_cursor = proc.closure_words[crate::capsule::CLOSURE_ARGS + argc];
            proc.arena_end = proc.closure_words[crate::capsule::CLOSURE_ARGS + argc + 1];
            proc.swap_partner = proc.closure_words[crate::capsule::CLOSURE_ARGS + argc + 2];
        }
        let key = self.procs[p].closure_words[0];
        let step = self
            .registry
            .get(key)
            .ok_or(ModelError::UnknownKey(key))?
            .f
            .clone();
        let result = {
            let mut ctx = CapsuleCtx {
                cfg: &self.cfg,
                seed: self.seed,
                pmem: &mut self.pmem,
                proc: &mut self.procs[p],
                fault: &mut self.fault,
                hist: &mut self.hist,
                counters: &mut self.counters,
                clock: &mut self.clock,
                dag: &mut self.dag,
                watch: &mut self.watch,
                events: &mut self.events,
                violations: &mut self.violations,
                record: self.record,
            };
            (step)(&mut ctx)
        };
        match result {
            Err(Trap::Suspend) => {
                if let Some(next) = self.procs[p].installed {
                    self.finish_capsule(p, next)?;
                    Ok(StepOutcome::CapsuleEnd)
                } else if self.procs[p].halted {
                    self.finish_halt(p);
                    Ok(StepOutcome::HaltedNow)
                } else {
                    Ok(StepOutcome::Progress)
                }
            }
            Err(Trap::Fault(kind)) => {
                self.apply_fault(p, kind);
                Ok(StepOutcome::Faulted(kind))
            }
            Err(Trap::Violation(e)) => Err(e),
            Ok(()) => Err(ModelError::EndWithoutInstall(key)),
        }
    }

    fn finish_capsule(&mut self, p: ProcId, next: Word) -> Result<(), ModelError> {
        let (transfers, ts, instance, is_sched, depth, pending_join) = {
            let proc = &self.procs[p];
            (
                proc.attempt_transfers,
                proc.installed_ts,
                proc.instance,
                proc.is_sched_capsule,
                proc.depth,
                proc.pending_join,
            )
        };
        self.counters.settle_final_attempt(p, transfers);
        let total = {
            let meta = self.hist.capsules.get_mut(&instance).expect("open capsule");
            meta.response_ts = Some(ts);
            meta.final_transfers = transfers;
            meta.total_transfers
        };
        self.hist
            .boundaries
            .push(boundary(ts, p, instance, BoundaryKind::Install, None));
        if !is_sched {
            let mut out = (depth.0 + transfers, depth.1 + total);
            if let Some(token) = pending_join {
                if let Some(j) = self.dag.join_depth.remove(&token) {
                    out = (out.0.max(j.0), out.1.max(j.1));
                }
            }
            self.dag.max_depth = (self.dag.max_depth.0.max(out.0), self.dag.max_depth.1.max(out.1));
            self.dag.closure_depth.insert(next, out);
            self.procs[p].depth = out;
        }
        self.begin_capsule(p, next, ts)?;
        Ok(())
    }

    fn finish_halt(&mut self, p: ProcId) {
        let (transfers, instance) = {
            let proc = &self.procs[p];
            (proc.attempt_transfers, proc.instance)
        };
        self.counters.settle_final_attempt(p, transfers);
        if let Some(meta) = self.hist.capsules.get_mut(&instance) {
            meta.response_ts = Some(self.clock);
            meta.final_transfers = transfers;
        }
        self.procs[p].status = ProcStatus::Halted;
    }

    fn apply_fault(&mut self, p: ProcId, kind: FaultKind) {
        let instance = self.procs[p].instance;
        self.hist.boundaries.push(boundary(
            self.clock,
            p,
            instance,
            BoundaryKind::Fault,
            Some(kind),
        ));
        match kind {
            FaultKind::Soft => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, 0x5c7a ^ self.scramble_count));
                self.scramble_count += 1;
                let proc = &mut self.procs[p];
                proc.eph.scramble(&mut rng);
                proc.eph_snapshot = proc.eph.clone();
                proc.eph_dirty = false;
                proc.replay.clear();
                proc.replay_pos = 0;
                proc.needs_begin = true;
                if let Some(meta) = self.hist.capsules.get_mut(&instance) {
                    meta.attempts += 1;
                }
                self.hist.boundaries.push(boundary(
                    self.clock,
                    p,
                    instance,
                    BoundaryKind::Restart,
                    None,
                ));
            }
            FaultKind::Hard => {
                self.procs[p].status = ProcStatus::Dead;
            }
        }
    }

    fn eligible(&self) -> Vec<ProcId> {
        self.procs
            .iter()
            .filter(|pr| pr.status == ProcStatus::Running)
            .map(|pr| pr.id)
            .collect()
    }

    fn done(&self) -> bool {
        if let Some(addr) = self.done_word {
            if self.pmem.peek(addr).map(|w| w != 0).unwrap_or(false) {
                return true;
            }
        }
        self.eligible().is_empty()
    }

    /// Run to completion: all processors halted/dead, or the configured
    /// done word becomes nonzero, or the step budget runs out.
    pub fn run(&mut self, strategy: &Strategy, step_budget: u64) -> Result<RunOutcome, RunError> {
        let mut rng = match strategy {
            Strategy::Random(seed) => Some(ChaCha8Rng::seed_from_u64(*seed)),
            _ => None,
        };
        let mut script_pos = 0usize;
        while !self.done() {
            let mut order = self.eligible();
            match strategy {
                Strategy::RoundRobin => {}
                Strategy::Random(_) => {
                    order.shuffle(rng.as_mut().unwrap());
                }
                Strategy::Scripted(script) => {
                    if script_pos < script.len() {
                        // Consume one scripted grant per "round".
                        let p = script[script_pos];
                        script_pos += 1;
                        order = if order.contains(&p) { vec![p] } else { vec![] };
                    }
                }
            }
            let mut granted_this_round = 0u64;
            for p in order {
                if self.steps >= step_budget {
                    return Err(RunError::Timeout {
                        budget: step_budget,
                        partial: Box::new(self.report()),
                    });
                }
                if self.procs[p].status != ProcStatus::Running {
                    continue;
                }
                self.step_proc(p)?;
                granted_this_round += 1;
                if let Some(addr) = self.done_word {
                    if self.pmem.peek(addr).map(|w| w != 0).unwrap_or(false) {
                        break;
                    }
                }
            }
            self.rounds += 1;
            self.granted += granted_this_round;
            if granted_this_round == 0 && matches!(strategy, Strategy::RoundRobin | Strategy::Random(_)) {
                // No runnable processor made progress; nothing will change.
                break;
            }
        }
        Ok(self.outcome())
    }

    /// Cost report for the run so far.
    pub fn report(&self) -> CostReport {
        let p_a = if self.rounds == 0 {
            0.0
        } else {
            self.granted as f64 / self.rounds as f64
        };
        CostReport {
            w: self.counters.w,
            w_f: self.counters.w_f,
            d: self.dag_meaningful.then_some(self.dag.max_depth.0),
            d_f: self.dag_meaningful.then_some(self.dag.max_depth.1),
            t: self.counters.t(),
            t_f: self.counters.t_f(),
            c: self.counters.max_capsule_work,
            p: self.cfg.p as u64,
            p_a,
        }
    }

    pub fn outcome(&self) -> RunOutcome {
        let max_attempts = self
            .hist
            .capsules
            .values()
            .map(|m| m.attempts)
            .max()
            .unwrap_or(0);
        RunOutcome {
            report: self.report(),
            capsule_count: self.next_instance,
            max_attempts,
            violations: self.violations.clone(),
            rounds: self.rounds,
            steps: self.steps,
        }
    }

    /// Raw single-word CAS executed outside any capsule, for machine-level
    /// tests and verification scenarios. Counts as one access by `p`.
    pub fn raw_cas(
        &mut self,
        p: ProcId,
        addr: usize,
        expected: Word,
        new: Word,
    ) -> Result<bool, ModelError> {
        if self.procs[p].status == ProcStatus::Dead {
            return Err(ModelError::DeadProcessor(p));
        }
        let old = self.pmem.peek(addr)?;
        let success = self.pmem.cas(addr, expected, new)?;
        if success {
            if let Some(watch) = self.watch.as_mut() {
                watch.observe_write(addr, old, new, true, p, &mut self.violations);
            }
        }
        self.counters.charge_total(p, 1);
        self.counters.settle_final_attempt(p, 1);
        let ts = self.clock;
        self.clock += 1;
        if self.record == RecordLevel::Full {
            self.hist.records.push(crate::history::HistRecord {
                ts,
                proc: p,
                capsule: u64::MAX,
                op: crate::history::HistOp::Cas {
                    addr,
                    expected,
                    new,
                    success,
                },
            });
        }
        Ok(success)
    }

    /// Registry key of the capsule a processor is currently in (for tests
    /// asserting restart entry points).
    pub fn active_key(&self, p: ProcId) -> StepKey {
        self.procs[p].closure_words.first().copied().unwrap_or(0)
    }

    pub fn active_closure(&self, p: ProcId) -> Word {
        self.procs[p].closure_addr
    }
}
