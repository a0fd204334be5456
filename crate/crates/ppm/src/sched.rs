//! Fault-tolerant work stealing.
//!
//! Each processor owns a deque of tagged entries living in persistent
//! memory. Owners push and pop at the bottom; thieves steal from the top
//! with compare-and-modify only, helping each other finish in-flight steals
//! so nothing blocks. A thief that finds a dead owner's in-progress thread
//! at the top steals the owner's active capsule through its restart
//! pointer, so completed capsules are never re-run.
//!
//! Entries are packed into one word so a single CAM covers the tag and the
//! state together:
//!
//! ```text
//! bits 58..59  kind (0 empty, 1 local, 2 job, 3 taken)
//! bits 42..57  tag (monotone per entry; defeats ABA)
//! bits 16..41  payload A (job: closure address; taken: thief entry address)
//! bits  0..15  payload B (taken: thief tag at steal time)
//! ```
//!
//! Deque region layout per processor, from `base + p * (2 + S)`:
//! `[top][bot][entry 0][entry 1] .. [entry S-1]`. Entry 0 is a sentinel
//! `taken` so `popBottom` can always read one entry below `bot`.
//!
//! Capsule boundaries sit exactly at the protocol's commit points, and
//! every CAM runs in its own capsule chain position, which is what makes
//! the whole scheduler idempotent under soft faults and recoverable under
//! hard ones.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::capsule::{CapsuleCtx, CapsuleRegistry, ClosureSpec, StepKey, StepResult, Trap};
use crate::error::ModelError;
use crate::history::{HistOp, History};
use crate::machine::Machine;
use crate::mem::{MachineConfig, PersistentMemory, Word};
use crate::ProcId;

// ---------------------------------------------------------------------------
// Entry packing
// ---------------------------------------------------------------------------

const KIND_SHIFT: u32 = 58;
const TAG_SHIFT: u32 = 42;
const A_SHIFT: u32 = 16;
const TAG_MASK: Word = 0xFFFF;
const A_MASK: Word = 0x3FF_FFFF;
const B_MASK: Word = 0xFFFF;

pub const KIND_EMPTY: u8 = 0;
pub const KIND_LOCAL: u8 = 1;
pub const KIND_JOB: u8 = 2;
pub const KIND_TAKEN: u8 = 3;

/// Deque entry state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Entry {
    Empty,
    Local,
    Job { closure: Word },
    Taken { thief_entry: Word, thief_tag: Word },
}

impl Entry {
    pub fn kind(&self) -> u8 {
        match self {
            Entry::Empty => KIND_EMPTY,
            Entry::Local => KIND_LOCAL,
            Entry::Job { .. } => KIND_JOB,
            Entry::Taken { .. } => KIND_TAKEN,
        }
    }
}

/// Entry together with its ABA tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaggedEntry {
    pub tag: Word,
    pub entry: Entry,
}

impl TaggedEntry {
    pub fn new(tag: Word, entry: Entry) -> Self {
        TaggedEntry { tag, entry }
    }
}

pub fn pack_entry(te: TaggedEntry) -> Word {
    assert!(te.tag <= TAG_MASK, "entry tag overflow");
    let (a, b) = match te.entry {
        Entry::Empty | Entry::Local => (0, 0),
        Entry::Job { closure } => {
            assert!(closure <= A_MASK, "job closure address overflow");
            (closure, 0)
        }
        Entry::Taken {
            thief_entry,
            thief_tag,
        } => {
            assert!(thief_entry <= A_MASK, "thief entry address overflow");
            assert!(thief_tag <= B_MASK, "thief tag overflow");
            (thief_entry, thief_tag)
        }
    };
    ((te.entry.kind() as Word) << KIND_SHIFT) | (te.tag << TAG_SHIFT) | (a << A_SHIFT) | b
}

pub fn unpack_entry(w: Word) -> TaggedEntry {
    let kind = ((w >> KIND_SHIFT) & 0b11) as u8;
    let tag = (w >> TAG_SHIFT) & TAG_MASK;
    let a = (w >> A_SHIFT) & A_MASK;
    let b = w & B_MASK;
    let entry = match kind {
        KIND_EMPTY => Entry::Empty,
        KIND_LOCAL => Entry::Local,
        KIND_JOB => Entry::Job { closure: a },
        _ => Entry::Taken {
            thief_entry: a,
            thief_tag: b,
        },
    };
    TaggedEntry { tag, entry }
}

pub fn entry_kind(w: Word) -> u8 {
    ((w >> KIND_SHIFT) & 0b11) as u8
}

pub fn entry_tag(w: Word) -> Word {
    (w >> TAG_SHIFT) & TAG_MASK
}

// ---------------------------------------------------------------------------
// Deque layout
// ---------------------------------------------------------------------------

/// Where the deque regions live in persistent memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DequeLayout {
    pub base: usize,
    pub p: usize,
    pub s: usize,
}

impl DequeLayout {
    pub fn region_words(&self) -> usize {
        2 + self.s
    }

    pub fn top_addr(&self, proc: ProcId) -> usize {
        self.base + proc * self.region_words()
    }

    pub fn bot_addr(&self, proc: ProcId) -> usize {
        self.top_addr(proc) + 1
    }

    pub fn entry_addr(&self, proc: ProcId, i: usize) -> usize {
        self.top_addr(proc) + 2 + i
    }

    pub fn end(&self) -> usize {
        self.base + self.p * self.region_words()
    }

    /// Classify an address within the watched region.
    pub fn classify(&self, addr: usize) -> Option<DequeField> {
        if addr < self.base || addr >= self.end() {
            return None;
        }
        let off = addr - self.base;
        let proc = off / self.region_words();
        match off % self.region_words() {
            0 => Some(DequeField::Top(proc)),
            1 => Some(DequeField::Bot(proc)),
            i => Some(DequeField::Entry(proc, i - 2)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DequeField {
    Top(ProcId),
    Bot(ProcId),
    Entry(ProcId, usize),
}

// ---------------------------------------------------------------------------
// Trace events
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedEvent {
    Fork,
    PopBottom,
    Steal,
    Help,
    Clear,
    LocalSteal,
}

/// Scheduler trace record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedEventRec {
    pub proc: ProcId,
    pub event: SchedEvent,
    pub victim: Option<ProcId>,
    pub index: Option<usize>,
    pub tag: Option<Word>,
}

// ---------------------------------------------------------------------------
// Online invariant watcher
// ---------------------------------------------------------------------------

/// Observes every write and successful CAM against the deque regions,
/// checking entry-state transition legality and pointer monotonicity, and
/// counting the semantic scheduler events (a `job -> local` transition is a
/// successful popBottom, and so on). Counts are exact: the tags make each
/// such transition happen at most once per entry state.
#[derive(Debug, Clone)]
pub struct DequeWatch {
    pub layout: DequeLayout,
    top_floor: Vec<Word>,
    /// successful pops at the bottom (job -> local by owner side).
    pub pops_bottom: Vec<u64>,
    /// successful steals of job entries (job -> taken).
    pub steals: Vec<u64>,
    /// successful steals of local entries (local -> taken).
    pub local_steals: Vec<u64>,
    /// jobs pushed (local -> job).
    pub pushes: Vec<u64>,
}

impl DequeWatch {
    pub fn new(layout: DequeLayout) -> Self {
        DequeWatch {
            top_floor: vec![0; layout.p],
            pops_bottom: vec![0; layout.p],
            steals: vec![0; layout.p],
            local_steals: vec![0; layout.p],
            pushes: vec![0; layout.p],
            layout,
        }
    }

    pub(crate) fn observe_write(
        &mut self,
        addr: usize,
        old: Word,
        new: Word,
        _cam: bool,
        by: ProcId,
        violations: &mut Vec<String>,
    ) {
        match self.layout.classify(addr) {
            None => {}
            Some(DequeField::Top(p)) => {
                if new < old || new < self.top_floor[p] {
                    violations.push(format!(
                        "deque {p}: top moved backwards {old} -> {new} (by p{by})"
                    ));
                }
                self.top_floor[p] = self.top_floor[p].max(new);
            }
            Some(DequeField::Bot(p)) => {
                if new < 1 {
                    violations.push(format!(
                        "deque {p}: bot {new} below its initial index (by p{by})"
                    ));
                }
            }
            Some(DequeField::Entry(p, i)) => {
                let o = unpack_entry(old);
                let n = unpack_entry(new);
                match (o.entry.kind(), n.entry.kind()) {
                    (KIND_EMPTY, KIND_LOCAL) => {}
                    (KIND_EMPTY, KIND_EMPTY) | (KIND_LOCAL, KIND_LOCAL) => {
                        // Tag bumps and identical rewrites from capsule
                        // restarts.
                    }
                    (KIND_LOCAL, KIND_EMPTY) => {}
                    (KIND_LOCAL, KIND_JOB) => self.pushes[p] += 1,
                    (KIND_LOCAL, KIND_TAKEN) => self.local_steals[p] += 1,
                    (KIND_JOB, KIND_LOCAL) => self.pops_bottom[p] += 1,
                    (KIND_JOB, KIND_TAKEN) => self.steals[p] += 1,
                    (ok, nk) => {
                        violations.push(format!(
                            "deque {p} entry {i}: illegal transition kind {ok} -> {nk} \
                             ({old:#x} -> {new:#x}, by p{by})"
                        ));
                    }
                }
                if n.entry.kind() != o.entry.kind() && n.tag <= o.tag {
                    violations.push(format!(
                        "deque {p} entry {i}: state change without tag bump \
                         ({old:#x} -> {new:#x}, by p{by})"
                    ));
                }
            }
        }
    }

    /// Structural check of one deque: entries must read, bottom to top of
    /// the array, as takens, then jobs, then up to two locals, then
    /// empties; `top` sits at or one before the first entry after the
    /// takens, `bot` within the locals (or at the first empty when there
    /// are none).
    pub fn check_structure(
        &self,
        pmem: &PersistentMemory,
        proc: ProcId,
        violations: &mut Vec<String>,
    ) {
        let lay = &self.layout;
        let mut kinds = Vec::with_capacity(lay.s);
        for i in 0..lay.s {
            let w = pmem.peek(lay.entry_addr(proc, i)).unwrap_or(0);
            kinds.push(entry_kind(w));
        }
        let mut i = 0;
        while i < kinds.len() && kinds[i] == KIND_TAKEN {
            i += 1;
        }
        let takens = i;
        while i < kinds.len() && kinds[i] == KIND_JOB {
            i += 1;
        }
        let jobs = i - takens;
        let mut locals = 0;
        while i < kinds.len() && kinds[i] == KIND_LOCAL {
            locals += 1;
            i += 1;
        }
        if locals > 2 {
            violations.push(format!("deque {proc}: {locals} local entries"));
        }
        if kinds[i..].iter().any(|k| *k != KIND_EMPTY) {
            violations.push(format!(
                "deque {proc}: entry order violated (kinds {kinds:?})"
            ));
        }
        let top = pmem.peek(lay.top_addr(proc)).unwrap_or(0) as usize;
        if takens > 0 && !(top == takens || top + 1 == takens) {
            violations.push(format!(
                "deque {proc}: top {top} not at taken boundary {takens}"
            ));
        }
        let bot = pmem.peek(lay.bot_addr(proc)).unwrap_or(0) as usize;
        let lo = takens + jobs;
        if locals > 0 {
            if !(lo <= bot && bot < lo + locals) {
                violations.push(format!(
                    "deque {proc}: bot {bot} outside local range [{lo}, {})",
                    lo + locals
                ));
            }
        } else if bot != lo {
            violations.push(format!(
                "deque {proc}: bot {bot} != first empty after jobs {lo}"
            ));
        }
    }
}

/// Post-hoc transition scan over a fully recorded history: replays every
/// write and successful CAM against the watched region and reruns the same
/// legality rules the online watcher applies.
pub fn scan_history_transitions(
    hist: &History,
    layout: DequeLayout,
    initial: &BTreeMap<usize, Word>,
) -> Vec<String> {
    let mut words = initial.clone();
    let mut violations = Vec::new();
    let mut watch = DequeWatch::new(layout);
    for rec in &hist.records {
        match &rec.op {
            HistOp::Write { addr, data } => {
                for (k, v) in data.iter().enumerate() {
                    let a = addr + k;
                    if layout.classify(a).is_some() {
                        let old = words.get(&a).copied().unwrap_or(0);
                        watch.observe_write(a, old, *v, false, rec.proc, &mut violations);
                        words.insert(a, *v);
                    }
                }
            }
            HistOp::Cam {
                addr,
                new,
                success: true,
                ..
            }
            | HistOp::Cas {
                addr,
                new,
                success: true,
                ..
            } => {
                if layout.classify(*addr).is_some() {
                    let old = words.get(addr).copied().unwrap_or(0);
                    watch.observe_write(*addr, old, *new, true, rec.proc, &mut violations);
                    words.insert(*addr, *new);
                }
            }
            _ => {}
        }
    }
    violations
}

// ---------------------------------------------------------------------------
// Scheduler step procedures
// ---------------------------------------------------------------------------

pub const K_SCHED_ENTRY: StepKey = 0x1000;
pub const K_POPB_READ: StepKey = 0x1001;
pub const K_POPB_RESOLVE: StepKey = 0x1002;
pub const K_STEAL: StepKey = 0x1003;
pub const K_PT_HELP1: StepKey = 0x1004;
pub const K_PT_HELP2: StepKey = 0x1005;
pub const K_PT_HELP3: StepKey = 0x1006;
pub const K_PT_READ: StepKey = 0x1007;
pub const K_PT_RESOLVE: StepKey = 0x1008;
pub const K_PT_CAMJOB: StepKey = 0x1009;
pub const K_PT_CHECKJOB: StepKey = 0x100A;
pub const K_PT_CLEAR: StepKey = 0x100B;
pub const K_PT_CHECKLOCAL: StepKey = 0x100C;
pub const K_PUSHB_READ: StepKey = 0x100D;
pub const K_PUSHB_RESOLVE: StepKey = 0x100E;
pub const K_JOIN_ARRIVE: StepKey = 0x100F;
pub const K_JOIN_CHECK: StepKey = 0x1010;
pub const K_ROOT_DONE: StepKey = 0x1011;

/// Arena carved for each join-arrival closure chain.
pub const ARRIVAL_ARENA: usize = 96;

// helpPopTop continuation codes: what to run once helping is done.
const NEXT_PT_READ: Word = 0;
const NEXT_CHECKJOB: Word = 1;
const NEXT_CHECKLOCAL: Word = 2;
const NEXT_STEAL: Word = 3;

fn lay(ctx: &CapsuleCtx<'_>, base: Word) -> DequeLayout {
    DequeLayout {
        base: base as usize,
        p: ctx.config().p,
        s: ctx.config().s,
    }
}

fn guard_entry(lay: &DequeLayout, i: usize) -> Result<(), Trap> {
    if i >= lay.s {
        return Err(Trap::Violation(ModelError::DequeOverflow { capacity: lay.s }));
    }
    Ok(())
}

fn dispatch_help_next(ctx: &mut CapsuleCtx<'_>, base: Word, victim: Word, code: Word, p: [Word; 4]) -> StepResult {
    match code {
        NEXT_PT_READ => ctx.tail_call(K_PT_READ, &[base, victim, p[0], p[1]]),
        NEXT_CHECKJOB => ctx.tail_call(K_PT_CHECKJOB, &[base, victim, p[0], p[1], p[2]]),
        NEXT_CHECKLOCAL => ctx.tail_call(K_PT_CHECKLOCAL, &[base, victim, p[0], p[1]]),
        _ => ctx.tail_call(K_STEAL, &[base]),
    }
}

/// Register every scheduler step procedure.
pub fn register_steps(reg: &mut CapsuleRegistry) {
    // Thread completed: clear the bottom entry, then look for work.
    reg.register_scheduler(K_SCHED_ENTRY, "sched-entry", |ctx| {
        let base = ctx.arg(0);
        let me = ctx.proc_id();
        let lay = lay(ctx, base);
        let b = ctx.read_word(lay.bot_addr(me))? as usize;
        guard_entry(&lay, b)?;
        let cur = ctx.read_word(lay.entry_addr(me, b))?;
        let cleared = pack_entry(TaggedEntry::new(entry_tag(cur) + 1, Entry::Empty));
        ctx.write_words(lay.entry_addr(me, b), &[cleared])?;
        ctx.emit(SchedEventRec {
            proc: me,
            event: SchedEvent::Clear,
            victim: None,
            index: Some(b),
            tag: Some(entry_tag(cur) + 1),
        });
        ctx.tail_call(K_POPB_READ, &[base])
    });

    // popBottom, read phase: fetch bot and the entry below it, then commit.
    reg.register_scheduler(K_POPB_READ, "popb-read", |ctx| {
        let base = ctx.arg(0);
        let me = ctx.proc_id();
        let lay = lay(ctx, base);
        let b = ctx.read_word(lay.bot_addr(me))? as usize;
        guard_entry(&lay, b)?;
        let old = ctx.read_word(lay.entry_addr(me, b - 1))?;
        ctx.commit(K_POPB_RESOLVE, &[base, b as Word, old])
    });

    // popBottom, resolve phase: claim the job with a CAM if it is one.
    reg.register_scheduler(K_POPB_RESOLVE, "popb-resolve", |ctx| {
        let (base, b, old) = (ctx.arg(0), ctx.arg(1) as usize, ctx.arg(2));
        let me = ctx.proc_id();
        let lay = lay(ctx, base);
        let te = unpack_entry(old);
        if let Entry::Job { closure } = te.entry {
            let new = pack_entry(TaggedEntry::new(te.tag + 1, Entry::Local));
            ctx.cam(lay.entry_addr(me, b - 1), old, new)?;
            let cur = ctx.read_word(lay.entry_addr(me, b - 1))?;
            if cur == new {
                ctx.write_words(lay.bot_addr(me), &[(b - 1) as Word])?;
                ctx.emit(SchedEventRec {
                    proc: me,
                    event: SchedEvent::PopBottom,
                    victim: None,
                    index: Some(b - 1),
                    tag: Some(te.tag + 1),
                });
                return ctx.install(closure);
            }
        }
        ctx.tail_call(K_STEAL, &[base])
    });

    // One steal-loop iteration: yield, pick a victim, snapshot our bottom
    // entry coordinates, then run popTop on the victim.
    reg.register_scheduler(K_STEAL, "steal", |ctx| {
        let base = ctx.arg(0);
        let me = ctx.proc_id();
        let lay = lay(ctx, base);
        ctx.yield_hint();
        let victim = ctx.rand(ctx.config().p as u64);
        let b = ctx.read_word(lay.bot_addr(me))? as usize;
        guard_entry(&lay, b)?;
        let cw = ctx.read_word(lay.entry_addr(me, b))?;
        let e = lay.entry_addr(me, b) as Word;
        let c = entry_tag(cw);
        ctx.tail_call(K_PT_HELP1, &[base, victim, NEXT_PT_READ, e, c, 0, 0])
    });

    // helpPopTop part 1: look at the victim's top entry.
    reg.register_scheduler(K_PT_HELP1, "help-read", |ctx| {
        let (base, victim, code) = (ctx.arg(0), ctx.arg(1), ctx.arg(2));
        let p = [ctx.arg(3), ctx.arg(4), ctx.arg(5), ctx.arg(6)];
        let lay = lay(ctx, base);
        let v = victim as usize;
        let t = ctx.read_word(lay.top_addr(v))? as usize;
        guard_entry(&lay, t)?;
        let tw = ctx.read_word(lay.entry_addr(v, t))?;
        if let Entry::Taken {
            thief_entry,
            thief_tag,
        } = unpack_entry(tw).entry
        {
            return ctx.tail_call(
                K_PT_HELP2,
                &[base, victim, code, p[0], p[1], p[2], p[3], t as Word, thief_entry, thief_tag],
            );
        }
        dispatch_help_next(ctx, base, victim, code, p)
    });

    // helpPopTop part 2: set the thief's entry from empty to local.
    reg.register_scheduler(K_PT_HELP2, "help-set-local", |ctx| {
        let (base, victim, code) = (ctx.arg(0), ctx.arg(1), ctx.arg(2));
        let args: Vec<Word> = ctx.args().to_vec();
        let (ps, pstag) = (args[8], args[9]);
        ctx.cam(
            ps as usize,
            pack_entry(TaggedEntry::new(pstag, Entry::Empty)),
            pack_entry(TaggedEntry::new(pstag + 1, Entry::Local)),
        )?;
        let _ = (base, victim, code);
        ctx.tail_call(K_PT_HELP3, &args)
    });

    // helpPopTop part 3: advance the victim's top pointer.
    reg.register_scheduler(K_PT_HELP3, "help-bump-top", |ctx| {
        let (base, victim, code) = (ctx.arg(0), ctx.arg(1), ctx.arg(2));
        let p = [ctx.arg(3), ctx.arg(4), ctx.arg(5), ctx.arg(6)];
        let t = ctx.arg(7);
        let lay = lay(ctx, base);
        ctx.cam(lay.top_addr(victim as usize), t, t + 1)?;
        ctx.emit(SchedEventRec {
            proc: ctx.proc_id(),
            event: SchedEvent::Help,
            victim: Some(victim as usize),
            index: Some(t as usize),
            tag: None,
        });
        dispatch_help_next(ctx, base, victim, code, p)
    });

    // popTop read phase: fetch the victim's top entry, then commit.
    reg.register_scheduler(K_PT_READ, "poptop-read", |ctx| {
        let (base, victim, e, c) = (ctx.arg(0), ctx.arg(1), ctx.arg(2), ctx.arg(3));
        let lay = lay(ctx, base);
        let v = victim as usize;
        let i = ctx.read_word(lay.top_addr(v))? as usize;
        guard_entry(&lay, i)?;
        let old = ctx.read_word(lay.entry_addr(v, i))?;
        ctx.commit(K_PT_RESOLVE, &[base, victim, e, c, i as Word, old])
    });

    // popTop resolution: empty fails, taken gets helped, a job is stolen
    // with a CAM, and a dead owner's local entry is recovered.
    reg.register_scheduler(K_PT_RESOLVE, "poptop-resolve", |ctx| {
        let (base, victim, e, c, i, old) = (
            ctx.arg(0),
            ctx.arg(1),
            ctx.arg(2),
            ctx.arg(3),
            ctx.arg(4),
            ctx.arg(5),
        );
        let lay = lay(ctx, base);
        let v = victim as usize;
        let te = unpack_entry(old);
        match te.entry {
            Entry::Empty => ctx.tail_call(K_STEAL, &[base]),
            Entry::Taken { .. } => {
                ctx.tail_call(K_PT_HELP1, &[base, victim, NEXT_STEAL, 0, 0, 0, 0])
            }
            Entry::Job { closure } => {
                let new = pack_entry(TaggedEntry::new(
                    te.tag + 1,
                    Entry::Taken {
                        thief_entry: e,
                        thief_tag: c,
                    },
                ));
                ctx.tail_call(K_PT_CAMJOB, &[base, victim, e, c, i, old, new, closure])
            }
            Entry::Local => {
                if ctx.is_live(v) {
                    return ctx.tail_call(K_STEAL, &[base]);
                }
                let cur = ctx.read_word(lay.entry_addr(v, i as usize))?;
                if cur != old {
                    return ctx.tail_call(K_STEAL, &[base]);
                }
                ctx.commit(K_PT_CLEAR, &[base, victim, e, c, i, old])
            }
        }
    });

    // Steal a job entry.
    reg.register_scheduler(K_PT_CAMJOB, "poptop-cam-job", |ctx| {
        let (base, victim, _e, _c, i, old, new, f) = (
            ctx.arg(0),
            ctx.arg(1),
            ctx.arg(2),
            ctx.arg(3),
            ctx.arg(4),
            ctx.arg(5),
            ctx.arg(6),
            ctx.arg(7),
        );
        let lay = lay(ctx, base);
        ctx.cam(lay.entry_addr(victim as usize, i as usize), old, new)?;
        ctx.tail_call(K_PT_HELP1, &[base, victim, NEXT_CHECKJOB, i, new, f, 0])
    });

    reg.register_scheduler(K_PT_CHECKJOB, "poptop-check-job", |ctx| {
        let (base, victim, i, new, f) =
            (ctx.arg(0), ctx.arg(1), ctx.arg(2), ctx.arg(3), ctx.arg(4));
        let lay = lay(ctx, base);
        let cur = ctx.read_word(lay.entry_addr(victim as usize, i as usize))?;
        if cur == new {
            ctx.emit(SchedEventRec {
                proc: ctx.proc_id(),
                event: SchedEvent::Steal,
                victim: Some(victim as usize),
                index: Some(i as usize),
                tag: Some(entry_tag(new)),
            });
            return ctx.install(f);
        }
        ctx.tail_call(K_STEAL, &[base])
    });

    // Steal a dead owner's local entry: first clear the slot above it so no
    // second local steal can ever target this deque.
    reg.register_scheduler(K_PT_CLEAR, "poptop-clear-next", |ctx| {
        let (base, victim, e, c, i, old) = (
            ctx.arg(0),
            ctx.arg(1),
            ctx.arg(2),
            ctx.arg(3),
            ctx.arg(4),
            ctx.arg(5),
        );
        let lay = lay(ctx, base);
        let v = victim as usize;
        guard_entry(&lay, i as usize + 1)?;
        let above = ctx.read_word(lay.entry_addr(v, i as usize + 1))?;
        let cleared = pack_entry(TaggedEntry::new(entry_tag(above) + 1, Entry::Empty));
        ctx.write_words(lay.entry_addr(v, i as usize + 1), &[cleared])?;
        let new = pack_entry(TaggedEntry::new(
            entry_tag(old) + 1,
            Entry::Taken {
                thief_entry: e,
                thief_tag: c,
            },
        ));
        ctx.cam(lay.entry_addr(v, i as usize), old, new)?;
        ctx.tail_call(K_PT_HELP1, &[base, victim, NEXT_CHECKLOCAL, i, new, 0, 0])
    });

    reg.register_scheduler(K_PT_CHECKLOCAL, "poptop-check-local", |ctx| {
        let (base, victim, i, new) = (ctx.arg(0), ctx.arg(1), ctx.arg(2), ctx.arg(3));
        let lay = lay(ctx, base);
        let v = victim as usize;
        let cur = ctx.read_word(lay.entry_addr(v, i as usize))?;
        if cur == new {
            let g = ctx.read_restart_slot(v)?;
            ctx.emit(SchedEventRec {
                proc: ctx.proc_id(),
                event: SchedEvent::LocalSteal,
                victim: Some(v),
                index: Some(i as usize),
                tag: Some(entry_tag(new)),
            });
            return ctx.install(g);
        }
        ctx.tail_call(K_STEAL, &[base])
    });

    // pushBottom read phase (reached through fork's persistent call).
    reg.register_scheduler(K_PUSHB_READ, "pushb-read", |ctx| {
        let (base, f) = (ctx.arg(0), ctx.arg(1));
        let me = ctx.proc_id();
        let lay = lay(ctx, base);
        let b = ctx.read_word(lay.bot_addr(me))? as usize;
        guard_entry(&lay, b + 1)?;
        let t1 = entry_tag(ctx.read_word(lay.entry_addr(me, b + 1))?);
        let t2 = entry_tag(ctx.read_word(lay.entry_addr(me, b))?);
        ctx.commit(
            K_PUSHB_RESOLVE,
            &[base, me as Word, f, b as Word, t1, t2],
        )
    });

    // pushBottom resolve phase: new local above, advance bot, then CAM the
    // old bottom from local to job. If the owner died mid-push and we are
    // resuming its capsule from a steal, the state reads differently and we
    // push onto our own deque instead.
    reg.register_scheduler(K_PUSHB_RESOLVE, "pushb-resolve", |ctx| {
        let (base, owner, f, b, t1, t2) = (
            ctx.arg(0),
            ctx.arg(1) as usize,
            ctx.arg(2),
            ctx.arg(3) as usize,
            ctx.arg(4),
            ctx.arg(5),
        );
        let lay = lay(ctx, base);
        let cur = ctx.read_word(lay.entry_addr(owner, b))?;
        if cur == pack_entry(TaggedEntry::new(t2, Entry::Local)) {
            let new_local = pack_entry(TaggedEntry::new(t1 + 1, Entry::Local));
            ctx.write_words(lay.entry_addr(owner, b + 1), &[new_local])?;
            ctx.write_words(lay.bot_addr(owner), &[(b + 1) as Word])?;
            ctx.cam(
                lay.entry_addr(owner, b),
                pack_entry(TaggedEntry::new(t2, Entry::Local)),
                pack_entry(TaggedEntry::new(t2 + 1, Entry::Job { closure: f })),
            )?;
            ctx.emit(SchedEventRec {
                proc: ctx.proc_id(),
                event: SchedEvent::Fork,
                victim: Some(owner),
                index: Some(b),
                tag: Some(t2 + 1),
            });
            return ctx.ret(&[]);
        }
        let above = ctx.read_word(lay.entry_addr(owner, b + 1))?;
        if entry_kind(above) == KIND_EMPTY {
            // Our push was orphaned by a hard fault; redo it on the deque of
            // the processor now running this capsule.
            return ctx.tail_call(K_PUSHB_READ, &[base, f]);
        }
        ctx.ret(&[])
    });

    // Join arrival: one CAM from unset to this arrival's side.
    reg.register(K_JOIN_ARRIVE, "join-arrive", |ctx| {
        let (base, token, aj, side) = (ctx.arg(0), ctx.arg(1), ctx.arg(2), ctx.arg(3));
        ctx.cam(token as usize, 0, side)?;
        ctx.dag_note_arrival(token);
        ctx.tail_call(K_JOIN_CHECK, &[base, token, aj, side])
    });

    // Join check: whoever sees its own side in the token arrived first and
    // dies into the scheduler; the other continues the join.
    reg.register(K_JOIN_CHECK, "join-check", |ctx| {
        let (base, token, aj, side) = (ctx.arg(0), ctx.arg(1), ctx.arg(2), ctx.arg(3));
        let v = ctx.read_word(token as usize)?;
        if v == side {
            ctx.tail_call(K_SCHED_ENTRY, &[base])
        } else {
            ctx.install_join(aj, token)
        }
    });

    // Root completion: raise the done flag and stop.
    reg.register(K_ROOT_DONE, "root-done", |ctx| {
        let done = ctx.arg(0) as usize;
        ctx.write_words(done, &[1])?;
        ctx.halt()
    });
}

// ---------------------------------------------------------------------------
// Fork/join building blocks for user code
// ---------------------------------------------------------------------------

/// Fork `right` (with its own arena) and continue inline as
/// `(left_key, left_args)`, joining into `(after_key, after_args)` once
/// both sides finish. The left side runs as the resume of the fork's
/// persistent call; each side finishes by installing its continuation.
#[allow(clippy::too_many_arguments)]
pub fn fork_join(
    ctx: &mut CapsuleCtx<'_>,
    base: Word,
    mut right: ClosureSpec,
    right_arena: usize,
    left_key: StepKey,
    left_args: &[Word],
    after_key: StepKey,
    after_args: &[Word],
    after_arena: usize,
) -> StepResult {
    let token = ctx.alloc(1)?;
    let aj = ctx.create_closure_with_arena(
        ClosureSpec {
            key: after_key,
            continuation: ctx.continuation(),
            args: after_args.to_vec(),
            cursor: 0,
            arena_end: 0,
            swap_partner: 0,
        },
        after_arena,
    )?;
    let arr_left = ctx.create_closure_with_arena(
        ClosureSpec::new(K_JOIN_ARRIVE, 0, vec![base, token, aj, 1]),
        ARRIVAL_ARENA,
    )?;
    let arr_right = ctx.create_closure_with_arena(
        ClosureSpec::new(K_JOIN_ARRIVE, 0, vec![base, token, aj, 2]),
        ARRIVAL_ARENA,
    )?;
    right.continuation = arr_right;
    let right_closure = ctx.create_closure_with_arena(right, right_arena)?;
    ctx.dag_record_spawn(right_closure);
    ctx.call_with_continuation(
        K_PUSHB_READ,
        &[base, right_closure],
        left_key,
        left_args,
        0,
        arr_left,
    )
}

/// End the current thread segment: transfer to this capsule's continuation.
pub fn finish_segment(ctx: &mut CapsuleCtx<'_>) -> StepResult {
    let cont = ctx.continuation();
    ctx.install(cont)
}

// ---------------------------------------------------------------------------
// Machine bootstrap
// ---------------------------------------------------------------------------

/// Persistent-memory plan for a scheduler run.
#[derive(Debug, Clone)]
pub struct SchedLayout {
    pub deque: DequeLayout,
    pub done_word: usize,
    /// Per-processor allocation pools (start, end).
    pub pools: Vec<(usize, usize)>,
    /// First free word for workload data.
    pub data_base: usize,
}

/// Lay out deques, the done flag, and per-processor pools after the
/// reserved nil block.
pub fn plan(cfg: &MachineConfig, pool_words: usize) -> SchedLayout {
    let mut next = cfg.b.max(1); // block 0 reserved so address 0 means nil
    let done_word = next;
    next += 1;
    let deque = DequeLayout {
        base: next,
        p: cfg.p,
        s: cfg.s,
    };
    next = deque.end();
    let pools: Vec<(usize, usize)> = (0..cfg.p)
        .map(|i| (next + i * pool_words, next + (i + 1) * pool_words))
        .collect();
    next += cfg.p * pool_words;
    SchedLayout {
        deque,
        done_word,
        pools,
        data_base: next,
    }
}

/// Poke-based closure writer for run setup (no cost, no capsules).
pub struct SetupPool<'a> {
    pmem: &'a mut PersistentMemory,
    pub cursor: usize,
    pub end: usize,
}

impl<'a> SetupPool<'a> {
    pub fn new(pmem: &'a mut PersistentMemory, pool: (usize, usize)) -> Self {
        SetupPool {
            pmem,
            cursor: pool.0,
            end: pool.1,
        }
    }

    /// Write a closure at the pool cursor. Unless overridden, the closure's
    /// allocation lineage continues at the pool cursor after it.
    pub fn closure(&mut self, mut spec: ClosureSpec) -> Result<Word, ModelError> {
        let addr = self.cursor;
        let size = spec.size();
        assert!(addr + size <= self.end, "setup pool exhausted");
        self.cursor += size;
        if spec.cursor == 0 {
            spec.cursor = self.cursor as Word;
            spec.arena_end = self.end as Word;
        }
        self.pmem.poke_range(addr, &spec.words())?;
        Ok(addr as Word)
    }

    /// Reserve raw words from the pool.
    pub fn reserve(&mut self, words: usize) -> usize {
        let addr = self.cursor;
        assert!(addr + words <= self.end, "setup pool exhausted");
        self.cursor += words;
        addr
    }
}

/// Initialize deques and boot all processors: the root runs `root` (whose
/// final continuation raises the done flag), everyone else starts in the
/// stealing loop. `root.continuation` is overwritten.
pub fn install_runtime(
    m: &mut Machine,
    layout: &SchedLayout,
    mut root: ClosureSpec,
) -> Result<(), ModelError> {
    let cfg = *m.config();
    let deque = layout.deque;
    let base = deque.base as Word;
    // Deque initial state: sentinel taken at entry 0, everything else
    // empty, top = bot = 1; the root's thread is entry 1, local.
    for p in 0..cfg.p {
        m.pmem_mut().poke(deque.top_addr(p), 1)?;
        m.pmem_mut().poke(deque.bot_addr(p), 1)?;
        m.pmem_mut().poke(
            deque.entry_addr(p, 0),
            pack_entry(TaggedEntry::new(0, Entry::Taken {
                thief_entry: 0,
                thief_tag: 0,
            })),
        )?;
        for i in 1..cfg.s {
            m.pmem_mut()
                .poke(deque.entry_addr(p, i), pack_entry(TaggedEntry::new(0, Entry::Empty)))?;
        }
    }
    m.pmem_mut().poke(
        deque.entry_addr(0, 1),
        pack_entry(TaggedEntry::new(1, Entry::Local)),
    )?;

    // Boot closures.
    for p in 1..cfg.p {
        let mut pool = SetupPool::new(m.pmem_mut(), layout.pools[p]);
        let steal = pool.closure(ClosureSpec::new(K_POPB_READ, 0, vec![base]))?;
        m.boot_proc(p, steal)?;
    }
    {
        let mut pool = SetupPool::new(m.pmem_mut(), layout.pools[0]);
        let done = pool.closure(ClosureSpec::new(
            K_ROOT_DONE,
            0,
            vec![layout.done_word as Word],
        ))?;
        root.continuation = done;
        let root_addr = pool.closure(root)?;
        m.boot_proc(0, root_addr)?;
    }
    m.set_done_word(layout.done_word);
    m.set_deque_watch(DequeWatch::new(deque));
    m.set_dag_meaningful(true);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entry_roundtrip() {
        let cases = [
            TaggedEntry::new(0, Entry::Empty),
            TaggedEntry::new(5, Entry::Local),
            TaggedEntry::new(17, Entry::Job { closure: 12345 }),
            TaggedEntry::new(65535, Entry::Taken {
                thief_entry: 0x3FF_FFFF,
                thief_tag: 65535,
            }),
        ];
        for te in cases {
            assert_eq!(unpack_entry(pack_entry(te)), te);
        }
    }

    #[test]
    fn zeroed_word_is_an_empty_entry_with_tag_zero() {
        assert_eq!(unpack_entry(0), TaggedEntry::new(0, Entry::Empty));
    }

    #[test]
    fn layout_classification() {
        let lay = DequeLayout { base: 100, p: 2, s: 4 };
        assert_eq!(lay.classify(100), Some(DequeField::Top(0)));
        assert_eq!(lay.classify(101), Some(DequeField::Bot(0)));
        assert_eq!(lay.classify(102), Some(DequeField::Entry(0, 0)));
        assert_eq!(lay.classify(106), Some(DequeField::Top(1)));
        assert_eq!(lay.classify(111), Some(DequeField::Entry(1, 3)));
        assert_eq!(lay.classify(112), None);
        assert_eq!(lay.classify(99), None);
    }

    #[test]
    fn watch_flags_taken_mutation() {
        let lay = DequeLayout { base: 0, p: 1, s: 4 };
        let mut watch = DequeWatch::new(lay);
        let mut violations = Vec::new();
        let taken = pack_entry(TaggedEntry::new(3, Entry::Taken {
            thief_entry: 9,
            thief_tag: 1,
        }));
        let local = pack_entry(TaggedEntry::new(4, Entry::Local));
        watch.observe_write(2, taken, local, false, 0, &mut violations);
        assert_eq!(violations.len(), 1);
    }

    #[test]
    fn watch_counts_semantic_transitions() {
        let lay = DequeLayout { base: 0, p: 1, s: 4 };
        let mut watch = DequeWatch::new(lay);
        let mut violations = Vec::new();
        let local = |t| pack_entry(TaggedEntry::new(t, Entry::Local));
        let job = |t| pack_entry(TaggedEntry::new(t, Entry::Job { closure: 42 }));
        watch.observe_write(2, local(1), job(2), true, 0, &mut violations);
        watch.observe_write(2, job(2), local(3), true, 0, &mut violations);
        assert_eq!(watch.pushes[0], 1);
        assert_eq!(watch.pops_bottom[0], 1);
        assert!(violations.is_empty());
    }

    #[test]
    fn watch_flags_top_regression() {
        let lay = DequeLayout { base: 0, p: 1, s: 4 };
        let mut watch = DequeWatch::new(lay);
        let mut violations = Vec::new();
        watch.observe_write(0, 3, 4, true, 0, &mut violations);
        assert!(violations.is_empty());
        watch.observe_write(0, 4, 2, true, 0, &mut violations);
        assert_eq!(violations.len(), 1);
    }
}
