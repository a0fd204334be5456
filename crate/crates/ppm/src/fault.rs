//! Fault injection. A fault trial runs before every persistent access of a
//! live processor; with probability at most `f` (independent across trials)
//! the processor faults, either softly (it restarts its active capsule) or
//! hard (it is dead forever). An explicit script can pin faults to exact
//! trial ordinals instead, which the targeted tests rely on. One designated
//! processor is exempt from hard faults so the computation can always make
//! progress.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ProcId;

/// What a fault trial produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultKind {
    Soft,
    Hard,
}

/// One scripted fault: fire at the processor's `ordinal`-th fault trial
/// (0-based, counting every trial since the run started, including trials
/// repeated because of earlier faults).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedFault {
    pub proc: ProcId,
    pub ordinal: u64,
    pub kind: FaultKind,
}

/// Fault model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultModel {
    /// Probability of a fault at each trial point; at most 1/2.
    pub f: f64,
    /// Probability that a fault is hard rather than soft. Usually zero;
    /// hard faults are scripted for targeted tests.
    pub hard_fraction: f64,
    pub seed: u64,
    /// When non-empty, overrides the probabilistic mode entirely.
    pub script: Vec<ScriptedFault>,
    /// Processor exempt from hard faults (soft faults still apply).
    pub hard_fault_exempt: ProcId,
}

impl Default for FaultModel {
    fn default() -> Self {
        FaultModel {
            f: 0.0,
            hard_fraction: 0.0,
            seed: 0,
            script: Vec::new(),
            hard_fault_exempt: 0,
        }
    }
}

impl FaultModel {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn probabilistic(f: f64, seed: u64) -> Self {
        assert!((0.0..=0.5).contains(&f), "fault probability must be in [0, 1/2]");
        FaultModel {
            f,
            seed,
            ..Default::default()
        }
    }

    pub fn scripted(script: Vec<ScriptedFault>) -> Self {
        FaultModel {
            script,
            ..Default::default()
        }
    }
}

/// Per-processor liveness; dead is absorbing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LivenessTable {
    live: Vec<bool>,
}

impl LivenessTable {
    pub fn new(p: usize) -> Self {
        LivenessTable { live: vec![true; p] }
    }

    pub fn is_live(&self, proc: ProcId) -> bool {
        self.live[proc]
    }

    pub fn mark_dead(&mut self, proc: ProcId) {
        self.live[proc] = false;
    }

    pub fn live_count(&self) -> usize {
        self.live.iter().filter(|l| **l).count()
    }
}

/// Draws fault trials and tracks liveness.
#[derive(Debug, Clone)]
pub struct FaultEngine {
    model: FaultModel,
    rngs: Vec<ChaCha8Rng>,
    trial_counts: Vec<u64>,
    liveness: LivenessTable,
}

impl FaultEngine {
    pub fn new(model: FaultModel, p: usize) -> Self {
        let rngs = (0..p)
            .map(|proc| ChaCha8Rng::seed_from_u64(mix(model.seed, proc as u64)))
            .collect();
        FaultEngine {
            model,
            rngs,
            trial_counts: vec![0; p],
            liveness: LivenessTable::new(p),
        }
    }

    pub fn model(&self) -> &FaultModel {
        &self.model
    }

    /// Run one fault trial for `proc`. Returns the fault to apply, if any.
    /// The caller is responsible for acting on it (scrambling ephemeral
    /// state, marking death); `maybe_fault` itself only marks liveness for
    /// hard faults.
    pub fn maybe_fault(&mut self, proc: ProcId) -> Option<FaultKind> {
        debug_assert!(self.liveness.is_live(proc), "dead processors take no trials");
        let ordinal = self.trial_counts[proc];
        self.trial_counts[proc] += 1;
        let fault = if !self.model.script.is_empty() {
            self.model
                .script
                .iter()
                .find(|s| s.proc == proc && s.ordinal == ordinal)
                .map(|s| s.kind)
        } else if self.model.f > 0.0 {
            let rng = &mut self.rngs[proc];
            let faulted = rng.gen::<f64>() < self.model.f;
            if faulted {
                // Drawn even when the fraction is zero so that fault
                // positions are unchanged by the hard/soft split.
                let hard = rng.gen::<f64>() < self.model.hard_fraction;
                Some(if hard { FaultKind::Hard } else { FaultKind::Soft })
            } else {
                None
            }
        } else {
            None
        };
        match fault {
            Some(FaultKind::Hard) if proc == self.model.hard_fault_exempt => {
                // The designated processor degrades hard faults to soft so at
                // least one processor survives every schedule.
                Some(FaultKind::Soft)
            }
            Some(FaultKind::Hard) => {
                self.liveness.mark_dead(proc);
                Some(FaultKind::Hard)
            }
            other => other,
        }
    }

    pub fn is_live(&self, proc: ProcId) -> bool {
        self.liveness.is_live(proc)
    }

    pub fn liveness(&self) -> &LivenessTable {
        &self.liveness
    }

    /// Trials taken so far by `proc`; scripted ordinals count against this.
    pub fn trial_count(&self, proc: ProcId) -> u64 {
        self.trial_counts[proc]
    }
}

/// splitmix64 finalizer; used wherever a cheap deterministic stream is
/// derived from a seed and a few indices.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_probability_never_faults() {
        let mut engine = FaultEngine::new(FaultModel::none(), 2);
        for _ in 0..10_000 {
            assert_eq!(engine.maybe_fault(0), None);
            assert_eq!(engine.maybe_fault(1), None);
        }
    }

    #[test]
    fn same_seed_same_fault_sequence() {
        let model = FaultModel::probabilistic(0.2, 42);
        let mut a = FaultEngine::new(model.clone(), 1);
        let mut b = FaultEngine::new(model, 1);
        let seq_a: Vec<_> = (0..1000).map(|_| a.maybe_fault(0)).collect();
        let seq_b: Vec<_> = (0..1000).map(|_| b.maybe_fault(0)).collect();
        assert_eq!(seq_a, seq_b);
    }

    #[test]
    fn empirical_rate_within_binomial_confidence_interval() {
        let f = 0.1;
        let n = 100_000u64;
        let mut engine = FaultEngine::new(FaultModel::probabilistic(f, 7), 1);
        let hits = (0..n).filter(|_| engine.maybe_fault(0).is_some()).count() as f64;
        let rate = hits / n as f64;
        // 99% binomial CI around f.
        let half_width = 2.576 * (f * (1.0 - f) / n as f64).sqrt();
        assert!(
            (rate - f).abs() <= half_width,
            "rate {rate} outside 99% CI of width {half_width}"
        );
        assert!((0.094..=0.106).contains(&rate));
    }

    #[test]
    fn scripted_hard_fault_is_absorbing() {
        let script = vec![ScriptedFault {
            proc: 2,
            ordinal: 3,
            kind: FaultKind::Hard,
        }];
        let mut engine = FaultEngine::new(FaultModel::scripted(script), 3);
        assert!(engine.is_live(2));
        for _ in 0..3 {
            assert_eq!(engine.maybe_fault(2), None);
        }
        assert_eq!(engine.maybe_fault(2), Some(FaultKind::Hard));
        assert!(!engine.is_live(2));
        assert!(engine.is_live(0) && engine.is_live(1));
    }

    #[test]
    fn soft_faults_never_change_liveness() {
        let script = vec![ScriptedFault {
            proc: 1,
            ordinal: 0,
            kind: FaultKind::Soft,
        }];
        let mut engine = FaultEngine::new(FaultModel::scripted(script), 2);
        assert_eq!(engine.maybe_fault(1), Some(FaultKind::Soft));
        assert!(engine.is_live(1));
    }

    #[test]
    fn exempt_processor_degrades_hard_to_soft() {
        let script = vec![ScriptedFault {
            proc: 0,
            ordinal: 0,
            kind: FaultKind::Hard,
        }];
        let mut engine = FaultEngine::new(FaultModel::scripted(script), 2);
        assert_eq!(engine.maybe_fault(0), Some(FaultKind::Soft));
        assert!(engine.is_live(0));
    }
}
