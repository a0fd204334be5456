//! Cost aggregation and bound checking: the work/depth/time measures, the
//! expected work-inflation factor under faults, and the restart-count bound
//! arithmetic. Asymptotic claims are tested as trends and ratio
//! regressions, never as absolute constants.

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Statistical tolerance applied to sample means, at the documented sample
/// size of 1000 runs.
pub const MEAN_TOLERANCE: f64 = 0.10;

/// Cost measures of one run. `w`/`t`/`d` count transfers in completing
/// capsule executions only (what a fault-free run performs); the `_f`
/// variants include every fault-induced rerun and restart charge. Depth is
/// reported only for programs with fork-join DAG structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub w: u64,
    pub w_f: u64,
    pub d: Option<u64>,
    pub d_f: Option<u64>,
    pub t: u64,
    pub t_f: u64,
    /// Max capsule work: transfers in one faultless capsule execution.
    pub c: u64,
    pub p: u64,
    /// Average processors granted steps per round.
    pub p_a: f64,
}

impl CostReport {
    /// CSV header, stable order.
    pub const CSV_HEADER: &'static str = "W,Wf,D,Df,T,Tf,C,P,PA";

    pub fn csv_row(&self) -> String {
        fn opt(v: Option<u64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.w,
            self.w_f,
            opt(self.d),
            opt(self.d_f),
            self.t,
            self.t_f,
            self.c,
            self.p,
            self.p_a
        )
    }

    /// Structural invariants every report must satisfy.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.w_f < self.w {
            return Err(format!("W_f {} < W {}", self.w_f, self.w));
        }
        if let (Some(d), Some(d_f)) = (self.d, self.d_f) {
            if d_f < d {
                return Err(format!("D_f {d_f} < D {d}"));
            }
        }
        if self.t > self.w {
            return Err(format!("T {} > W {}", self.t, self.w));
        }
        if self.t_f > self.w_f {
            return Err(format!("T_f {} > W_f {}", self.t_f, self.w_f));
        }
        Ok(())
    }
}

/// Exact rational, for the integer bound arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den > 0, "zero denominator");
        Ratio { num, den }
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// Restart-count bound: the smallest `l` with `(1/(C·f))^l >= 2W/ε`, i.e.
/// `⌈log_{1/(C·f)}(2W/ε)⌉`. Exact integer arithmetic via repeated
/// multiplication; requires `C·f < 1`.
pub fn restart_bound(w: u64, cf: Ratio, epsilon: Ratio) -> Result<u64, ModelError> {
    if w < 1 {
        return Err(ModelError::BadConfig("W must be at least 1".into()));
    }
    if cf.num == 0 {
        // As C·f tends to zero a single run suffices.
        return Ok(1);
    }
    if cf.num >= cf.den {
        return Err(ModelError::BadConfig(
            "restart bound requires C·f < 1".into(),
        ));
    }
    if epsilon.num == 0 || epsilon.num >= epsilon.den && epsilon.den != epsilon.num {
        // epsilon must be in (0, 1); epsilon == 1 is allowed degenerately.
    }
    // Target 2W/ε as a rational: (2W · ε_den) / ε_num.
    let target_num = BigUint::from(2u64) * BigUint::from(w) * BigUint::from(epsilon.den);
    let target_den = BigUint::from(epsilon.num);
    // Find min l >= 1 with (den/num)^l >= target: den^l * target_den >= num^l * target_num.
    let num = BigUint::from(cf.num);
    let den = BigUint::from(cf.den);
    let mut num_acc = BigUint::from(1u64);
    let mut den_acc = BigUint::from(1u64);
    for l in 1..=4096u64 {
        num_acc *= &num;
        den_acc *= &den;
        if &den_acc * &target_den >= &num_acc * &target_num {
            return Ok(l);
        }
    }
    Err(ModelError::Other(
        "restart bound did not converge within 4096 iterations".into(),
    ))
}

/// Companion predictor from the same argument: `D_f <= 2·D·log_{1/(C·f)} W`
/// at `ε = 2/W`.
pub fn depth_bound(d: u64, w: u64, cf: Ratio) -> Result<u64, ModelError> {
    let l = restart_bound(w, cf, Ratio::new(2, w.max(2)))?;
    Ok(2 * d * l)
}

/// Verdict of a statistical check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InflationVerdict {
    pub mean_ratio: f64,
    pub bound: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub runs: usize,
}

/// Compare the sample mean of `W_f/W` over repeated runs against the
/// expected-work bound `1/(1 − C·f)` with the configured tolerance.
pub fn inflation_check(runs: &[CostReport], cf: f64) -> Result<InflationVerdict, ModelError> {
    if !(0.0..1.0).contains(&cf) {
        return Err(ModelError::BadConfig(format!(
            "C·f = {cf} outside [0, 1): bound undefined"
        )));
    }
    if cf > 0.5 + 1e-12 {
        return Err(ModelError::BadConfig(format!(
            "C·f = {cf} exceeds the 1/2 premise"
        )));
    }
    if runs.is_empty() {
        return Err(ModelError::BadConfig("no runs".into()));
    }
    let mean_ratio = runs
        .iter()
        .map(|r| r.w_f as f64 / r.w.max(1) as f64)
        .sum::<f64>()
        / runs.len() as f64;
    let bound = 1.0 / (1.0 - cf);
    let pass = if cf == 0.0 {
        runs.iter().all(|r| r.w_f == r.w)
    } else {
        mean_ratio <= bound * (1.0 + MEAN_TOLERANCE)
    };
    Ok(InflationVerdict {
        mean_ratio,
        bound,
        tolerance: MEAN_TOLERANCE,
        pass,
        runs: runs.len(),
    })
}

/// Predicted-versus-measured comparison for the end-to-end time bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeBoundReport {
    pub measured_t_f: u64,
    /// The bound expression with unit constant:
    /// `W/P_A + D·(P/P_A)·⌈log_{1/(C·f)} W⌉`.
    pub predicted: Option<f64>,
    pub log_factor: Option<u64>,
}

/// Emit the time-bound shape next to the measured total time. Constants are
/// not asserted; callers compare trends.
pub fn time_bound_report(report: &CostReport, cf: f64) -> Result<TimeBoundReport, ModelError> {
    let Some(d) = report.d else {
        return Ok(TimeBoundReport {
            measured_t_f: report.t_f,
            predicted: None,
            log_factor: None,
        });
    };
    if report.p_a <= 0.0 {
        return Err(ModelError::BadConfig("P_A must be positive".into()));
    }
    let log_factor = if cf <= 0.0 {
        1
    } else {
        // ⌈log_{1/cf} W⌉ computed through the exact integer path when cf is
        // a small rational; approximate the rational from the float.
        let (num, den) = float_to_ratio(cf);
        restart_bound(report.w.max(1), Ratio::new(num, den), Ratio::new(2, report.w.max(2)))?
    };
    let predicted = report.w as f64 / report.p_a
        + d as f64 * (report.p as f64 / report.p_a) * log_factor as f64;
    Ok(TimeBoundReport {
        measured_t_f: report.t_f,
        predicted: Some(predicted),
        log_factor: Some(log_factor),
    })
}

/// Small-denominator rational approximation for translating the float fault
/// parameters used by configs into the exact bound arithmetic.
fn float_to_ratio(x: f64) -> (u64, u64) {
    for den in 1..=10_000u64 {
        let num = (x * den as f64).round();
        if num >= 0.0 && (num / den as f64 - x).abs() < 1e-9 {
            return (num as u64, den);
        }
    }
    ((x * 1_000_000.0).round() as u64, 1_000_000)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(w: u64, w_f: u64) -> CostReport {
        CostReport {
            w,
            w_f,
            d: None,
            d_f: None,
            t: w,
            t_f: w_f,
            c: 4,
            p: 1,
            p_a: 1.0,
        }
    }

    #[test]
    fn restart_bound_matches_hand_arithmetic() {
        // W=1000, C·f=1/4, ε=2/W: l = ⌈log₄(10⁶)⌉ = 10.
        let l = restart_bound(1000, Ratio::new(1, 4), Ratio::new(2, 1000)).unwrap();
        assert_eq!(l, 10);
    }

    #[test]
    fn restart_bound_is_one_when_cf_tiny() {
        // 2W/ε = 40 and 1/(C·f) = 1000: one run suffices.
        let l = restart_bound(10, Ratio::new(1, 1000), Ratio::new(1, 2)).unwrap();
        assert_eq!(l, 1);
        assert_eq!(restart_bound(10, Ratio::new(0, 1), Ratio::new(1, 2)).unwrap(), 1);
    }

    #[test]
    fn restart_bound_rejects_cf_at_least_one() {
        assert!(restart_bound(10, Ratio::new(3, 2), Ratio::new(1, 2)).is_err());
    }

    #[test]
    fn inflation_bound_arithmetic() {
        // C·f = 0.5 → bound factor 2.0.
        let v = inflation_check(&[report(100, 150)], 0.5).unwrap();
        assert!((v.bound - 2.0).abs() < 1e-12);
        assert!(v.pass);
    }

    #[test]
    fn inflation_exact_at_zero_f() {
        let v = inflation_check(&[report(100, 100), report(40, 40)], 0.0).unwrap();
        assert!(v.pass);
        assert!((v.mean_ratio - 1.0).abs() < 1e-12);
        let v = inflation_check(&[report(100, 101)], 0.0).unwrap();
        assert!(!v.pass);
    }

    #[test]
    fn report_invariants() {
        assert!(report(10, 12).check_invariants().is_ok());
        assert!(report(12, 10).check_invariants().is_err());
    }

    #[test]
    fn time_bound_reduces_to_w_plus_d_when_serial() {
        let mut r = report(100, 100);
        r.d = Some(100);
        r.d_f = Some(100);
        let tb = time_bound_report(&r, 0.0).unwrap();
        assert_eq!(tb.predicted, Some(200.0));
        assert_eq!(tb.measured_t_f, 100);
    }
}
