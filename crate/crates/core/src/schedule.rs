//! Discrete noise schedules `b(n)` and the attenuation factors `Φ(n, m)`.
//!
//! `Φ(n, m) = ∏_{k=m+1}^{n} (1 - b(k))` is the exact signal retention of the
//! discrete chain `x_n = √(1-b_n)·x_{n-1} + √b_n·z`. Its continuous-time
//! counterpart `exp(-∫ b)` is kept only as a cross-check.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::DiagnosticSeries;

/// Offset `s` of the cosine profile.
const COSINE_OFFSET: f64 = 0.008;
/// Upper clip of the cosine profile.
const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Sigmoid,
    Cosine,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [ScheduleKind::Linear, ScheduleKind::Sigmoid, ScheduleKind::Cosine];

    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Sigmoid => "sigmoid",
            ScheduleKind::Cosine => "cosine",
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Serializable schedule definition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    #[serde(default = "default_b1")]
    pub b1: f64,
    #[serde(default = "default_b2")]
    pub b2: f64,
    /// Number of steps `N`; the grid is `0..=N`.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Physical time per step, `t = n·Δ`.
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_b1() -> f64 {
    1e-4
}
fn default_b2() -> f64 {
    0.02
}
fn default_steps() -> usize {
    1000
}
fn default_delta() -> f64 {
    1.0
}

impl ScheduleSpec {
    /// Profile with the reference parameters `b1 = 1e-4`, `b2 = 0.02`, `N = 1000`.
    pub fn standard(kind: ScheduleKind) -> Self {
        Self {
            kind,
            b1: default_b1(),
            b2: default_b2(),
            steps: default_steps(),
            delta: default_delta(),
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    /// `b(n)` straight from the profile formula, without range checks.
    fn raw_beta(&self, n: usize) -> f64 {
        let big_n = self.steps as f64;
        let x = n as f64 / big_n;
        match self.kind {
            ScheduleKind::Linear => (self.b2 - self.b1) * x + self.b1,
            ScheduleKind::Sigmoid => (self.b2 - self.b1) / (1.0 + (-12.0 * x + 6.0).exp()) + self.b1,
            ScheduleKind::Cosine => {
                // b(0) is defined as b(1).
                let n = n.max(1);
                let f = |k: usize| cosine_level(k, self.steps);
                (1.0 - f(n) / f(n - 1)).min(COSINE_MAX_BETA)
            }
        }
    }
}

fn cosine_level(n: usize, steps: usize) -> f64 {
    let u = (n as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
    (u * FRAC_PI_2).cos().powi(2)
}

/// The cosine profile exactly as typeset in the original profile table,
/// `1 - p(n) / (p(0) - p(n))` clipped at 0.999, for comparison against the
/// ratio-of-consecutive-levels form that [`Schedule`] uses. `b(0)` is
/// undefined (division by zero) and reported as NaN.
pub fn printed_cosine_betas(steps: usize) -> Vec<f64> {
    let p0 = cosine_level(0, steps);
    (0..=steps)
        .map(|n| {
            if n == 0 {
                f64::NAN
            } else {
                let p = cosine_level(n, steps);
                (1.0 - p / (p0 - p)).min(COSINE_MAX_BETA)
            }
        })
        .collect()
}

/// A validated schedule with `b(n)` and `Φ(n, 0)` precomputed for `n = 0..=N`.
///
/// Immutable after construction; share it freely between workers.
#[derive(Clone, Debug)]
pub struct Schedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    /// `Φ(n, 0)`.
    retention: Vec<f64>,
}

impl Schedule {
    pub fn new(spec: ScheduleSpec) -> Result<Self> {
        let mut problems = Vec::new();
        if spec.steps < 2 {
            problems.push(format!("steps must be >= 2, got {}", spec.steps));
        }
        if !(spec.delta > 0.0 && spec.delta.is_finite()) {
            problems.push(format!("delta must be positive, got {}", spec.delta));
        }
        if spec.kind != ScheduleKind::Cosine && !(spec.b1 > 0.0 && spec.b2 < 1.0 && spec.b1 <= spec.b2) {
            problems.push(format!(
                "need 0 < b1 <= b2 < 1, got b1={} b2={}",
                spec.b1, spec.b2
            ));
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }

        let betas: Vec<f64> = (0..=spec.steps).map(|n| spec.raw_beta(n)).collect();
        if let Some((n, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, b)| !(**b > 0.0 && **b < 1.0))
        {
            return Err(Error::Validation(vec![format!("b({n}) = {b} is outside (0, 1)")]));
        }

        let mut retention = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        retention.push(acc);
        for b in &betas[1..] {
            acc *= 1.0 - b;
            retention.push(acc);
        }
        Ok(Self {
            spec,
            betas,
            retention,
        })
    }

    pub fn standard(kind: ScheduleKind) -> Self {
        Self::new(ScheduleSpec::standard(kind)).expect("reference parameters are valid")
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn kind(&self) -> ScheduleKind {
        self.spec.kind
    }

    /// `N`.
    pub fn steps(&self) -> usize {
        self.spec.steps
    }

    pub fn check_step(&self, n: usize) -> Result<()> {
        if n > self.spec.steps {
            Err(Error::Range {
                step: n,
                max: self.spec.steps,
            })
        } else {
            Ok(())
        }
    }

    pub fn beta_at(&self, n: usize) -> Result<f64> {
        self.check_step(n)?;
        Ok(self.betas[n])
    }

    /// Continuous rate `β = b / Δ` at `t = nΔ`.
    pub fn continuous_rate(&self, n: usize) -> Result<f64> {
        Ok(self.beta_at(n)? / self.spec.delta)
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `Φ(n, m) = ∏_{k=m+1}^{n} (1 - b(k))` for `m <= n`.
    pub fn phi(&self, n: usize, m: usize) -> Result<f64> {
        self.check_step(n)?;
        if m > n {
            return Err(Error::Argument(format!("phi({n}, {m}) needs m <= n")));
        }
        Ok(self.retention[n] / self.retention[m])
    }

    /// `Φ(n, 0)`.
    pub fn retention(&self, n: usize) -> f64 {
        self.retention[n]
    }

    pub fn retention_table(&self) -> &[f64] {
        &self.retention
    }

    /// Continuous-time `exp(-∫_m^n β dt)` with the integral taken by the
    /// trapezoid rule on the step grid.
    pub fn phi_exponential(&self, n: usize, m: usize) -> Result<f64> {
        self.check_step(n)?;
        if m > n {
            return Err(Error::Argument(format!("phi({n}, {m}) needs m <= n")));
        }
        let integral: f64 = (m + 1..=n)
            .map(|k| 0.5 * (self.betas[k - 1] + self.betas[k]))
            .sum();
        Ok((-integral).exp())
    }

    /// `λ(n) = 1 - Φ(n, 0)`, the DSM weight that equalizes time steps.
    pub fn dsm_weight(&self, n: usize) -> f64 {
        1.0 - self.retention[n]
    }

    /// Mean and standard-deviation coefficients `√Φ(n,0)` and `√(1-Φ(n,0))`
    /// of the forward marginal for `n = 0..=N`.
    pub fn mean_std_curves(&self) -> (DiagnosticSeries, DiagnosticSeries) {
        let steps: Vec<usize> = (0..=self.spec.steps).collect();
        let mean = self.retention.iter().map(|p| p.sqrt()).collect();
        let std = self.retention.iter().map(|p| (1.0 - p).sqrt()).collect();
        let mut m = DiagnosticSeries::exact("mean_coeff", steps.clone(), mean, "closed_form");
        let mut s = DiagnosticSeries::exact("std_coeff", steps, std, "closed_form");
        m.meta.schedule = Some(self.kind());
        s.meta.schedule = Some(self.kind());
        (m, s)
    }

    /// CSV `n,mean_coeff,std_coeff`.
    pub fn mean_std_csv(&self) -> String {
        let (mean, std) = self.mean_std_curves();
        let mut out = String::from("n,mean_coeff,std_coeff\n");
        for ((n, m), s) in mean.steps.iter().zip(&mean.values).zip(&std.values) {
            out.push_str(&format!("{n},{m},{s}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lin() -> Schedule {
        Schedule::standard(ScheduleKind::Linear)
    }

    #[test]
    fn linear_profile_endpoints() {
        let s = lin();
        assert_eq!(s.beta_at(0).unwrap(), 1e-4);
        assert!((s.beta_at(1000).unwrap() - 0.02).abs() < 1e-15);
        assert!((s.beta_at(500).unwrap() - 0.010050).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_start() {
        let s = Schedule::standard(ScheduleKind::Sigmoid);
        let expected = (0.02 - 1e-4) / (1.0 + 6f64.exp()) + 1e-4;
        assert!((s.beta_at(0).unwrap() - expected).abs() < 1e-18);
        assert!((s.beta_at(0).unwrap() - 1.4920520081703e-4).abs() < 1e-15);
    }

    #[test]
    fn cosine_start_matches_first_step_and_clips() {
        let s = Schedule::standard(ScheduleKind::Cosine);
        assert_eq!(s.beta_at(0).unwrap(), s.beta_at(1).unwrap());
        assert_eq!(s.beta_at(1000).unwrap(), 0.999);
    }

    #[test]
    fn out_of_range_step() {
        assert!(matches!(lin().beta_at(1001), Err(Error::Range { step: 1001, .. })));
        assert!(matches!(lin().phi(3, 4), Err(Error::Argument(_))));
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut spec = ScheduleSpec::standard(ScheduleKind::Linear);
        spec.b2 = 1.5;
        spec.steps = 1;
        match Schedule::new(spec) {
            Err(Error::Validation(v)) => assert_eq!(v.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn phi_matches_brute_force_product() {
        let s = lin();
        let mut product = 1.0;
        for k in 1..=1000 {
            product *= 1.0 - ((0.02 - 1e-4) * k as f64 / 1000.0 + 1e-4);
        }
        let phi = s.phi(1000, 0).unwrap();
        assert!((phi / product - 1.0).abs() < 1e-12);
        // Independent numpy cumprod: 3.9956019661670615e-05.
        assert!((phi - 3.9956019661670615e-05).abs() < 1e-15);
        // Exponents agree to 1%; the factors themselves differ by ~6%.
        let sum_b: f64 = (1..=1000).map(|k| s.betas()[k]).sum();
        assert!((sum_b - 10.0599).abs() < 1e-3);
        assert!((phi.ln() / -sum_b - 1.0).abs() < 0.01);
    }

    #[test]
    fn semigroup_and_identity() {
        let s = lin();
        assert_eq!(s.phi(700, 700).unwrap(), 1.0);
        let lhs = s.phi(1000, 0).unwrap();
        let rhs = s.phi(1000, 500).unwrap() * s.phi(500, 0).unwrap();
        assert!((lhs / rhs - 1.0).abs() < 1e-12);
    }

    #[test]
    fn discrete_and_continuous_phi_agree_in_log_space() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Sigmoid] {
            let s = Schedule::standard(kind);
            for n in (50..=1000).step_by(50) {
                let d = s.phi(n, 0).unwrap().ln();
                let c = s.phi_exponential(n, 0).unwrap().ln();
                assert!((d / c - 1.0).abs() < 0.02, "{kind} n={n}: {d} vs {c}");
            }
        }
    }

    #[test]
    fn mean_std_endpoints() {
        let (m, s) = lin().mean_std_curves();
        assert_eq!(m.values[0], 1.0);
        assert_eq!(s.values[0], 0.0);
        assert!((m.values[1000] - 6.321077413042069e-3).abs() < 1e-12);
        assert!((s.values[1000] - 0.99998).abs() < 1e-5);
    }

    #[test]
    fn std_curve_ordering() {
        let std = |k| Schedule::standard(k).mean_std_curves().1.values;
        let (l, g, c) = (std(ScheduleKind::Linear), std(ScheduleKind::Sigmoid), std(ScheduleKind::Cosine));
        for n in 0..=995 {
            assert!(l[n] >= c[n], "lin < cos at {n}");
        }
        for n in 381..=955 {
            assert!(l[n] >= g[n] && g[n] >= c[n], "ordering broken at {n}");
        }
    }

    #[test]
    fn variance_preservation_and_profile_shape() {
        for kind in ScheduleKind::ALL {
            let s = Schedule::standard(kind);
            let (m, sd) = s.mean_std_curves();
            for n in 0..=1000 {
                assert!((m.values[n].powi(2) + sd.values[n].powi(2) - 1.0).abs() < 1e-12);
                let b = s.betas()[n];
                assert!(b > 0.0 && b <= 0.999);
                if n > 0 {
                    assert!(b >= s.betas()[n - 1], "{kind} not monotone at {n}");
                    assert!(s.retention(n) < s.retention(n - 1));
                }
            }
        }
    }

    #[test]
    fn printed_cosine_form_is_not_a_valid_profile() {
        let printed = printed_cosine_betas(1000);
        assert!(printed[0].is_nan());
        assert!(printed[1..].iter().any(|b| *b < 0.0));
    }

    #[test]
    fn csv_header() {
        let csv = lin().mean_std_csv();
        assert!(csv.starts_with("n,mean_coeff,std_coeff\n0,1,0\n"));
        assert_eq!(csv.lines().count(), 1002);
    }

    proptest! {
        #[test]
        fn phi_semigroup(m in 0usize..=1000, n in 0usize..=1000, kind in 0usize..3) {
            let (m, n) = if m <= n { (m, n) } else { (n, m) };
            let s = Schedule::standard(ScheduleKind::ALL[kind]);
            let whole = s.phi(n, 0).unwrap();
            let split = s.phi(n, m).unwrap() * s.phi(m, 0).unwrap();
            prop_assert!((whole - split).abs() <= 1e-12 * whole);
            if n > m {
                prop_assert!(s.phi(n, m).unwrap() < s.phi(n - 1, m).unwrap());
            }
        }
    }
}
