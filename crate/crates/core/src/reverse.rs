//! Reverse-time VP SDE integration under any [`ScoreField`].
//!
//! The default integrator is Euler–Maruyama with unit step in step units:
//! `x' = x + b(n)·(x/2 + s(x, n)) + √b(n)·z`. The ancestral update
//! `x' = (x + b(n)·s(x, n)) / √(1 - b(n)) + √b(n)·z` is available for
//! sensitivity checks.

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{check_record_steps, Direction, InitMode, PathEnsemble};
use crate::rng::{self, StreamRng};
use crate::schedule::Schedule;
use crate::score::ScoreField;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    EulerMaruyama,
    Ancestral,
}

#[derive(Clone, Debug)]
pub enum ReverseInit {
    /// `samples` i.i.d. draws from `N(0, I)`.
    Noise { samples: usize },
    /// Given `M × d` states at the start step.
    Provided(Array2<f64>),
}

pub struct ReverseRunSpec<'a> {
    pub start_step: usize,
    pub init: ReverseInit,
    pub score: &'a dyn ScoreField,
    pub schedule: &'a Schedule,
    /// Strictly increasing subset of `[0, start_step]`.
    pub record_steps: Vec<usize>,
    pub seed: u64,
    pub integrator: Integrator,
    /// Each step is split into this many equal pieces of the rate.
    pub substeps: usize,
    /// Label stored on the ensemble; `UturnState` for U-turn runs.
    pub init_label: InitMode,
}

impl<'a> ReverseRunSpec<'a> {
    /// Euler–Maruyama from `N(0, I)` at `N` down to 0, recording only step 0.
    pub fn from_noise(score: &'a dyn ScoreField, schedule: &'a Schedule, samples: usize, seed: u64) -> Self {
        Self {
            start_step: schedule.steps(),
            init: ReverseInit::Noise { samples },
            score,
            schedule,
            record_steps: vec![0],
            seed,
            integrator: Integrator::EulerMaruyama,
            substeps: 1,
            init_label: InitMode::Noise,
        }
    }

    fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let d = self.score.dim();
        if self.start_step > self.schedule.steps() {
            problems.push(format!("start_step {} exceeds N = {}", self.start_step, self.schedule.steps()));
        }
        if self.score.max_step() < self.start_step {
            problems.push("score field does not cover the start step".to_string());
        }
        if self.substeps == 0 {
            problems.push("substeps must be at least 1".to_string());
        }
        match &self.init {
            ReverseInit::Noise { samples: 0 } => problems.push("noise init needs at least one sample".into()),
            ReverseInit::Provided(x) if x.nrows() == 0 => problems.push("provided states are empty".into()),
            ReverseInit::Provided(x) if x.ncols() != d => {
                problems.push(format!("provided states have d = {}, score has d = {d}", x.ncols()))
            }
            _ => {}
        }
        if let Err(e) = check_record_steps(&self.record_steps, self.start_step) {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Noise-free part of one step, in place.
pub fn reverse_drift(x: &mut [f64], s: &[f64], beta: f64, integrator: Integrator) {
    match integrator {
        Integrator::EulerMaruyama => {
            for (xi, si) in x.iter_mut().zip(s) {
                *xi += beta * (0.5 * *xi + si);
            }
        }
        Integrator::Ancestral => {
            let inv = 1.0 / (1.0 - beta).sqrt();
            for (xi, si) in x.iter_mut().zip(s) {
                *xi = (*xi + beta * si) * inv;
            }
        }
    }
}

fn update(x: &mut [f64], s: &[f64], beta: f64, integrator: Integrator, rng: &mut impl Rng) {
    reverse_drift(x, s, beta, integrator);
    let noise = beta.sqrt();
    for xi in x.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *xi += noise * z;
    }
}

/// One Euler–Maruyama step from `n` to `n - 1`.
pub fn reverse_step(
    x: &[f64],
    n: usize,
    score: &dyn ScoreField,
    schedule: &Schedule,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Argument("reverse steps start at n = 1".into()));
    }
    let beta = schedule.beta_at(n)?;
    let s = score.evaluate(x, n);
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Propagation { step: n, sample: 0 });
    }
    let mut out = x.to_vec();
    update(&mut out, &s, beta, Integrator::EulerMaruyama, rng);
    Ok(out)
}

/// Integrates every sample from `start_step` to 0.
///
/// Sample `i` draws all its noise (including a noise initialization) from
/// stream `i` of `seed`. Samples whose score or state turns non-finite are
/// dropped and listed in `excluded`; more than 1% dropped fails the run.
pub fn simulate_reverse(spec: &ReverseRunSpec<'_>) -> Result<PathEnsemble> {
    spec.validate()?;
    let d = spec.score.dim();
    let m = match &spec.init {
        ReverseInit::Noise { samples } => *samples,
        ReverseInit::Provided(x) => x.nrows(),
    };
    let mut rngs: Vec<StreamRng> = (0..m as u64).map(|i| rng::stream(spec.seed, i)).collect();
    let mut state = match &spec.init {
        ReverseInit::Noise { .. } => {
            let mut v = vec![0.0; m * d];
            v.par_chunks_mut(d).zip(rngs.par_iter_mut()).for_each(|(row, r)| {
                row.iter_mut().for_each(|x| *x = r.sample(StandardNormal));
            });
            v
        }
        ReverseInit::Provided(x) => x.as_standard_layout().iter().copied().collect(),
    };
    let record = &spec.record_steps;
    let s = record.len();
    let mut values = Array3::<f64>::zeros((m, s, d));
    let mut slot = s;
    let mut store = |state: &[f64], slot: usize| {
        for (i, row) in state.chunks_exact(d).enumerate() {
            for (j, v) in row.iter().enumerate() {
                values[[i, slot, j]] = *v;
            }
        }
    };
    if record[s - 1] == spec.start_step {
        slot -= 1;
        store(&state, slot);
    }
    let mut failed: Vec<Option<usize>> = vec![None; m];
    let k = spec.substeps;
    for n in (1..=spec.start_step).rev() {
        let beta = spec.schedule.beta_at(n)? / k as f64;
        for j in 0..k {
            let view = ArrayView2::from_shape((m, d), &state).expect("shape");
            let scores = if k == 1 {
                spec.score.evaluate_batch(view, n)
            } else {
                spec.score.evaluate_batch_at_time(view, n as f64 - j as f64 / k as f64)
            };
            let scores = scores.as_standard_layout().into_owned();
            let scores = scores.as_slice().expect("standard layout");
            state
                .par_chunks_mut(d)
                .zip(scores.par_chunks(d))
                .zip(rngs.par_iter_mut())
                .zip(failed.par_iter_mut())
                .for_each(|(((x, sc), r), fail)| {
                    if fail.is_some() {
                        return;
                    }
                    if sc.iter().any(|v| !v.is_finite()) {
                        *fail = Some(n);
                        return;
                    }
                    update(x, sc, beta, spec.integrator, r);
                    if x.iter().any(|v| !v.is_finite()) {
                        *fail = Some(n);
                    }
                });
        }
        if slot > 0 && record[slot - 1] == n - 1 {
            slot -= 1;
            store(&state, slot);
        }
    }
    let excluded: Vec<usize> = (0..m).filter(|&i| failed[i].is_some()).collect();
    if excluded.len() * 100 > m {
        return Err(Error::TooManyAborts {
            aborted: excluded.len(),
            total: m,
        });
    }
    let keep: Vec<usize> = (0..m).filter(|&i| failed[i].is_none()).collect();
    let values = if excluded.is_empty() {
        values
    } else {
        values.select(ndarray::Axis(0), &keep)
    };
    Ok(PathEnsemble {
        direction: Direction::Reverse,
        init_mode: spec.init_label,
        record_steps: record.clone(),
        values,
        seed: spec.seed,
        schedule: spec.schedule.spec().clone(),
        sample_ids: keep,
        excluded,
    })
}

/// Final `n = 0` states of a noise-initialized run from `N`.
pub fn generate_from_noise(
    score: &dyn ScoreField,
    schedule: &Schedule,
    samples: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    let ens = simulate_reverse(&ReverseRunSpec::from_noise(score, schedule, samples, seed))?;
    Ok(ens.final_states().to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;
    use crate::score::StandardNormalScore;

    fn lin() -> Schedule {
        Schedule::standard(ScheduleKind::Linear)
    }

    struct Poison;

    impl ScoreField for Poison {
        fn dim(&self) -> usize {
            1
        }
        fn max_step(&self) -> usize {
            1000
        }
        fn evaluate_into(&self, x: &[f64], n: usize, out: &mut [f64]) {
            out[0] = if n == 500 && x[0] > 20.0 { f64::NAN } else { -x[0] };
        }
    }

    #[test]
    fn deterministic_variant_contracts() {
        let b = lin().beta_at(10).unwrap();
        let x = [1.5, -2.0];
        let mut out = x;
        reverse_drift(&mut out, &[-1.5, 2.0], b, Integrator::EulerMaruyama);
        for (o, xi) in out.iter().zip(&x) {
            assert!((o - xi * (1.0 - b / 2.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_rate_is_identity() {
        let mut r = rng::stream(1, 0);
        let mut x = [0.3, -1.0, 2.0];
        update(&mut x, &[5.0, 5.0, 5.0], 0.0, Integrator::EulerMaruyama, &mut r);
        assert_eq!(x, [0.3, -1.0, 2.0]);
    }

    #[test]
    fn standard_normal_is_stationary() {
        let sched = lin();
        let m = 10_000;
        let score = StandardNormalScore { dim: 1, steps: 1000 };
        let spec = ReverseRunSpec {
            start_step: 1000,
            init: ReverseInit::Noise { samples: m },
            score: &score,
            schedule: &sched,
            record_steps: vec![900, 1000],
            seed: 4,
            integrator: Integrator::EulerMaruyama,
            substeps: 1,
            init_label: InitMode::Noise,
        };
        let ens = simulate_reverse(&spec).unwrap();
        let x = ens.at_step(900).unwrap();
        let mean = x.sum() / m as f64;
        let var = x.iter().map(|v| v * v).sum::<f64>() / m as f64 - mean * mean;
        let tol = 4.0 / (m as f64).sqrt();
        assert!(mean.abs() < tol, "{mean}");
        assert!((var - 1.0).abs() < tol, "{var}");
    }

    #[test]
    fn recording_only_the_start_returns_inputs() {
        let sched = lin();
        let score = StandardNormalScore { dim: 2, steps: 1000 };
        let provided = Array2::from_shape_fn((5, 2), |(i, j)| i as f64 - j as f64 * 0.5);
        let spec = ReverseRunSpec {
            start_step: 300,
            init: ReverseInit::Provided(provided.clone()),
            score: &score,
            schedule: &sched,
            record_steps: vec![300],
            seed: 1,
            integrator: Integrator::EulerMaruyama,
            substeps: 1,
            init_label: InitMode::UturnState,
        };
        let ens = simulate_reverse(&spec).unwrap();
        assert_eq!(ens.at_step(300).unwrap(), provided);
        assert_eq!(ens.direction, Direction::Reverse);
    }

    #[test]
    fn record_steps_beyond_start_are_rejected() {
        let sched = lin();
        let score = StandardNormalScore { dim: 2, steps: 1000 };
        let mut spec = ReverseRunSpec::from_noise(&score, &sched, 4, 1);
        spec.start_step = 10;
        spec.record_steps = vec![0, 11];
        assert!(matches!(simulate_reverse(&spec), Err(Error::Validation(_))));
    }

    #[test]
    fn aborts_are_excluded_or_fail_the_run() {
        let sched = lin();
        let few = Array2::from_shape_fn((200, 1), |(i, _)| if i == 7 { 50.0 } else { 0.0 });
        let mut spec = ReverseRunSpec::from_noise(&Poison, &sched, 0, 2);
        spec.start_step = 500;
        spec.init = ReverseInit::Provided(few);
        let ens = simulate_reverse(&spec).unwrap();
        assert_eq!(ens.excluded, vec![7]);
        assert_eq!(ens.samples(), 199);
        assert!(!ens.sample_ids.contains(&7));

        let many = Array2::from_shape_fn((50, 1), |(i, _)| if i < 2 { 50.0 } else { 0.0 });
        spec.init = ReverseInit::Provided(many);
        assert!(matches!(
            simulate_reverse(&spec),
            Err(Error::TooManyAborts { aborted: 2, total: 50 })
        ));
        let mut r = rng::stream(0, 0);
        assert!(matches!(
            reverse_step(&[30.0], 500, &Poison, &sched, &mut r),
            Err(Error::Propagation { step: 500, .. })
        ));
    }

    #[test]
    fn ancestral_and_euler_agree_to_first_order() {
        let sched = lin();
        let score = StandardNormalScore { dim: 2, steps: 1000 };
        let mut a = ReverseRunSpec::from_noise(&score, &sched, 64, 9);
        a.start_step = 20;
        let mut b = ReverseRunSpec::from_noise(&score, &sched, 64, 9);
        b.start_step = 20;
        b.integrator = Integrator::Ancestral;
        let xa = simulate_reverse(&a).unwrap();
        let xb = simulate_reverse(&b).unwrap();
        let diff = (&xa.final_states() - &xb.final_states()).mapv(f64::abs);
        assert!(diff.iter().all(|v| *v < 1e-4));
    }
}
