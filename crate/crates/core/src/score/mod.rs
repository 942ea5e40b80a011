//! Time-dependent score fields `s(x, n) ≈ ∇_x log p_n(x)`.
//!
//! [`GmScore`] is exact for Gaussian-mixture data: the forward marginal of a
//! mixture is again a mixture with means `√Φ·μ_k` and variances
//! `Φσ_k² + 1 - Φ`. [`MlpScoreModel`] is a small network fitted with the
//! weighted denoising score-matching objective.

mod mlp;
mod train;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

pub use mlp::{Activation, MlpConfig, MlpScoreModel};
pub use train::{finite_diff_check, train_dsm, weighted_relative_error, DsmProbe, Optimizer, TrainHyper, TrainReport};

use crate::data::GaussianMixtureSpec;
use crate::error::{Error, Result};
use crate::schedule::Schedule;

/// Rows per batch-evaluation chunk. Fixed so chunk boundaries, and hence
/// floating-point results, never depend on the thread count.
pub const EVAL_CHUNK: usize = 256;

pub trait ScoreField: Send + Sync {
    fn dim(&self) -> usize;

    /// Largest step the field is defined for.
    fn max_step(&self) -> usize;

    /// Evaluates `s(x, n)` into `out`.
    fn evaluate_into(&self, x: &[f64], n: usize, out: &mut [f64]);

    /// Whether `s(·, 0)` is unusable (learned models never see `n = 0`).
    fn singular_at_zero(&self) -> bool {
        false
    }

    fn evaluate(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.evaluate_into(x, n, &mut out);
        out
    }

    /// `s(x, t)` at a fractional step `t ∈ (n-1, n]`. Fields defined only on
    /// the integer grid use step `⌈t⌉`.
    fn evaluate_at_time_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.evaluate_into(x, (t.ceil() as usize).min(self.max_step()), out);
    }

    /// Row-wise evaluation of an `M × d` batch at one step.
    fn evaluate_batch(&self, x: ArrayView2<'_, f64>, n: usize) -> Array2<f64> {
        batch_rows(x, |row, out| self.evaluate_into(row, n, out))
    }

    /// Row-wise evaluation at a fractional step.
    fn evaluate_batch_at_time(&self, x: ArrayView2<'_, f64>, t: f64) -> Array2<f64> {
        if t.fract() == 0.0 {
            return self.evaluate_batch(x, t as usize);
        }
        batch_rows(x, |row, out| self.evaluate_at_time_into(row, t, out))
    }
}

fn batch_rows<F>(x: ArrayView2<'_, f64>, eval: F) -> Array2<f64>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    let (m, d) = x.dim();
    let rows: Vec<Vec<f64>> = (0..m.div_ceil(EVAL_CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * EVAL_CHUNK;
            let hi = (lo + EVAL_CHUNK).min(m);
            let mut out = vec![0.0; (hi - lo) * d];
            let mut xs = vec![0.0; d];
            for (i, o) in (lo..hi).zip(out.chunks_exact_mut(d.max(1))) {
                xs.iter_mut().zip(x.row(i)).for_each(|(a, b)| *a = *b);
                eval(&xs, o);
            }
            out
        })
        .collect();
    Array2::from_shape_vec((m, d), rows.concat()).expect("shape")
}

/// Exact score of a Gaussian mixture pushed through the forward kernel.
#[derive(Clone, Debug)]
pub struct GmScore {
    spec: GaussianMixtureSpec,
    retention: Vec<f64>,
}

impl GmScore {
    pub fn new(spec: GaussianMixtureSpec, schedule: &Schedule) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            retention: schedule.retention_table().to_vec(),
        })
    }

    pub fn spec(&self) -> &GaussianMixtureSpec {
        &self.spec
    }

    /// `log p_n(x)`.
    pub fn log_density(&self, x: &[f64], n: usize) -> f64 {
        self.spec.log_density(x, self.retention[n])
    }
}

impl ScoreField for GmScore {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn max_step(&self) -> usize {
        self.retention.len() - 1
    }

    fn evaluate_into(&self, x: &[f64], n: usize, out: &mut [f64]) {
        self.spec.score_into(x, self.retention[n], out);
    }

    /// Retention is interpolated log-linearly inside a step, which is exact
    /// for a rate held constant over the step.
    fn evaluate_at_time_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let n = (t.ceil() as usize).clamp(1, self.max_step());
        let f = (t - (n - 1) as f64).clamp(0.0, 1.0);
        let phi = self.retention[n - 1].powf(1.0 - f) * self.retention[n].powf(f);
        self.spec.score_into(x, phi, out);
    }
}

/// `∇ log p_n(x)` for the forward marginal of `spec`.
pub fn gm_score(spec: &GaussianMixtureSpec, schedule: &Schedule, x: &[f64], n: usize) -> Result<Vec<f64>> {
    schedule.check_step(n)?;
    spec.validate()?;
    let mut out = vec![0.0; x.len()];
    spec.score_into(x, schedule.retention(n), &mut out);
    Ok(out)
}

/// Conditional score `∇_{x_t} log p(x_t | x_0) = -(x_t - √Φ·x_0) / (1 - Φ)`.
pub fn dsm_target(x_t: &[f64], x0: &[f64], n: usize, schedule: &Schedule) -> Result<Vec<f64>> {
    schedule.check_step(n)?;
    if n == 0 {
        return Err(Error::SingularTarget(0));
    }
    let phi = schedule.retention(n);
    let (root, var) = (phi.sqrt(), 1.0 - phi);
    if var <= 0.0 {
        return Err(Error::SingularTarget(n));
    }
    Ok(x_t.iter().zip(x0).map(|(x, a)| -(x - root * a) / var).collect())
}

/// The score of `N(0, I)`, `s(x) = -x`, at every step.
#[derive(Clone, Copy, Debug)]
pub struct StandardNormalScore {
    pub dim: usize,
    pub steps: usize,
}

impl ScoreField for StandardNormalScore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn max_step(&self) -> usize {
        self.steps
    }

    fn evaluate_into(&self, x: &[f64], _n: usize, out: &mut [f64]) {
        out.iter_mut().zip(x).for_each(|(o, v)| *o = -v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, Source};
    use crate::forward::jump_sample;
    use crate::rng;
    use crate::schedule::ScheduleKind;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn lin() -> Schedule {
        Schedule::standard(ScheduleKind::Linear)
    }

    fn single(mu: Vec<f64>, var: f64) -> GaussianMixtureSpec {
        GaussianMixtureSpec {
            weights: vec![1.0],
            means: vec![mu],
            variances: vec![var],
        }
    }

    #[test]
    fn standard_normal_score_is_minus_x() {
        let s = lin();
        let spec = single(vec![0.0, 0.0], 1.0);
        for n in [0, 1, 300, 1000] {
            let out = gm_score(&spec, &s, &[0.7, -1.9], n).unwrap();
            assert!((out[0] + 0.7).abs() < 1e-12 && (out[1] - 1.9).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_variance_shifted_mean() {
        let s = lin();
        let mu = vec![2.0, -1.0];
        let spec = single(mu.clone(), 1.0);
        let x = [0.3, 0.4];
        for n in [0, 5, 250, 999] {
            let root = s.retention(n).sqrt();
            let out = gm_score(&spec, &s, &x, n).unwrap();
            for j in 0..2 {
                assert!((out[j] + (x[j] - root * mu[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_mixture_midpoint() {
        let spec = GaussianMixtureSpec {
            weights: vec![0.5, 0.5],
            means: vec![vec![-2.0, 1.0], vec![2.0, -1.0]],
            variances: vec![0.3, 0.3],
        };
        for n in [0, 10, 700] {
            let out = gm_score(&spec, &lin(), &[0.0, 0.0], n).unwrap();
            assert!(out.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn score_is_gradient_of_log_density() {
        let s = lin();
        let spec = GaussianMixtureSpec {
            weights: vec![0.3, 0.7],
            means: vec![vec![-1.2, 0.4, 0.0], vec![0.9, -0.5, 1.1]],
            variances: vec![0.2, 0.35],
        };
        let field = GmScore::new(spec, &s).unwrap();
        let mut rng = rng::stream(4, 0);
        let h = 1e-5;
        for n in [0, 1, 20, 150, 400, 1000] {
            for _ in 0..30 {
                let x: Vec<f64> = (0..3).map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal)).collect();
                let g = field.evaluate(&x, n);
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
                for j in 0..3 {
                    let (mut a, mut b) = (x.clone(), x.clone());
                    a[j] += h;
                    b[j] -= h;
                    let fd = (field.log_density(&a, n) - field.log_density(&b, n)) / (2.0 * h);
                    assert!((fd - g[j]).abs() / norm < 1e-5, "n={n} j={j}");
                }
            }
        }
    }

    #[test]
    fn far_from_modes_stays_finite() {
        let spec = GaussianMixtureSpec {
            weights: vec![0.5, 0.5],
            means: vec![vec![-1.0], vec![1.0]],
            variances: vec![1e-3, 1e-3],
        };
        let out = gm_score(&spec, &lin(), &[1e4], 0).unwrap();
        assert!(out[0].is_finite());
    }

    #[test]
    fn dsm_target_cases() {
        let s = lin();
        let x0 = [0.5, -1.0];
        let n = 300;
        let root = s.retention(n).sqrt();
        let at_mean: Vec<f64> = x0.iter().map(|v| root * v).collect();
        assert!(dsm_target(&at_mean, &x0, n, &s).unwrap().iter().all(|v| v.abs() < 1e-15));
        let xt = [0.4, 2.0];
        let t = dsm_target(&xt, &x0, 1000, &s).unwrap();
        assert!((t[0] + 0.4).abs() < 0.01 && (t[1] + 2.0).abs() < 0.02);
        assert!(matches!(dsm_target(&xt, &x0, 0, &s), Err(Error::SingularTarget(0))));
    }

    #[test]
    fn dsm_target_averages_to_marginal_score() {
        // For x_0 ~ N(μ, I) the posterior mean of the conditional score at x_t
        // is the marginal score. Check E[target · g(x_t)] = E[score · g(x_t)]
        // for the test functions g = 1 and g = x_t.
        let s = lin();
        let n = 200;
        let mu = vec![1.5, -0.5];
        let spec = single(mu, 1.0);
        let x0s = generate(&Source::Mixture(spec.clone()), 100_000, 3).unwrap();
        let mut rng = rng::stream(5, 0);
        let (mut t1, mut s1, mut tx, mut sx) = ([0.0; 2], [0.0; 2], [0.0; 2], [0.0; 2]);
        for i in 0..x0s.len() {
            let x0 = x0s.row(i);
            let xt = jump_sample(x0, n, &s, &mut rng).unwrap();
            let target = dsm_target(&xt, x0, n, &s).unwrap();
            let score = gm_score(&spec, &s, &xt, n).unwrap();
            for j in 0..2 {
                t1[j] += target[j];
                s1[j] += score[j];
                tx[j] += target[j] * xt[j];
                sx[j] += score[j] * xt[j];
            }
        }
        let m = x0s.len() as f64;
        let var = 1.0 - s.retention(n);
        let tol = 4.0 / (var.sqrt() * m.sqrt());
        for j in 0..2 {
            assert!((t1[j] - s1[j]).abs() / m < tol);
            assert!((tx[j] - sx[j]).abs() / m < 2.0 * tol);
        }
    }

    #[test]
    fn batch_matches_rowwise() {
        let s = lin();
        let spec = GaussianMixtureSpec {
            weights: vec![0.5, 0.5],
            means: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            variances: vec![0.2, 0.2],
        };
        let field = GmScore::new(spec.clone(), &s).unwrap();
        let x = spec.sample(600, 2).unwrap();
        let batch = field.evaluate_batch(x.view(), 40);
        for i in 0..600 {
            let row = x.row(i).to_vec();
            assert_eq!(batch.row(i).to_vec(), field.evaluate(&row, 40));
        }
    }
}
