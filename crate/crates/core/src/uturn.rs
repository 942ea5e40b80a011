//! U-turn sampling: run the forward chain from real samples to a turn step
//! `n_u`, then integrate the reverse process from those states back to 0.

use std::collections::HashSet;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diagnostics::{kid_with, FeatureMap, KidOptions, KidReport};
use crate::error::{Error, Result};
use crate::forward::{simulate_forward_from, InitMode};
use crate::reverse::{simulate_reverse, Integrator, ReverseInit, ReverseRunSpec};
use crate::rng;
use crate::schedule::Schedule;
use crate::score::ScoreField;

/// Synthetic samples with the dataset row that seeded each one.
#[derive(Clone, Debug)]
pub struct UturnSamples {
    pub turn_step: usize,
    pub synthetic: Array2<f64>,
    /// Dataset row index behind each synthetic row.
    pub origins: Vec<usize>,
}

/// Rows `0..m` of the dataset, cycling when `m` exceeds its size.
fn seeding_rows(dataset: &Dataset, m: usize) -> (Array2<f64>, Vec<usize>) {
    let origins: Vec<usize> = (0..m).map(|i| i % dataset.len()).collect();
    (dataset.samples().select(Axis(0), &origins), origins)
}

/// Forward to `n_u`, then reverse to 0 under `score`.
pub fn uturn_generate(
    dataset: &Dataset,
    schedule: &Schedule,
    score: &dyn ScoreField,
    turn_step: usize,
    samples: usize,
    seed: u64,
) -> Result<UturnSamples> {
    if turn_step == 0 || turn_step > schedule.steps() {
        return Err(Error::Range {
            step: turn_step,
            max: schedule.steps(),
        });
    }
    if samples == 0 {
        return Err(Error::Argument("samples must be positive".into()));
    }
    let (x0, origins) = seeding_rows(dataset, samples);
    let fwd = simulate_forward_from(x0.view(), schedule, &[turn_step], rng::derive(seed, "uturn_forward"))?;
    let spec = ReverseRunSpec {
        start_step: turn_step,
        init: ReverseInit::Provided(fwd.final_states().to_owned()),
        score,
        schedule,
        record_steps: vec![0],
        seed: rng::derive(seed, "uturn_reverse"),
        integrator: Integrator::EulerMaruyama,
        substeps: 1,
        init_label: InitMode::UturnState,
    };
    let rev = simulate_reverse(&spec)?;
    let origins = rev.sample_ids.iter().map(|&i| origins[i]).collect();
    Ok(UturnSamples {
        turn_step,
        synthetic: rev.final_states().to_owned(),
        origins,
    })
}

/// Reverse run from `N(0, I)` started at `start_step` instead of `N`.
pub fn noise_generate(
    schedule: &Schedule,
    score: &dyn ScoreField,
    start_step: usize,
    samples: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    let mut spec = ReverseRunSpec::from_noise(score, schedule, samples, rng::derive(seed, "noise_reverse"));
    spec.start_step = start_step;
    Ok(simulate_reverse(&spec)?.final_states().to_owned())
}

/// Mean over coordinates of the Spearman rank correlation between each
/// synthetic row and the row that seeded it.
pub fn pairing_correlation(dataset: &Dataset, out: &UturnSamples) -> f64 {
    let orig = dataset.samples().select(Axis(0), &out.origins);
    let d = orig.ncols();
    (0..d)
        .map(|k| spearman(orig.column(k).to_vec(), out.synthetic.column(k).to_vec()))
        .sum::<f64>()
        / d as f64
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman correlation with average ranks for ties.
pub fn spearman(a: Vec<f64>, b: Vec<f64>) -> f64 {
    let (ra, rb) = (ranks(&a), ranks(&b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Turn steps `round(k·N/12)` for `k = 1..=12`; the last one is `N`.
pub fn default_turn_steps(steps: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (1..=12)
        .map(|k| ((k * steps) as f64 / 12.0).round() as usize)
        .filter(|&n| n >= 1)
        .collect();
    v.dedup();
    if v.last() != Some(&steps) {
        v.push(steps);
    }
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub turn_steps: Vec<usize>,
    pub samples: usize,
    pub seed: u64,
    #[serde(default = "identity")]
    pub feature: FeatureMap,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
}

fn identity() -> FeatureMap {
    FeatureMap::Identity
}

fn default_resamples() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UTurnScan {
    pub turn_steps: Vec<usize>,
    pub kid_uturn: Vec<KidReport>,
    pub kid_noise: Vec<KidReport>,
    pub optimal_step: Option<usize>,
    pub config: ScanConfig,
}

impl UTurnScan {
    /// CSV `n_u,kid_uturn,stderr_uturn,kid_noise,stderr_noise`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n_u,kid_uturn,stderr_uturn,kid_noise,stderr_noise\n");
        for ((n, u), z) in self.turn_steps.iter().zip(&self.kid_uturn).zip(&self.kid_noise) {
            out.push_str(&format!("{n},{},{},{},{}\n", u.mmd2, u.stderr, z.mmd2, z.stderr));
        }
        out
    }

    /// Index of `optimal_step` in `turn_steps`.
    pub fn optimal_index(&self) -> Option<usize> {
        let k = self.optimal_step?;
        self.turn_steps.iter().position(|&n| n == k)
    }
}

fn row_key(row: ndarray::ArrayView1<'_, f64>) -> Vec<u64> {
    row.iter().map(|v| v.to_bits()).collect()
}

/// KID of U-turn and noise-initialized synthetics against `holdout` at
/// every turn step, plus the knee of the U-turn curve.
pub fn uturn_scan(
    dataset: &Dataset,
    holdout: &Dataset,
    schedule: &Schedule,
    score: &dyn ScoreField,
    config: &ScanConfig,
) -> Result<UTurnScan> {
    let mut problems = Vec::new();
    if config.turn_steps.is_empty() {
        problems.push("turn_steps is empty".to_string());
    }
    if config.turn_steps.windows(2).any(|w| w[0] >= w[1]) {
        problems.push("turn_steps must be strictly increasing".to_string());
    }
    if let Some(&bad) = config.turn_steps.iter().find(|&&n| n == 0 || n > schedule.steps()) {
        problems.push(format!("turn step {bad} outside [1, {}]", schedule.steps()));
    }
    if holdout.dim() != dataset.dim() {
        problems.push("holdout and dataset dimensions differ".to_string());
    }
    let (used, _) = seeding_rows(dataset, config.samples.min(dataset.len()));
    let seen: HashSet<Vec<u64>> = used.rows().into_iter().map(row_key).collect();
    let overlap = holdout.samples().rows().into_iter().filter(|r| seen.contains(&row_key(*r))).count();
    if overlap > 0 {
        problems.push(format!("{overlap} holdout rows also seed the forward runs"));
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }

    let real = config.feature.apply(holdout.samples())?;
    let opts = KidOptions {
        bootstrap_resamples: config.bootstrap_resamples,
        bootstrap_seed: rng::derive(config.seed, "kid"),
        feature: config.feature.id(),
    };
    let mut kid_uturn = Vec::new();
    let mut kid_noise = Vec::new();
    for &n in &config.turn_steps {
        let point_seed = rng::derive(config.seed, &format!("turn{n}"));
        let u = uturn_generate(dataset, schedule, score, n, config.samples, point_seed)?;
        let z = noise_generate(schedule, score, n, config.samples, point_seed)?;
        kid_uturn.push(kid_with(real.view(), config.feature.apply(u.synthetic.view())?.view(), &opts)?);
        kid_noise.push(kid_with(real.view(), config.feature.apply(z.view())?.view(), &opts)?);
    }
    let values: Vec<f64> = kid_uturn.iter().map(|k| k.mmd2).collect();
    Ok(UTurnScan {
        optimal_step: detect_knee(&config.turn_steps, &values),
        turn_steps: config.turn_steps.clone(),
        kid_uturn,
        kid_noise,
        config: config.clone(),
    })
}

/// Least-squares fit of `y ≈ a + b·x + c·max(0, x - x_k)`; returns the SSE.
fn hinge_sse(x: &[f64], y: &[f64], knot: Option<f64>) -> f64 {
    let basis = |xi: f64| -> Vec<f64> {
        let mut v = vec![1.0, xi];
        if let Some(k) = knot {
            v.push((xi - k).max(0.0));
        }
        v
    };
    let p = if knot.is_some() { 3 } else { 2 };
    let mut ata = vec![vec![0.0; p]; p];
    let mut aty = vec![0.0; p];
    for (&xi, &yi) in x.iter().zip(y) {
        let b = basis(xi);
        for r in 0..p {
            aty[r] += b[r] * yi;
            for c in 0..p {
                ata[r][c] += b[r] * b[c];
            }
        }
    }
    let coef = solve(ata, aty);
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let fit: f64 = basis(xi).iter().zip(&coef).map(|(a, b)| a * b).sum();
            (yi - fit).powi(2)
        })
        .sum()
}

/// Gaussian elimination with partial pivoting on a small dense system.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        a.swap(col, piv);
        b.swap(col, piv);
        let d = a[col][col];
        if d.abs() < 1e-300 {
            continue;
        }
        for r in col + 1..n {
            let f = a[r][col] / d;
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = if a[r][r].abs() < 1e-300 { 0.0 } else { (b[r] - s) / a[r][r] };
    }
    x
}

/// Minimum relative SSE reduction for a two-segment fit to count as a knee.
pub const KNEE_MIN_REDUCTION: f64 = 0.2;

/// Breakpoint of the best continuous two-segment linear fit over interior
/// grid points, or `None` with fewer than 4 points or when the fit improves
/// on a single line by less than 20% of its SSE.
pub fn detect_knee(steps: &[usize], values: &[f64]) -> Option<usize> {
    if steps.len() < 4 || steps.len() != values.len() {
        return None;
    }
    let span = (steps[steps.len() - 1] - steps[0]).max(1) as f64;
    let x: Vec<f64> = steps.iter().map(|&s| (s - steps[0]) as f64 / span).collect();
    let line = hinge_sse(&x, values, None);
    let scale = values.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    if line <= 1e-24 * scale {
        return None;
    }
    let (best, sse) = (1..steps.len() - 1)
        .map(|k| (k, hinge_sse(&x, values, Some(x[k]))))
        .min_by(|a, b| a.1.total_cmp(&b.1))?;
    ((line - sse) / line >= KNEE_MIN_REDUCTION).then_some(steps[best])
}
