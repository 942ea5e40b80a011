//! Statistics on path ensembles and sample sets: reverse autocorrelation,
//! half-decay time, score-norm curves, the KS Gaussianity ratio,
//! polynomial-kernel KID and a plateau detector.

use std::cmp::Ordering;
use std::path::PathBuf;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::data;
use crate::error::{Error, Result};
use crate::forward::{ratio_autocorr, Direction, PathEnsemble};
use crate::rng;
use crate::schedule::Schedule;
use crate::score::ScoreField;
use crate::series::{DiagnosticSeries, SeriesMeta};

/// `C_{t;r}(τ) = E[x(t)·x(τ)] / E[x(t)²]` on a reverse ensemble.
pub fn reverse_autocorr(ensemble: &PathEnsemble, anchor: usize, steps: &[usize]) -> Result<DiagnosticSeries> {
    if ensemble.direction != Direction::Reverse {
        return Err(Error::Direction { expected: "reverse" });
    }
    if let Some(&bad) = steps.iter().find(|&&s| s > anchor) {
        return Err(Error::Argument(format!("step {bad} lies after anchor {anchor}")));
    }
    ratio_autocorr(
        ensemble,
        anchor,
        steps,
        &format!("reverse_autocorr_{anchor}"),
        "dimension_sample_ratio",
    )
}

/// Lag at which an autocorrelation curve falls to 1/2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HalfDecay {
    pub anchor: usize,
    pub delta: f64,
    pub stderr: f64,
    /// No crossing in `[0, anchor]`; `delta` is then `anchor`.
    pub censored: bool,
}

/// Scans `series` downward from its largest step (the anchor) and linearly
/// interpolates the first crossing of 1/2.
pub fn half_decay(series: &DiagnosticSeries) -> Result<HalfDecay> {
    let len = series.steps.len();
    if len == 0 {
        return Err(Error::Argument("empty series".into()));
    }
    if series.steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Argument("series steps must be increasing".into()));
    }
    let anchor = series.steps[len - 1];
    let v = &series.values;
    let se = &series.stderr;
    for i in (0..len - 1).rev() {
        let (hi, lo) = (v[i + 1], v[i]);
        if hi >= 0.5 && lo <= 0.5 {
            let (t_hi, t_lo) = (series.steps[i + 1] as f64, series.steps[i] as f64);
            if lo == 0.5 {
                return Ok(HalfDecay {
                    anchor,
                    delta: anchor as f64 - t_lo,
                    stderr: finite_or_zero(se[i] / slope(hi, lo, t_hi, t_lo)),
                    censored: false,
                });
            }
            let frac = (hi - 0.5) / (hi - lo);
            let tau = t_hi - frac * (t_hi - t_lo);
            let s = 0.5 * (se[i] + se[i + 1]);
            return Ok(HalfDecay {
                anchor,
                delta: anchor as f64 - tau,
                stderr: finite_or_zero(s / slope(hi, lo, t_hi, t_lo)),
                censored: false,
            });
        }
    }
    Ok(HalfDecay {
        anchor,
        delta: anchor as f64,
        stderr: 0.0,
        censored: true,
    })
}

fn slope(hi: f64, lo: f64, t_hi: f64, t_lo: f64) -> f64 {
    ((hi - lo) / (t_hi - t_lo)).abs()
}

fn finite_or_zero(x: f64) -> f64 {
    if x.is_finite() {
        x
    } else {
        0.0
    }
}

/// `δ(t)` over a family of curves, each anchored at its largest step.
pub fn half_decay_time(family: &[DiagnosticSeries]) -> Result<DiagnosticSeries> {
    let mut decays: Vec<HalfDecay> = family.iter().map(half_decay).collect::<Result<_>>()?;
    decays.sort_by_key(|h| h.anchor);
    let mut flags: Vec<String> = decays
        .iter()
        .filter(|h| h.censored)
        .map(|h| format!("censored:{}", h.anchor))
        .collect();
    flags.insert(0, "first_crossing_from_anchor".to_string());
    let meta = SeriesMeta {
        samples: family.first().and_then(|s| s.meta.samples),
        schedule: family.first().and_then(|s| s.meta.schedule),
        estimator: "linear_interpolation".into(),
        flags,
    };
    DiagnosticSeries::new(
        "half_decay",
        decays.iter().map(|h| h.anchor).collect(),
        decays.iter().map(|h| h.delta).collect(),
        decays.iter().map(|h| h.stderr).collect(),
        meta,
    )
}

/// `δ(t)` for every anchor in `anchors`, using all recorded steps below it.
pub fn reverse_half_decay(ensemble: &PathEnsemble, anchors: &[usize]) -> Result<DiagnosticSeries> {
    let family = anchors
        .iter()
        .map(|&t| {
            let steps: Vec<usize> = ensemble.record_steps.iter().copied().filter(|&s| s <= t).collect();
            reverse_autocorr(ensemble, t, &steps)
        })
        .collect::<Result<Vec<_>>>()?;
    half_decay_time(&family)
}

/// `S(t)` and `M(t)` from the mean squared score on an ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNorms {
    pub s: DiagnosticSeries,
    pub m: DiagnosticSeries,
    /// Step that `S` is normalized at: 0, or 1 when the field is singular at 0.
    pub reference_step: usize,
}

/// Mean of `‖s(x, n)‖²` over the recorded states at `n`, with its stderr.
fn mean_sq_score(score: &dyn ScoreField, x: ArrayView2<'_, f64>, n: usize) -> (f64, f64) {
    let s = score.evaluate_batch(x, n);
    let sq: Vec<f64> = s.rows().into_iter().map(|r| r.dot(&r)).collect();
    let m = sq.len() as f64;
    let mean = sq.iter().sum::<f64>() / m;
    let var = if sq.len() > 1 {
        sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    (mean, (var / m).sqrt())
}

/// `S(t) = √(E‖s_t‖² / E‖s_ref‖²)` and
/// `M(t) = √(λ(t)·E‖s_t‖² / (λ(N)·E‖s_N‖²))` on a forward ensemble.
pub fn score_norm_curves(score: &dyn ScoreField, ensemble: &PathEnsemble, schedule: &Schedule) -> Result<ScoreNorms> {
    if ensemble.direction != Direction::Forward {
        return Err(Error::Direction { expected: "forward" });
    }
    let big_n = schedule.steps();
    let reference_step = usize::from(score.singular_at_zero());
    let steps = &ensemble.record_steps;
    if !steps.contains(&reference_step) || !steps.contains(&big_n) {
        return Err(Error::Argument(format!(
            "ensemble must record steps {reference_step} and {big_n}"
        )));
    }
    let usable: Vec<usize> = steps.iter().copied().filter(|&n| n >= reference_step).collect();
    let moments: Vec<(f64, f64)> = usable
        .iter()
        .map(|&n| Ok(mean_sq_score(score, ensemble.at_step(n)?, n)))
        .collect::<Result<_>>()?;
    let at = |n: usize| moments[usable.iter().position(|&s| s == n).expect("recorded")];
    let (e_ref, _) = at(reference_step);
    let (e_end, _) = at(big_n);
    let w_end = schedule.dsm_weight(big_n) * e_end;
    if e_ref == 0.0 {
        return Err(Error::DegenerateNormalization(format!("S at step {reference_step}")));
    }
    if w_end == 0.0 {
        return Err(Error::DegenerateNormalization(format!("M at step {big_n}")));
    }
    let mut s_vals = Vec::new();
    let mut s_err = Vec::new();
    let mut m_vals = Vec::new();
    let mut m_err = Vec::new();
    for (&n, &(e, se)) in usable.iter().zip(&moments) {
        let s = (e / e_ref).sqrt();
        let m = (schedule.dsm_weight(n) * e / w_end).sqrt();
        let rel = if e > 0.0 { 0.5 * se / e } else { 0.0 };
        s_vals.push(s);
        s_err.push(if n == reference_step { 0.0 } else { s * rel });
        m_vals.push(m);
        m_err.push(if n == big_n { 0.0 } else { m * rel });
    }
    let mut flags = vec![format!("reference_step:{reference_step}")];
    if reference_step == 1 {
        flags.push("singular_at_zero".into());
    }
    let meta = SeriesMeta {
        samples: Some(ensemble.samples()),
        schedule: Some(schedule.kind()),
        estimator: "ensemble_mean_sq_score".into(),
        flags,
    };
    Ok(ScoreNorms {
        s: DiagnosticSeries::new("score_norm", usable.clone(), s_vals, s_err, meta.clone())?,
        m: DiagnosticSeries::new("weighted_score_norm", usable, m_vals, m_err, meta)?,
        reference_step,
    })
}

/// Smallest `M` for which the asymptotic KS p-value is used.
pub const KS_MIN_SAMPLES: usize = 25;

pub fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// One-sample KS statistic of `values` against `N(0, 1)`.
pub fn ks_statistic(values: ArrayView1<'_, f64>) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() as f64;
    v.iter().enumerate().fold(0.0, |d, (i, x)| {
        let f = standard_normal_cdf(*x);
        d.max((i as f64 + 1.0) / m - f).max(f - i as f64 / m)
    })
}

/// `P(K > λ)` for the Kolmogorov distribution.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // P(K ≤ λ) = √(2π)/λ · Σ exp(-(2k-1)²π²/(8λ²))
        let c = std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let sum: f64 = (1..=20)
            .map(|k| {
                let j = (2 * k - 1) as f64;
                (-j * j * c).exp()
            })
            .sum();
        (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * sum).clamp(0.0, 1.0)
    } else {
        let sum: f64 = (1..=100)
            .map(|k| {
                let k = k as f64;
                let sign = if k as u64 % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * k * k * lambda * lambda).exp()
            })
            .sum();
        (2.0 * sum).clamp(0.0, 1.0)
    }
}

/// Asymptotic p-value of the KS test of `values` against `N(0, 1)`.
pub fn ks_p_value(values: ArrayView1<'_, f64>) -> f64 {
    let m = values.len() as f64;
    kolmogorov_survival(m.sqrt() * ks_statistic(values))
}

/// Fraction of coordinates whose marginal fails the KS test against
/// `N(0, 1)` at level `alpha`.
pub fn ks_ratio(samples: ArrayView2<'_, f64>, alpha: f64) -> Result<f64> {
    let (m, d) = samples.dim();
    if m < KS_MIN_SAMPLES {
        return Err(Error::SampleSize {
            got: m,
            min: KS_MIN_SAMPLES,
        });
    }
    if d == 0 {
        return Err(Error::Argument("no coordinates".into()));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Argument(format!("alpha {alpha} outside [0, 1)")));
    }
    let rejected = (0..d)
        .into_par_iter()
        .filter(|&k| ks_p_value(samples.column(k)) < alpha)
        .count();
    Ok(rejected as f64 / d as f64)
}

/// KS ratio at every recorded step, with binomial standard errors.
pub fn ks_ratio_series(ensemble: &PathEnsemble, alpha: f64) -> Result<DiagnosticSeries> {
    let d = ensemble.dim() as f64;
    let mut values = Vec::new();
    let mut stderr = Vec::new();
    for &n in &ensemble.record_steps {
        let r = ks_ratio(ensemble.at_step(n)?, alpha)?;
        values.push(r);
        stderr.push((r * (1.0 - r) / d).sqrt());
    }
    let meta = SeriesMeta {
        samples: Some(ensemble.samples()),
        schedule: Some(ensemble.schedule.kind),
        estimator: "ks_fixed_standard_normal".into(),
        flags: vec![format!("alpha:{alpha}")],
    };
    DiagnosticSeries::new("ks_ratio", ensemble.record_steps.clone(), values, stderr, meta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyKernel {
    pub degree: u32,
    pub offset: f64,
    pub scale: f64,
}

impl PolyKernel {
    /// `k(u, v) = (uᵀv/d + 1)³`.
    pub fn standard(dim: usize) -> Self {
        Self {
            degree: 3,
            offset: 1.0,
            scale: 1.0 / dim as f64,
        }
    }

    #[inline]
    pub fn eval(&self, u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> f64 {
        (self.scale * u.dot(&v) + self.offset).powi(self.degree as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KidReport {
    pub mmd2: f64,
    pub stderr: f64,
    pub kernel: PolyKernel,
    pub m_real: usize,
    pub m_gen: usize,
    pub feature: String,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KidOptions {
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    /// Feature-map identifier copied into the report.
    pub feature: String,
}

impl Default for KidOptions {
    fn default() -> Self {
        Self {
            bootstrap_resamples: 10,
            bootstrap_seed: 0,
            feature: "identity".into(),
        }
    }
}

/// Unbiased polynomial-kernel MMD² with default options.
pub fn kid(real: ArrayView2<'_, f64>, gen: ArrayView2<'_, f64>) -> Result<KidReport> {
    kid_with(real, gen, &KidOptions::default())
}

/// Total order on matrices used to make the estimator symmetric.
fn matrix_cmp(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Ordering {
    a.nrows().cmp(&b.nrows()).then_with(|| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

struct Blocks {
    bounds: Vec<(usize, usize)>,
}

impl Blocks {
    fn new(m: usize) -> Self {
        let size = ((m as f64).sqrt().round() as usize).max(1);
        let bounds = (0..m.div_ceil(size))
            .map(|b| (b * size, ((b + 1) * size).min(m)))
            .collect();
        Self { bounds }
    }

    fn len(&self) -> usize {
        self.bounds.len()
    }

    fn count(&self, b: usize) -> f64 {
        let (lo, hi) = self.bounds[b];
        (hi - lo) as f64
    }
}

/// Kernel sums over every pair of blocks, excluding `i = j` when `same`.
fn block_sums(
    kernel: &PolyKernel,
    x: ArrayView2<'_, f64>,
    bx: &Blocks,
    y: ArrayView2<'_, f64>,
    by: &Blocks,
    same: bool,
) -> Vec<Vec<f64>> {
    (0..bx.len())
        .into_par_iter()
        .map(|a| {
            let (alo, ahi) = bx.bounds[a];
            (0..by.len())
                .map(|b| {
                    let (blo, bhi) = by.bounds[b];
                    let mut s = 0.0;
                    for i in alo..ahi {
                        let xi = x.row(i);
                        for j in blo..bhi {
                            if same && i == j {
                                continue;
                            }
                            s += kernel.eval(xi, y.row(j));
                        }
                    }
                    s
                })
                .collect()
        })
        .collect()
}

/// Within-set sum and pair count over a multiset of blocks.
fn within(sums: &[Vec<f64>], blocks: &Blocks, pick: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0.0;
    for (p, &a) in pick.iter().enumerate() {
        for (q, &b) in pick.iter().enumerate() {
            if p != q && a != b {
                total += sums[a][b];
                pairs += blocks.count(a) * blocks.count(b);
            } else {
                // Same block (or two copies of it): distinct-index pairs only.
                total += sums[a][a];
                pairs += blocks.count(a) * (blocks.count(a) - 1.0);
            }
        }
    }
    total / pairs
}

fn across(sums: &[Vec<f64>], bx: &Blocks, px: &[usize], by: &Blocks, py: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0.0;
    for &a in px {
        for &b in py {
            total += sums[a][b];
            pairs += bx.count(a) * by.count(b);
        }
    }
    total / pairs
}

/// Unbiased MMD² with `k(u, v) = (uᵀv/d + 1)³` and a block-bootstrap
/// standard error (blocks of about `√M` consecutive rows). Symmetric in its
/// arguments bit for bit.
pub fn kid_with(real: ArrayView2<'_, f64>, gen: ArrayView2<'_, f64>, opts: &KidOptions) -> Result<KidReport> {
    if real.ncols() != gen.ncols() {
        return Err(Error::Argument(format!(
            "feature dimensions differ: {} vs {}",
            real.ncols(),
            gen.ncols()
        )));
    }
    for (m, which) in [(real.nrows(), "real"), (gen.nrows(), "generated")] {
        if m < 2 {
            return Err(Error::Argument(format!("{which} set needs at least 2 samples, got {m}")));
        }
    }
    let d = real.ncols();
    if d == 0 {
        return Err(Error::Argument("zero-dimensional features".into()));
    }
    let kernel = PolyKernel::standard(d);
    let (x, y) = if matrix_cmp(real, gen) == Ordering::Greater {
        (gen, real)
    } else {
        (real, gen)
    };
    let (bx, by) = (Blocks::new(x.nrows()), Blocks::new(y.nrows()));
    let sxx = block_sums(&kernel, x, &bx, x, &bx, true);
    let syy = block_sums(&kernel, y, &by, y, &by, true);
    let sxy = block_sums(&kernel, x, &bx, y, &by, false);
    let all_x: Vec<usize> = (0..bx.len()).collect();
    let all_y: Vec<usize> = (0..by.len()).collect();
    let statistic = |px: &[usize], py: &[usize]| {
        within(&sxx, &bx, px) + within(&syy, &by, py) - 2.0 * across(&sxy, &bx, px, &by, py)
    };
    let mmd2 = statistic(&all_x, &all_y);

    let mut r = rng::stream(opts.bootstrap_seed, 0);
    let boots: Vec<f64> = (0..opts.bootstrap_resamples)
        .map(|_| {
            let px: Vec<usize> = (0..bx.len()).map(|_| r.random_range(0..bx.len())).collect();
            let py: Vec<usize> = (0..by.len()).map(|_| r.random_range(0..by.len())).collect();
            statistic(&px, &py)
        })
        .collect();
    let stderr = if boots.len() > 1 {
        let mean = boots.iter().sum::<f64>() / boots.len() as f64;
        (boots.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (boots.len() - 1) as f64).sqrt()
    } else {
        f64::NAN
    };
    Ok(KidReport {
        mmd2,
        stderr,
        kernel,
        m_real: real.nrows(),
        m_gen: gen.nrows(),
        feature: opts.feature.clone(),
        bootstrap_resamples: opts.bootstrap_resamples,
        bootstrap_seed: opts.bootstrap_seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureMap {
    Identity,
    /// `x ↦ Pᵀx` with `P` a `d × dim` matrix of `N(0, 1)/√dim` entries.
    RandomProjection { dim: usize, seed: u64 },
    /// Precomputed features in the binary sample format, row-aligned with
    /// the samples.
    ExternalFile { path: PathBuf },
}

impl FeatureMap {
    pub fn id(&self) -> String {
        match self {
            FeatureMap::Identity => "identity".into(),
            FeatureMap::RandomProjection { dim, seed } => format!("random_projection:{dim}:{seed}"),
            FeatureMap::ExternalFile { path } => format!("external_file:{}", path.display()),
        }
    }

    pub fn apply(&self, samples: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        match self {
            FeatureMap::Identity => Ok(samples.to_owned()),
            FeatureMap::RandomProjection { dim, seed } => {
                if *dim == 0 {
                    return Err(Error::Argument("projection dimension must be positive".into()));
                }
                let mut r = rng::stream(*seed, 0);
                let s = 1.0 / (*dim as f64).sqrt();
                let p = Array2::from_shape_simple_fn((samples.ncols(), *dim), || {
                    s * r.sample::<f64, _>(StandardNormal)
                });
                Ok(samples.dot(&p))
            }
            FeatureMap::ExternalFile { path } => {
                let f = data::read_binary(path)?;
                if f.nrows() != samples.nrows() {
                    return Err(Error::format(
                        path,
                        format!("{} feature rows for {} samples", f.nrows(), samples.nrows()),
                    ));
                }
                Ok(f)
            }
        }
    }
}

pub fn feature_map(samples: ArrayView2<'_, f64>, mode: &FeatureMap) -> Result<Array2<f64>> {
    mode.apply(samples)
}

/// Smallest step `n` such that over `[n, n + window]` the spread of the
/// series relative to its magnitude stays below `rel_tol`. `None` if no such
/// window exists.
pub fn plateau_step(series: &DiagnosticSeries, window: usize, rel_tol: f64) -> Result<Option<usize>> {
    let steps = &series.steps;
    let (Some(&first), Some(&last)) = (steps.first(), steps.last()) else {
        return Err(Error::Argument("empty series".into()));
    };
    if last - first < window {
        return Err(Error::Argument(format!(
            "series spans {} steps, shorter than the window {window}",
            last - first
        )));
    }
    for (i, &n) in steps.iter().enumerate() {
        if n + window > last {
            break;
        }
        let vals = steps[i..]
            .iter()
            .zip(&series.values[i..])
            .take_while(|(s, _)| **s <= n + window)
            .map(|(_, v)| *v);
        let (lo, hi, mag) = vals.fold((f64::INFINITY, f64::NEG_INFINITY, 0.0f64), |(lo, hi, mag), v| {
            (lo.min(v), hi.max(v), mag.max(v.abs()))
        });
        let spread = hi - lo;
        if spread == 0.0 || (mag > 0.0 && spread / mag < rel_tol) {
            return Ok(Some(n));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GaussianMixtureSpec, Source};
    use crate::forward::{simulate_forward, InitMode};
    use crate::schedule::{ScheduleKind, ScheduleSpec};
    use crate::score::GmScore;
    use ndarray::{s, Array3};
    use proptest::prelude::{prop_assert_eq, proptest, ProptestConfig};

    fn gaussian(m: usize, d: usize, shift: f64, seed: u64) -> Array2<f64> {
        let mut r = rng::stream(seed, 0);
        Array2::from_shape_simple_fn((m, d), || shift + r.sample::<f64, _>(StandardNormal))
    }

    fn brute_mmd2(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> f64 {
        let d = x.ncols() as f64;
        let k = |u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>| (u.dot(&v) / d + 1.0).powi(3);
        let (m, n) = (x.nrows(), y.nrows());
        let mut xx = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    xx += k(x.row(i), x.row(j));
                }
            }
        }
        let mut yy = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    yy += k(y.row(i), y.row(j));
                }
            }
        }
        let mut xy = 0.0;
        for i in 0..m {
            for j in 0..n {
                xy += k(x.row(i), y.row(j));
            }
        }
        xx / (m * (m - 1)) as f64 + yy / (n * (n - 1)) as f64 - 2.0 * xy / (m * n) as f64
    }

    #[test]
    fn kid_matches_brute_force() {
        let x = gaussian(50, 3, 0.0, 1);
        let y = gaussian(43, 3, 0.4, 2);
        let rep = kid(x.view(), y.view()).unwrap();
        assert!((rep.mmd2 - brute_mmd2(x.view(), y.view())).abs() < 1e-10);
        assert_eq!(rep.kernel, PolyKernel::standard(3));
    }

    #[test]
    fn kid_is_symmetric() {
        let x = gaussian(60, 2, 0.0, 3);
        let y = gaussian(60, 2, 0.1, 4);
        let a = kid(x.view(), y.view()).unwrap();
        let b = kid(y.view(), x.view()).unwrap();
        assert_eq!(a.mmd2.to_bits(), b.mmd2.to_bits());
        assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
    }

    #[test]
    fn kid_separates_shifted_gaussians() {
        let x = gaussian(2000, 2, 0.0, 5);
        let y = gaussian(2000, 2, 2.0, 6);
        let rep = kid(x.view(), y.view()).unwrap();
        assert!(rep.mmd2 > 10.0 * rep.stderr, "{rep:?}");
    }

    #[test]
    fn kid_identical_halves_are_near_zero() {
        let z = gaussian(4000, 2, 0.0, 7);
        let rep = kid(z.slice(s![..2000, ..]), z.slice(s![2000.., ..])).unwrap();
        assert!(rep.mmd2.abs() < 3.0 * rep.stderr, "{rep:?}");
    }

    #[test]
    fn kid_rejects_bad_shapes() {
        let x = gaussian(10, 2, 0.0, 1);
        let y = gaussian(10, 3, 0.0, 1);
        assert!(matches!(kid(x.view(), y.view()), Err(Error::Argument(_))));
        assert!(kid(x.slice(s![..1, ..]), x.view()).is_err());
    }

    #[test]
    fn ks_null_and_power() {
        let z = gaussian(10_000, 64, 0.0, 11);
        let r = ks_ratio(z.view(), 0.05).unwrap();
        assert!((r - 0.05).abs() <= 0.06, "{r}");
        let spec = GaussianMixtureSpec {
            weights: vec![0.5, 0.5],
            means: vec![vec![-2.0; 8], vec![2.0; 8]],
            variances: vec![0.1, 0.1],
        };
        let bimodal = spec.sample(2000, 3).unwrap();
        assert!(ks_ratio(bimodal.view(), 0.05).unwrap() >= 0.95);
        assert!(matches!(
            ks_ratio(z.slice(s![..24, ..]), 0.05),
            Err(Error::SampleSize { got: 24, min: 25 })
        ));
    }

    #[test]
    fn kolmogorov_branches_agree() {
        for l in [1.1, 1.15, 1.18, 1.2, 1.3] {
            let c = std::f64::consts::PI.powi(2) / (8.0 * l * l);
            let a: f64 = 1.0
                - (2.0 * std::f64::consts::PI).sqrt() / l
                    * (1..=20).map(|k| (-(((2 * k - 1) as f64).powi(2)) * c).exp()).sum::<f64>();
            let b: f64 = 2.0
                * (1..=100)
                    .map(|k| {
                        let k = k as f64;
                        (if k as u64 % 2 == 1 { 1.0 } else { -1.0 }) * (-2.0 * k * k * l * l).exp()
                    })
                    .sum::<f64>();
            assert!((a - b).abs() < 1e-12, "{l}: {a} {b}");
        }
        // Tabulated critical value at α = 0.05.
        assert!((kolmogorov_survival(1.358) - 0.05).abs() < 5e-4);
    }

    #[test]
    fn ks_statistic_of_a_single_point() {
        let x = ndarray::arr1(&[0.0]);
        assert!((ks_statistic(x.view()) - 0.5).abs() < 1e-15);
    }

    fn constructed(anchor: usize, drop_at: usize) -> DiagnosticSeries {
        let steps: Vec<usize> = (0..=anchor).collect();
        let values = steps.iter().map(|&s| if s > drop_at { 1.0 } else { 0.0 }).collect();
        DiagnosticSeries::exact("c", steps, values, "test")
    }

    #[test]
    fn half_decay_of_a_step_drop() {
        let h = half_decay(&constructed(100, 90)).unwrap();
        // Drop between τ = 91 and τ = 90, i.e. lag k = 10.
        assert!(h.delta > 9.0 && h.delta < 10.0, "{h:?}");
        assert!(!h.censored);
    }

    #[test]
    fn half_decay_exact_grid_crossing() {
        let steps: Vec<usize> = (0..=20).collect();
        let values = steps.iter().map(|&s| s as f64 / 20.0).collect();
        let h = half_decay(&DiagnosticSeries::exact("lin", steps, values, "test")).unwrap();
        assert_eq!(h.delta, 10.0);
    }

    #[test]
    fn half_decay_censored() {
        let h = half_decay(&DiagnosticSeries::exact("one", vec![0], vec![1.0], "t")).unwrap();
        assert!(h.censored && h.delta == 0.0);
        let flat = DiagnosticSeries::exact("flat", (0..10).collect(), vec![0.9; 10], "t");
        let fam = half_decay_time(&[flat, constructed(50, 40)]).unwrap();
        assert_eq!(fam.steps, vec![9, 50]);
        assert!(fam.meta.flags.contains(&"censored:9".to_string()));
    }

    #[test]
    fn plateau_cases() {
        let steps: Vec<usize> = (0..=1000).collect();
        let constant = DiagnosticSeries::exact("c", steps.clone(), vec![2.0; 1001], "t");
        assert_eq!(plateau_step(&constant, 50, 0.02).unwrap(), Some(0));
        let ramp = DiagnosticSeries::exact("r", steps.clone(), steps.iter().map(|&s| s as f64).collect(), "t");
        assert_eq!(plateau_step(&ramp, 50, 0.02).unwrap(), None);
        let jump = DiagnosticSeries::exact(
            "j",
            steps.clone(),
            steps.iter().map(|&s| if s < 600 { s as f64 / 600.0 } else { 3.0 }).collect(),
            "t",
        );
        assert_eq!(plateau_step(&jump, 50, 0.02).unwrap(), Some(600));
        let short = DiagnosticSeries::exact("s", vec![0, 10], vec![1.0, 1.0], "t");
        assert!(plateau_step(&short, 50, 0.02).is_err());
    }

    #[test]
    fn projection_roughly_preserves_distances() {
        let x = gaussian(2000, 2, 0.0, 1);
        let f = feature_map(x.view(), &FeatureMap::RandomProjection { dim: 64, seed: 9 }).unwrap();
        let mut total = 0.0;
        for p in 0..1000 {
            let (i, j) = (2 * p, 2 * p + 1);
            let a = (&x.row(i) - &x.row(j)).mapv(|v| v * v).sum();
            let b = (&f.row(i) - &f.row(j)).mapv(|v| v * v).sum();
            total += (b - a) / a;
        }
        assert!((total / 1000.0).abs() < 0.1);
        assert_eq!(feature_map(x.view(), &FeatureMap::Identity).unwrap(), x);
    }

    #[test]
    fn external_features_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feat.bin");
        let feats = gaussian(30, 4, 0.0, 2).mapv(|v| v as f32 as f64);
        data::write_binary(&path, feats.view()).unwrap();
        let mode = FeatureMap::ExternalFile { path: path.clone() };
        let back = feature_map(Array2::zeros((30, 2)).view(), &mode).unwrap();
        assert!(back.iter().zip(feats.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(feature_map(Array2::zeros((29, 2)).view(), &mode).is_err());
        std::fs::write(&path, b"junk").unwrap();
        assert!(matches!(feature_map(Array2::zeros((30, 2)).view(), &mode), Err(Error::Format { .. })));
    }

    #[test]
    fn reverse_autocorr_checks_direction() {
        let sched = Schedule::standard(ScheduleKind::Linear);
        let ds = generate(&Source::Builtin(data::Builtin::TwoMoons), 20, 1).unwrap();
        let fwd = simulate_forward(&ds, &sched, &[0, 5, 10], 1).unwrap();
        assert!(matches!(reverse_autocorr(&fwd, 10, &[0, 10]), Err(Error::Direction { .. })));
        let mut rev = fwd.clone();
        rev.direction = Direction::Reverse;
        rev.init_mode = InitMode::Noise;
        let c = reverse_autocorr(&rev, 10, &[0, 5, 10]).unwrap();
        assert_eq!(c.values[2], 1.0);
        let one = PathEnsemble {
            values: Array3::from_elem((1, 3, 2), 0.5),
            sample_ids: vec![0],
            ..rev
        };
        let c = reverse_autocorr(&one, 10, &[0, 10]).unwrap();
        assert!(c.has_flag("stderr_undefined") && c.stderr[0].is_nan());
    }

    #[test]
    fn score_norms_of_standard_normal_data() {
        let sched = Schedule::new(ScheduleSpec::standard(ScheduleKind::Cosine)).unwrap();
        let spec = GaussianMixtureSpec {
            weights: vec![1.0],
            means: vec![vec![0.0, 0.0]],
            variances: vec![1.0],
        };
        let ds = generate(&Source::Mixture(spec.clone()), 500, 3).unwrap();
        let steps: Vec<usize> = (0..=1000).step_by(100).collect();
        let ens = simulate_forward(&ds, &sched, &steps, 4).unwrap();
        let norms = score_norm_curves(&GmScore::new(spec, &sched).unwrap(), &ens, &sched).unwrap();
        // s = -x on every marginal, so S is a ratio of sample second moments.
        assert!(norms.s.values.iter().all(|v| (v - 1.0).abs() < 0.1));
        assert_eq!(*norms.m.values.last().unwrap(), 1.0);
        assert_eq!(norms.reference_step, 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ks_ratio_is_permutation_invariant(seed in 0u64..1000, shift in -0.5f64..0.5) {
            let x = gaussian(60, 5, shift, seed);
            let base = ks_ratio(x.view(), 0.05).unwrap();
            let mut rows: Vec<usize> = (0..60).collect();
            rows.reverse();
            rows.rotate_left((seed % 60) as usize);
            let permuted = x.select(ndarray::Axis(0), &rows);
            let cols = [3usize, 0, 4, 1, 2];
            let permuted = permuted.select(ndarray::Axis(1), &cols);
            prop_assert_eq!(base, ks_ratio(permuted.view(), 0.05).unwrap());
        }

        #[test]
        fn kid_symmetry_holds_everywhere(seed in 0u64..1000, m in 2usize..40, n in 2usize..40) {
            let x = gaussian(m, 3, 0.0, seed);
            let y = gaussian(n, 3, 0.3, seed + 1);
            let a = kid(x.view(), y.view()).unwrap();
            let b = kid(y.view(), x.view()).unwrap();
            prop_assert_eq!(a.mmd2.to_bits(), b.mmd2.to_bits());
        }
    }
}
