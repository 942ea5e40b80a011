//! Forward VP process: exact samplers, path ensembles, and the closed-form
//! moment and autocorrelation formulas used as oracles.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::{Schedule, ScheduleSpec};
use crate::series::{DiagnosticSeries, SeriesMeta};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Reverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Data,
    Noise,
    UturnState,
}

/// Sample trajectories recorded at selected steps.
#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble {
    pub direction: Direction,
    pub init_mode: InitMode,
    /// Strictly increasing, within `[0, N]`.
    pub record_steps: Vec<usize>,
    /// `[sample, recorded step, dim]`.
    pub values: Array3<f64>,
    pub seed: u64,
    pub schedule: ScheduleSpec,
    /// Stream index (and source row) of each stored sample.
    pub sample_ids: Vec<usize>,
    /// Samples dropped after a non-finite state, by stream index.
    pub excluded: Vec<usize>,
}

/// Sidecar written next to the binary ensemble file.
#[derive(Serialize, Deserialize)]
struct EnsembleSidecar {
    direction: Direction,
    init_mode: InitMode,
    record_steps: Vec<usize>,
    dim: usize,
    seed: u64,
    schedule: ScheduleSpec,
    sample_ids: Vec<usize>,
    excluded: Vec<usize>,
}

impl PathEnsemble {
    pub fn samples(&self) -> usize {
        self.values.dim().0
    }

    pub fn dim(&self) -> usize {
        self.values.dim().2
    }

    pub fn step_index(&self, n: usize) -> Result<usize> {
        self.record_steps
            .binary_search(&n)
            .map_err(|_| Error::Argument(format!("step {n} was not recorded")))
    }

    /// States at recorded step `n`, `M × d`.
    pub fn at_step(&self, n: usize) -> Result<ArrayView2<'_, f64>> {
        let i = self.step_index(n)?;
        Ok(self.values.index_axis(Axis(1), i))
    }

    /// States at the last recorded step (the earliest time for reverse runs
    /// is the first entry; see [`PathEnsemble::final_states`]).
    pub fn final_states(&self) -> ArrayView2<'_, f64> {
        let i = match self.direction {
            Direction::Forward => self.record_steps.len() - 1,
            Direction::Reverse => 0,
        };
        self.values.index_axis(Axis(1), i)
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes the values as a `UTD1` matrix with one row per sample and
    /// `steps·d` columns, plus a `<path>.json` sidecar with the provenance.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (m, s, d) = self.values.dim();
        let flat = self
            .values
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((m, s * d))
            .expect("contiguous");
        data::write_binary(path, flat.view())?;
        let sidecar = EnsembleSidecar {
            direction: self.direction,
            init_mode: self.init_mode,
            record_steps: self.record_steps.clone(),
            dim: d,
            seed: self.seed,
            schedule: self.schedule.clone(),
            sample_ids: self.sample_ids.clone(),
            excluded: self.excluded.clone(),
        };
        std::fs::write(Self::sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let flat = data::read_binary(path)?;
        let side_path = Self::sidecar_path(path);
        let sidecar: EnsembleSidecar = serde_json::from_str(&std::fs::read_to_string(&side_path)?)?;
        let (m, cols) = flat.dim();
        let s = sidecar.record_steps.len();
        if s * sidecar.dim != cols || sidecar.sample_ids.len() != m {
            return Err(Error::format(side_path, "sidecar does not match matrix shape"));
        }
        let values = flat
            .into_shape_with_order((m, s, sidecar.dim))
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Self {
            direction: sidecar.direction,
            init_mode: sidecar.init_mode,
            record_steps: sidecar.record_steps,
            values,
            seed: sidecar.seed,
            schedule: sidecar.schedule,
            sample_ids: sidecar.sample_ids,
            excluded: sidecar.excluded,
        })
    }
}

pub(crate) fn check_record_steps(steps: &[usize], max: usize) -> Result<()> {
    if steps.is_empty() {
        return Err(Error::Argument("record_steps is empty".into()));
    }
    if steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Argument("record_steps must be strictly increasing".into()));
    }
    if let Some(&last) = steps.last() {
        if last > max {
            return Err(Error::Range { step: last, max });
        }
    }
    Ok(())
}

/// One chain step with an explicit rate: `√(1-b)·x + √b·z`.
pub fn step_with_beta(x_prev: &[f64], beta: f64, rng: &mut impl Rng, out: &mut [f64]) {
    let keep = (1.0 - beta).sqrt();
    let noise = beta.sqrt();
    for (o, x) in out.iter_mut().zip(x_prev) {
        let z: f64 = rng.sample(StandardNormal);
        *o = keep * x + noise * z;
    }
}

/// Draws `x_n` given `x_{n-1}`.
pub fn step_kernel_sample(
    x_prev: &[f64],
    n: usize,
    schedule: &Schedule,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Argument("chain steps start at n = 1".into()));
    }
    let beta = schedule.beta_at(n)?;
    let mut out = vec![0.0; x_prev.len()];
    step_with_beta(x_prev, beta, rng, &mut out);
    Ok(out)
}

/// Draws `x_n` given `x_0` in one Gaussian step: `√Φ(n,0)·x0 + √(1-Φ(n,0))·z`.
pub fn jump_sample(x0: &[f64], n: usize, schedule: &Schedule, rng: &mut impl Rng) -> Result<Vec<f64>> {
    schedule.check_step(n)?;
    let phi = schedule.retention(n);
    if n == 0 {
        return Ok(x0.to_vec());
    }
    let (a, s) = (phi.sqrt(), (1.0 - phi).sqrt());
    Ok(x0
        .iter()
        .map(|x| {
            let z: f64 = rng.sample(StandardNormal);
            a * x + s * z
        })
        .collect())
}

/// Exact marginal draws at step `n` for every row of `x0` (jump sampler,
/// stream `i` for row `i`).
pub fn sample_marginal(x0: ArrayView2<'_, f64>, n: usize, schedule: &Schedule, seed: u64) -> Result<Array2<f64>> {
    schedule.check_step(n)?;
    let d = x0.ncols();
    let rows: Vec<Vec<f64>> = (0..x0.nrows())
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, i as u64);
            let row = x0.row(i).to_vec();
            jump_sample(&row, n, schedule, &mut rng).expect("step checked")
        })
        .collect();
    Ok(Array2::from_shape_vec((rows.len(), d), rows.concat()).expect("shape"))
}

/// Runs the forward chain for every dataset row.
pub fn simulate_forward(
    dataset: &Dataset,
    schedule: &Schedule,
    record_steps: &[usize],
    seed: u64,
) -> Result<PathEnsemble> {
    simulate_forward_from(dataset.samples(), schedule, record_steps, seed)
}

/// Forward chain from explicit initial states; row `i` uses stream `i`.
pub fn simulate_forward_from(
    x0: ArrayView2<'_, f64>,
    schedule: &Schedule,
    record_steps: &[usize],
    seed: u64,
) -> Result<PathEnsemble> {
    check_record_steps(record_steps, schedule.steps())?;
    let (m, d) = x0.dim();
    let s = record_steps.len();
    let last = *record_steps.last().expect("non-empty");
    let betas = schedule.betas();
    let paths: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, i as u64);
            let mut out = Vec::with_capacity(s * d);
            let mut x = x0.row(i).to_vec();
            let mut next = vec![0.0; d];
            let mut slot = 0;
            if record_steps[0] == 0 {
                out.extend_from_slice(&x);
                slot = 1;
            }
            for (n, &beta) in betas.iter().enumerate().take(last + 1).skip(1) {
                step_with_beta(&x, beta, &mut rng, &mut next);
                std::mem::swap(&mut x, &mut next);
                if slot < s && record_steps[slot] == n {
                    out.extend_from_slice(&x);
                    slot += 1;
                }
            }
            out
        })
        .collect();
    let values = Array3::from_shape_vec((m, s, d), paths.concat()).expect("shape");
    Ok(PathEnsemble {
        direction: Direction::Forward,
        init_mode: InitMode::Data,
        record_steps: record_steps.to_vec(),
        values,
        seed,
        schedule: schedule.spec().clone(),
        sample_ids: (0..m).collect(),
        excluded: Vec::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// `C_0(n) = E[x_0·x_n] / E[x_0²]`.
    FromZero,
    /// `C_T(n) = E[x_N·x_n] / E[x_N²]`.
    FromT,
}

/// Closed-form forward autocorrelation over `n = 0..=N` for data with
/// `E[x_0²] = 1`.
pub fn forward_autocorr_closed_form(schedule: &Schedule, mode: AnchorMode) -> DiagnosticSeries {
    forward_autocorr_general(schedule, mode, 1.0)
}

/// Closed-form forward autocorrelation for data with second moment `m0`,
/// using `E[x_n²] = Φ(n,0)(m0 - 1) + 1` and `E[x_t x_s] = √Φ(ξ,γ)·E[x_γ²]`.
pub fn forward_autocorr_general(schedule: &Schedule, mode: AnchorMode, m0: f64) -> DiagnosticSeries {
    let big_n = schedule.steps();
    let second = |n: usize| schedule.retention(n) * (m0 - 1.0) + 1.0;
    let steps: Vec<usize> = (0..=big_n).collect();
    let values = steps
        .iter()
        .map(|&n| match mode {
            AnchorMode::FromZero => schedule.retention(n).sqrt(),
            AnchorMode::FromT => {
                let phi = schedule.retention(big_n) / schedule.retention(n);
                phi.sqrt() * second(n) / second(big_n)
            }
        })
        .collect();
    let name = match mode {
        AnchorMode::FromZero => "c0_closed_form",
        AnchorMode::FromT => "ct_closed_form",
    };
    let mut s = DiagnosticSeries::exact(name, steps, values, "closed_form");
    s.meta.schedule = Some(schedule.kind());
    s
}

/// Ratio estimator `Σ_i⟨a_i, x_i⟩ / Σ_i‖a_i‖²` averaged over samples and
/// dimensions, with a delta-method standard error.
pub(crate) fn ratio_autocorr(
    ensemble: &PathEnsemble,
    anchor: usize,
    steps: &[usize],
    name: &str,
    estimator: &str,
) -> Result<DiagnosticSeries> {
    let a = ensemble.at_step(anchor)?;
    let m = a.nrows();
    if m == 0 {
        return Err(Error::Argument("empty ensemble".into()));
    }
    let norms: Vec<f64> = a.rows().into_iter().map(|r| r.dot(&r)).collect();
    let denom: f64 = norms.iter().sum();
    if denom == 0.0 {
        return Err(Error::DegenerateNormalization(format!("anchor step {anchor}")));
    }
    let mean_norm = denom / m as f64;
    let mut values = Vec::with_capacity(steps.len());
    let mut stderr = Vec::with_capacity(steps.len());
    for &n in steps {
        let x = ensemble.at_step(n)?;
        let inner: Vec<f64> = a
            .rows()
            .into_iter()
            .zip(x.rows())
            .map(|(ar, xr)| ar.dot(&xr))
            .collect();
        let c = inner.iter().sum::<f64>() / denom;
        values.push(c);
        if m > 1 {
            let resid: Vec<f64> = inner
                .iter()
                .zip(&norms)
                .map(|(u, v)| (u - c * v) / mean_norm)
                .collect();
            let mu = resid.iter().sum::<f64>() / m as f64;
            let var = resid.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / (m - 1) as f64;
            stderr.push((var / m as f64).sqrt());
        } else {
            stderr.push(f64::NAN);
        }
    }
    let mut flags = vec![format!("anchor:{anchor}")];
    if m < 2 {
        flags.push("stderr_undefined".to_string());
    }
    let meta = SeriesMeta {
        samples: Some(m),
        schedule: Some(ensemble.schedule.kind),
        estimator: estimator.to_string(),
        flags,
    };
    // NaN stderr cannot pass the constructor's sign check, so build directly.
    Ok(DiagnosticSeries {
        name: name.to_string(),
        steps: steps.to_vec(),
        values,
        stderr,
        meta,
    })
}

/// Empirical autocorrelation of any ensemble against `anchor_step`.
pub fn empirical_autocorr(ensemble: &PathEnsemble, anchor_step: usize, steps: &[usize]) -> Result<DiagnosticSeries> {
    ratio_autocorr(
        ensemble,
        anchor_step,
        steps,
        &format!("autocorr_{anchor_step}"),
        "dimension_sample_ratio",
    )
}

/// Pooled mean and second moment of the states at each recorded step.
pub fn pooled_moments(ensemble: &PathEnsemble) -> Vec<(usize, f64, f64)> {
    ensemble
        .record_steps
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let x = ensemble.values.index_axis(Axis(1), i);
            let k = x.len() as f64;
            (n, x.sum() / k, x.iter().map(|v| v * v).sum::<f64>() / k)
        })
        .collect()
}
