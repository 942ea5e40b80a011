//! Desk-scale datasets and their on-disk formats.
//!
//! Binary layout (`UTD1`): 4-byte magic, `M` and `d` as little-endian `u32`,
//! 4 reserved zero bytes, then `M·d` little-endian `f32` values row-major.
//! CSV layout: no header, one sample per line, `d` comma-separated fields.

use std::f64::consts::PI;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const BINARY_MAGIC: &[u8; 4] = b"UTD1";
const HEADER_LEN: usize = 16;

/// Shift and scale applied by [`Dataset::normalize`]: `x_norm = (x - shift) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    fn identity(d: usize) -> Self {
        Self {
            shift: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    /// `self` applied after `inner`, folded into one affine map.
    fn compose(inner: &Normalization, outer: &Normalization) -> Self {
        let shift = inner
            .shift
            .iter()
            .zip(&inner.scale)
            .zip(&outer.shift)
            .map(|((m1, s1), m2)| m2 * s1 + m1)
            .collect();
        let scale = inner.scale.iter().zip(&outer.scale).map(|(a, b)| a * b).collect();
        Self { shift, scale }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMode {
    /// Per-coordinate shift and scale.
    #[default]
    PerCoordinate,
    /// Per-coordinate shift, one scale shared by all coordinates.
    Global,
}

/// `M × d` samples plus the normalization applied so far.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    samples: Array2<f64>,
    normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Array2<f64>) -> Result<Self> {
        let (m, d) = samples.dim();
        let mut problems = Vec::new();
        if m < 2 {
            problems.push(format!("need at least 2 samples, got {m}"));
        }
        if d < 1 {
            problems.push("need at least one dimension".to_string());
        }
        if let Some(pos) = samples.iter().position(|v| !v.is_finite()) {
            problems.push(format!("non-finite entry at row {}", pos / d.max(1)));
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(Self {
            name: name.into(),
            samples: samples.as_standard_layout().into_owned(),
            normalization: None,
        })
    }

    pub fn samples(&self) -> ArrayView2<'_, f64> {
        self.samples.view()
    }

    pub fn into_samples(self) -> Array2<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    /// Row `i` as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.samples.as_slice().expect("standard layout")[i * d..(i + 1) * d]
    }

    /// Pooled mean and pooled second moment over all entries.
    pub fn pooled_moments(&self) -> (f64, f64) {
        let n = self.samples.len() as f64;
        let mean = self.samples.sum() / n;
        let second = self.samples.iter().map(|v| v * v).sum::<f64>() / n;
        (mean, second)
    }

    /// Shifts and rescales so the pooled mean is 0 and the pooled second
    /// moment is 1. The record composes with any earlier normalization, so
    /// [`Dataset::denormalize`] always returns to the original coordinates.
    pub fn normalize(&self, mode: NormalizeMode) -> Result<Dataset> {
        let d = self.dim();
        let mean: Array1<f64> = self.samples.mean_axis(Axis(0)).expect("M >= 2");
        let centered = &self.samples - &mean;
        let scale: Vec<f64> = match mode {
            NormalizeMode::PerCoordinate => centered
                .map(|v| v * v)
                .mean_axis(Axis(0))
                .expect("M >= 2")
                .iter()
                .map(|v| v.sqrt())
                .collect(),
            NormalizeMode::Global => {
                let s = (centered.iter().map(|v| v * v).sum::<f64>() / centered.len() as f64).sqrt();
                vec![s; d]
            }
        };
        if let Some(j) = scale.iter().position(|s| !(*s > 1e-300)) {
            return Err(Error::DegenerateData(format!("coordinate {j} has zero variance")));
        }
        let scale_arr = Array1::from(scale.clone());
        let normalized = centered / &scale_arr;
        let step = Normalization {
            shift: mean.to_vec(),
            scale,
        };
        let record = match &self.normalization {
            Some(prev) => Normalization::compose(prev, &step),
            None => step,
        };
        Ok(Dataset {
            name: self.name.clone(),
            samples: normalized,
            normalization: Some(record),
        })
    }

    /// Maps normalized samples back to the original coordinates.
    pub fn denormalize(&self) -> Dataset {
        let rec = self
            .normalization
            .clone()
            .unwrap_or_else(|| Normalization::identity(self.dim()));
        let samples = denormalize_rows(self.samples.view(), &rec);
        Dataset {
            name: self.name.clone(),
            samples,
            normalization: None,
        }
    }

    /// Splits off the last `holdout` rows as a disjoint dataset.
    pub fn split(&self, holdout: usize) -> Result<(Dataset, Dataset)> {
        let m = self.len();
        if holdout < 2 || holdout + 2 > m {
            return Err(Error::Argument(format!(
                "cannot hold out {holdout} of {m} samples"
            )));
        }
        let keep = m - holdout;
        let a = Dataset {
            name: self.name.clone(),
            samples: self.samples.slice(ndarray::s![..keep, ..]).to_owned(),
            normalization: self.normalization.clone(),
        };
        let b = Dataset {
            name: format!("{}-holdout", self.name),
            samples: self.samples.slice(ndarray::s![keep.., ..]).to_owned(),
            normalization: self.normalization.clone(),
        };
        Ok((a, b))
    }
}

pub fn denormalize_rows(x: ArrayView2<'_, f64>, rec: &Normalization) -> Array2<f64> {
    let scale = Array1::from(rec.scale.clone());
    let shift = Array1::from(rec.shift.clone());
    &x * &scale + &shift
}

/// Isotropic Gaussian mixture `Σ_k w_k N(μ_k, σ_k² I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

impl GaussianMixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let k = self.weights.len();
        if k == 0 {
            problems.push("mixture needs at least one component".to_string());
        }
        if self.means.len() != k || self.variances.len() != k {
            problems.push(format!(
                "{} weights, {} means, {} variances",
                k,
                self.means.len(),
                self.variances.len()
            ));
        }
        if self.weights.iter().any(|w| !(*w > 0.0)) {
            problems.push("weights must be strictly positive".to_string());
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            problems.push(format!("weights sum to {total}, not 1"));
        }
        if self.variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            problems.push("variances must be positive".to_string());
        }
        let d = self.means.first().map_or(0, Vec::len);
        if d == 0 {
            problems.push("means must have at least one coordinate".to_string());
        }
        if self.means.iter().any(|m| m.len() != d) {
            problems.push("means have inconsistent dimension".to_string());
        }
        if self.means.iter().flatten().any(|v| !v.is_finite()) {
            problems.push("means must be finite".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// Population mean vector.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for (o, m) in out.iter_mut().zip(mu) {
                *o += w * m;
            }
        }
        out
    }

    /// The same mixture shifted and uniformly rescaled so its population mean
    /// is 0 and its pooled second moment is 1. A single global scale keeps the
    /// components isotropic, so the result is again a valid spec.
    pub fn standardized(&self) -> Result<Self> {
        self.validate()?;
        let d = self.dim() as f64;
        let mean = self.mean();
        let means: Vec<Vec<f64>> = self
            .means
            .iter()
            .map(|mu| mu.iter().zip(&mean).map(|(a, b)| a - b).collect())
            .collect();
        let second: f64 = self
            .weights
            .iter()
            .zip(&means)
            .zip(&self.variances)
            .map(|((w, mu), v)| w * (mu.iter().map(|x| x * x).sum::<f64>() / d + v))
            .sum();
        let s = second.sqrt();
        Ok(Self {
            weights: self.weights.clone(),
            means: means
                .into_iter()
                .map(|mu| mu.into_iter().map(|x| x / s).collect())
                .collect(),
            variances: self.variances.iter().map(|v| v / (s * s)).collect(),
        })
    }

    /// Index of the component mean nearest to `x`.
    pub fn nearest_component(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (k, mu) in self.means.iter().enumerate() {
            let d2: f64 = mu.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.1 {
                best = (k, d2);
            }
        }
        best.0
    }

    /// Fraction of rows assigned to each component by nearest mean.
    pub fn occupancy(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        let mut counts = vec![0usize; self.components()];
        for row in x.rows() {
            counts[self.nearest_component(row.as_slice().expect("contiguous row"))] += 1;
        }
        counts
            .into_iter()
            .map(|c| c as f64 / x.nrows() as f64)
            .collect()
    }

    /// Log-density of the forward marginal at retention `phi = Φ(n, 0)`:
    /// component means `√Φ·μ_k`, variances `Φσ_k² + 1 - Φ`.
    pub fn log_density(&self, x: &[f64], phi: f64) -> f64 {
        let d = x.len() as f64;
        let root = phi.sqrt();
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, mu), s2)| {
                let v = phi * s2 + 1.0 - phi;
                let d2: f64 = x.iter().zip(mu).map(|(a, m)| (a - root * m).powi(2)).sum();
                w.ln() - 0.5 * d * (2.0 * PI * v).ln() - 0.5 * d2 / v
            })
            .collect();
        log_sum_exp(&terms)
    }

    /// `∇_x log p` of the forward marginal at retention `phi`, written into `out`.
    pub fn score_into(&self, x: &[f64], phi: f64, out: &mut [f64]) {
        let d = x.len() as f64;
        let root = phi.sqrt();
        let k = self.components();
        let mut logits = Vec::with_capacity(k);
        let mut vars = Vec::with_capacity(k);
        for ((w, mu), s2) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            let v = phi * s2 + 1.0 - phi;
            let d2: f64 = x.iter().zip(mu).map(|(a, m)| (a - root * m).powi(2)).sum();
            logits.push(w.ln() - 0.5 * d * v.ln() - 0.5 * d2 / v);
            vars.push(v);
        }
        let lse = log_sum_exp(&logits);
        out.iter_mut().for_each(|o| *o = 0.0);
        for ((logit, mu), v) in logits.iter().zip(&self.means).zip(&vars) {
            let r = (logit - lse).exp();
            if r == 0.0 {
                continue;
            }
            for ((o, a), m) in out.iter_mut().zip(x).zip(mu) {
                *o -= r * (a - root * m) / v;
            }
        }
    }

    /// `M` i.i.d. draws.
    pub fn sample(&self, m: usize, seed: u64) -> Result<Array2<f64>> {
        self.validate()?;
        let d = self.dim();
        let mut rng = rng::stream(seed, 0);
        let cdf: Vec<f64> = self
            .weights
            .iter()
            .scan(0.0, |acc, w| {
                *acc += w;
                Some(*acc)
            })
            .collect();
        let mut out = Array2::zeros((m, d));
        for mut row in out.rows_mut() {
            let u: f64 = rng.random();
            let k = cdf.iter().position(|c| u < *c).unwrap_or(cdf.len() - 1);
            let sd = self.variances[k].sqrt();
            for (x, mu) in row.iter_mut().zip(&self.means[k]) {
                let z: f64 = rng.sample(StandardNormal);
                *x = mu + sd * z;
            }
        }
        Ok(out)
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Builtin {
    TwoMoons,
    Checkerboard,
    /// 8×8 binary glyphs with additive jitter, `d = 64`.
    TinyGlyphs8x8,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Mixture(GaussianMixtureSpec),
    Builtin(Builtin),
}

/// Draws `m` samples, deterministic in `seed`.
pub fn generate(source: &Source, m: usize, seed: u64) -> Result<Dataset> {
    if m < 2 {
        return Err(Error::Validation(vec![format!("need at least 2 samples, got {m}")]));
    }
    match source {
        Source::Mixture(spec) => Dataset::new("gaussian_mixture", spec.sample(m, seed)?),
        Source::Builtin(b) => {
            let mut rng = rng::stream(seed, 0);
            let (name, x) = match b {
                Builtin::TwoMoons => ("two_moons", two_moons(m, &mut rng)),
                Builtin::Checkerboard => ("checkerboard", checkerboard(m, &mut rng)),
                Builtin::TinyGlyphs8x8 => ("tiny_glyphs_8x8", tiny_glyphs(m, &mut rng)),
            };
            Dataset::new(name, x)
        }
    }
}

fn two_moons(m: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut out = Array2::zeros((m, 2));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let t: f64 = rng.random::<f64>() * PI;
        let (x, y) = if i % 2 == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        row[0] = x + 0.1 * nx;
        row[1] = y + 0.1 * ny;
    }
    out
}

fn checkerboard(m: usize, rng: &mut impl Rng) -> Array2<f64> {
    // 4×4 board on [-2, 2]², dark squares only.
    let mut out = Array2::zeros((m, 2));
    for mut row in out.rows_mut() {
        loop {
            let x: f64 = rng.random::<f64>() * 4.0 - 2.0;
            let y: f64 = rng.random::<f64>() * 4.0 - 2.0;
            if ((x + 2.0).floor() as i64 + (y + 2.0).floor() as i64) % 2 == 0 {
                row[0] = x;
                row[1] = y;
                break;
            }
        }
    }
    out
}

const GLYPH_JITTER: f64 = 0.1;

/// Ten fixed 8×8 patterns: bars, crosses, diagonals, frames and blocks.
pub fn glyph_patterns() -> Vec<[u8; 64]> {
    let paint = |f: &dyn Fn(usize, usize) -> bool| {
        let mut g = [0u8; 64];
        for r in 0..8 {
            for c in 0..8 {
                g[r * 8 + c] = u8::from(f(r, c));
            }
        }
        g
    };
    vec![
        paint(&|r, _| r == 3 || r == 4),
        paint(&|_, c| c == 3 || c == 4),
        paint(&|r, c| r == 3 || r == 4 || c == 3 || c == 4),
        paint(&|r, c| r == c || r + 1 == c),
        paint(&|r, c| r + c == 7 || r + c == 8),
        paint(&|r, c| r == 0 || r == 7 || c == 0 || c == 7),
        paint(&|r, c| (2..6).contains(&r) && (2..6).contains(&c)),
        paint(&|r, c| (r / 2 + c / 2) % 2 == 0),
        paint(&|r, _| r < 4),
        paint(&|r, c| r == c || r + c == 7),
    ]
}

fn tiny_glyphs(m: usize, rng: &mut impl Rng) -> Array2<f64> {
    let glyphs = glyph_patterns();
    let mut out = Array2::zeros((m, 64));
    for mut row in out.rows_mut() {
        let g = &glyphs[rng.random_range(0..glyphs.len())];
        for (x, p) in row.iter_mut().zip(g.iter()) {
            let z: f64 = rng.sample(StandardNormal);
            *x = f64::from(*p) + GLYPH_JITTER * z;
        }
    }
    out
}

pub fn write_csv(path: &Path, x: ArrayView2<'_, f64>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for row in x.rows() {
        write_csv_row(&mut w, row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_csv_row(w: &mut impl Write, row: ArrayView1<'_, f64>) -> std::io::Result<()> {
    for (j, v) in row.iter().enumerate() {
        if j > 0 {
            w.write_all(b",")?;
        }
        write!(w, "{v}")?;
    }
    w.write_all(b"\n")
}

pub fn read_csv(path: &Path) -> Result<Array2<f64>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut data = Vec::new();
    let mut d = None;
    let mut rows = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad number {field:?}", i + 1)))?;
            if !v.is_finite() {
                return Err(Error::format(path, format!("line {}: non-finite value", i + 1)));
            }
            data.push(v);
        }
        let width = data.len() - before;
        match d {
            None => d = Some(width),
            Some(w) if w != width => {
                return Err(Error::format(path, format!("line {}: {width} fields, expected {w}", i + 1)))
            }
            _ => {}
        }
        rows += 1;
    }
    let d = d.ok_or_else(|| Error::format(path, "no rows"))?;
    Array2::from_shape_vec((rows, d), data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_binary(path: &Path, x: ArrayView2<'_, f64>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_binary_to(&mut w, x)?;
    w.flush()?;
    Ok(())
}

pub fn write_binary_to(w: &mut impl Write, x: ArrayView2<'_, f64>) -> Result<()> {
    let (m, d) = x.dim();
    let m32 = u32::try_from(m).map_err(|_| Error::Argument("too many rows for UTD1".into()))?;
    let d32 = u32::try_from(d).map_err(|_| Error::Argument("too many columns for UTD1".into()))?;
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&m32.to_le_bytes())?;
    w.write_all(&d32.to_le_bytes())?;
    w.write_all(&[0u8; 4])?;
    for v in x.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_binary(path: &Path) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_binary(&bytes).map_err(|reason| Error::format(path, reason))
}

pub fn decode_binary(bytes: &[u8]) -> std::result::Result<Array2<f64>, String> {
    if bytes.len() < HEADER_LEN {
        return Err("truncated header".into());
    }
    if &bytes[..4] != BINARY_MAGIC {
        return Err("bad magic".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (m, d) = (word(4), word(8));
    let expected = m
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or("size overflow")?;
    if bytes.len() != expected {
        return Err(format!("{} bytes, header implies {expected}", bytes.len()));
    }
    let mut data = Vec::with_capacity(m * d);
    for chunk in bytes[HEADER_LEN..].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(format!("non-finite value at index {}", data.len()));
        }
        data.push(f64::from(v));
    }
    Array2::from_shape_vec((m, d), data).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn std_normal() -> GaussianMixtureSpec {
        GaussianMixtureSpec {
            weights: vec![1.0],
            means: vec![vec![0.0, 0.0]],
            variances: vec![1.0],
        }
    }

    fn two_blob() -> GaussianMixtureSpec {
        GaussianMixtureSpec {
            weights: vec![0.5, 0.5],
            means: vec![vec![-3.0, 0.0], vec![3.0, 0.0]],
            variances: vec![1.0, 1.0],
        }
    }

    #[test]
    fn standard_normal_mean() {
        let ds = generate(&Source::Mixture(std_normal()), 10_000, 1).unwrap();
        let mean = ds.samples().mean_axis(Axis(0)).unwrap();
        for m in mean.iter() {
            assert!(m.abs() < 3.0 / 100.0, "{m}");
        }
    }

    #[test]
    fn two_component_occupancy() {
        let spec = two_blob();
        let ds = generate(&Source::Mixture(spec.clone()), 10_000, 2).unwrap();
        let occ = spec.occupancy(ds.samples());
        assert!((occ[0] - 0.5).abs() < 0.02, "{occ:?}");
    }

    #[test]
    fn generation_is_deterministic() {
        for src in [
            Source::Mixture(two_blob()),
            Source::Builtin(Builtin::TwoMoons),
            Source::Builtin(Builtin::Checkerboard),
            Source::Builtin(Builtin::TinyGlyphs8x8),
        ] {
            let a = generate(&src, 300, 9).unwrap();
            let b = generate(&src, 300, 9).unwrap();
            assert_eq!(a, b);
        }
        let glyphs = generate(&Source::Builtin(Builtin::TinyGlyphs8x8), 10, 1).unwrap();
        assert_eq!(glyphs.dim(), 64);
    }

    #[test]
    fn invalid_specs() {
        let mut bad = two_blob();
        bad.weights = vec![0.7, 0.7];
        assert!(matches!(bad.validate(), Err(Error::Validation(_))));
        let mut bad = two_blob();
        bad.variances[1] = 0.0;
        assert!(bad.validate().is_err());
        assert!(generate(&Source::Mixture(two_blob()), 1, 0).is_err());
    }

    #[test]
    fn constant_data_is_degenerate() {
        let ds = Dataset::new("c", Array2::from_elem((5, 2), 3.0)).unwrap();
        assert!(matches!(ds.normalize(NormalizeMode::PerCoordinate), Err(Error::DegenerateData(_))));
        assert!(matches!(ds.normalize(NormalizeMode::Global), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn normalize_moments_and_affine_invariance() {
        let ds = generate(&Source::Builtin(Builtin::TwoMoons), 500, 4).unwrap();
        for mode in [NormalizeMode::PerCoordinate, NormalizeMode::Global] {
            let n = ds.normalize(mode).unwrap();
            let (mean, second) = n.pooled_moments();
            assert!(mean.abs() < 1e-12 && (second - 1.0).abs() < 1e-12);
        }
        let moved = Dataset::new("m", ds.samples().mapv(|v| 2.5 * v - 7.0)).unwrap();
        let a = ds.normalize(NormalizeMode::PerCoordinate).unwrap();
        let b = moved.normalize(NormalizeMode::PerCoordinate).unwrap();
        let diff = (&a.samples() - &b.samples()).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
        assert!(diff < 1e-9);
    }

    #[test]
    fn already_normalized_is_identity() {
        let ds = generate(&Source::Mixture(std_normal()), 400, 5)
            .unwrap()
            .normalize(NormalizeMode::PerCoordinate)
            .unwrap();
        let again = ds.normalize(NormalizeMode::PerCoordinate).unwrap();
        let diff = (&ds.samples() - &again.samples()).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
        assert!(diff < 1e-9);
    }

    #[test]
    fn standardized_mixture_moments() {
        let spec = GaussianMixtureSpec {
            weights: vec![0.3, 0.7],
            means: vec![vec![1.0, 5.0], vec![4.0, -2.0]],
            variances: vec![0.5, 2.0],
        }
        .standardized()
        .unwrap();
        assert!(spec.mean().iter().all(|m| m.abs() < 1e-12));
        let ds = generate(&Source::Mixture(spec), 200_000, 3).unwrap();
        let (mean, second) = ds.pooled_moments();
        assert!(mean.abs() < 0.01 && (second - 1.0).abs() < 0.01, "{mean} {second}");
    }

    #[test]
    fn binary_rejects_bad_input() {
        assert!(decode_binary(b"UTD1").is_err());
        let mut buf = Vec::new();
        write_binary_to(&mut buf, Array2::<f64>::zeros((2, 3)).view()).unwrap();
        assert_eq!(buf.len(), 16 + 24);
        buf[0] = b'X';
        assert!(decode_binary(&buf).is_err());
        let mut buf = Vec::new();
        write_binary_to(&mut buf, Array2::<f64>::zeros((2, 3)).view()).unwrap();
        buf.truncate(30);
        assert!(decode_binary(&buf).is_err());
        let mut buf = Vec::new();
        write_binary_to(&mut buf, Array2::from_elem((1, 1), f64::NAN).view()).unwrap();
        assert!(decode_binary(&buf).is_err());
    }

    #[test]
    fn csv_loader_validates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        std::fs::write(&p, "1,2\n3\n").unwrap();
        assert!(matches!(read_csv(&p), Err(Error::Format { .. })));
        std::fs::write(&p, "1,inf\n").unwrap();
        assert!(read_csv(&p).is_err());
        std::fs::write(&p, "1,2\n3,4.5\n").unwrap();
        assert_eq!(read_csv(&p).unwrap(), ndarray::array![[1.0, 2.0], [3.0, 4.5]]);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent_and_invertible(
            vals in proptest::collection::vec(-50.0f64..50.0, 12..60),
            global in any::<bool>(),
        ) {
            let d = 3;
            let m = vals.len() / d;
            let x = Array2::from_shape_vec((m, d), vals[..m * d].to_vec()).unwrap();
            let ds = Dataset::new("p", x.clone()).unwrap();
            let mode = if global { NormalizeMode::Global } else { NormalizeMode::PerCoordinate };
            let Ok(once) = ds.normalize(mode) else { return Ok(()) };
            // Near-constant columns blow up the conditioning; skip them.
            if once.normalization().unwrap().scale.iter().any(|s| *s < 1e-3) {
                return Ok(());
            }
            let twice = once.normalize(mode).unwrap();
            let idem = (&once.samples() - &twice.samples()).mapv(f64::abs).fold(0.0f64, |a, v| a.max(*v));
            prop_assert!(idem < 1e-9);
            let back = twice.denormalize();
            let rt = (&back.samples() - &x).mapv(f64::abs).fold(0.0f64, |a, v| a.max(*v));
            prop_assert!(rt < 1e-9);
        }

        #[test]
        fn binary_round_trip(vals in proptest::collection::vec(-1e6f32..1e6, 1..40)) {
            let x = Array2::from_shape_vec((vals.len(), 1), vals.iter().map(|v| f64::from(*v)).collect()).unwrap();
            let mut buf = Vec::new();
            write_binary_to(&mut buf, x.view()).unwrap();
            prop_assert_eq!(decode_binary(&buf).unwrap(), x);
        }
    }
}
