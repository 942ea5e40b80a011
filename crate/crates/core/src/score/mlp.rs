use std::f64::consts::FRAC_PI_2;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ScoreField, EVAL_CHUNK};
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::Schedule;

const CHECKPOINT_MAGIC: &[u8; 4] = b"UMLP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
    Tanh,
    /// Identity; only useful for gradient checks.
    Linear,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::Silu => 0,
            Activation::Tanh => 1,
            Activation::Linear => 2,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(Activation::Silu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Linear),
            _ => None,
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let sig = 1.0 / (1.0 + (-z).exp());
                sig * (1.0 + z * (1.0 - sig))
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_time_features")]
    pub time_features: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Add `-x`, the score of `N(0, I)`, to the network output so the field
    /// is contractive wherever the network is flat.
    #[serde(default = "default_baseline")]
    pub gaussian_baseline: bool,
}

fn default_baseline() -> bool {
    true
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128]
}

fn default_time_features() -> usize {
    8
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            time_features: default_time_features(),
            activation: Activation::default(),
            gaussian_baseline: true,
        }
    }
}

/// Fully connected layer, `out = input · w + b` with `w` of shape `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.dim()),
            b: Array1::zeros(self.b.len()),
        }
    }
}

/// Score network `s(x, n) = net([x, e(n/N)]) / √(1 - Φ(n,0)) - x`, the `-x`
/// term being optional.
///
/// `e` is a sinusoidal time embedding on a geometric frequency ladder. The
/// output scale makes the net predict the (negated) injected noise, which
/// keeps its outputs O(1) at every step.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpScoreModel {
    dim: usize,
    time_features: usize,
    activation: Activation,
    baseline: bool,
    layers: Vec<Dense>,
    /// `1/√(1 - Φ(n,0))` for `n = 0..=N`, entry 0 copied from entry 1.
    output_scale: Vec<f64>,
}

pub(crate) struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
}

impl MlpScoreModel {
    /// Fresh model with fan-in scaled uniform weights.
    pub fn new(dim: usize, schedule: &Schedule, config: &MlpConfig, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("model dimension must be positive".into()));
        }
        let mut widths = vec![dim + config.time_features];
        widths.extend(&config.hidden);
        widths.push(dim);
        if widths.contains(&0) {
            return Err(Error::Argument("layer widths must be positive".into()));
        }
        let mut rng = rng::stream(seed, 0);
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Dense {
                    w: Array2::from_shape_fn((w[0], w[1]), |_| rng.random_range(-bound..bound)),
                    b: Array1::from_shape_fn(w[1], |_| rng.random_range(-bound..bound)),
                }
            })
            .collect();
        let mut output_scale: Vec<f64> = (0..=schedule.steps())
            .map(|n| 1.0 / (1.0 - schedule.retention(n)).sqrt())
            .collect();
        output_scale[0] = output_scale[1];
        Ok(Self {
            dim,
            time_features: config.time_features,
            activation: config.activation,
            baseline: config.gaussian_baseline,
            layers,
            output_scale,
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn steps(&self) -> usize {
        self.output_scale.len() - 1
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub(crate) fn zero_grads(&self) -> Vec<Dense> {
        self.layers.iter().map(Dense::zeros_like).collect()
    }

    /// Mutable view of parameter `i` in layer order (weights then bias).
    pub(crate) fn param_mut(&mut self, mut i: usize) -> &mut f64 {
        for l in &mut self.layers {
            let nw = l.w.len();
            if i < nw {
                return &mut l.w.as_slice_mut().expect("standard layout")[i];
            }
            i -= nw;
            if i < l.b.len() {
                return &mut l.b[i];
            }
            i -= l.b.len();
        }
        panic!("parameter index out of range");
    }

    pub(crate) fn flatten_grads(grads: &[Dense]) -> Vec<f64> {
        grads
            .iter()
            .flat_map(|g| g.w.iter().chain(g.b.iter()).copied())
            .collect()
    }

    fn embed_into(&self, n: usize, out: &mut [f64]) {
        let t = n as f64 / self.steps() as f64;
        let pairs = self.time_features / 2;
        for k in 0..pairs {
            let w = FRAC_PI_2 * f64::from(1u32 << k.min(30));
            out[2 * k] = (w * t).sin();
            out[2 * k + 1] = (w * t).cos();
        }
        if self.time_features % 2 == 1 {
            out[self.time_features - 1] = t;
        }
    }

    fn net_input(&self, x: ArrayView2<'_, f64>, steps: &[usize]) -> Array2<f64> {
        let mut emb = Array2::zeros((x.nrows(), self.time_features));
        for (mut row, &n) in emb.rows_mut().into_iter().zip(steps) {
            self.embed_into(n, row.as_slice_mut().expect("standard layout"));
        }
        concatenate![Axis(1), x, emb]
    }

    /// Raw network output (before the output scale) and the activations
    /// needed for backpropagation.
    pub(crate) fn forward_net(&self, input: Array2<f64>) -> (Array2<f64>, ForwardCache) {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut a = input;
        for (i, l) in self.layers.iter().enumerate() {
            let z = a.dot(&l.w) + &l.b;
            inputs.push(a);
            if i == last {
                return (z, ForwardCache { inputs, pre });
            }
            a = z.mapv(|v| self.activation.apply(v));
            pre.push(z);
        }
        unreachable!("at least one layer")
    }

    fn net_only(&self, input: Array2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut a = input;
        for (i, l) in self.layers.iter().enumerate() {
            let z = a.dot(&l.w) + &l.b;
            if i == last {
                return z;
            }
            a = z.mapv(|v| self.activation.apply(v));
        }
        unreachable!("at least one layer")
    }

    /// Scores for rows `x` at per-row steps.
    pub fn predict(&self, x: ArrayView2<'_, f64>, steps: &[usize]) -> Array2<f64> {
        let mut out = self.net_only(self.net_input(x, steps));
        for (mut row, &n) in out.rows_mut().into_iter().zip(steps) {
            let c = self.output_scale[n];
            row.mapv_inplace(|v| v * c);
        }
        if self.baseline {
            out -= &x;
        }
        out
    }

    /// Weighted DSM loss `(1/2B) Σ_i w_i ‖t_i - s_i‖²` and its parameter
    /// gradients by backpropagation.
    pub(crate) fn loss_and_grads(
        &self,
        x: ArrayView2<'_, f64>,
        steps: &[usize],
        targets: ArrayView2<'_, f64>,
        weights: &[f64],
    ) -> (f64, Vec<Dense>) {
        let batch = x.nrows() as f64;
        let (raw, cache) = self.forward_net(self.net_input(x, steps));
        let scale = Array1::from_iter(steps.iter().map(|&n| self.output_scale[n]));
        let w = Array1::from(weights.to_vec());
        let mut pred = &raw * &scale.view().insert_axis(Axis(1));
        if self.baseline {
            pred -= &x;
        }
        let resid = &targets - &pred;
        let loss = 0.5
            * resid
                .rows()
                .into_iter()
                .zip(&w)
                .map(|(r, wi)| wi * r.dot(&r))
                .sum::<f64>()
            / batch;
        // dL/draw = -w·c·(t - s)/B
        let coef = (&w * &scale) / -batch;
        let mut g = resid * &coef.insert_axis(Axis(1));

        let mut grads = self.zero_grads();
        for i in (0..self.layers.len()).rev() {
            grads[i].w = cache.inputs[i].t().dot(&g);
            grads[i].b = g.sum_axis(Axis(0));
            if i > 0 {
                let mut back = g.dot(&self.layers[i].w.t());
                Zip::from(&mut back)
                    .and(&cache.pre[i - 1])
                    .for_each(|b, &z| *b *= self.activation.derivative(z));
                g = back;
            }
        }
        (loss, grads)
    }

    /// Loss only, for finite differences.
    pub(crate) fn loss(
        &self,
        x: ArrayView2<'_, f64>,
        steps: &[usize],
        targets: ArrayView2<'_, f64>,
        weights: &[f64],
    ) -> f64 {
        let pred = self.predict(x, steps);
        let resid = &targets - &pred;
        0.5 * resid
            .rows()
            .into_iter()
            .zip(weights)
            .map(|(r, wi)| wi * r.dot(&r))
            .sum::<f64>()
            / x.nrows() as f64
    }

    /// Versioned little-endian checkpoint: magic `UMLP`, version, shape
    /// header, then all parameters and the output-scale table as `f32`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let u = |v: usize| u32::try_from(v).map_err(|_| Error::Argument("checkpoint field overflows u32".into()));
        w.write_all(CHECKPOINT_MAGIC)?;
        for v in [
            CHECKPOINT_VERSION,
            u(self.dim)?,
            u(self.time_features)?,
            self.activation.code(),
            u32::from(self.baseline),
            u(self.steps())?,
            u(self.layers.len())?,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for l in &self.layers {
            w.write_all(&u(l.w.nrows())?.to_le_bytes())?;
            w.write_all(&u(l.w.ncols())?.to_le_bytes())?;
        }
        for l in &self.layers {
            for v in l.w.iter().chain(l.b.iter()) {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        for v in &self.output_scale {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode(&bytes).map_err(|reason| Error::format(path, reason))
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            let end = pos.checked_add(n).filter(|e| *e <= bytes.len()).ok_or("truncated checkpoint")?;
            let out = &bytes[pos..end];
            pos = end;
            Ok(out)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err("bad magic".into());
        }
        let mut word = || -> std::result::Result<usize, String> {
            Ok(u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize)
        };
        let version = word()?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let dim = word()?;
        let time_features = word()?;
        let activation = Activation::from_code(word()? as u32).ok_or("unknown activation")?;
        let baseline = match word()? {
            0 => false,
            1 => true,
            v => return Err(format!("bad baseline flag {v}")),
        };
        let steps = word()?;
        let n_layers = word()?;
        if n_layers == 0 || n_layers > 64 {
            return Err(format!("implausible layer count {n_layers}"));
        }
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            shapes.push((word()?, word()?));
        }
        if shapes[0].0 != dim + time_features || shapes[n_layers - 1].1 != dim {
            return Err("layer shapes do not match the declared dimensions".into());
        }
        if shapes.windows(2).any(|p| p[0].1 != p[1].0) {
            return Err("inconsistent layer shapes".into());
        }
        let mut float = || -> std::result::Result<f64, String> {
            let v = f32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
            if v.is_finite() {
                Ok(f64::from(v))
            } else {
                Err("non-finite parameter".into())
            }
        };
        let mut layers = Vec::with_capacity(n_layers);
        for &(i, o) in &shapes {
            let w = (0..i * o).map(|_| float()).collect::<std::result::Result<Vec<_>, _>>()?;
            let b = (0..o).map(|_| float()).collect::<std::result::Result<Vec<_>, _>>()?;
            layers.push(Dense {
                w: Array2::from_shape_vec((i, o), w).map_err(|e| e.to_string())?,
                b: Array1::from(b),
            });
        }
        let output_scale = (0..=steps).map(|_| float()).collect::<std::result::Result<Vec<_>, _>>()?;
        if pos != bytes.len() {
            return Err("trailing bytes after checkpoint".into());
        }
        Ok(Self {
            dim,
            time_features,
            activation,
            baseline,
            layers,
            output_scale,
        })
    }
}

impl ScoreField for MlpScoreModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn max_step(&self) -> usize {
        self.steps()
    }

    fn singular_at_zero(&self) -> bool {
        true
    }

    fn evaluate_into(&self, x: &[f64], n: usize, out: &mut [f64]) {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row");
        let pred = self.predict(xv, &[n]);
        out.copy_from_slice(pred.as_slice().expect("standard layout"));
    }

    fn evaluate_batch(&self, x: ArrayView2<'_, f64>, n: usize) -> Array2<f64> {
        let m = x.nrows();
        let chunks: Vec<Array2<f64>> = (0..m.div_ceil(EVAL_CHUNK))
            .into_par_iter()
            .map(|c| {
                let lo = c * EVAL_CHUNK;
                let hi = (lo + EVAL_CHUNK).min(m);
                let steps = vec![n; hi - lo];
                self.predict(x.slice(s![lo..hi, ..]), &steps)
            })
            .collect();
        let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
        if views.is_empty() {
            return Array2::zeros((0, x.ncols()));
        }
        concatenate(Axis(0), &views).expect("matching widths")
    }
}
