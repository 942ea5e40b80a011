use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mlp::{Dense, MlpScoreModel};
use super::ScoreField;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::forward::sample_marginal;
use crate::rng;
use crate::schedule::Schedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub batch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Learning rate at the last step as a fraction of the initial one,
    /// reached by cosine annealing. 1 keeps the rate constant.
    #[serde(default = "default_final_fraction")]
    pub final_lr_fraction: f64,
}

fn default_final_fraction() -> f64 {
    1.0
}

impl TrainHyper {
    fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch == 0 {
            problems.push("batch must be positive".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            problems.push("final_lr_fraction must be in [0, 1]".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    fn rate_at(&self, step: usize) -> f64 {
        if self.steps <= 1 || self.final_lr_fraction == 1.0 {
            return self.learning_rate;
        }
        let progress = step as f64 / (self.steps - 1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cosine)
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: MlpScoreModel,
    /// Mini-batch loss at every step.
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// CSV `step,loss`.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }
}

enum OptState {
    Sgd { velocity: Vec<Dense> },
    Adam { m: Vec<Dense>, v: Vec<Dense>, t: i32 },
}

fn apply_update(model: &mut MlpScoreModel, grads: &[Dense], opt: &Optimizer, state: &mut OptState, lr: f64) {
    match (opt, state) {
        (Optimizer::Sgd { momentum }, OptState::Sgd { velocity }) => {
            for ((layer, g), vel) in model.layers_mut().iter_mut().zip(grads).zip(velocity.iter_mut()) {
                vel.w.zip_mut_with(&g.w, |v, g| *v = momentum * *v + g);
                vel.b.zip_mut_with(&g.b, |v, g| *v = momentum * *v + g);
                layer.w.zip_mut_with(&vel.w, |p, v| *p -= lr * v);
                layer.b.zip_mut_with(&vel.b, |p, v| *p -= lr * v);
            }
        }
        (Optimizer::Adam { beta1, beta2, eps }, OptState::Adam { m, v, t }) => {
            *t += 1;
            let c1 = 1.0 - beta1.powi(*t);
            let c2 = 1.0 - beta2.powi(*t);
            for (((layer, g), mi), vi) in model
                .layers_mut()
                .iter_mut()
                .zip(grads)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                mi.w.zip_mut_with(&g.w, |a, g| *a = beta1 * *a + (1.0 - beta1) * g);
                mi.b.zip_mut_with(&g.b, |a, g| *a = beta1 * *a + (1.0 - beta1) * g);
                vi.w.zip_mut_with(&g.w, |a, g| *a = beta2 * *a + (1.0 - beta2) * g * g);
                vi.b.zip_mut_with(&g.b, |a, g| *a = beta2 * *a + (1.0 - beta2) * g * g);
                ndarray::Zip::from(&mut layer.w)
                    .and(&mi.w)
                    .and(&vi.w)
                    .for_each(|p, a, b| *p -= lr * (a / c1) / ((b / c2).sqrt() + eps));
                ndarray::Zip::from(&mut layer.b)
                    .and(&mi.b)
                    .and(&vi.b)
                    .for_each(|p, a, b| *p -= lr * (a / c1) / ((b / c2).sqrt() + eps));
            }
        }
        _ => unreachable!("optimizer state matches its kind"),
    }
}

/// Fits `model` by minimizing the weighted DSM objective
/// `(1/2) E[λ(n)·‖∇ log p(x_n|x_0) - s(x_n, n)‖²]` with `λ(n) = 1 - Φ(n,0)`,
/// `n ~ U{1..N}`, `x_0` drawn from `dataset` and `x_n` from the exact kernel.
pub fn train_dsm(
    model: MlpScoreModel,
    dataset: &Dataset,
    schedule: &Schedule,
    hyper: &TrainHyper,
) -> Result<TrainReport> {
    hyper.validate()?;
    if dataset.dim() != model.dim() {
        return Err(Error::Argument(format!(
            "model expects d = {}, dataset has d = {}",
            model.dim(),
            dataset.dim()
        )));
    }
    if model.steps() != schedule.steps() {
        return Err(Error::Argument("model and schedule disagree on N".into()));
    }
    let mut model = model;
    let mut state = match hyper.optimizer {
        Optimizer::Sgd { .. } => OptState::Sgd {
            velocity: model.zero_grads(),
        },
        Optimizer::Adam { .. } => OptState::Adam {
            m: model.zero_grads(),
            v: model.zero_grads(),
            t: 0,
        },
    };
    let (rows, d) = (dataset.len(), dataset.dim());
    let big_n = schedule.steps();
    let mut rng = rng::stream(rng::derive(hyper.seed, "train"), 0);
    let mut losses = Vec::with_capacity(hyper.steps);
    let mut xt = Array2::zeros((hyper.batch, d));
    let mut targets = Array2::zeros((hyper.batch, d));
    let mut steps = vec![0usize; hyper.batch];
    let mut weights = vec![0.0; hyper.batch];

    for step in 0..hyper.steps {
        for b in 0..hyper.batch {
            let x0 = dataset.row(rng.random_range(0..rows));
            let n = rng.random_range(1..=big_n);
            let phi = schedule.retention(n);
            let (root, sd) = (phi.sqrt(), (1.0 - phi).sqrt());
            for j in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                xt[[b, j]] = root * x0[j] + sd * z;
                // -(x_t - √Φ x_0) / (1 - Φ)
                targets[[b, j]] = -z / sd;
            }
            steps[b] = n;
            weights[b] = 1.0 - phi;
        }
        let (loss, grads) = model.loss_and_grads(xt.view(), &steps, targets.view(), &weights);
        if !loss.is_finite() {
            return Err(Error::TrainingFailure { step, loss });
        }
        losses.push(loss);
        apply_update(&mut model, &grads, &hyper.optimizer, &mut state, hyper.rate_at(step));
        if !model.is_finite() {
            return Err(Error::TrainingFailure { step, loss: f64::NAN });
        }
    }
    Ok(TrainReport { model, losses })
}

/// `√( Σ_n λ(n) Σ_x ‖s(x,n) - s*(x,n)‖² / Σ_n λ(n) Σ_x ‖s*(x,n)‖² )` over
/// forward-marginal draws from the held-out `x0` at each grid step.
pub fn weighted_relative_error(
    model: &dyn ScoreField,
    oracle: &dyn ScoreField,
    schedule: &Schedule,
    x0: ArrayView2<'_, f64>,
    grid: &[usize],
    seed: u64,
) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for &n in grid {
        let x = sample_marginal(x0, n, schedule, rng::derive(seed, &format!("grid{n}")))?;
        let a = model.evaluate_batch(x.view(), n);
        let b = oracle.evaluate_batch(x.view(), n);
        let lambda = schedule.dsm_weight(n);
        num += lambda * (&a - &b).mapv(|v| v * v).sum();
        den += lambda * b.mapv(|v| v * v).sum();
    }
    if den == 0.0 {
        return Err(Error::DegenerateNormalization("oracle score norm".into()));
    }
    Ok((num / den).sqrt())
}

/// One DSM training example: `x_n = √Φ·x0 + √(1-Φ)·noise`.
#[derive(Clone, Debug)]
pub struct DsmProbe {
    pub x0: Vec<f64>,
    pub n: usize,
    pub noise: Vec<f64>,
}

/// Largest norm-relative discrepancy `‖g_fd - g_bp‖ / ‖g_bp‖` over probes
/// between backprop parameter gradients of the DSM loss and central
/// differences with step `epsilon`.
pub fn finite_diff_check(
    model: &MlpScoreModel,
    probes: &[DsmProbe],
    schedule: &Schedule,
    epsilon: f64,
) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::Argument(format!("epsilon {epsilon} outside [1e-6, 1e-3]")));
    }
    let mut worst: f64 = 0.0;
    let mut probe_model = model.clone();
    for p in probes {
        if p.n == 0 || p.n > schedule.steps() {
            return Err(Error::Argument(format!("probe step {} outside [1, N]", p.n)));
        }
        let phi = schedule.retention(p.n);
        let (root, sd) = (phi.sqrt(), (1.0 - phi).sqrt());
        let xt: Vec<f64> = p.x0.iter().zip(&p.noise).map(|(a, z)| root * a + sd * z).collect();
        let target: Vec<f64> = xt.iter().zip(&p.x0).map(|(x, a)| -(x - root * a) / (1.0 - phi)).collect();
        let d = xt.len();
        let xv = ArrayView2::from_shape((1, d), &xt).map_err(|e| Error::Argument(e.to_string()))?;
        let tv = ArrayView2::from_shape((1, d), &target).map_err(|e| Error::Argument(e.to_string()))?;
        let weights = [1.0 - phi];
        let steps = [p.n];
        let (_, grads) = model.loss_and_grads(xv, &steps, tv, &weights);
        let analytic = MlpScoreModel::flatten_grads(&grads);
        let mut diff2 = 0.0;
        let mut norm2 = 0.0;
        for (i, g) in analytic.iter().enumerate() {
            let orig = *probe_model.param_mut(i);
            *probe_model.param_mut(i) = orig + epsilon;
            let up = probe_model.loss(xv, &steps, tv, &weights);
            *probe_model.param_mut(i) = orig - epsilon;
            let down = probe_model.loss(xv, &steps, tv, &weights);
            *probe_model.param_mut(i) = orig;
            let fd = (up - down) / (2.0 * epsilon);
            diff2 += (fd - g).powi(2);
            norm2 += g * g;
        }
        let rel = if norm2 == 0.0 {
            if diff2 == 0.0 { 0.0 } else { f64::INFINITY }
        } else {
            (diff2 / norm2).sqrt()
        };
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GaussianMixtureSpec, Source};
    use crate::schedule::ScheduleKind;
    use crate::score::{Activation, MlpConfig};

    fn lin() -> Schedule {
        Schedule::standard(ScheduleKind::Linear)
    }

    fn probes(count: usize, d: usize, seed: u64) -> Vec<DsmProbe> {
        let mut r = rng::stream(seed, 0);
        (0..count)
            .map(|_| DsmProbe {
                x0: (0..d).map(|_| r.sample(StandardNormal)).collect(),
                n: r.random_range(1..=1000),
                noise: (0..d).map(|_| r.sample(StandardNormal)).collect(),
            })
            .collect()
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let cfg = MlpConfig {
            hidden: vec![24, 24],
            ..MlpConfig::default()
        };
        let model = MlpScoreModel::new(2, &lin(), &cfg, 1).unwrap();
        let err = finite_diff_check(&model, &probes(10, 2, 2), &lin(), 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn single_linear_layer_is_exact() {
        let cfg = MlpConfig {
            hidden: vec![],
            time_features: 8,
            activation: Activation::Linear,
            gaussian_baseline: true,
        };
        let model = MlpScoreModel::new(3, &lin(), &cfg, 4).unwrap();
        let err = finite_diff_check(&model, &probes(5, 3, 5), &lin(), 1e-4).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn zero_inputs_give_finite_gradients() {
        let model = MlpScoreModel::new(2, &lin(), &MlpConfig::default(), 6).unwrap();
        let p = vec![DsmProbe {
            x0: vec![0.0; 2],
            n: 1,
            noise: vec![0.0; 2],
        }];
        let err = finite_diff_check(&model, &p, &lin(), 1e-5).unwrap();
        assert!(err.is_finite() && err < 1e-4);
        assert!(finite_diff_check(&model, &p, &lin(), 1e-2).is_err());
    }

    fn mixture() -> Dataset {
        let spec = GaussianMixtureSpec {
            weights: vec![0.5, 0.5],
            means: vec![vec![-0.8, 0.0], vec![0.8, 0.0]],
            variances: vec![0.36, 0.36],
        };
        generate(&Source::Mixture(spec), 500, 1).unwrap()
    }

    #[test]
    fn zero_steps_leave_model_untouched() {
        let model = MlpScoreModel::new(2, &lin(), &MlpConfig::default(), 7).unwrap();
        let hyper = TrainHyper {
            batch: 8,
            steps: 0,
            learning_rate: 1e-3,
            seed: 1,
            optimizer: Optimizer::default(),
            final_lr_fraction: 1.0,
        };
        let report = train_dsm(model.clone(), &mixture(), &lin(), &hyper).unwrap();
        assert_eq!(report.model, model);
        assert!(report.losses.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let cfg = MlpConfig {
            hidden: vec![32, 32],
            gaussian_baseline: false,
            ..MlpConfig::default()
        };
        let model = MlpScoreModel::new(2, &lin(), &cfg, 8).unwrap();
        let hyper = TrainHyper {
            batch: 64,
            steps: 400,
            learning_rate: 1e-2,
            seed: 3,
            optimizer: Optimizer::Sgd { momentum: 0.9 },
            final_lr_fraction: 1.0,
        };
        let a = train_dsm(model.clone(), &mixture(), &lin(), &hyper).unwrap();
        let b = train_dsm(model, &mixture(), &lin(), &hyper).unwrap();
        assert_eq!(a.losses, b.losses);
        let head: f64 = a.losses[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = a.losses[350..].iter().sum::<f64>() / 50.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let model = MlpScoreModel::new(2, &lin(), &MlpConfig::default(), 9).unwrap();
        let hyper = TrainHyper {
            batch: 16,
            steps: 200,
            learning_rate: 1e6,
            seed: 1,
            optimizer: Optimizer::Sgd { momentum: 0.9 },
            final_lr_fraction: 1.0,
        };
        match train_dsm(model, &mixture(), &lin(), &hyper) {
            Err(Error::TrainingFailure { step, .. }) => assert!(step < 200),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.losses.len())),
        }
    }

    #[test]
    fn adam_fits_the_mixture() {
        let model = MlpScoreModel::new(2, &lin(), &MlpConfig::default(), 10).unwrap();
        let hyper = TrainHyper {
            batch: 128,
            steps: 1500,
            learning_rate: 1e-3,
            seed: 2,
            optimizer: Optimizer::default(),
            final_lr_fraction: 0.05,
        };
        let ds = mixture();
        let report = train_dsm(model, &ds, &lin(), &hyper).unwrap();
        let spec = GaussianMixtureSpec {
            weights: vec![0.5, 0.5],
            means: vec![vec![-0.8, 0.0], vec![0.8, 0.0]],
            variances: vec![0.36, 0.36],
        };
        let oracle = crate::score::GmScore::new(spec, &lin()).unwrap();
        let grid: Vec<usize> = (1..=10).map(|k| k * 100).collect();
        let err = weighted_relative_error(&report.model, &oracle, &lin(), ds.samples(), &grid, 1).unwrap();
        assert!(err < 0.2, "{err}");
    }
}
