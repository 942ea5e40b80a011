//! Fast closed-form oracle checks, one suite per library module.

use ndarray::Array2;
use uturn_core::data::GaussianMixtureSpec;
use uturn_core::diagnostics::{self, PolyKernel};
use uturn_core::forward::{self, AnchorMode};
use uturn_core::reverse::generate_from_noise;
use uturn_core::rng::derive;
use uturn_core::score::{dsm_target, GmScore, ScoreField};
use uturn_core::uturn::detect_knee;
use uturn_core::{Schedule, ScheduleKind};

use crate::{CliError, Outcome};

pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub struct Suite {
    pub name: &'static str,
    pub checks: Vec<Check>,
}

impl Suite {
    fn new(name: &'static str) -> Self {
        Self { name, checks: Vec::new() }
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn passed(&self) -> usize {
        self.checks.iter().filter(|c| c.passed).count()
    }
}

const KINDS: [ScheduleKind; 3] = [ScheduleKind::Linear, ScheduleKind::Sigmoid, ScheduleKind::Cosine];
const SEED: u64 = 20_240_229;

fn mixture() -> GaussianMixtureSpec {
    GaussianMixtureSpec {
        weights: vec![0.3, 0.7],
        means: vec![vec![-2.0, 0.5], vec![2.0, -0.5]],
        variances: vec![0.25, 0.25],
    }
    .standardized()
    .expect("valid mixture")
}

fn schedule_suite() -> Suite {
    let mut s = Suite::new("schedule");
    for kind in KINDS {
        let sch = Schedule::standard(kind);
        let mut prod = 1.0;
        let mut worst: f64 = 0.0;
        for n in 1..=sch.steps() {
            prod *= 1.0 - sch.betas()[n];
            worst = worst.max((sch.retention(n) / prod - 1.0).abs());
        }
        s.check(format!("{kind} retention is the running product"), worst < 1e-12, format!("{worst:.2e}"));
        let split = sch.phi(700, 300).unwrap_or(f64::NAN) * sch.retention(300);
        let rel = (split / sch.retention(700) - 1.0).abs();
        s.check(format!("{kind} phi composes"), rel < 1e-12, format!("{rel:.2e}"));
        let rows = sch.mean_std_csv().lines().count();
        s.check(format!("{kind} curve has N+1 rows"), rows == sch.steps() + 2, format!("{rows} lines"));
    }
    s
}

fn forward_suite() -> Suite {
    let mut s = Suite::new("forward");
    let spec = mixture();
    let m = 4000;
    let x0 = spec.sample(m, derive(SEED, "fwd_data")).expect("sample");
    let tol = 5.0 / (m as f64).sqrt();
    for kind in KINDS {
        let sch = Schedule::standard(kind);
        let steps: Vec<usize> = (0..=10).map(|k| k * 100).collect();
        let ens = forward::simulate_forward_from(x0.view(), &sch, &steps, derive(SEED, "fwd")).expect("forward");
        let c0 = forward::empirical_autocorr(&ens, 0, &steps).expect("c0");
        let ct = forward::empirical_autocorr(&ens, 1000, &steps).expect("ct");
        let m0 = forward::pooled_moments(&ens)[0].2;
        let c0c = forward::forward_autocorr_general(&sch, AnchorMode::FromZero, m0);
        let ctc = forward::forward_autocorr_general(&sch, AnchorMode::FromT, m0);
        let dev = |e: &uturn_core::DiagnosticSeries, c: &uturn_core::DiagnosticSeries| {
            e.steps
                .iter()
                .zip(&e.values)
                .map(|(&n, v)| (v - c.value_at(n).unwrap_or(f64::NAN)).abs())
                .fold(0.0, f64::max)
        };
        let (d0, dt) = (dev(&c0, &c0c), dev(&ct, &ctc));
        s.check(format!("{kind} C_0 matches closed form"), d0 < tol, format!("{d0:.4} < {tol:.4}"));
        s.check(format!("{kind} C_T matches closed form"), dt < tol, format!("{dt:.4} < {tol:.4}"));
    }
    s
}

fn score_suite() -> Suite {
    let mut s = Suite::new("score");
    let spec = mixture();
    let sch = Schedule::standard(ScheduleKind::Linear);
    let gm = GmScore::new(spec.clone(), &sch).expect("score");
    let probes = spec.sample(20, derive(SEED, "probes")).expect("sample");
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for n in [0, 10, 100, 500, 1000] {
        for row in probes.rows() {
            let x = row.to_vec();
            let an = gm.evaluate(&x, n);
            let fd: Vec<f64> = (0..x.len())
                .map(|j| {
                    let (mut up, mut dn) = (x.clone(), x.clone());
                    up[j] += h;
                    dn[j] -= h;
                    (gm.log_density(&up, n) - gm.log_density(&dn, n)) / (2.0 * h)
                })
                .collect();
            let num: f64 = an.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = an.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            worst = worst.max(num / den);
        }
    }
    s.check("mixture score is the log-density gradient", worst < 1e-5, format!("{worst:.2e}"));

    // λ(n)·E‖∇ log p(x_n | x_0)‖² = d for every n.
    let m = 20_000;
    let x0 = spec.sample(m, derive(SEED, "dsm_x0")).expect("sample");
    let unit = GaussianMixtureSpec {
        weights: vec![1.0],
        means: vec![vec![0.0; 2]],
        variances: vec![1.0],
    };
    let z = unit.sample(m, derive(SEED, "dsm_z")).expect("sample");
    for n in [1, 50, 250, 500, 1000] {
        let phi = sch.retention(n);
        let mut acc = 0.0;
        for i in 0..m {
            let xt: Vec<f64> =
                x0.row(i).iter().zip(z.row(i)).map(|(a, e)| phi.sqrt() * a + (1.0 - phi).sqrt() * e).collect();
            let t = dsm_target(&xt, x0.row(i).as_slice().expect("row"), n, &sch).expect("target");
            acc += t.iter().map(|v| v * v).sum::<f64>();
        }
        let v = sch.dsm_weight(n) * acc / m as f64;
        s.check(format!("weighted target norm at n = {n}"), (v / 2.0 - 1.0).abs() < 0.05, format!("{v:.4} vs 2"));
    }
    s
}

fn reverse_suite() -> Suite {
    let mut s = Suite::new("reverse");
    let spec = mixture();
    let sch = Schedule::standard(ScheduleKind::Linear);
    let gm = GmScore::new(spec.clone(), &sch).expect("score");
    let x = generate_from_noise(&gm, &sch, 400, derive(SEED, "reverse")).expect("reverse");
    let occ = spec.occupancy(x.view());
    let worst = occ.iter().zip(&spec.weights).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    s.check("exact-score generation recovers the weights", worst < 0.08, format!("{occ:?}"));
    s
}

fn brute_mmd2(x: &Array2<f64>, y: &Array2<f64>, k: &PolyKernel) -> f64 {
    let (m, n) = (x.nrows(), y.nrows());
    let mut xx = 0.0;
    let mut yy = 0.0;
    let mut xy = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                xx += k.eval(x.row(i), x.row(j));
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            if i != j {
                yy += k.eval(y.row(i), y.row(j));
            }
        }
    }
    for i in 0..m {
        for j in 0..n {
            xy += k.eval(x.row(i), y.row(j));
        }
    }
    let (mf, nf) = (m as f64, n as f64);
    xx / (mf * (mf - 1.0)) + yy / (nf * (nf - 1.0)) - 2.0 * xy / (mf * nf)
}

fn diagnostics_suite() -> Suite {
    let mut s = Suite::new("diagnostics");
    let spec = mixture();
    let x = spec.sample(30, derive(SEED, "kid_x")).expect("sample");
    let y = spec.sample(40, derive(SEED, "kid_y")).expect("sample") * 1.3;
    let k = PolyKernel::standard(2);
    let brute = brute_mmd2(&x, &y, &k);
    let fast = diagnostics::kid(x.view(), y.view()).expect("kid");
    let back = diagnostics::kid(y.view(), x.view()).expect("kid");
    let err = (fast.mmd2 - brute).abs();
    s.check("KID equals the brute-force sum", err < 1e-10, format!("{err:.2e}"));
    s.check("KID is symmetric", fast.mmd2 == back.mmd2, format!("{} vs {}", fast.mmd2, back.mmd2));
    let q = diagnostics::kolmogorov_survival(1.358);
    s.check("Kolmogorov tail at 1.358", (q - 0.05).abs() < 1e-3, format!("{q:.5}"));
    s.check(
        "normal CDF",
        (diagnostics::standard_normal_cdf(1.959_963_984_540_054) - 0.975).abs() < 1e-9,
        "Φ(1.96)",
    );
    s
}

fn uturn_suite() -> Suite {
    let mut s = Suite::new("uturn");
    let steps: Vec<usize> = (1..=12).map(|k| k * 80).collect();
    let values: Vec<f64> = steps.iter().map(|&n| if n < 600 { 1.0 } else { 1.0 + (n - 600) as f64 / 100.0 }).collect();
    let knee = detect_knee(&steps, &values);
    s.check("knee of a hinge", knee == Some(560) || knee == Some(640), format!("{knee:?}"));
    let flat = vec![0.5; steps.len()];
    s.check("no knee on a flat curve", detect_knee(&steps, &flat).is_none(), "flat");
    s
}

pub fn suites() -> Vec<Suite> {
    vec![
        schedule_suite(),
        forward_suite(),
        score_suite(),
        reverse_suite(),
        diagnostics_suite(),
        uturn_suite(),
    ]
}

pub fn run_cli() -> Result<Outcome, CliError> {
    let mut failed = 0;
    for suite in suites() {
        println!("{}: {}/{} passed", suite.name, suite.passed(), suite.checks.len());
        for c in suite.checks.iter().filter(|c| !c.passed) {
            println!("  FAILED {} ({})", c.name, c.detail);
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(CliError::SelfTest(failed));
    }
    Ok(Outcome {
        run_dir: None,
        message: "all self-test suites passed".into(),
    })
}
