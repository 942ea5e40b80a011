//! Subcommand bodies. Each one opens a run directory, writes its artifacts
//! and a `summary.json`, and marks the manifest complete.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use serde_json::{json, Value};
use uturn_core::data::{self, Dataset, GaussianMixtureSpec, Source};
use uturn_core::diagnostics::{self, FeatureMap, KidOptions, KidReport, KS_MIN_SAMPLES};
use uturn_core::forward::{self, AnchorMode, InitMode, PathEnsemble};
use uturn_core::reverse::{simulate_reverse, ReverseInit, ReverseRunSpec};
use uturn_core::rng::derive;
use uturn_core::score::{
    finite_diff_check, train_dsm, weighted_relative_error, DsmProbe, GmScore, MlpScoreModel, ScoreField, TrainHyper,
};
use uturn_core::uturn::{default_turn_steps, uturn_scan, ScanConfig};
use uturn_core::{DiagnosticSeries, Schedule};

use crate::config::{grid, ExperimentConfig, NormalizeChoice, ScoreConfig, SourceConfig};
use crate::rundir::{read_manifest, verify, RunDir};
use crate::{plot, selftest, Cli, CliError, Command, Outcome};

pub fn dispatch(cli: &Cli) -> Result<Outcome, CliError> {
    match &cli.command {
        Command::Selftest => selftest::run_cli(),
        Command::Report { dirs } => report(cli, dirs),
        Command::Kid { real, gen } => {
            let cfg = match &cli.config {
                Some(path) => Some(ExperimentConfig::load(path, &cli.overrides)?),
                None => None,
            };
            kid_files(cli, cfg, real.clone(), gen.clone())
        }
        cmd => {
            let Some(path) = &cli.config else {
                return Err(CliError::Config(vec![format!("`{}` needs --config", cmd.name())]));
            };
            let cfg = ExperimentConfig::load(path, &cli.overrides)?;
            let body: fn(&mut Session) -> Result<Value, CliError> = match cmd {
                Command::Forward => forward_cmd,
                Command::TrainScore => train_cmd,
                Command::Reverse => reverse_cmd,
                Command::Diagnose => diagnose_cmd,
                Command::UturnScan => scan_cmd,
                _ => unreachable!("handled above"),
            };
            let session = Session::open(cli, cmd.name(), cfg)?;
            session.run(body)
        }
    }
}

/// A run in progress.
pub struct Session {
    pub cfg: ExperimentConfig,
    pub schedule: Schedule,
    pub dir: RunDir,
    plots: bool,
}

impl Session {
    fn open(cli: &Cli, name: &str, cfg: ExperimentConfig) -> Result<Self, CliError> {
        let root = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        let dir = RunDir::create(&root, name, Some(cfg.seed), serde_json::to_value(&cfg)?)?;
        Ok(Self {
            schedule: cfg.schedule(),
            cfg,
            dir,
            plots: cli.plots,
        })
    }

    fn run(mut self, body: fn(&mut Session) -> Result<Value, CliError>) -> Result<Outcome, CliError> {
        match body(&mut self) {
            Ok(summary) => {
                self.dir.write_json("summary.json", &summary)?;
                let path = self.dir.finish()?;
                Ok(Outcome {
                    message: format!("wrote {}", path.display()),
                    run_dir: Some(path),
                })
            }
            Err(e) => {
                self.dir.abandon(&e);
                Err(e)
            }
        }
    }

    fn seed(&mut self, tag: &str) -> u64 {
        let s = derive(self.cfg.seed, tag);
        self.dir.record_seed(tag, s);
        s
    }

    fn csv(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        write_csv_artifact(&mut self.dir, self.plots, name, text)
    }

    fn series(&mut self, name: &str, series: &DiagnosticSeries) -> Result<(), CliError> {
        self.csv(name, &series.to_csv())
    }
}

fn write_csv_artifact(dir: &mut RunDir, plots: bool, name: &str, text: &str) -> Result<(), CliError> {
    dir.write(name, text.as_bytes())?;
    if plots {
        let stem = name.trim_end_matches(".csv");
        if let Some(svg) = plot::svg_from_csv(stem, text) {
            dir.write(&format!("{stem}.svg"), svg.as_bytes())?;
        }
    }
    Ok(())
}

pub struct Data {
    pub train: Dataset,
    pub holdout: Option<Dataset>,
    /// The generating mixture, when the source is one.
    pub mixture: Option<GaussianMixtureSpec>,
}

pub fn read_samples(path: &Path) -> Result<Array2<f64>, CliError> {
    let csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    Ok(if csv { data::read_csv(path)? } else { data::read_binary(path)? })
}

fn load_data(s: &mut Session) -> Result<Data, CliError> {
    let ds = s.cfg.dataset.clone();
    let mixture = ds.source.mixture().transpose()?;
    let full = match &ds.source {
        SourceConfig::File { path } => {
            let x = read_samples(path)?;
            let name = path.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let total = ds.samples.map(|m| m + ds.holdout).unwrap_or(x.nrows());
            if total > x.nrows() {
                return Err(CliError::Config(vec![format!(
                    "{} has {} rows, fewer than the {total} requested",
                    path.display(),
                    x.nrows()
                )]));
            }
            Dataset::new(name, x.slice(ndarray::s![..total, ..]).to_owned())?
        }
        SourceConfig::Mixture { .. } => {
            let m = ds.samples.expect("validated") + ds.holdout;
            let seed = s.seed("data");
            data::generate(&Source::Mixture(mixture.clone().expect("mixture")), m, seed)?
        }
        SourceConfig::Builtin { name } => {
            let m = ds.samples.expect("validated") + ds.holdout;
            let seed = s.seed("data");
            data::generate(&Source::Builtin(*name), m, seed)?
        }
    };
    let default_norm = if mixture.is_some() {
        NormalizeChoice::None
    } else {
        NormalizeChoice::PerCoordinate
    };
    let full = match ds.normalize.unwrap_or(default_norm).mode() {
        Some(mode) => full.normalize(mode)?,
        None => full,
    };
    let (train, holdout) = if ds.holdout >= 2 {
        let (a, b) = full.split(ds.holdout)?;
        (a, Some(b))
    } else {
        (full, None)
    };
    Ok(Data {
        train,
        holdout,
        mixture,
    })
}

/// Rows `0..m` of the dataset, cycling past its end.
fn seeding_rows(d: &Dataset, m: usize) -> Array2<f64> {
    let idx: Vec<usize> = (0..m).map(|i| i % d.len()).collect();
    d.samples().select(Axis(0), &idx)
}

fn train_model(s: &mut Session, data: &Data) -> Result<(MlpScoreModel, Vec<f64>), CliError> {
    let ScoreConfig::Train { model, hyper } = s.cfg.score.clone() else {
        unreachable!("caller checked the score kind")
    };
    let init_seed = s.seed("init");
    let init = MlpScoreModel::new(data.train.dim(), &s.schedule, &model, init_seed)?;
    let hp = TrainHyper {
        batch: hyper.batch,
        steps: hyper.steps,
        learning_rate: hyper.learning_rate,
        seed: s.seed("train"),
        optimizer: hyper.optimizer,
        final_lr_fraction: hyper.final_lr_fraction,
    };
    let report = train_dsm(init, &data.train, &s.schedule, &hp)?;
    let mut bytes = Vec::new();
    report.model.write_to(&mut bytes)?;
    s.dir.write("score.umlp", &bytes)?;
    s.csv("loss.csv", &report.loss_csv())?;
    Ok((report.model, report.losses))
}

fn build_score(s: &mut Session, data: &Data) -> Result<Box<dyn ScoreField>, CliError> {
    match s.cfg.score.clone() {
        ScoreConfig::Analytic => {
            let spec = data.mixture.clone().expect("validated: analytic needs a mixture");
            Ok(Box::new(GmScore::new(spec, &s.schedule)?))
        }
        ScoreConfig::Train { .. } => Ok(Box::new(train_model(s, data)?.0)),
        ScoreConfig::Checkpoint { path } => {
            let model = MlpScoreModel::load(&path)?;
            let mut p = Vec::new();
            if model.dim() != data.train.dim() {
                p.push(format!("checkpoint has d = {}, data has d = {}", model.dim(), data.train.dim()));
            }
            if model.steps() != s.schedule.steps() {
                p.push(format!("checkpoint has N = {}, schedule has N = {}", model.steps(), s.schedule.steps()));
            }
            if !p.is_empty() {
                return Err(CliError::Config(p));
            }
            Ok(Box::new(model))
        }
    }
}

/// `0` and `N` always included.
fn with_ends(mut steps: Vec<usize>, big_n: usize) -> Vec<usize> {
    steps.push(0);
    steps.push(big_n);
    steps.sort_unstable();
    steps.dedup();
    steps
}

fn restrict(series: &DiagnosticSeries, steps: &[usize]) -> DiagnosticSeries {
    let values = steps.iter().map(|&n| series.value_at(n).unwrap_or(f64::NAN)).collect();
    let mut out = DiagnosticSeries::exact(series.name.clone(), steps.to_vec(), values, &series.meta.estimator);
    out.meta.schedule = series.meta.schedule;
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Regression coefficient of `x_n` on `x_0` and the residual variance per
/// coordinate, each with a standard error.
pub fn forward_moments(ens: &PathEnsemble, schedule: &Schedule) -> Result<String, CliError> {
    let x0 = ens.at_step(0)?;
    let c0 = forward::empirical_autocorr(ens, 0, &ens.record_steps)?;
    let mut out = String::from("n,mean_coeff,stderr_mean_coeff,variance,stderr_variance,closed_mean_coeff,closed_variance\n");
    for (i, &n) in ens.record_steps.iter().enumerate() {
        let xn = ens.at_step(n)?;
        let c = c0.values[i];
        let r2: Vec<f64> = xn.iter().zip(x0.iter()).map(|(a, b)| (a - c * b).powi(2)).collect();
        let k = r2.len() as f64;
        let var = r2.iter().sum::<f64>() / k;
        let sd = (r2.iter().map(|v| (v - var).powi(2)).sum::<f64>() / (k - 1.0).max(1.0)).sqrt();
        let phi = schedule.retention(n);
        out.push_str(&format!(
            "{n},{c},{},{var},{},{},{}\n",
            c0.stderr[i],
            sd / k.sqrt(),
            phi.sqrt(),
            1.0 - phi
        ));
    }
    Ok(out)
}

fn parse_column(csv: &str, col: usize) -> Vec<f64> {
    csv.lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(col).and_then(|v| v.parse().ok()))
        .collect()
}

fn forward_cmd(s: &mut Session) -> Result<Value, CliError> {
    let data = load_data(s)?;
    let big_n = s.schedule.steps();
    let m = s.cfg.simulation.samples.unwrap_or(data.train.len());
    let x0 = seeding_rows(&data.train, m);
    let steps = with_ends(s.cfg.record_grid(), big_n);
    let seed = s.seed("forward");
    let ens = forward::simulate_forward_from(x0.view(), &s.schedule, &steps, seed)?;

    s.csv("mean_std.csv", &s.schedule.mean_std_csv())?;
    let moments = forward_moments(&ens, &s.schedule)?;
    s.csv("forward_moments.csv", &moments)?;

    let m0 = forward::pooled_moments(&ens)[0].2;
    let c0 = forward::empirical_autocorr(&ens, 0, &steps)?;
    let ct = forward::empirical_autocorr(&ens, big_n, &steps)?;
    let c0_closed = restrict(&forward::forward_autocorr_general(&s.schedule, AnchorMode::FromZero, m0), &steps);
    let ct_closed = restrict(&forward::forward_autocorr_general(&s.schedule, AnchorMode::FromT, m0), &steps);
    s.series("c0.csv", &c0)?;
    s.series("ct.csv", &ct)?;
    s.series("c0_closed.csv", &c0_closed)?;
    s.series("ct_closed.csv", &ct_closed)?;

    let mut ks_at_n = Value::Null;
    if ens.samples() >= KS_MIN_SAMPLES {
        let ks = diagnostics::ks_ratio_series(&ens, s.cfg.diagnostics.ks_alpha)?;
        ks_at_n = json!(ks.value_at(big_n));
        s.series("ks_ratio.csv", &ks)?;
    }
    if s.cfg.simulation.save_ensemble {
        ens.save(&s.dir.path().join("ensemble.bin"))?;
        s.dir.adopt("ensemble.bin")?;
        s.dir.adopt("ensemble.bin.json")?;
    }
    let col = |c| parse_column(&moments, c);
    Ok(json!({
        "samples": m,
        "dim": ens.dim(),
        "record_steps": steps.len(),
        "data_second_moment": m0,
        "max_abs_dev_mean_coeff": max_abs_diff(&col(1), &col(5)),
        "max_abs_dev_variance": max_abs_diff(&col(3), &col(6)),
        "max_abs_dev_c0": max_abs_diff(&c0.values, &c0_closed.values),
        "max_abs_dev_ct": max_abs_diff(&ct.values, &ct_closed.values),
        "ks_ratio_at_n": ks_at_n,
    }))
}

fn train_cmd(s: &mut Session) -> Result<Value, CliError> {
    if !matches!(s.cfg.score, ScoreConfig::Train { .. }) {
        return Err(CliError::Config(vec!["train-score needs score.kind = train".into()]));
    }
    let data = load_data(s)?;
    let (model, losses) = train_model(s, &data)?;
    let tail = losses.len().saturating_sub(100);
    let final_loss = losses[tail..].iter().sum::<f64>() / (losses.len() - tail).max(1) as f64;
    let mut summary = json!({
        "parameters": model.param_count(),
        "steps": losses.len(),
        "final_loss_mean_last_100": final_loss,
    });
    let Some(spec) = data.mixture.clone() else {
        return Ok(summary);
    };
    let oracle = GmScore::new(spec, &s.schedule)?;
    let eval_grid: Vec<usize> = grid(s.schedule.steps(), 20).into_iter().filter(|&n| n > 0).collect();
    let x0 = data.holdout.as_ref().unwrap_or(&data.train);
    let seed = s.seed("fidelity");
    let err = weighted_relative_error(&model, &oracle, &s.schedule, x0.samples(), &eval_grid, seed)?;
    let probe_seed = s.seed("fd_probes");
    let probes = fd_probes(&data.train, &s.schedule, 10, probe_seed)?;
    let fd = finite_diff_check(&model, &probes, &s.schedule, 1e-5)?;
    let fidelity = json!({
        "weighted_relative_error": err,
        "grid": eval_grid,
        "heldout": data.holdout.is_some(),
        "finite_difference_max_relative": fd,
        "finite_difference_epsilon": 1e-5,
    });
    s.dir.write_json("fidelity.json", &fidelity)?;
    summary["weighted_relative_error"] = json!(err);
    summary["finite_difference_max_relative"] = json!(fd);
    Ok(summary)
}

/// `k` probes spread over the steps, on dataset rows, with standard normal
/// noise.
pub fn fd_probes(d: &Dataset, schedule: &Schedule, k: usize, seed: u64) -> Result<Vec<DsmProbe>, CliError> {
    let dim = d.dim();
    let unit = GaussianMixtureSpec {
        weights: vec![1.0],
        means: vec![vec![0.0; dim]],
        variances: vec![1.0],
    };
    let noise = unit.sample(k, seed)?;
    let big_n = schedule.steps();
    Ok((0..k)
        .map(|i| DsmProbe {
            x0: d.row(i % d.len()).to_vec(),
            n: if k > 1 { 1 + i * (big_n - 1) / (k - 1) } else { big_n },
            noise: noise.row(i).to_vec(),
        })
        .collect())
}

fn feature_kid(
    real: ArrayView2<'_, f64>,
    gen: ArrayView2<'_, f64>,
    feature: &FeatureMap,
    resamples: usize,
    seed: u64,
) -> Result<KidReport, CliError> {
    let fr = diagnostics::feature_map(real, feature)?;
    let fg = diagnostics::feature_map(gen, feature)?;
    let opts = KidOptions {
        bootstrap_resamples: resamples,
        bootstrap_seed: seed,
        feature: feature.id(),
    };
    Ok(diagnostics::kid_with(fr.view(), fg.view(), &opts)?)
}

fn reverse_cmd(s: &mut Session) -> Result<Value, CliError> {
    let data = load_data(s)?;
    let score = build_score(s, &data)?;
    let big_n = s.schedule.steps();
    let rc = s.cfg.reverse.clone();
    let start = rc.start_step.unwrap_or(big_n);
    let mut record: Vec<usize> = (0..=start).step_by(rc.record_every).collect();
    if record.last() != Some(&start) {
        record.push(start);
    }
    let seed = s.seed("reverse");
    let spec = ReverseRunSpec {
        start_step: start,
        init: ReverseInit::Noise { samples: rc.samples },
        score: score.as_ref(),
        schedule: &s.schedule,
        record_steps: record.clone(),
        seed,
        integrator: rc.integrator,
        substeps: rc.substeps,
        init_label: InitMode::Noise,
    };
    let ens = simulate_reverse(&spec)?;
    let samples = ens.final_states().to_owned();
    data::write_csv(&s.dir.path().join("samples.csv"), samples.view())?;
    s.dir.adopt("samples.csv")?;

    let rev = diagnostics::reverse_autocorr(&ens, start, &record)?;
    s.series("reverse_autocorr.csv", &rev)?;
    let mut summary = json!({
        "samples": ens.samples(),
        "excluded": ens.excluded.len(),
        "start_step": start,
        "integrator": rc.integrator,
        "substeps": rc.substeps,
    });
    if start == big_n {
        let m0 = data.train.pooled_moments().1;
        let closed = restrict(&forward::forward_autocorr_general(&s.schedule, AnchorMode::FromT, m0), &record);
        s.series("ct_closed.csv", &closed)?;
        let z_min = rev
            .values
            .iter()
            .zip(&rev.stderr)
            .zip(&closed.values)
            .filter(|((_, se), _)| **se > 0.0)
            .map(|((r, se), c)| (r - c) / se)
            .fold(f64::INFINITY, f64::min);
        summary["min_z_reverse_minus_forward"] = json!(z_min);
    }
    let anchors: Vec<usize> = rc
        .anchors
        .clone()
        .unwrap_or_else(|| s.cfg.record_grid())
        .into_iter()
        .filter(|a| record.binary_search(a).is_ok())
        .collect();
    if !anchors.is_empty() {
        let hd = diagnostics::reverse_half_decay(&ens, &anchors)?;
        s.series("half_decay.csv", &hd)?;
    }
    if let Some(h) = &data.holdout {
        let kid_seed = s.seed("kid");
        let d = &s.cfg.diagnostics;
        let report = feature_kid(h.samples(), samples.view(), &d.feature, d.bootstrap_resamples, kid_seed)?;
        s.dir.write_json("kid.json", &report)?;
        summary["kid"] = json!(report.mmd2);
        summary["kid_stderr"] = json!(report.stderr);
    }
    if let Some(spec) = &data.mixture {
        summary["occupancy"] = json!(spec.occupancy(samples.view()));
        summary["weights"] = json!(spec.weights);
    }
    Ok(summary)
}

fn diagnose_cmd(s: &mut Session) -> Result<Value, CliError> {
    let data = load_data(s)?;
    let score = build_score(s, &data)?;
    let big_n = s.schedule.steps();
    let mut steps: Vec<usize> = (0..=big_n).step_by(s.cfg.diagnostics.record_every).collect();
    steps.push(1.min(big_n));
    let steps = with_ends(steps, big_n);
    let m = s.cfg.simulation.samples.unwrap_or(data.train.len());
    let x0 = seeding_rows(&data.train, m);
    let seed = s.seed("diagnose_forward");
    let ens = forward::simulate_forward_from(x0.view(), &s.schedule, &steps, seed)?;
    let norms = diagnostics::score_norm_curves(score.as_ref(), &ens, &s.schedule)?;
    s.series("score_norm.csv", &norms.s)?;
    s.series("weighted_score_norm.csv", &norms.m)?;
    let d = s.cfg.diagnostics.clone();
    let plateau = diagnostics::plateau_step(&norms.m, d.plateau_window, d.plateau_rel_tol)?;
    let mut summary = json!({
        "samples": m,
        "reference_step": norms.reference_step,
        "plateau_step": plateau,
        "plateau_one_minus_phi": plateau.map(|n| 1.0 - s.schedule.retention(n)),
        "plateau_window": d.plateau_window,
        "plateau_rel_tol": d.plateau_rel_tol,
    });
    if ens.samples() >= KS_MIN_SAMPLES {
        let ks = diagnostics::ks_ratio_series(&ens, d.ks_alpha)?;
        summary["ks_ratio_at_n"] = json!(ks.value_at(big_n));
        s.series("ks_ratio.csv", &ks)?;
    }
    Ok(summary)
}

fn scan_cmd(s: &mut Session) -> Result<Value, CliError> {
    let data = load_data(s)?;
    let Some(holdout) = data.holdout.as_ref() else {
        return Err(CliError::Config(vec!["uturn-scan needs dataset.holdout of at least 2".into()]));
    };
    let score = build_score(s, &data)?;
    let big_n = s.schedule.steps();
    let cfg = ScanConfig {
        turn_steps: s.cfg.uturn.turn_steps.clone().unwrap_or_else(|| default_turn_steps(big_n)),
        samples: s.cfg.uturn.samples,
        seed: s.seed("uturn"),
        feature: s.cfg.diagnostics.feature.clone(),
        bootstrap_resamples: s.cfg.diagnostics.bootstrap_resamples,
    };
    let scan = uturn_scan(&data.train, holdout, &s.schedule, score.as_ref(), &cfg)?;
    s.csv("scan.csv", &scan.to_csv())?;
    let knee = scan.optimal_index().map(|i| {
        json!({
            "n_u": scan.turn_steps[i],
            "one_minus_phi": 1.0 - s.schedule.retention(scan.turn_steps[i]),
            "kid_uturn": scan.kid_uturn[i].mmd2,
            "stderr_uturn": scan.kid_uturn[i].stderr,
            "kid_noise": scan.kid_noise[i].mmd2,
            "stderr_noise": scan.kid_noise[i].stderr,
        })
    });
    Ok(json!({
        "turn_steps": scan.turn_steps,
        "samples": cfg.samples,
        "knee": knee,
        "kernel": scan.kid_uturn.first().map(|k| k.kernel.clone()),
        "feature": cfg.feature.id(),
    }))
}

fn kid_files(
    cli: &Cli,
    cfg: Option<ExperimentConfig>,
    real: Option<PathBuf>,
    gen: Option<PathBuf>,
) -> Result<Outcome, CliError> {
    let real = real.or_else(|| cfg.as_ref().and_then(|c| c.kid.real.clone()));
    let gen = gen.or_else(|| cfg.as_ref().and_then(|c| c.kid.gen.clone()));
    let mut p = Vec::new();
    for (flag, path) in [("--real", &real), ("--gen", &gen)] {
        match path {
            None => p.push(format!("kid needs {flag} (or kid.{} in the config)", &flag[2..])),
            Some(path) if !path.exists() => p.push(format!("{} does not exist", path.display())),
            _ => {}
        }
    }
    if !p.is_empty() {
        return Err(CliError::Config(p));
    }
    let (real, gen) = (real.expect("checked"), gen.expect("checked"));
    let diag = cfg.as_ref().map(|c| c.diagnostics.clone()).unwrap_or_default();
    let seed = cfg.as_ref().map(|c| c.seed);
    let root = cli
        .out
        .clone()
        .or_else(|| cfg.as_ref().map(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let snapshot = json!({
        "config": cfg,
        "real": real,
        "gen": gen,
    });
    let mut dir = RunDir::create(&root, "kid", seed, snapshot)?;
    let result = (|| {
        let x = read_samples(&real)?;
        let y = read_samples(&gen)?;
        let kid_seed = derive(seed.unwrap_or(0), "kid");
        dir.record_seed("kid", kid_seed);
        let report = feature_kid(x.view(), y.view(), &diag.feature, diag.bootstrap_resamples, kid_seed)?;
        dir.write_json("kid.json", &report)?;
        Ok::<_, CliError>(report)
    })();
    match result {
        Ok(report) => {
            dir.write_json("summary.json", &json!({"kid": report.mmd2, "stderr": report.stderr}))?;
            let path = dir.finish()?;
            Ok(Outcome {
                message: format!("KID {:.6e} ± {:.2e}; wrote {}", report.mmd2, report.stderr, path.display()),
                run_dir: Some(path),
            })
        }
        Err(e) => {
            dir.abandon(&e);
            Err(e)
        }
    }
}

fn report(cli: &Cli, dirs: &[PathBuf]) -> Result<Outcome, CliError> {
    let root = match (&cli.out, &cli.config) {
        (Some(out), _) => out.clone(),
        (None, Some(path)) => ExperimentConfig::load(path, &cli.overrides)?.output_dir,
        (None, None) => PathBuf::from("runs"),
    };
    let mut runs: Vec<PathBuf> = if dirs.is_empty() {
        let mut v = Vec::new();
        if root.is_dir() {
            for entry in std::fs::read_dir(&root)? {
                let p = entry?.path();
                if p.join(crate::rundir::MANIFEST).is_file() {
                    v.push(p);
                }
            }
        }
        v
    } else {
        dirs.to_vec()
    };
    runs.sort();
    let mut csv = String::from("run,subcommand,status,seed,files,mismatched\n");
    let mut entries = Vec::new();
    let mut bad = Vec::new();
    for dir in &runs {
        let manifest = read_manifest(dir)?;
        if manifest.subcommand == "report" && dirs.is_empty() {
            continue;
        }
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mismatched = verify(dir, &manifest);
        let status = serde_json::to_value(manifest.status)?;
        let status = status.as_str().unwrap_or_default().to_string();
        csv.push_str(&format!(
            "{name},{},{status},{},{},{}\n",
            manifest.subcommand,
            manifest.seed.map(|s| s.to_string()).unwrap_or_default(),
            manifest.files.len(),
            mismatched.len()
        ));
        let summary: Value = std::fs::read_to_string(dir.join("summary.json"))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or(Value::Null);
        bad.extend(mismatched.iter().map(|f| format!("{name}/{f}")));
        entries.push(json!({
            "run": name,
            "subcommand": manifest.subcommand,
            "status": status,
            "seed": manifest.seed,
            "mismatched": mismatched,
            "summary": summary,
        }));
    }
    let names: Vec<String> = runs.iter().map(|p| p.display().to_string()).collect();
    let mut out = RunDir::create(&root, "report", None, json!({ "runs": names }))?;
    write_csv_artifact(&mut out, cli.plots, "report.csv", &csv)?;
    out.write_json("report.json", &entries)?;
    let path = out.finish()?;
    if !bad.is_empty() {
        return Err(CliError::Integrity(bad));
    }
    Ok(Outcome {
        message: format!("{} runs verified; wrote {}", entries.len(), path.display()),
        run_dir: Some(path),
    })
}
