use ndarray::Array2;
use proptest::prelude::*;
use uturn_core::data::{Dataset, GaussianMixtureSpec};
use uturn_core::diagnostics::{self, kid_with, FeatureMap, KidOptions};
use uturn_core::forward::{self, AnchorMode};
use uturn_core::reverse::{generate_from_noise, simulate_reverse, Integrator, ReverseRunSpec};
use uturn_core::score::{train_dsm, GmScore, MlpConfig, MlpScoreModel, Optimizer, TrainHyper};
use uturn_core::uturn::{pairing_correlation, uturn_generate};
use uturn_core::{Schedule, ScheduleKind, ScheduleSpec};

fn mixture() -> GaussianMixtureSpec {
    GaussianMixtureSpec {
        weights: vec![0.3, 0.7],
        means: vec![vec![-2.0, 0.5], vec![2.0, -0.5]],
        variances: vec![0.25, 0.25],
    }
    .standardized()
    .unwrap()
}

fn lin() -> Schedule {
    Schedule::standard(ScheduleKind::Linear)
}

#[test]
fn exact_reverse_correlation_equals_forward_closed_form() {
    // Under the exact score the reverse chain has the forward path law, so
    // its anchored correlation tracks the forward closed form.
    let sch = lin();
    let gm = GmScore::new(mixture(), &sch).unwrap();
    let steps: Vec<usize> = (0..=20).map(|k| k * 50).collect();
    let spec = ReverseRunSpec {
        record_steps: steps.clone(),
        ..ReverseRunSpec::from_noise(&gm, &sch, 1500, 3)
    };
    let ens = simulate_reverse(&spec).unwrap();
    let cr = diagnostics::reverse_autocorr(&ens, 1000, &steps).unwrap();
    let ct = forward::forward_autocorr_closed_form(&sch, AnchorMode::FromT);
    for (i, &n) in steps.iter().enumerate() {
        let gap = (cr.values[i] - ct.value_at(n).unwrap()).abs();
        assert!(gap < 5.0 * cr.stderr[i] + 1e-12, "n = {n}: gap {gap}, se {}", cr.stderr[i]);
    }
}

#[test]
fn substeps_and_ancestral_both_recover_the_mixture() {
    let spec = mixture();
    let sch = lin();
    let gm = GmScore::new(spec.clone(), &sch).unwrap();
    for (integrator, substeps) in [(Integrator::EulerMaruyama, 4), (Integrator::Ancestral, 1)] {
        let run = ReverseRunSpec {
            integrator,
            substeps,
            ..ReverseRunSpec::from_noise(&gm, &sch, 1000, 8)
        };
        let x = simulate_reverse(&run).unwrap().final_states().to_owned();
        let occ = spec.occupancy(x.view());
        assert!((occ[0] - 0.3).abs() < 0.05, "{integrator:?}: {occ:?}");
    }
}

#[test]
fn reverse_and_kid_do_not_depend_on_thread_count() {
    let sch = lin();
    let gm = GmScore::new(mixture(), &sch).unwrap();
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let x = generate_from_noise(&gm, &sch, 600, 21).unwrap();
            let y = mixture().sample(600, 22).unwrap();
            let k = diagnostics::kid(x.view(), y.view()).unwrap();
            (x, k.mmd2, k.stderr)
        })
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.0, b.0);
    assert_eq!(a.1.to_bits(), b.1.to_bits());
    assert_eq!(a.2.to_bits(), b.2.to_bits());
}

#[test]
fn trained_checkpoint_round_trips() {
    let sch = lin();
    let data = Dataset::new("gm", mixture().sample(500, 1).unwrap()).unwrap();
    let config = MlpConfig {
        hidden: vec![16, 16],
        ..MlpConfig::default()
    };
    let init = MlpScoreModel::new(2, &sch, &config, 2).unwrap();
    let hyper = TrainHyper {
        batch: 32,
        steps: 100,
        learning_rate: 1e-3,
        seed: 3,
        optimizer: Optimizer::default(),
        final_lr_fraction: 1.0,
    };
    let model = train_dsm(init, &data, &sch, &hyper).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.umlp");
    model.save(&path).unwrap();
    let back = MlpScoreModel::load(&path).unwrap();
    let again = dir.path().join("again.umlp");
    back.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    // Parameters are stored as f32, so only the reloaded copies agree exactly.
    let a = generate_from_noise(&back, &sch, 200, 4).unwrap();
    let b = generate_from_noise(&MlpScoreModel::load(&again).unwrap(), &sch, 200, 4).unwrap();
    assert_eq!(a, b);
    let c = generate_from_noise(&model, &sch, 200, 4).unwrap();
    let gap = (&a - &c).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
    assert!(gap < 1e-3, "{gap}");
}

#[test]
fn pairing_decays_with_turn_step() {
    let sch = lin();
    let gm = GmScore::new(mixture(), &sch).unwrap();
    let data = Dataset::new("gm", mixture().sample(800, 5).unwrap()).unwrap();
    let rho: Vec<f64> = [20, 300, 1000]
        .iter()
        .map(|&n| pairing_correlation(&data, &uturn_generate(&data, &sch, &gm, n, 800, 6).unwrap()))
        .collect();
    assert!(rho[0] > 0.9, "{rho:?}");
    assert!(rho[0] > rho[1] && rho[1] > rho[2], "{rho:?}");
    assert!(rho[2].abs() < 0.1, "{rho:?}");
}

#[test]
fn score_norm_curves_are_normalized_at_their_references() {
    let sch = lin();
    let gm = GmScore::new(mixture(), &sch).unwrap();
    let x0 = mixture().sample(1000, 9).unwrap();
    let steps: Vec<usize> = (0..=10).map(|k| k * 100).collect();
    let ens = forward::simulate_forward_from(x0.view(), &sch, &steps, 10).unwrap();
    let norms = diagnostics::score_norm_curves(&gm, &ens, &sch).unwrap();
    assert_eq!(norms.reference_step, 0);
    assert!((norms.s.value_at(0).unwrap() - 1.0).abs() < 1e-12);
    assert!((norms.m.value_at(1000).unwrap() - 1.0).abs() < 1e-12);
    // Near N the marginal is N(0, I), so λ·E‖s‖² is close to d.
    let s_end = norms.s.value_at(1000).unwrap();
    assert!(s_end < 1.0, "{s_end}");
}

#[test]
fn projected_kid_of_one_distribution_is_near_zero() {
    let x = mixture().sample(1500, 11).unwrap();
    let y = mixture().sample(1500, 12).unwrap();
    let map = FeatureMap::RandomProjection { dim: 8, seed: 13 };
    let fx = map.apply(x.view()).unwrap();
    let fy = map.apply(y.view()).unwrap();
    let opts = KidOptions {
        feature: map.id(),
        ..KidOptions::default()
    };
    let r = kid_with(fx.view(), fy.view(), &opts).unwrap();
    assert_eq!(r.feature, "random_projection:8:13");
    assert!(r.mmd2.abs() < 3.0 * r.stderr, "{} ± {}", r.mmd2, r.stderr);
}

#[test]
fn forward_general_closed_form_handles_unnormalized_data() {
    let sch = lin();
    let x0: Array2<f64> = mixture().sample(6000, 14).unwrap() * 2.0;
    let steps: Vec<usize> = (0..=10).map(|k| k * 100).collect();
    let ens = forward::simulate_forward_from(x0.view(), &sch, &steps, 15).unwrap();
    let m0 = forward::pooled_moments(&ens)[0].2;
    let closed = forward::forward_autocorr_general(&sch, AnchorMode::FromT, m0);
    let emp = forward::empirical_autocorr(&ens, 1000, &steps).unwrap();
    for (i, &n) in steps.iter().enumerate() {
        assert!((emp.values[i] - closed.value_at(n).unwrap()).abs() < 5.0 / 6000f64.sqrt(), "n = {n}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn closed_form_correlations_are_monotone(b1 in 1e-5f64..1e-3, spread in 1.5f64..200.0, kind in 0usize..3) {
        let kind = [ScheduleKind::Linear, ScheduleKind::Sigmoid, ScheduleKind::Cosine][kind];
        let spec = ScheduleSpec { b1, b2: (b1 * spread).min(0.5), ..ScheduleSpec::standard(kind) };
        let sch = Schedule::new(spec).unwrap();
        let c0 = forward::forward_autocorr_closed_form(&sch, AnchorMode::FromZero);
        let ct = forward::forward_autocorr_closed_form(&sch, AnchorMode::FromT);
        prop_assert!(c0.values.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(ct.values.windows(2).all(|w| w[1] >= w[0]));
        prop_assert_eq!(c0.values[0], 1.0);
        prop_assert!((ct.values[sch.steps()] - 1.0).abs() < 1e-12);
    }
}
