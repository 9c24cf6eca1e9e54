mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use sshp::inference::*;
use sshp::model::{init_parameters, Components, Dataset, HyperParams, InitConfig};
use sshp::simulation::{generate_synthetic, SyntheticConfig};

/// Singular values from the eigenvalues of MᵀM, descending.
fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let gram = m.transpose() * m;
    let mut ev: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().map(|x| x.max(0.0).sqrt()).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

#[test]
fn prox_matrix_worked_examples() {
    let z = DMatrix::<f64>::zeros(3, 2);
    assert_eq!(prox_matrix(&z, 0.7, true), z);

    let id = DMatrix::<f64>::identity(2, 2);
    let out = prox_matrix(&id, 0.5, false);
    assert!((out - id.scale(0.5)).abs().max() < 1e-12);

    let u = DVector::from_vec(vec![0.6, 0.8]);
    let v = DVector::from_vec(vec![1.0, 0.0, 0.0]);
    let rank1 = (&u * v.transpose()).scale(0.5);
    assert_eq!(prox_matrix(&rank1, 1.0, false), DMatrix::zeros(2, 3));

    let mixed = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, 0.5, 1.0]);
    let clamped = prox_matrix(&mixed, 0.1, true);
    let free = prox_matrix(&mixed, 0.1, false);
    assert!(free[(0, 1)] < 0.0);
    assert_eq!(clamped[(0, 1)], 0.0);
}

#[test]
fn prox_vector_worked_examples() {
    let c = prox_vector(&DVector::from_vec(vec![0.5, 2.0]), Bounds::C);
    assert_eq!(c.as_slice(), &[1.0, 2.0]);
    let b = prox_vector(&DVector::from_vec(vec![1.2, 0.3]), Bounds::B);
    assert_eq!(b.as_slice(), &[1.0 - 1e-6, 0.3]);
    let v = prox_vector(&DVector::from_vec(vec![-3.0]), Bounds::V);
    assert_eq!(v.as_slice(), &[1e-6]);
    let p = prox_vector(&DVector::from_vec(vec![-30.0, 30.0]), Bounds::FREE);
    assert_eq!(p.as_slice(), &[-30.0, 30.0]);
}

proptest! {
    #[test]
    fn prox_vector_is_idempotent(xs in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let x = DVector::from_vec(xs);
        for bounds in Bounds::VECTORS {
            let once = prox_vector(&x, bounds);
            prop_assert_eq!(prox_vector(&once, bounds), once);
        }
    }

    #[test]
    fn prox_matrix_with_zero_threshold_is_identity(xs in prop::collection::vec(-5.0f64..5.0, 12)) {
        let m = DMatrix::from_vec(3, 4, xs);
        prop_assert_eq!(prox_matrix(&m, 0.0, false), m);
    }

    #[test]
    fn prox_matrix_shrinks_singular_values(xs in prop::collection::vec(-5.0f64..5.0, 20), rho in 0.0f64..4.0) {
        let m = DMatrix::from_vec(5, 4, xs);
        let before = singular_values(&m);
        let after = singular_values(&prox_matrix(&m, rho, false));
        let slack = 1e-6 * before[0].max(1.0);
        for (a, b) in after.iter().zip(&before) {
            prop_assert!(*a <= (b - rho).max(0.0) + slack, "{} > {} - {}", a, b, rho);
        }
    }
}

fn small_course(seed: u64) -> Dataset {
    let cfg = SyntheticConfig {
        students: 6,
        assignments: 3,
        mask_fraction: 0.0,
        matrix_rank: Some(1),
        seed,
        ..SyntheticConfig::default()
    };
    generate_synthetic(&cfg).unwrap().dataset
}

fn hyper(max_iter: usize) -> HyperParams {
    HyperParams {
        s: 1.0,
        max_iter,
        ..HyperParams::default()
    }
}

fn init_for(ds: &Dataset, seed: u64) -> sshp::model::ParameterStore {
    init_parameters(ds.num_students(), ds.num_assignments(), 1.0, 1.0, seed, &InitConfig::default()).unwrap()
}

#[test]
fn accepted_losses_never_increase() {
    let ds = small_course(1);
    let model = fit(&ds, &hyper(150), Components::all(), init_for(&ds, 2)).unwrap();
    let trace = &model.diagnostics.loss_trace;
    assert!(trace.len() > 1);
    for w in trace.windows(2) {
        assert!(w[1] <= w[0], "loss rose from {} to {}", w[0], w[1]);
    }
    model.parameters.check_constraints().unwrap();
    let mean = mean_loss(&ds, &model.parameters, Components::all()).unwrap();
    assert!(rel_err(mean, model.diagnostics.final_loss) < 1e-9);
}

#[test]
fn each_run_of_the_schedule_is_monotone() {
    let ds = small_course(3);
    let options = FitOptions {
        rounds: 1,
        ..FitOptions::default()
    };
    let model = fit_with(&ds, &hyper(80), Components::all(), init_for(&ds, 4), &options).unwrap();
    let d = &model.diagnostics;
    assert_eq!(d.stage_starts.len(), 2);
    let mut bounds = d.stage_starts.clone();
    bounds.push(d.loss_trace.len());
    for run in bounds.windows(2) {
        let seg = &d.loss_trace[run[0]..run[1]];
        assert!(seg.windows(2).all(|w| w[1] <= w[0]));
    }
    model.parameters.check_constraints().unwrap();
}

#[test]
fn dominant_threshold_proposals_are_never_accepted() {
    // Every proposal has all-zero matrices, which raises the loss, so the
    // monotone guard keeps the starting point.
    let ds = small_course(5);
    let h = HyperParams {
        rho: 1e300,
        ..hyper(5)
    };
    let init = init_for(&ds, 6);
    let model = fit(&ds, &h, Components::all(), init.clone()).unwrap();
    assert_eq!(model.diagnostics.loss_trace.len(), 1);
    assert_eq!(model.parameters, init);
}

#[test]
fn fit_is_independent_of_thread_count() {
    let ds = small_course(7);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                let mut m = fit_with(&ds, &hyper(40), Components::all(), init_for(&ds, 8), &FitOptions::default()).unwrap();
                m.diagnostics.wall_time_secs = 0.0;
                m
            })
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn ablated_components_stay_zero() {
    let ds = small_course(9);
    let model = fit(&ds, &hyper(30), Components::ablate("d").unwrap(), init_for(&ds, 10)).unwrap();
    assert!(model.parameters.gamma_d.iter().all(|&x| x == 0.0));
    assert_eq!(model.ablated, "d");
}

#[test]
fn empty_training_data_is_an_error() {
    let mut ds = small_course(11);
    for seq in ds.sequences.values_mut() {
        seq.timestamps.clear();
    }
    assert!(fit(&ds, &hyper(5), Components::all(), init_for(&ds, 1)).is_err());
}

#[test]
fn single_pair_round_trip() {
    let mut rng = rng(12);
    let truth = typical_pair();
    let mut errs = Vec::new();
    for _ in 0..3 {
        let cfg = SyntheticConfig {
            students: 1,
            assignments: 1,
            mask_fraction: 0.0,
            seed: rng.random(),
            ..SyntheticConfig::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        let mut store = data.truth.clone();
        store.alpha[(0, 0)] = truth.alpha;
        store.m[(0, 0)] = truth.m;
        store.gamma_h[(0, 0)] = truth.gamma_h;
        store.gamma_o[(0, 0)] = truth.gamma_o;
        store.gamma_d[(0, 0)] = truth.gamma_d;
        let skeleton = sshp::simulation::synthetic_skeleton(&cfg);
        let seqs = sshp::simulation::sample_course(&skeleton, &store, Components::all(), cfg.seed).unwrap();
        let mut ds = skeleton;
        ds.sequences.insert((0, 0), seqs[0].clone());
        let h = HyperParams { rho: 0.0, ..hyper(2000) };
        let model = fit_with(&ds, &h, Components::all(), init_for(&ds, 13), &FitOptions::default()).unwrap();
        let p = &model.parameters;
        errs.push((p.alpha[(0, 0)] - truth.alpha).abs());
        assert!(model.diagnostics.final_loss.is_finite());
        let fitted = mean_loss(&ds, p, Components::all()).unwrap();
        let at_truth = mean_loss(&ds, &store, Components::all()).unwrap();
        assert!(fitted <= at_truth + 1e-6, "fit {fitted} worse than truth {at_truth}");
    }
    let worst = errs.iter().copied().fold(0.0, f64::max);
    assert!(worst < 0.3, "alpha errors {errs:?}");
}
