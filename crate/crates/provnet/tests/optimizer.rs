//! AdamW against an independent f64 scalar reference, plus schedule and
//! init distribution checks.

mod common;

use common::ScalarAdamW;
use provnet::models::{ModelSpec, SharingLevel, SingleBranchModel, SizePreset, Variant};
use provnet::nn::{adamw_step, AdamWConfig, Init, OptimizerState, ParamStore};
use provnet::rng::RngStream;

// The crate computes in f32 throughout, so agreement with the f64
// scalar oracle is bounded by f32 rounding of θ (ulp ≈ 6e-8 near 1.0),
// not by the update formula.
const SCALAR_TOL: f64 = 5e-7;

fn one_param_store(theta: f32) -> (ParamStore, usize) {
    let mut rng = RngStream::new(1);
    let mut store = ParamStore::new();
    let id = store.add("theta", &[1], Init::Zeros, true, &mut rng);
    store.value_mut(id).data_mut()[0] = theta;
    (store, id)
}

#[test]
fn adamw_single_step_matches_scalar_oracle() {
    let (mut store, id) = one_param_store(1.0);
    let cfg = AdamWConfig {
        lr: 0.002,
        weight_decay: 2e-5,
        ..Default::default()
    };
    let mut opt = OptimizerState::new(&store, cfg);
    store.value_mut(id).data_mut()[0] = 1.0;
    let g = provnet::tensor::Tensor::from_vec(&[1], vec![1.0]);
    store.accum_grad(id, &g);
    adamw_step(&mut store, &mut opt);

    let mut oracle = ScalarAdamW::new(0.002, 2e-5);
    let expect = oracle.step(1.0, 1.0);
    let got = store.value(id).data()[0] as f64;
    assert!(
        (got - expect).abs() < SCALAR_TOL,
        "one step: {got} vs oracle {expect}"
    );
}

#[test]
fn adamw_constant_gradient_steps_near_lr() {
    // with a constant gradient, each update magnitude approaches
    // lr·sign(g) (bias-corrected moments cancel); check within 1%
    let (mut store, id) = one_param_store(1.0);
    let cfg = AdamWConfig {
        lr: 0.002,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut opt = OptimizerState::new(&store, cfg);
    let g = provnet::tensor::Tensor::from_vec(&[1], vec![0.7]);
    let mut oracle = ScalarAdamW::new(0.002, 0.0);
    let mut theta_ref = 1.0f64;
    let mut prev = 1.0f32;
    for step in 0..2 {
        store.zero_grads();
        store.accum_grad(id, &g);
        adamw_step(&mut store, &mut opt);
        theta_ref = oracle.step(theta_ref, 0.7);
        let now = store.value(id).data()[0];
        let update = (prev - now) as f64;
        assert!(
            (update - 0.002).abs() / 0.002 < 0.01,
            "step {step}: update {update} not within 1% of lr"
        );
        assert!((now as f64 - theta_ref).abs() < SCALAR_TOL);
        prev = now;
    }
}

#[test]
fn adamw_trajectory_tracks_oracle() {
    let (mut store, id) = one_param_store(0.5);
    let cfg = AdamWConfig {
        lr: 0.01,
        weight_decay: 1e-3,
        ..Default::default()
    };
    let mut opt = OptimizerState::new(&store, cfg);
    let mut oracle = ScalarAdamW::new(0.01, 1e-3);
    let mut theta_ref = 0.5f64;
    let mut rng = RngStream::new(5);
    for _ in 0..50 {
        let gv = rng.normal(0.0, 1.0);
        store.zero_grads();
        let g = provnet::tensor::Tensor::from_vec(&[1], vec![gv]);
        store.accum_grad(id, &g);
        adamw_step(&mut store, &mut opt);
        theta_ref = oracle.step(theta_ref, gv as f64);
    }
    let got = store.value(id).data()[0] as f64;
    assert!(
        (got - theta_ref).abs() < 50.0 * SCALAR_TOL,
        "after 50 steps: {got} vs {theta_ref}"
    );
}

#[test]
fn final_attribution_layer_init_std() {
    // sample std of the N(0, 0.01) head over ≥ 1e5 draws within 5%
    let spec = ModelSpec {
        variant: Variant::SingleBranch,
        conditional: false,
        size: SizePreset::Small,
        sharing_level: SharingLevel::I,
        num_classes: 10,
        index_output_size: 512, // head weight: 512×512 = 262144 draws
    };
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(33);
    SingleBranchModel::build(&spec, &mut store, &mut rng).unwrap();
    let w = store.value(store.id("head.out.w").unwrap());
    assert!(w.len() >= 100_000);
    let mean: f64 = w.data().iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64;
    let var: f64 = w
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / (w.len() - 1) as f64;
    let std = var.sqrt();
    assert!(
        (std - 0.01).abs() / 0.01 < 0.05,
        "attribution init std {std}, want 0.01 ± 5%"
    );

    // batchnorm affine params start at γ = 1, β = 0
    let gamma = store.value(store.id("backbone.block1.bn.gamma").unwrap());
    assert!(gamma.data().iter().all(|&v| v == 1.0));
    let beta = store.value(store.id("backbone.block1.bn.beta").unwrap());
    assert!(beta.data().iter().all(|&v| v == 0.0));
}
