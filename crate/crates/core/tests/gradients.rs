//! Finite-difference verification of the composite model layers, plus the
//! attention-distribution invariants these layers must keep at every step.

use kbrann_core::gradcheck::check_gradients;
use kbrann_core::head::{
    assign_anchors, multitask_loss_op, AnchorGrid, GroundTruthBox, LossWeights,
};
use kbrann_core::params::{ConvKernel, ParamStore};
use kbrann_core::prior::{inject_priors, GaussianPriorParams, PriorBank, PriorBankConfig};
use kbrann_core::rann::{self, ann_step, attend, AttentionParams, CellParams, RannConfig, RannParams, RannState};
use kbrann_core::tape::Tape;
use kbrann_core::tensor::{Shape, Tensor};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn rand_tensor(shape: Shape, rng: &mut StdRng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

fn param_tensors(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|e| e.value.clone()).collect()
}

#[test]
fn attend_gradients_match_finite_differences() {
    for seed in [11u64, 12, 13] {
        let mut store = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(seed);
        let att = AttentionParams::new(&mut store, "att", 2, &mut rng).unwrap();
        let shape = Shape::new(1, 2, 3, 3).unwrap();
        let mut inputs = param_tensors(&store);
        inputs.push(rand_tensor(shape, &mut rng, -1.0, 1.0));
        inputs.push(rand_tensor(shape, &mut rng, -0.9, 0.9));
        let n_params = store.len();

        // through the refined output
        check_gradients(
            &inputs,
            |tape, leaves| {
                let bound = store.bind_leaves(&leaves[..n_params])?;
                let (_, xt) = attend(tape, &bound, leaves[n_params], leaves[n_params + 1], &att)?;
                Ok(xt)
            },
            1e-4,
            1e-6,
            seed,
        )
        .unwrap();

        // through the attention map itself
        check_gradients(
            &inputs,
            |tape, leaves| {
                let bound = store.bind_leaves(&leaves[..n_params])?;
                let (a, _) = attend(tape, &bound, leaves[n_params], leaves[n_params + 1], &att)?;
                Ok(a)
            },
            1e-4,
            1e-6,
            seed + 100,
        )
        .unwrap();
    }
}

#[test]
fn ann_step_gradients_match_finite_differences() {
    for seed in [21u64, 22, 23] {
        let mut store = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(seed);
        let cell = CellParams::new(&mut store, "cell", 2, &mut rng).unwrap();
        let shape = Shape::new(1, 2, 3, 3).unwrap();
        let mut inputs = param_tensors(&store);
        inputs.push(rand_tensor(shape, &mut rng, -1.0, 1.0)); // x_tilde
        inputs.push(rand_tensor(shape, &mut rng, -0.9, 0.9)); // h
        inputs.push(rand_tensor(shape, &mut rng, -1.2, 1.2)); // c
        let n_params = store.len();

        check_gradients(
            &inputs,
            |tape, leaves| {
                let bound = store.bind_leaves(&leaves[..n_params])?;
                let state = RannState { h: leaves[n_params + 1], c_mem: leaves[n_params + 2] };
                let next = ann_step(tape, &bound, leaves[n_params], &state, &cell)?;
                Ok(next.h)
            },
            1e-4,
            1e-6,
            seed,
        )
        .unwrap();
    }
}

#[test]
fn rann_forward_depth2_gradients_match_finite_differences() {
    for seed in [31u64, 32, 33] {
        let cfg = RannConfig::new(2, 2, true).unwrap();
        let mut store = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(seed);
        let params = RannParams::new(&mut store, &cfg, "rann", &mut rng).unwrap();
        let shape = Shape::new(1, 2, 3, 3).unwrap();
        let mut inputs = param_tensors(&store);
        inputs.push(rand_tensor(shape, &mut rng, -1.0, 1.0));
        let n_params = store.len();

        check_gradients(
            &inputs,
            |tape, leaves| {
                let bound = store.bind_leaves(&leaves[..n_params])?;
                let trace = rann::forward(tape, &bound, leaves[n_params], &cfg, &params)?;
                Ok(trace.output)
            },
            1e-4,
            1e-6,
            seed,
        )
        .unwrap();
    }
}

#[test]
fn rann_depth3_cascade_passes_finite_differences() {
    // exercises gradient flow through softmax, gates, and fusion jointly
    let cfg = RannConfig::new(3, 2, true).unwrap();
    let mut store = ParamStore::new();
    let mut rng = StdRng::seed_from_u64(41);
    let params = RannParams::new(&mut store, &cfg, "rann", &mut rng).unwrap();
    let shape = Shape::new(1, 2, 3, 3).unwrap();
    let mut inputs = param_tensors(&store);
    inputs.push(rand_tensor(shape, &mut rng, -1.0, 1.0));
    let n_params = store.len();
    check_gradients(
        &inputs,
        |tape, leaves| {
            let bound = store.bind_leaves(&leaves[..n_params])?;
            let trace = rann::forward(tape, &bound, leaves[n_params], &cfg, &params)?;
            Ok(trace.output)
        },
        1e-4,
        1e-6,
        41,
    )
    .unwrap();
}

#[test]
fn gaussian_map_gradients_match_finite_differences() {
    for seed in [51u64, 52, 53] {
        let mut rng = StdRng::seed_from_u64(seed);
        // moderate sigmas: sigma derivatives grow like 1/sigma^3, and central
        // differences at eps = 1e-4 cannot resolve sharper maps to 1e-6
        let p = GaussianPriorParams {
            mu_x: rng.random_range(0.25..0.75),
            mu_y: rng.random_range(0.25..0.75),
            sigma_x: rng.random_range(0.15..0.45),
            sigma_y: rng.random_range(0.15..0.45),
        };
        check_gradients(
            &[p.pack()],
            |tape, leaves| tape.gaussian_map(leaves[0], 5, 4, 0.02),
            1e-4,
            1e-6,
            seed,
        )
        .unwrap();

        // sum of the reverse map against finite differences in mu_x
        check_gradients(
            &[p.pack()],
            |tape, leaves| {
                let g = tape.gaussian_map(leaves[0], 6, 6, 0.02)?;
                let r = tape.affine(g, -1.0, 1.0)?;
                tape.sum(r)
            },
            1e-4,
            1e-6,
            seed + 100,
        )
        .unwrap();
    }
}

#[test]
fn attention_invariants_hold_over_many_runs() {
    // 100 random forward passes: every per-step attention map is a proper
    // spatial distribution and the final hidden state stays inside (-1, 1)
    let cfg = RannConfig::new(2, 3, true).unwrap();
    let mut store = ParamStore::new();
    let mut rng = StdRng::seed_from_u64(61);
    let params = RannParams::new(&mut store, &cfg, "rann", &mut rng).unwrap();
    let shape = Shape::new(1, 3, 4, 4).unwrap();
    for _ in 0..100 {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(rand_tensor(shape, &mut rng, -3.0, 3.0));
        let trace = rann::forward(&mut tape, &bound, x, &cfg, &params).unwrap();
        for &a in &trace.attentions {
            let at = tape.value(a);
            let sum: f64 = at.data().iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
            assert!(at.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let h = tape.value(trace.output);
        assert!(h.data().iter().all(|&v| v > -1.0 && v < 1.0));
    }
}

#[test]
fn prior_parameters_receive_gradients_through_the_loss() {
    // crafted instance: a ground truth sits where the prior maps vary, so
    // the loss depends on the prior parameters through the injected channels
    let mut store = ParamStore::new();
    let mut rng = StdRng::seed_from_u64(71);
    let bank = PriorBank::new(
        &mut store,
        &PriorBankConfig { count: 2, ..PriorBankConfig::default() },
        "prior",
    )
    .unwrap();
    let grid = AnchorGrid::new(4, 4, vec![(0.1, 0.1)]).unwrap();
    let n_classes = 2;
    let head = ConvKernel::new(
        &mut store,
        "head",
        grid.k * (5 + n_classes),
        4 + bank.count(),
        1,
        1,
        true,
        &mut rng,
    )
    .unwrap();

    let gt = GroundTruthBox { cx: 0.62, cy: 0.37, w: 0.1, h: 0.1, class_id: 1 };
    let asg = assign_anchors(&[gt], &grid).unwrap();

    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let feats = tape.leaf(rand_tensor(Shape::new(1, 4, 4, 4).unwrap(), &mut rng, -0.5, 0.5));
    let injected = inject_priors(&mut tape, &bound, feats, &bank).unwrap();
    let raw = head.apply(&mut tape, &bound, injected, 1, 0).unwrap();
    let loss = multitask_loss_op(&mut tape, raw, vec![asg], LossWeights::default(), n_classes).unwrap();
    tape.backward(loss).unwrap();
    store.absorb_grads(&tape, &bound);

    for &id in &bank.params {
        let g = store.get(id).grad().unwrap();
        assert!(
            g.iter().any(|&v| v.abs() > 1e-12),
            "prior {} has zero gradient: {:?}",
            store.name(id),
            g
        );
    }
}

#[test]
fn full_detection_path_gradients_match_finite_differences() {
    // features -> priors -> head conv -> loss, differentiated end to end
    let mut store = ParamStore::new();
    let mut rng = StdRng::seed_from_u64(81);
    let bank = PriorBank::new(
        &mut store,
        &PriorBankConfig { count: 1, ..PriorBankConfig::default() },
        "prior",
    )
    .unwrap();
    let grid = AnchorGrid::new(2, 2, vec![(0.2, 0.2)]).unwrap();
    let n_classes = 2;
    let head = ConvKernel::new(&mut store, "head", 5 + n_classes, 3, 1, 1, true, &mut rng).unwrap();
    let gt = GroundTruthBox { cx: 0.3, cy: 0.6, w: 0.2, h: 0.15, class_id: 0 };
    let asg = assign_anchors(&[gt], &grid).unwrap();

    let mut inputs = param_tensors(&store);
    inputs.push(rand_tensor(Shape::new(1, 2, 2, 2).unwrap(), &mut rng, -0.5, 0.5));
    let n_params = store.len();
    check_gradients(
        &inputs,
        |tape, leaves| {
            let bound = store.bind_leaves(&leaves[..n_params])?;
            let injected = inject_priors(tape, &bound, leaves[n_params], &bank)?;
            let raw = head.apply(tape, &bound, injected, 1, 0)?;
            multitask_loss_op(tape, raw, vec![asg.clone()], LossWeights::default(), n_classes)
        },
        1e-4,
        1e-6,
        81,
    )
    .unwrap();
}
