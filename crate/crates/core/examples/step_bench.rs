//! Rough timing of one training-shaped forward+backward pass.

use std::time::Instant;

use kbrann_core::backbone::{self, BackboneConfig, BackboneParams};
use kbrann_core::head::{assign_anchors, multitask_loss_op, AnchorGrid, GroundTruthBox, LossWeights};
use kbrann_core::params::{ConvKernel, ParamStore};
use kbrann_core::prior::{inject_priors, PriorBank, PriorBankConfig};
use kbrann_core::rann::{self, RannConfig, RannParams};
use kbrann_core::tape::Tape;
use kbrann_core::tensor::{Shape, Tensor};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn main() {
    let mut rng = StdRng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let bb_cfg = BackboneConfig::paper_mini();
    let bb = BackboneParams::new(&mut store, &bb_cfg, "backbone", &mut rng).unwrap();
    let rann_cfg = RannConfig::new(2, 64, true).unwrap();
    let rann_params = RannParams::new(&mut store, &rann_cfg, "rann", &mut rng).unwrap();
    let bank = PriorBank::new(&mut store, &PriorBankConfig::default(), "prior").unwrap();
    let n_classes = 3;
    let grid = AnchorGrid::new(16, 16, AnchorGrid::default_shapes()).unwrap();
    let head = ConvKernel::new(&mut store, "head", grid.k * (5 + n_classes), 80, 1, 1, true, &mut rng).unwrap();

    let batch = 4;
    let images = Tensor::from_fn(Shape::new(batch, 3, 128, 128).unwrap(), |_, _, _, _| {
        rng.random_range(0.0..1.0)
    });
    let gt = GroundTruthBox { cx: 0.3, cy: 0.6, w: 0.1, h: 0.1, class_id: 1 };
    let assignments: Vec<_> = (0..batch).map(|_| assign_anchors(&[gt], &grid).unwrap()).collect();

    for round in 0..3 {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let img = tape.leaf(images.clone());
        let feats = backbone::forward(&mut tape, &bound, img, &bb_cfg, &bb).unwrap();
        let t_bb = t0.elapsed();
        let trace = rann::forward(&mut tape, &bound, feats, &rann_cfg, &rann_params).unwrap();
        let t_rann = t0.elapsed();
        let injected = inject_priors(&mut tape, &bound, trace.output, &bank).unwrap();
        let raw = head.apply(&mut tape, &bound, injected, 1, 0).unwrap();
        let loss = multitask_loss_op(&mut tape, raw, assignments.clone(), LossWeights::default(), n_classes).unwrap();
        let t_fwd = t0.elapsed();
        tape.backward(loss).unwrap();
        store.absorb_grads(&tape, &bound);
        store.zero_grads();
        let t_all = t0.elapsed();
        println!(
            "round {round}: backbone {:.0} ms, +rann {:.0} ms, fwd total {:.0} ms, step total {:.0} ms (batch {batch})",
            t_bb.as_secs_f64() * 1e3,
            t_rann.as_secs_f64() * 1e3,
            t_fwd.as_secs_f64() * 1e3,
            t_all.as_secs_f64() * 1e3
        );
    }
}
