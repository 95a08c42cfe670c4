//! SGD training loop: minibatches, momentum, stepped learning-rate decay,
//! global gradient clipping, and per-epoch loss logging. Fully deterministic
//! for a fixed seed, config, and dataset.

use std::path::Path;

use kbrann_core::head::{
    assign_anchors, multitask_loss_op, update_confidence_targets, Assignment, HeadOutput,
    LossWeights,
};
use kbrann_core::tape::Tape;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;
use crate::data::{load_dataset, Sample};
use crate::error::{CliError, Result};
use crate::model::Model;

pub struct TrainingReport {
    pub epoch_losses: Vec<f64>,
    /// Ground truths that could not claim an anchor during assignment.
    pub dropped_gts: usize,
    pub images: usize,
}

pub fn train(cfg: &PipelineConfig, data_dir: &Path, out_path: &Path) -> Result<TrainingReport> {
    cfg.validate()?;
    let samples = load_dataset(data_dir)?;
    for s in &samples {
        let sh = s.image.shape();
        if sh.h != cfg.image_size || sh.w != cfg.image_size {
            return Err(CliError::Runtime(format!(
                "{}: image is {}x{}, config expects {}",
                s.stem, sh.w, sh.h, cfg.image_size
            )));
        }
    }
    let mut model = Model::from_config(cfg)?;
    let report = fit(cfg, &mut model, &samples)?;
    model.save(out_path)?;
    Ok(report)
}

/// Train `model` in place over `samples` (exposed for tests and shared runs).
pub fn fit(cfg: &PipelineConfig, model: &mut Model, samples: &[Sample]) -> Result<TrainingReport> {
    if samples.is_empty() {
        return Err(CliError::Runtime("training needs at least one image".into()));
    }
    let weights = LossWeights {
        lambda_bbox: cfg.lambda_bbox,
        lambda_conf_pos: cfg.lambda_conf_pos,
        lambda_conf_neg: cfg.lambda_conf_neg,
        lambda_class: cfg.lambda_class,
    };
    weights.validate()?;

    // anchor responsibility is a pure function of the ground truths
    let mut dropped = 0usize;
    let base_assignments: Vec<Assignment> = samples
        .iter()
        .map(|s| -> Result<Assignment> {
            let a = assign_anchors(&s.boxes, &model.grid)?;
            dropped += a.dropped;
            Ok(a)
        })
        .collect::<Result<_>>()?;
    if dropped > 0 {
        eprintln!("warning: {dropped} ground truths could not claim an anchor");
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(u64::MAX); // distinct from the scene streams

    // momentum state per parameter, in store order
    let mut velocity: Vec<Vec<f64>> =
        model.store.iter().map(|e| vec![0.0; e.value.data().len()]).collect();

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate
            * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every.max(1)) as i32);
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let loss = train_step(model, samples, &base_assignments, chunk, &weights, cfg)
                .map_err(|e| {
                    CliError::Runtime(format!(
                        "training diverged at epoch {epoch} batch {batch_idx}: {e}"
                    ))
                })?;
            epoch_loss += loss;
            batches += 1;
            apply_update(model, &mut velocity, lr, cfg);
        }
        let mean = epoch_loss / batches as f64;
        println!("epoch {epoch}: loss {mean:.6} (lr {lr:.5})");
        epoch_losses.push(mean);
    }
    Ok(TrainingReport { epoch_losses, dropped_gts: dropped, images: samples.len() })
}

fn train_step(
    model: &mut Model,
    samples: &[Sample],
    base_assignments: &[Assignment],
    chunk: &[usize],
    weights: &LossWeights,
    cfg: &PipelineConfig,
) -> Result<f64> {
    let images: Vec<&kbrann_core::Tensor> = chunk.iter().map(|&i| &samples[i].image).collect();
    let batch = Model::batch_images(&images)?;
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let img = tape.leaf(batch);
    let trace = model.forward(&mut tape, &bound, img)?;

    // refresh the confidence targets from the current predictions; they are
    // constants inside the loss
    let raw_t = tape.value(trace.raw);
    let mut assignments = Vec::with_capacity(chunk.len());
    for (item, &i) in chunk.iter().enumerate() {
        let mut asg = base_assignments[i].clone();
        let pred = HeadOutput::from_raw(raw_t, item, model.grid.k, cfg.num_classes)?;
        update_confidence_targets(&mut asg, &pred, &model.grid);
        assignments.push(asg);
    }
    let loss = multitask_loss_op(&mut tape, trace.raw, assignments, *weights, cfg.num_classes)?;
    let loss_value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    model.store.absorb_grads(&tape, &bound);
    Ok(loss_value)
}

/// Clip the global gradient norm, take one momentum step, re-impose the
/// prior constraints, and clear the gradients.
fn apply_update(model: &mut Model, velocity: &mut [Vec<f64>], lr: f64, cfg: &PipelineConfig) {
    let norm = model.store.grad_norm();
    if norm > cfg.grad_clip {
        model.store.scale_grads(cfg.grad_clip / norm);
    }
    for (entry, vel) in model.store.iter_mut().zip(velocity.iter_mut()) {
        match entry.value.grad() {
            Some(grad) => {
                for (v, g) in vel.iter_mut().zip(grad) {
                    *v = cfg.momentum * *v + g;
                }
            }
            None => continue,
        }
        for (p, v) in entry.value.data_mut().iter_mut().zip(vel.iter()) {
            *p -= lr * *v;
        }
    }
    let model = &mut *model;
    if let Some(bank) = &model.priors {
        bank.clamp(&mut model.store);
    }
    model.store.zero_grads();
}
