//! Inference, dataset evaluation, and heatmap export on top of a loaded
//! model.

use std::fs;
use std::path::Path;

use kbrann_core::eval::{evaluate_dataset, DatasetEval, EvalConfig};
use kbrann_core::head::{predict_from_output, Detection, GroundTruthBox, HeadOutput};
use kbrann_core::prior::reverse_gaussian_map;
use kbrann_core::tape::Tape;
use kbrann_core::tensor::Tensor;
use serde_json::json;

use crate::config::PipelineConfig;
use crate::data::{load_dataset, to_gray, write_pgm};
use crate::error::{with_context, CliError, Result};
use crate::model::Model;

/// Run the detector on a batch of images; returns per-image detections.
pub fn detect(
    model: &Model,
    images: &[&Tensor],
    conf_thresh: f64,
    nms_iou: f64,
) -> Result<Vec<Vec<Detection>>> {
    let batch = Model::batch_images(images)?;
    let n = batch.shape().n;
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let img = tape.leaf(batch);
    let trace = model.forward(&mut tape, &bound, img)?;
    let raw = tape.value(trace.raw);
    let mut out = Vec::with_capacity(n);
    for item in 0..n {
        let head = HeadOutput::from_raw(raw, item, model.grid.k, model.spec.num_classes)?;
        out.push(predict_from_output(&head, &model.grid, conf_thresh, nms_iou)?);
    }
    Ok(out)
}

/// Fixed-point JSON for detections: normalized coordinates with six decimal
/// places, one object per line.
pub fn detections_json(dets: &[Detection]) -> String {
    let mut out = String::from("[\n");
    for (i, d) in dets.iter().enumerate() {
        out.push_str(&format!(
            "  {{\"cx\": {:.6}, \"cy\": {:.6}, \"w\": {:.6}, \"h\": {:.6}, \"class\": {}, \"score\": {:.6}}}{}\n",
            d.cx,
            d.cy,
            d.w,
            d.h,
            d.class_id,
            d.score,
            if i + 1 < dets.len() { "," } else { "" }
        ));
    }
    out.push(']');
    out.push('\n');
    out
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    fs::write(path, detections_json(dets))
        .map_err(with_context(&format!("writing {}", path.display())))
}

/// Evaluate a model over a dataset directory at the given IoU threshold.
pub fn evaluate_model(
    model: &Model,
    data_dir: &Path,
    iou_threshold: f64,
    cfg: &PipelineConfig,
) -> Result<(DatasetEval, Vec<(Vec<Detection>, Vec<GroundTruthBox>)>)> {
    let samples = load_dataset(data_dir)?;
    let mut pairs: Vec<(Vec<Detection>, Vec<GroundTruthBox>)> = Vec::with_capacity(samples.len());
    // low confidence floor so the precision/recall curve has full depth
    for batch in samples.chunks(8) {
        let images: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
        let dets = detect(model, &images, cfg.eval_conf_thresh, model.spec.nms_iou)?;
        for (s, d) in batch.iter().zip(dets) {
            pairs.push((d, s.boxes.clone()));
        }
    }
    let eval = evaluate_dataset(&pairs, &EvalConfig { iou_threshold, per_class: true })?;
    Ok((eval, pairs))
}

/// JSON report: per-class AP, mAP, counts, and an echo of the evaluation
/// configuration.
pub fn eval_report_json(eval: &DatasetEval, iou_threshold: f64, conf_thresh: f64, nms_iou: f64) -> String {
    let per_class: Vec<_> = eval
        .per_class
        .iter()
        .map(|c| {
            json!({
                "class": c.class_id,
                "ap": c.ap,
                "ground_truths": c.n_gt,
                "detections": c.n_det,
            })
        })
        .collect();
    let report = json!({
        "map": eval.map,
        "images": eval.images,
        "per_class": per_class,
        "config": {
            "iou_threshold": iou_threshold,
            "conf_thresh": conf_thresh,
            "nms_iou": nms_iou,
        },
    });
    serde_json::to_string_pretty(&report).expect("report serializes") + "\n"
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    All,
    Priors,
    Attention,
}

/// Write each prior's reverse map and each cascade step's attention map as
/// 8-bit PGM files, min-max scaled per map. Requesting a map kind the
/// variant does not have is an error.
pub fn export_heatmaps(model: &Model, image: &Tensor, out_dir: &Path, kind: MapKind) -> Result<usize> {
    let has_priors = model.priors.is_some();
    let has_attention = model.spec.variant.uses_rann();
    match kind {
        MapKind::Priors if !has_priors => {
            return Err(CliError::Runtime(format!(
                "variant {} has no prior maps",
                model.spec.variant
            )))
        }
        MapKind::Attention if !has_attention => {
            return Err(CliError::Runtime(format!(
                "variant {} has no attention maps",
                model.spec.variant
            )))
        }
        _ => {}
    }
    fs::create_dir_all(out_dir).map_err(with_context(&format!("creating {}", out_dir.display())))?;
    let g = model.spec.grid_size();
    let mut written = 0usize;

    if has_priors && kind != MapKind::Attention {
        let bank = model.priors.as_ref().unwrap();
        for i in 0..bank.count() {
            let p = bank.get(&model.store, i);
            let map = reverse_gaussian_map(&p, g, g)?;
            write_pgm(&out_dir.join(format!("prior_{i:02}.pgm")), g, g, &to_gray(map.data()))?;
            written += 1;
        }
    }
    if has_attention && kind != MapKind::Priors {
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let img = tape.leaf(image.clone());
        let trace = model.forward(&mut tape, &bound, img)?;
        for (t, &a) in trace.attentions.iter().enumerate() {
            let at = tape.value(a);
            write_pgm(
                &out_dir.join(format!("attention_step{t}.pgm")),
                at.shape().w,
                at.shape().h,
                &to_gray(at.data()),
            )?;
            written += 1;
        }
    }
    Ok(written)
}
