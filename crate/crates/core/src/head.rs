//! Anchor-based detection head.
//!
//! A 1x1 convolution maps features to K*(4+1+C) channels per cell: four box
//! deltas, a confidence logit (sigmoid-squashed to [0,1]), and C class logits
//! (softmax-normalized). Ground truth boxes encode against their matched
//! anchor as scaled center offsets and log size ratios; the training loss is
//! the weighted sum of box regression, confidence regression (IoU target on
//! positives, zero on negatives) and classification cross-entropy.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::params::{BoundParams, ConvKernel};
use crate::tape::{CustomOp, Tape, Val};
use crate::tensor::Tensor;

/// Axis-aligned box as center plus extents, normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Intersection over union of two boxes, in [0,1].
pub fn iou(a: BBox, b: BBox) -> f64 {
    let ix = (a.cx + a.w / 2.0).min(b.cx + b.w / 2.0) - (a.cx - a.w / 2.0).max(b.cx - b.w / 2.0);
    let iy = (a.cy + a.h / 2.0).min(b.cy + b.h / 2.0) - (a.cy - a.h / 2.0).max(b.cy - b.h / 2.0);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// A gw x gh grid of anchor cells with K box shapes per cell. Cell (i, j)
/// centers at ((i+0.5)/gw, (j+0.5)/gh); the flat anchor index is
/// ((j*gw)+i)*K + k.
#[derive(Clone, Debug)]
pub struct AnchorGrid {
    pub gw: usize,
    pub gh: usize,
    pub k: usize,
    pub shapes: Vec<(f64, f64)>,
}

impl AnchorGrid {
    pub fn new(gw: usize, gh: usize, shapes: Vec<(f64, f64)>) -> Result<AnchorGrid> {
        if gw == 0 || gh == 0 || shapes.is_empty() {
            return Err(Error::Input("anchor grid needs positive extents and at least one shape".into()));
        }
        for &(w, h) in &shapes {
            if w <= 0.0 || h <= 0.0 {
                return Err(Error::Input(format!("anchor shape ({w}, {h}) must be positive")));
            }
        }
        Ok(AnchorGrid { gw, gh, k: shapes.len(), shapes })
    }

    /// Small-object-skewed default shapes (normalized widths/heights).
    pub fn default_shapes() -> Vec<(f64, f64)> {
        vec![(0.04, 0.04), (0.08, 0.08), (0.06, 0.12), (0.12, 0.06), (0.16, 0.16)]
    }

    pub fn len(&self) -> usize {
        self.gw * self.gh * self.k
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn flat_index(&self, i: usize, j: usize, k: usize) -> usize {
        (j * self.gw + i) * self.k + k
    }

    /// (cell i, cell j, shape k) of a flat index.
    #[inline]
    pub fn unflatten(&self, a: usize) -> (usize, usize, usize) {
        let k = a % self.k;
        let cell = a / self.k;
        (cell % self.gw, cell / self.gw, k)
    }

    pub fn anchor(&self, a: usize) -> BBox {
        let (i, j, k) = self.unflatten(a);
        BBox {
            cx: (i as f64 + 0.5) / self.gw as f64,
            cy: (j as f64 + 0.5) / self.gh as f64,
            w: self.shapes[k].0,
            h: self.shapes[k].1,
        }
    }
}

/// An annotated object: normalized box plus class index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruthBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
}

impl GroundTruthBox {
    pub fn bbox(&self) -> BBox {
        BBox { cx: self.cx, cy: self.cy, w: self.w, h: self.h }
    }
}

/// Encode a ground truth box against an anchor:
/// (dx, dy) = center offset over anchor extent, (dw, dh) = log size ratio.
pub fn encode_gt(gt: &GroundTruthBox, anchor: BBox) -> Result<[f64; 4]> {
    if gt.w <= 0.0 || gt.h <= 0.0 {
        return Err(Error::Input(format!("ground truth extents ({}, {}) must be positive", gt.w, gt.h)));
    }
    Ok([
        (gt.cx - anchor.cx) / anchor.w,
        (gt.cy - anchor.cy) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
    ])
}

/// Exact algebraic inverse of [`encode_gt`].
pub fn decode(deltas: [f64; 4], anchor: BBox) -> BBox {
    BBox {
        cx: anchor.cx + deltas[0] * anchor.w,
        cy: anchor.cy + deltas[1] * anchor.h,
        w: anchor.w * deltas[2].exp(),
        h: anchor.h * deltas[3].exp(),
    }
}

/// One object-responsible anchor with its regression targets.
#[derive(Clone, Copy, Debug)]
pub struct PositiveAnchor {
    pub anchor_index: usize,
    pub gt_index: usize,
    pub gt: GroundTruthBox,
    pub target_deltas: [f64; 4],
    /// Confidence target gamma^G: IoU of the current decoded prediction with
    /// the matched ground truth. Treated as a constant during backward.
    pub conf_target: f64,
    pub class_id: usize,
}

/// Anchor responsibility for one image: the positive set (everything else is
/// negative) over a gw x gh x K grid.
#[derive(Clone, Debug)]
pub struct Assignment {
    pub gw: usize,
    pub gh: usize,
    pub k: usize,
    pub positives: Vec<PositiveAnchor>,
    /// Ground truths that could not claim any anchor (more GTs than anchors).
    pub dropped: usize,
}

impl Assignment {
    pub fn total_anchors(&self) -> usize {
        self.gw * self.gh * self.k
    }

    pub fn n_obj(&self) -> usize {
        self.positives.len()
    }
}

/// Match each ground truth to its single best anchor by IoU (ties to the
/// lowest flat index). A ground truth whose best anchor is already claimed
/// falls back to its next-best unclaimed anchor; with no anchors left it is
/// dropped and counted.
pub fn assign_anchors(gts: &[GroundTruthBox], grid: &AnchorGrid) -> Result<Assignment> {
    let total = grid.len();
    let mut claimed = vec![false; total];
    let mut positives = Vec::with_capacity(gts.len());
    let mut dropped = 0usize;
    for (gi, gt) in gts.iter().enumerate() {
        if gt.w <= 0.0 || gt.h <= 0.0 {
            return Err(Error::Input(format!("ground truth {gi} has non-positive extents")));
        }
        let mut best: Option<(usize, f64)> = None;
        for a in 0..total {
            if claimed[a] {
                continue;
            }
            let v = iou(gt.bbox(), grid.anchor(a));
            let better = match best {
                None => true,
                Some((_, bv)) => v > bv,
            };
            if better {
                best = Some((a, v));
            }
        }
        match best {
            Some((a, _)) => {
                claimed[a] = true;
                positives.push(PositiveAnchor {
                    anchor_index: a,
                    gt_index: gi,
                    gt: *gt,
                    target_deltas: encode_gt(gt, grid.anchor(a))?,
                    conf_target: 1.0,
                    class_id: gt.class_id,
                });
            }
            None => dropped += 1,
        }
    }
    Ok(Assignment { gw: grid.gw, gh: grid.gh, k: grid.k, positives, dropped })
}

/// Decoded per-anchor predictions for one image: deltas, squashed confidence,
/// and softmax class probabilities (anchor-major).
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub gw: usize,
    pub gh: usize,
    pub k: usize,
    pub n_classes: usize,
    pub deltas: Vec<[f64; 4]>,
    pub conf: Vec<f64>,
    pub class_probs: Vec<f64>,
}

impl HeadOutput {
    /// Fields per anchor in the raw channel layout.
    pub fn fields(n_classes: usize) -> usize {
        5 + n_classes
    }

    /// Extract one batch item from a raw head map (n, K*(5+C), gh, gw).
    /// Channel k*(5+C)+f holds field f of anchor shape k: deltas at f=0..3,
    /// the confidence logit at f=4, class logits after.
    pub fn from_raw(raw: &Tensor, item: usize, k: usize, n_classes: usize) -> Result<HeadOutput> {
        let s = raw.shape();
        let fields = Self::fields(n_classes);
        if s.c != k * fields {
            return Err(Error::Shape(format!(
                "head map has {} channels, expected {} (K={k} anchors x {fields} fields)",
                s.c,
                k * fields
            )));
        }
        if item >= s.n {
            return Err(Error::Input(format!("batch item {item} out of range ({})", s.n)));
        }
        let (gh, gw) = (s.h, s.w);
        let total = gw * gh * k;
        let mut deltas = vec![[0.0; 4]; total];
        let mut conf = vec![0.0; total];
        let mut class_probs = vec![0.0; total * n_classes];
        for j in 0..gh {
            for i in 0..gw {
                for kk in 0..k {
                    let a = (j * gw + i) * k + kk;
                    let ch0 = kk * fields;
                    for d in 0..4 {
                        deltas[a][d] = raw.at(item, ch0 + d, j, i);
                    }
                    conf[a] = crate::kernels::sigmoid(raw.at(item, ch0 + 4, j, i));
                    let mut max = f64::NEG_INFINITY;
                    for c in 0..n_classes {
                        max = max.max(raw.at(item, ch0 + 5 + c, j, i));
                    }
                    let mut sum = 0.0;
                    for c in 0..n_classes {
                        let e = (raw.at(item, ch0 + 5 + c, j, i) - max).exp();
                        class_probs[a * n_classes + c] = e;
                        sum += e;
                    }
                    for c in 0..n_classes {
                        class_probs[a * n_classes + c] /= sum;
                    }
                }
            }
        }
        Ok(HeadOutput { gw, gh, k, n_classes, deltas, conf, class_probs })
    }

    pub fn total_anchors(&self) -> usize {
        self.gw * self.gh * self.k
    }
}

/// Loss term weights. `lambda_class` scales the cross-entropy term; at its
/// default of 1 the loss is the plain three-term form, while short training
/// schedules can raise it so classification keeps pace inside a clipped
/// gradient budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_bbox: f64,
    pub lambda_conf_pos: f64,
    pub lambda_conf_neg: f64,
    pub lambda_class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_bbox: 5.0,
            lambda_conf_pos: 75.0,
            lambda_conf_neg: 100.0,
            lambda_class: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_bbox <= 0.0
            || self.lambda_conf_pos <= 0.0
            || self.lambda_conf_neg <= 0.0
            || self.lambda_class <= 0.0
        {
            return Err(Error::Input("loss weights must be positive".into()));
        }
        Ok(())
    }
}

/// Multi-task loss for one image:
///   bbox:  (lb/N) sum_pos |deltas - targets|^2
///   conf:  (lp/N) sum_pos (gamma - gamma^G)^2 + (ln/(A-N)) sum_neg gamma^2
///   class: -(1/N) sum_pos log p_true   (positive cross-entropy)
/// With N = 0 every positive term is 0; with A = N the negative term is 0.
pub fn multitask_loss(pred: &HeadOutput, asg: &Assignment, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    let total = pred.total_anchors();
    if total != asg.total_anchors() || pred.k != asg.k {
        return Err(Error::Shape(format!(
            "prediction grid {}x{}x{} does not match assignment {}x{}x{}",
            pred.gw, pred.gh, pred.k, asg.gw, asg.gh, asg.k
        )));
    }
    let n_obj = asg.n_obj();
    let mut positive = vec![false; total];
    let mut bbox_term = 0.0;
    let mut conf_pos = 0.0;
    let mut class_term = 0.0;
    for p in &asg.positives {
        if p.anchor_index >= total || p.class_id >= pred.n_classes {
            return Err(Error::Input(format!(
                "positive anchor {} or class {} out of range",
                p.anchor_index, p.class_id
            )));
        }
        positive[p.anchor_index] = true;
        for d in 0..4 {
            let q = pred.deltas[p.anchor_index][d] - p.target_deltas[d];
            bbox_term += q * q;
        }
        let qg = pred.conf[p.anchor_index] - p.conf_target;
        conf_pos += qg * qg;
        class_term -= pred.class_probs[p.anchor_index * pred.n_classes + p.class_id].ln();
    }
    let mut conf_neg = 0.0;
    for (a, &is_pos) in positive.iter().enumerate() {
        if !is_pos {
            conf_neg += pred.conf[a] * pred.conf[a];
        }
    }
    let mut loss = 0.0;
    if n_obj > 0 {
        let n = n_obj as f64;
        loss += w.lambda_bbox / n * bbox_term;
        loss += w.lambda_conf_pos / n * conf_pos;
        loss += w.lambda_class * class_term / n;
    }
    if total > n_obj {
        loss += w.lambda_conf_neg / (total - n_obj) as f64 * conf_neg;
    }
    Ok(loss)
}

/// Refresh the confidence targets from the current predictions: gamma^G is
/// the IoU of each positive anchor's decoded box with its ground truth,
/// then held constant during backward.
pub fn update_confidence_targets(asg: &mut Assignment, pred: &HeadOutput, grid: &AnchorGrid) {
    for p in &mut asg.positives {
        let decoded = decode(pred.deltas[p.anchor_index], grid.anchor(p.anchor_index));
        p.conf_target = iou(decoded, p.gt.bbox());
    }
}

/// Tape op computing the batch-mean multitask loss from the raw head map.
struct DetectionLossOp {
    assignments: Vec<Assignment>,
    weights: LossWeights,
    k: usize,
    n_classes: usize,
}

impl CustomOp for DetectionLossOp {
    fn name(&self) -> &str {
        "multitask_loss"
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.n != self.assignments.len() {
            return Err(Error::Shape(format!(
                "batch {} does not match {} assignments",
                s.n,
                self.assignments.len()
            )));
        }
        let mut total = 0.0;
        for (item, asg) in self.assignments.iter().enumerate() {
            if (asg.gw, asg.gh) != (s.w, s.h) {
                return Err(Error::Shape(format!(
                    "assignment grid {}x{} does not match map {}x{}",
                    asg.gw, asg.gh, s.w, s.h
                )));
            }
            let pred = HeadOutput::from_raw(x, item, self.k, self.n_classes)?;
            total += multitask_loss(&pred, asg, &self.weights)?;
        }
        Ok(Tensor::scalar(total / self.assignments.len() as f64))
    }

    fn backward(&self, x: &Tensor, _y: &Tensor, dy: &[f64], dx: &mut [f64]) -> Result<()> {
        let s = x.shape();
        let fields = HeadOutput::fields(self.n_classes);
        let scale = dy[0] / self.assignments.len() as f64;
        for (item, asg) in self.assignments.iter().enumerate() {
            let pred = HeadOutput::from_raw(x, item, self.k, self.n_classes)?;
            let total = pred.total_anchors();
            let n_obj = asg.n_obj();
            let mut positive = vec![false; total];
            let off = |a: usize, field: usize| -> usize {
                let (i, j, kk) = (a / self.k % asg.gw, a / self.k / asg.gw, a % self.k);
                s.offset(item, kk * fields + field, j, i)
            };
            if n_obj > 0 {
                let n = n_obj as f64;
                for p in &asg.positives {
                    positive[p.anchor_index] = true;
                    let a = p.anchor_index;
                    for d in 0..4 {
                        dx[off(a, d)] += scale * 2.0 * self.weights.lambda_bbox / n
                            * (pred.deltas[a][d] - p.target_deltas[d]);
                    }
                    let gamma = pred.conf[a];
                    let dgamma = 2.0 * self.weights.lambda_conf_pos / n * (gamma - p.conf_target);
                    dx[off(a, 4)] += scale * dgamma * gamma * (1.0 - gamma);
                    for c in 0..self.n_classes {
                        let pc = pred.class_probs[a * self.n_classes + c];
                        let target = if c == p.class_id { 1.0 } else { 0.0 };
                        dx[off(a, 5 + c)] += scale * self.weights.lambda_class * (pc - target) / n;
                    }
                }
            }
            if total > n_obj {
                let denom = (total - n_obj) as f64;
                for (a, is_pos) in positive.iter().enumerate() {
                    if !is_pos {
                        let gamma = pred.conf[a];
                        let dgamma = 2.0 * self.weights.lambda_conf_neg / denom * gamma;
                        dx[off(a, 4)] += scale * dgamma * gamma * (1.0 - gamma);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Record the multitask loss on the tape; `raw` is the head map for a batch
/// whose per-image assignments are given in order. Returns the scalar
/// batch-mean loss.
pub fn multitask_loss_op(
    tape: &mut Tape,
    raw: Val,
    assignments: Vec<Assignment>,
    weights: LossWeights,
    n_classes: usize,
) -> Result<Val> {
    weights.validate()?;
    let k = assignments
        .first()
        .map(|a| a.k)
        .ok_or_else(|| Error::Input("loss needs at least one assignment".into()))?;
    tape.custom(raw, Box::new(DetectionLossOp { assignments, weights, k, n_classes }))
}

/// A decoded detection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
    pub score: f64,
}

impl Detection {
    pub fn bbox(&self) -> BBox {
        BBox { cx: self.cx, cy: self.cy, w: self.w, h: self.h }
    }
}

/// Greedy non-maximum suppression: keep by descending score (ties keep input
/// order), suppress same-class boxes overlapping a kept box with IoU strictly
/// above the threshold.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Result<Vec<Detection>> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(Error::Input(format!("nms threshold {iou_thresh} must lie in (0,1)")));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(Ordering::Equal));
    let mut kept: Vec<Detection> = Vec::new();
    for &idx in &order {
        let d = dets[idx];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(k.bbox(), d.bbox()) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    Ok(kept)
}

/// Decode one image's head output into detections: score each anchor with
/// gamma * max_c p_c, keep scores above the confidence threshold, then NMS.
pub fn predict_from_output(
    out: &HeadOutput,
    grid: &AnchorGrid,
    conf_thresh: f64,
    iou_thresh: f64,
) -> Result<Vec<Detection>> {
    if (out.gw, out.gh, out.k) != (grid.gw, grid.gh, grid.k) {
        return Err(Error::Shape(format!(
            "head output grid {}x{}x{} does not match anchors {}x{}x{}",
            out.gw, out.gh, out.k, grid.gw, grid.gh, grid.k
        )));
    }
    let mut cands = Vec::new();
    for a in 0..out.total_anchors() {
        let mut best_c = 0;
        let mut best_p = out.class_probs[a * out.n_classes];
        for c in 1..out.n_classes {
            let p = out.class_probs[a * out.n_classes + c];
            if p > best_p {
                best_p = p;
                best_c = c;
            }
        }
        let score = out.conf[a] * best_p;
        if score > conf_thresh {
            let b = decode(out.deltas[a], grid.anchor(a));
            cands.push(Detection { cx: b.cx, cy: b.cy, w: b.w, h: b.h, class_id: best_c, score });
        }
    }
    nms(&cands, iou_thresh)
}

/// Apply the 1x1 head convolution to a feature map and decode per-image
/// detections. The feature spatial extents must equal the anchor grid.
#[allow(clippy::too_many_arguments)]
pub fn predict(
    tape: &mut Tape,
    bound: &BoundParams,
    features: Val,
    head: &ConvKernel,
    grid: &AnchorGrid,
    n_classes: usize,
    conf_thresh: f64,
    iou_thresh: f64,
) -> Result<Vec<Vec<Detection>>> {
    let fs = tape.value(features).shape();
    if (fs.h, fs.w) != (grid.gh, grid.gw) {
        return Err(Error::Shape(format!(
            "feature map {}x{} does not match anchor grid {}x{}",
            fs.h, fs.w, grid.gh, grid.gw
        )));
    }
    let raw = head.apply(tape, bound, features, 1, 0)?;
    let raw_t = tape.value(raw);
    let mut all = Vec::with_capacity(fs.n);
    for item in 0..fs.n {
        let out = HeadOutput::from_raw(raw_t, item, grid.k, n_classes)?;
        all.push(predict_from_output(&out, grid, conf_thresh, iou_thresh)?);
    }
    Ok(all)
}
