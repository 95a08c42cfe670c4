//! Detection-quality metrics: greedy TP/FP matching, average precision by
//! all-point interpolation (area under the monotone precision envelope), and
//! mean AP over classes that have at least one ground truth.

use crate::error::{Error, Result};
use crate::head::{iou, Detection, GroundTruthBox};

#[derive(Clone, Copy, Debug)]
pub struct EvalConfig {
    /// IoU at or above which a detection may claim a ground truth.
    pub iou_threshold: f64,
    /// Include per-class rows in reports.
    pub per_class: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { iou_threshold: 0.5, per_class: true }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Input(format!(
                "IoU threshold {} must lie in (0,1)",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

/// One point of a precision/recall curve, produced in nondecreasing recall
/// order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PRPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Greedy matching for one image. Detections must arrive sorted by
/// descending score (ties resolved by input order). Each detection claims
/// the highest-IoU unmatched same-class ground truth; it is a true positive
/// when that IoU reaches the threshold. Returns one TP flag per detection.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    iou_thresh: f64,
) -> Vec<bool> {
    debug_assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] || gt.class_id != d.class_id {
                continue;
            }
            let v = iou(d.bbox(), gt.bbox());
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, v)) if v >= iou_thresh => {
                taken[gi] = true;
                flags.push(true);
            }
            _ => flags.push(false),
        }
    }
    flags
}

/// Precision/recall points from cumulative TP/FP counts in score order.
pub fn pr_curve(matched: &[bool], n_gt: usize) -> Vec<PRPoint> {
    let mut points = Vec::with_capacity(matched.len());
    let mut tp = 0usize;
    for (i, &is_tp) in matched.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        let rank = i + 1;
        points.push(PRPoint {
            recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
            precision: tp as f64 / rank as f64,
        });
    }
    points
}

/// Area under the monotone envelope of the precision/recall curve
/// (all-point interpolation). Zero when there are no ground truths or no
/// detections.
pub fn average_precision(matched: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 || matched.is_empty() {
        return 0.0;
    }
    let points = pr_curve(matched, n_gt);
    // monotone envelope from the right
    let mut env: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, e) in points.iter().zip(&env) {
        ap += (p.recall - prev_recall) * e;
        prev_recall = p.recall;
    }
    ap
}

/// Arithmetic mean over per-class APs; the caller passes only classes with
/// at least one ground truth. Errors on an empty list.
pub fn mean_ap(per_class_ap: &[f64]) -> Result<f64> {
    if per_class_ap.is_empty() {
        return Err(Error::Input("mean AP needs at least one class with ground truths".into()));
    }
    Ok(per_class_ap.iter().sum::<f64>() / per_class_ap.len() as f64)
}

#[derive(Clone, Debug)]
pub struct ClassEval {
    pub class_id: usize,
    pub ap: f64,
    pub n_gt: usize,
    pub n_det: usize,
}

#[derive(Clone, Debug)]
pub struct DatasetEval {
    pub per_class: Vec<ClassEval>,
    pub map: f64,
    pub images: usize,
}

/// VOC-style dataset evaluation: per class, pool detections across images,
/// sort by descending score (ties keep image order, then per-image order),
/// match greedily within each detection's own image, and compute AP.
/// Classes without any ground truth are skipped.
pub fn evaluate_dataset(
    samples: &[(Vec<Detection>, Vec<GroundTruthBox>)],
    cfg: &EvalConfig,
) -> Result<DatasetEval> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Input("evaluation needs at least one image".into()));
    }
    let mut classes: Vec<usize> = samples
        .iter()
        .flat_map(|(_, gts)| gts.iter().map(|g| g.class_id))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::Input("no ground truths in the evaluation split".into()));
    }

    let mut per_class: Vec<ClassEval> = Vec::with_capacity(classes.len());
    for &cls in &classes {
        let n_gt: usize = samples
            .iter()
            .map(|(_, gts)| gts.iter().filter(|g| g.class_id == cls).count())
            .sum();
        // (score, image index, in-image index)
        let mut pooled: Vec<(f64, usize, usize)> = Vec::new();
        for (img, (dets, _)) in samples.iter().enumerate() {
            for (di, d) in dets.iter().enumerate() {
                if d.class_id == cls {
                    pooled.push((d.score, img, di));
                }
            }
        }
        pooled.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        let mut taken: Vec<Vec<bool>> =
            samples.iter().map(|(_, gts)| vec![false; gts.len()]).collect();
        let mut flags = Vec::with_capacity(pooled.len());
        for &(_, img, di) in &pooled {
            let d = &samples[img].0[di];
            let gts = &samples[img].1;
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in gts.iter().enumerate() {
                if taken[img][gi] || gt.class_id != cls {
                    continue;
                }
                let v = iou(d.bbox(), gt.bbox());
                if best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, v)) if v >= cfg.iou_threshold => {
                    taken[img][gi] = true;
                    flags.push(true);
                }
                _ => flags.push(false),
            }
        }
        per_class.push(ClassEval {
            class_id: cls,
            ap: average_precision(&flags, n_gt),
            n_gt,
            n_det: pooled.len(),
        });
    }
    let aps: Vec<f64> = per_class.iter().map(|c| c.ap).collect();
    let map = mean_ap(&aps)?;
    if !cfg.per_class {
        per_class.clear();
    }
    Ok(DatasetEval { per_class, map, images: samples.len() })
}
