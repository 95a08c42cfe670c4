//! Flat `key = value` pipeline configuration.
//!
//! Every key has a default; `#` starts a comment; unknown keys are errors so
//! typos surface instead of silently using defaults.

use std::fmt;

use kbrann_core::backbone::{BackboneConfig, FireConfig};

use crate::error::{CliError, Result};

/// Which pieces of the detector are active, mirroring the ablation rows:
/// the full model, attention without priors, and priors without attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    KbRann,
    Rann,
    KbRcnn,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "kb-rann" => Ok(Variant::KbRann),
            "rann" => Ok(Variant::Rann),
            "kb-rcnn" => Ok(Variant::KbRcnn),
            other => Err(CliError::Usage(format!(
                "unknown variant {other:?} (expected kb-rann, rann, or kb-rcnn)"
            ))),
        }
    }

    pub fn uses_rann(&self) -> bool {
        matches!(self, Variant::KbRann | Variant::Rann)
    }

    pub fn uses_priors(&self) -> bool {
        matches!(self, Variant::KbRann | Variant::KbRcnn)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::KbRann => "kb-rann",
            Variant::Rann => "rann",
            Variant::KbRcnn => "kb-rcnn",
        })
    }
}

/// Where prior channels join the feature stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InjectionPoint {
    /// Concatenate onto the refined features (after the recurrent block).
    PostRann,
    /// Concatenate onto the backbone features (before the recurrent block).
    PreRann,
}

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub variant: Variant,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub grad_clip: f64,
    pub image_size: usize,
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    pub rann_depth: usize,
    pub rann_tied: bool,
    pub prior_count: usize,
    pub sigma_min: f64,
    pub prior_ring_radius: f64,
    pub prior_sigma_init: f64,
    pub prior_injection: InjectionPoint,
    pub anchors: Vec<(f64, f64)>,
    pub lambda_bbox: f64,
    pub lambda_conf_pos: f64,
    pub lambda_conf_neg: f64,
    pub lambda_class: f64,
    pub nms_iou: f64,
    pub eval_conf_thresh: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            variant: Variant::KbRann,
            seed: 42,
            epochs: 20,
            batch_size: 4,
            learning_rate: 0.01,
            momentum: 0.9,
            lr_decay_every: 10,
            lr_decay_factor: 0.5,
            grad_clip: 5.0,
            image_size: 128,
            num_classes: 3,
            backbone: BackboneConfig::paper_mini(),
            rann_depth: 2,
            rann_tied: true,
            prior_count: 16,
            sigma_min: 0.02,
            prior_ring_radius: 0.3,
            prior_sigma_init: 0.15,
            prior_injection: InjectionPoint::PostRann,
            anchors: kbrann_core::head::AnchorGrid::default_shapes(),
            lambda_bbox: 5.0,
            lambda_conf_pos: 75.0,
            lambda_conf_neg: 100.0,
            lambda_class: 1.0,
            nms_iou: 0.45,
            eval_conf_thresh: 0.05,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CliError::Runtime(format!("config key {key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Runtime(format!("config key {key}: expected a boolean, got {value:?}"))),
    }
}

/// "0.04x0.04,0.08x0.08" -> [(0.04,0.04),(0.08,0.08)]
fn parse_shapes(key: &str, value: &str) -> Result<Vec<(f64, f64)>> {
    value
        .split(',')
        .map(|pair| {
            let (w, h) = pair
                .trim()
                .split_once('x')
                .ok_or_else(|| CliError::Runtime(format!("config key {key}: bad shape {pair:?}")))?;
            Ok((parse_num(key, w.trim())?, parse_num(key, h.trim())?))
        })
        .collect()
}

/// "4:8:8,8:16:16" -> fire configs (squeeze:expand1:expand3)
fn parse_fire_stack(value: &str) -> Result<Vec<FireConfig>> {
    value
        .split(',')
        .map(|triple| {
            let parts: Vec<&str> = triple.trim().split(':').collect();
            if parts.len() != 3 {
                return Err(CliError::Runtime(format!(
                    "config key fire_stack: expected squeeze:expand1:expand3, got {triple:?}"
                )));
            }
            FireConfig::new(
                parse_num("fire_stack", parts[0])?,
                parse_num("fire_stack", parts[1])?,
                parse_num("fire_stack", parts[2])?,
            )
            .map_err(CliError::from)
        })
        .collect()
}

impl PipelineConfig {
    /// Parse a config file body over the defaults.
    pub fn parse(text: &str) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        // custom backbone pieces override the preset only when given
        let mut stem_channels: Option<usize> = None;
        let mut fire_stack: Option<Vec<FireConfig>> = None;
        let mut pool_after: Option<Vec<usize>> = None;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Runtime(format!("config line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "variant" => cfg.variant = Variant::parse(value)?,
                "seed" => cfg.seed = parse_num(key, value)?,
                "epochs" => cfg.epochs = parse_num(key, value)?,
                "batch_size" => cfg.batch_size = parse_num(key, value)?,
                "learning_rate" => cfg.learning_rate = parse_num(key, value)?,
                "momentum" => cfg.momentum = parse_num(key, value)?,
                "lr_decay_every" => cfg.lr_decay_every = parse_num(key, value)?,
                "lr_decay_factor" => cfg.lr_decay_factor = parse_num(key, value)?,
                "grad_clip" => cfg.grad_clip = parse_num(key, value)?,
                "image_size" => cfg.image_size = parse_num(key, value)?,
                "num_classes" => cfg.num_classes = parse_num(key, value)?,
                "backbone" => {
                    cfg.backbone = match value {
                        "paper-mini" => BackboneConfig::paper_mini(),
                        "paper-512" => BackboneConfig::paper_512(),
                        "custom" => cfg.backbone.clone(),
                        other => {
                            return Err(CliError::Runtime(format!(
                                "config key backbone: unknown preset {other:?}"
                            )))
                        }
                    }
                }
                "stem_channels" => stem_channels = Some(parse_num(key, value)?),
                "fire_stack" => fire_stack = Some(parse_fire_stack(value)?),
                "pool_after" => {
                    pool_after = Some(
                        value
                            .split(',')
                            .map(|v| parse_num(key, v.trim()))
                            .collect::<Result<Vec<usize>>>()?,
                    )
                }
                "rann_depth" => cfg.rann_depth = parse_num(key, value)?,
                "rann_tied" => cfg.rann_tied = parse_bool(key, value)?,
                "prior_count" => cfg.prior_count = parse_num(key, value)?,
                "sigma_min" => cfg.sigma_min = parse_num(key, value)?,
                "prior_ring_radius" => cfg.prior_ring_radius = parse_num(key, value)?,
                "prior_sigma_init" => cfg.prior_sigma_init = parse_num(key, value)?,
                "prior_injection" => {
                    cfg.prior_injection = match value {
                        "post-rann" => InjectionPoint::PostRann,
                        "pre-rann" => InjectionPoint::PreRann,
                        other => {
                            return Err(CliError::Runtime(format!(
                                "config key prior_injection: expected post-rann or pre-rann, got {other:?}"
                            )))
                        }
                    }
                }
                "anchors" => cfg.anchors = parse_shapes(key, value)?,
                "lambda_bbox" => cfg.lambda_bbox = parse_num(key, value)?,
                "lambda_conf_pos" => cfg.lambda_conf_pos = parse_num(key, value)?,
                "lambda_conf_neg" => cfg.lambda_conf_neg = parse_num(key, value)?,
                "lambda_class" => cfg.lambda_class = parse_num(key, value)?,
                "nms_iou" => cfg.nms_iou = parse_num(key, value)?,
                "eval_conf_thresh" => cfg.eval_conf_thresh = parse_num(key, value)?,
                other => {
                    return Err(CliError::Runtime(format!(
                        "config line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        if let Some(sc) = stem_channels {
            cfg.backbone.stem_channels = sc;
        }
        if let Some(fs) = fire_stack {
            cfg.backbone.fire_stack = fs;
        }
        if let Some(pa) = pool_after {
            cfg.backbone.pool_after = pa;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CliError::Runtime("epochs and batch_size must be >= 1".into()));
        }
        if !(self.rann_depth >= 1 && self.rann_depth <= 4) {
            return Err(CliError::Runtime(format!(
                "rann_depth {} out of range 1..=4",
                self.rann_depth
            )));
        }
        if self.learning_rate <= 0.0 || self.grad_clip <= 0.0 {
            return Err(CliError::Runtime("learning_rate and grad_clip must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CliError::Runtime(format!("momentum {} out of [0,1)", self.momentum)));
        }
        if self.num_classes == 0 {
            return Err(CliError::Runtime("num_classes must be >= 1".into()));
        }
        if self.anchors.is_empty() {
            return Err(CliError::Runtime("anchor set must not be empty".into()));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(CliError::Runtime(format!("nms_iou {} out of (0,1)", self.nms_iou)));
        }
        if self.sigma_min <= 0.0 || self.prior_sigma_init < self.sigma_min {
            return Err(CliError::Runtime(
                "prior sigmas must satisfy 0 < sigma_min <= prior_sigma_init".into(),
            ));
        }
        self.backbone.validate()?;
        let red = self.backbone.reduction();
        if self.image_size == 0 || self.image_size % red != 0 {
            return Err(CliError::Runtime(format!(
                "image_size {} must be a positive multiple of the pooling factor {red}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Side of the anchor grid (feature-map resolution).
    pub fn grid_size(&self) -> usize {
        self.image_size / self.backbone.reduction()
    }
}
