use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use kbrann_cli::config::{PipelineConfig, Variant};
use kbrann_cli::data::{generate_dataset, load_image, SceneConfig};
use kbrann_cli::error::CliError;
use kbrann_cli::infer::{
    detect, eval_report_json, evaluate_model, export_heatmaps, write_detections, MapKind,
};
use kbrann_cli::model::Model;
use kbrann_cli::train::train;

#[derive(Parser)]
#[command(name = "kbrann", version, about = "Small-object detector with recurrent attention and reverse-Gaussian priors")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    KbRann,
    Rann,
    KbRcnn,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::KbRann => Variant::KbRann,
            VariantArg::Rann => Variant::Rann,
            VariantArg::KbRcnn => Variant::KbRcnn,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MapsArg {
    All,
    Priors,
    Attention,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic detection dataset (PPM images + annotation sidecars)
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        image_size: usize,
        /// Apply a 3x3 box blur to every scene
        #[arg(long)]
        blur: bool,
        /// Partially occlude some objects
        #[arg(long)]
        occlusion: bool,
    },
    /// Train a model on a dataset directory
    Train {
        #[arg(long)]
        data: PathBuf,
        /// key = value config file; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config file's variant
        #[arg(long)]
        variant: Option<VariantArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset, writing a JSON report
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a checkpoint on one image, writing detections as JSON
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.6)]
        conf: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write prior and attention maps as PGM images
    ExportHeatmaps {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = MapsArg::All)]
        maps: MapsArg,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::GenerateData { out, count, seed, image_size, blur, occlusion } => {
            if count == 0 {
                return Err(CliError::Usage("--count must be >= 1".into()));
            }
            if image_size == 0 {
                return Err(CliError::Usage("--image-size must be >= 1".into()));
            }
            generate_dataset(&out, count, seed, &SceneConfig { image_size, blur, occlusion })?;
            println!("wrote {count} scenes to {}", out.display());
            Ok(())
        }
        Cmd::Train { data, config, variant, out } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| {
                        CliError::Runtime(format!("reading {}: {e}", path.display()))
                    })?;
                    PipelineConfig::parse(&text)?
                }
                None => PipelineConfig::default(),
            };
            if let Some(v) = variant {
                cfg.variant = v.into();
            }
            let report = train(&cfg, &data, &out)?;
            println!(
                "trained {} epochs on {} images, final loss {:.6}, checkpoint {}",
                report.epoch_losses.len(),
                report.images,
                report.epoch_losses.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }
        Cmd::Eval { model, data, iou, out } => {
            if !(iou > 0.0 && iou < 1.0) {
                return Err(CliError::Usage(format!("--iou {iou} must lie in (0,1)")));
            }
            let m = Model::load(&model)?;
            let cfg = PipelineConfig { nms_iou: m.spec.nms_iou, ..PipelineConfig::default() };
            let (eval, _) = evaluate_model(&m, &data, iou, &cfg)?;
            let report = eval_report_json(&eval, iou, cfg.eval_conf_thresh, m.spec.nms_iou);
            std::fs::write(&out, &report)
                .map_err(|e| CliError::Runtime(format!("writing {}: {e}", out.display())))?;
            println!("mAP@{iou}: {:.4} over {} images -> {}", eval.map, eval.images, out.display());
            Ok(())
        }
        Cmd::Infer { model, image, conf, out } => {
            if !(0.0..=1.0).contains(&conf) {
                return Err(CliError::Usage(format!("--conf {conf} must lie in [0,1]")));
            }
            let m = Model::load(&model)?;
            let img = load_image(&image)?;
            let dets = detect(&m, &[&img], conf, m.spec.nms_iou)?.remove(0);
            write_detections(&out, &dets)?;
            println!("{} detections -> {}", dets.len(), out.display());
            Ok(())
        }
        Cmd::ExportHeatmaps { model, image, out, maps } => {
            let m = Model::load(&model)?;
            let img = load_image(&image)?;
            let kind = match maps {
                MapsArg::All => MapKind::All,
                MapsArg::Priors => MapKind::Priors,
                MapsArg::Attention => MapKind::Attention,
            };
            let written = export_heatmaps(&m, &img, &out, kind)?;
            println!("wrote {written} maps to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Usage(_)) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(e @ CliError::Runtime(_)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
    }
}
