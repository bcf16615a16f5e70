//! Command-line interface. Exit codes: 0 success (including `--help`),
//! 1 usage errors, 2 runtime failures.
//!
//! `train` needs a config file; the other commands reconstruct everything
//! from the config embedded in a checkpoint, with flags overriding the
//! embedded evaluation options.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::Device;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::config::{AnchorMode, RunConfig};
use crate::data::{load_binary_mask, load_image, Dataset, MaskedSample, Split};
use crate::error::{Result, SairError};
use crate::eval::{evaluate, save_png, EvalOptions};
use crate::lpips::{ConvPerceptualNet, PerceptualBackend};
use crate::masks::RatioBucket;
use crate::model::SairModel;
use crate::probe::{calibrate_prototypes, probe_dataset, SegmentationProbe};
use crate::train::{load_checkpoint, model_from_checkpoint, run_training, Checkpoint};

#[derive(Parser, Debug)]
#[command(
    name = "sair",
    version,
    about = "Masked-image inpainting with semantic-aware implicit representations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the model described by a config file.
    Train {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to continue from (same config only).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override [run].seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override [train].epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the output root directory.
        #[arg(long)]
        output_root: Option<PathBuf>,
    },
    /// Score a trained checkpoint on its test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated mask ratio buckets (e.g. "0-20,40-60").
        #[arg(long)]
        buckets: Option<String>,
        /// Override the evaluation seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Emit per-bucket comparison grids.
        #[arg(long)]
        figures: bool,
        /// Paste known pixels over predictions before scoring.
        #[arg(long)]
        composite: bool,
        /// Cap the number of test images.
        #[arg(long)]
        max_samples: Option<usize>,
        /// Perceptual-metric weights (safetensors); omitting reports the
        /// score as absent.
        #[arg(long)]
        lpips_weights: Option<PathBuf>,
        #[arg(long)]
        output_root: Option<PathBuf>,
    },
    /// Fill the missing region of a single image.
    Inpaint {
        #[arg(long)]
        checkpoint: PathBuf,
        /// RGB input image.
        #[arg(long)]
        image: PathBuf,
        /// Grayscale mask, white = missing.
        #[arg(long)]
        mask: PathBuf,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
        /// Output scale factor (continuous decoding supports non-native
        /// sizes).
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Paste known pixels over the prediction.
        #[arg(long)]
        composite: bool,
    },
    /// Segment completed vs raw-upsampled semantic fields and report both
    /// mIoU scores.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Mask ratio bucket (default 40-60).
        #[arg(long)]
        bucket: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_root: Option<PathBuf>,
    },
    /// Train and score graph variants side by side.
    Ablate {
        /// Base TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated variants: sair, no-sir, no-appearance,
        /// appearance-only, edsr.
        #[arg(long, default_value = "sair,no-sir,no-appearance")]
        variants: String,
        /// Seeds per variant (consecutive from [run].seed).
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        output_root: Option<PathBuf>,
    },
}

/// Parse argv and dispatch; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            2
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            resume,
            seed,
            epochs,
            output_root,
        } => cmd_train(&config, resume.as_deref(), seed, epochs, output_root),
        Command::Evaluate {
            checkpoint,
            buckets,
            seed,
            figures,
            composite,
            max_samples,
            lpips_weights,
            output_root,
        } => cmd_evaluate(
            &checkpoint,
            buckets.as_deref(),
            seed,
            figures,
            composite,
            max_samples,
            lpips_weights,
            output_root,
        ),
        Command::Inpaint {
            checkpoint,
            image,
            mask,
            out,
            scale,
            composite,
        } => cmd_inpaint(&checkpoint, &image, &mask, &out, scale, composite),
        Command::Probe {
            checkpoint,
            bucket,
            seed,
            output_root,
        } => cmd_probe(&checkpoint, bucket.as_deref(), seed, output_root),
        Command::Ablate {
            config,
            variants,
            seeds,
            output_root,
        } => cmd_ablate(&config, &variants, seeds, output_root),
    }
}

fn parse_buckets(spec: &str) -> Result<Vec<RatioBucket>> {
    let buckets: Vec<RatioBucket> = spec
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(RatioBucket::parse)
        .collect::<Result<_>>()?;
    if buckets.is_empty() {
        return Err(SairError::InvalidArgument(
            "bucket list parsed to nothing".into(),
        ));
    }
    Ok(buckets)
}

fn cmd_train(
    config_path: &Path,
    resume: Option<&Path>,
    seed: Option<u64>,
    epochs: Option<usize>,
    output_root: Option<PathBuf>,
) -> Result<()> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(seed) = seed {
        config.run.seed = seed;
    }
    if let Some(epochs) = epochs {
        config.train.epochs = epochs;
    }
    if let Some(root) = output_root {
        config.run.output_root = Some(root);
    }
    config.validate()?;

    println!("run {} -> {}", config.short_hash(), config.output_dir().display());
    let outcome = run_training(&config, resume)?;
    println!(
        "trained {} epochs ({} steps), epoch L1 {:.6} -> {:.6}",
        outcome.epochs_completed, outcome.steps, outcome.first_epoch_l1, outcome.final_epoch_l1
    );
    println!("checkpoint {}", outcome.checkpoint.display());
    Ok(())
}

fn load_model(
    checkpoint: &Path,
    output_root: Option<PathBuf>,
) -> Result<(SairModel, Checkpoint, RunConfig)> {
    let device = Device::Cpu;
    let ckpt = load_checkpoint(checkpoint, &device)?;
    let (model, _params) = model_from_checkpoint(&ckpt, &device)?;
    let mut config = ckpt.config.clone();
    if let Some(root) = output_root {
        config.run.output_root = Some(root);
    }
    Ok((model, ckpt, config))
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    checkpoint: &Path,
    buckets: Option<&str>,
    seed: Option<u64>,
    figures: bool,
    composite: bool,
    max_samples: Option<usize>,
    lpips_weights: Option<PathBuf>,
    output_root: Option<PathBuf>,
) -> Result<()> {
    let (model, ckpt, config) = load_model(checkpoint, output_root)?;
    let out_dir = config.output_dir();

    let opts = EvalOptions {
        buckets: match buckets {
            Some(spec) => parse_buckets(spec)?,
            None => config.eval.buckets.clone(),
        },
        seed: seed.unwrap_or(config.run.seed),
        composite: composite || config.eval.composite,
        max_samples: max_samples.or(config.eval.max_samples),
        figures: (figures || config.eval.figures).then(|| out_dir.join("figures")),
    };
    let backend = match lpips_weights.or_else(|| config.eval.lpips_weights.clone()) {
        Some(path) => Some(ConvPerceptualNet::load(&path)?),
        None => None,
    };
    let backend_ref: Option<&dyn PerceptualBackend> =
        backend.as_ref().map(|b| b as &dyn PerceptualBackend);

    let dataset = Dataset::open(config.dataset_spec(Split::Test))?;
    let report = evaluate(
        &model,
        &dataset,
        &config.mask_kind()?,
        &opts,
        backend_ref,
        &ckpt.config_hash,
    )?;

    let reports = out_dir.join("reports");
    std::fs::create_dir_all(&reports).map_err(|e| SairError::io(&reports, e))?;
    std::fs::write(reports.join("report.json"), report.to_json()?)
        .map_err(|e| SairError::io(&reports, e))?;
    std::fs::write(reports.join("report.txt"), report.to_text())
        .map_err(|e| SairError::io(&reports, e))?;
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_inpaint(
    checkpoint: &Path,
    image: &Path,
    mask: &Path,
    out: &Path,
    scale: f64,
    composite: bool,
) -> Result<()> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(SairError::InvalidArgument(format!(
            "scale must be positive, got {scale}"
        )));
    }
    let (model, _ckpt, _config) = load_model(checkpoint, None)?;
    let rgb = load_image(image)?;
    let mask = load_binary_mask(mask)?;
    let (h, w, _) = rgb.dim();
    if mask.dim() != (h, w) {
        return Err(SairError::shape(
            "inpaint mask",
            format!("{h}x{w}"),
            format!("{}x{}", mask.dim().0, mask.dim().1),
        ));
    }
    let sample = MaskedSample::new(rgb, None).apply_mask(mask)?;
    let out_h = ((h as f64 * scale).round() as usize).max(1);
    let out_w = ((w as f64 * scale).round() as usize).max(1);
    let pred = model.reconstruct(&sample, out_h, out_w, composite)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| SairError::io(parent, e))?;
    }
    save_png(out, &pred)?;
    println!("{} ({}x{})", out.display(), out_w, out_h);
    Ok(())
}

fn build_probe(
    model: &SairModel,
    config: &RunConfig,
    dataset_train: &Dataset,
    seed: u64,
) -> Result<SegmentationProbe> {
    let encoder = model
        .semantic_encoder()
        .ok_or_else(|| SairError::Config("model has no semantic branch to probe".into()))?;
    match config.eval.probe_anchors {
        AnchorMode::Calibrated => calibrate_prototypes(
            encoder,
            dataset_train,
            seed,
            config.eval.probe_calibration_images,
        ),
        AnchorMode::Random => SegmentationProbe::random(
            dataset_train.categories(),
            encoder.out_channels(),
            seed,
        ),
    }
}

fn cmd_probe(
    checkpoint: &Path,
    bucket: Option<&str>,
    seed: Option<u64>,
    output_root: Option<PathBuf>,
) -> Result<()> {
    let (model, _ckpt, config) = load_model(checkpoint, output_root)?;
    let bucket = match bucket {
        Some(s) => RatioBucket::parse(s)?,
        None => RatioBucket::High,
    };
    let seed = seed.unwrap_or(config.run.seed);

    let train_ds = Dataset::open(config.dataset_spec(Split::Train))?;
    let test_ds = Dataset::open(config.dataset_spec(Split::Test))?;
    let probe = build_probe(&model, &config, &train_ds, seed)?;
    let outcome = probe_dataset(
        &model,
        &test_ds,
        &config.mask_kind()?,
        bucket,
        seed,
        &probe,
        config.eval.max_samples,
    )?;

    println!(
        "bucket {} over {} samples: raw upsampling mIoU {:.4}, completed mIoU {:.4}",
        bucket, outcome.sample_count, outcome.raw_miou, outcome.sir_miou
    );
    let reports = config.output_dir().join("reports");
    std::fs::create_dir_all(&reports).map_err(|e| SairError::io(&reports, e))?;
    let record = serde_json::json!({
        "bucket": bucket.label(),
        "seed": seed,
        "raw_miou": outcome.raw_miou,
        "sir_miou": outcome.sir_miou,
        "sample_count": outcome.sample_count,
    });
    std::fs::write(
        reports.join("probe.json"),
        serde_json::to_string_pretty(&record)?,
    )
    .map_err(|e| SairError::io(&reports, e))?;
    Ok(())
}

/// Apply a named variant to a copy of the base config.
fn variant_config(base: &RunConfig, name: &str) -> Result<RunConfig> {
    let mut config = base.clone();
    match name {
        "sair" => {}
        "no-sir" => config.model.use_sir = false,
        "no-appearance" => config.model.use_appearance = false,
        "appearance-only" => {
            config.model.zero_semantic = true;
            config.model.use_sir = false;
        }
        "edsr" => config.model.encoder_variant = crate::model::EncoderVariant::EdsrStyle,
        other => {
            return Err(SairError::InvalidArgument(format!(
                "unknown variant '{other}' (expected sair, no-sir, no-appearance, \
                 appearance-only, or edsr)"
            )))
        }
    }
    Ok(config)
}

#[derive(Debug, serde::Serialize)]
struct AblateRow {
    variant: String,
    seed: u64,
    psnr: BTreeMap<String, f64>,
    masked_psnr: BTreeMap<String, Option<f64>>,
}

fn cmd_ablate(
    config_path: &Path,
    variants: &str,
    seeds: u64,
    output_root: Option<PathBuf>,
) -> Result<()> {
    if seeds == 0 {
        return Err(SairError::InvalidArgument("seeds must be at least 1".into()));
    }
    let mut base = RunConfig::load(config_path)?;
    if let Some(root) = output_root {
        base.run.output_root = Some(root);
    }
    let names: Vec<&str> = variants
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if names.is_empty() {
        return Err(SairError::InvalidArgument("no variants requested".into()));
    }

    let mut rows = Vec::new();
    for &name in &names {
        for s in 0..seeds {
            let mut config = variant_config(&base, name)?;
            config.run.seed = base.run.seed + s;
            config.run.name = Some(match &base.run.name {
                Some(prefix) => format!("{prefix}-{name}-s{}", config.run.seed),
                None => format!("{name}-s{}", config.run.seed),
            });
            config.validate()?;

            println!("[{name} seed {}] training {}", config.run.seed, config.short_hash());
            let outcome = run_training(&config, None)?;
            let device = Device::Cpu;
            let ckpt = load_checkpoint(&outcome.checkpoint, &device)?;
            let (model, _params) = model_from_checkpoint(&ckpt, &device)?;
            let dataset = Dataset::open(config.dataset_spec(Split::Test))?;
            let report = evaluate(
                &model,
                &dataset,
                &config.mask_kind()?,
                &EvalOptions {
                    buckets: config.eval.buckets.clone(),
                    seed: config.run.seed,
                    composite: config.eval.composite,
                    max_samples: config.eval.max_samples,
                    figures: None,
                },
                None,
                &ckpt.config_hash,
            )?;
            rows.push(AblateRow {
                variant: name.to_string(),
                seed: config.run.seed,
                psnr: report
                    .buckets
                    .iter()
                    .map(|(k, m)| (k.clone(), m.psnr))
                    .collect(),
                masked_psnr: report
                    .buckets
                    .iter()
                    .map(|(k, m)| (k.clone(), m.masked_psnr))
                    .collect(),
            });
        }
    }

    let bucket_labels: Vec<String> = rows
        .first()
        .map(|r| r.psnr.keys().cloned().collect())
        .unwrap_or_default();
    println!("\n{:<18} {:>5} {}", "variant", "seed", bucket_labels.join("        "));
    for row in &rows {
        let cells: Vec<String> = bucket_labels
            .iter()
            .map(|b| format!("{:>10.4}", row.psnr.get(b).copied().unwrap_or(f64::NAN)))
            .collect();
        println!("{:<18} {:>5} {}", row.variant, row.seed, cells.join(" "));
    }

    let root = base
        .output_dir()
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let dir = root.join(format!("ablate-{}", base.short_hash()));
    std::fs::create_dir_all(&dir).map_err(|e| SairError::io(&dir, e))?;
    let path = dir.join("ablate_report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&rows)?)
        .map_err(|e| SairError::io(&path, e))?;
    println!("\nreport {}", path.display());
    Ok(())
}
