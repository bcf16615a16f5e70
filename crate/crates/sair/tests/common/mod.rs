//! Shared fixtures for the integration suites: an independent bilinear
//! reference, the desk-scale training recipe, and a lazily trained model
//! zoo reused by the directional checks.

#![allow(dead_code)] // each test binary pulls in a subset

use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use candle_core::Device;
use ndarray::Array3;
use sair::config::{AnchorMode, RunConfig};
use sair::data::{Dataset, Split};
use sair::eval::{evaluate, EvalOptions};
use sair::masks::RatioBucket;
use sair::metrics::MetricReport;
use sair::model::SairModel;
use sair::train::{load_checkpoint, model_from_checkpoint, run_training, TrainOutcome};

/// Reference bilinear lookup written against index arithmetic rather than
/// the library's neighborhood machinery: map the normalized coordinate to
/// fractional cell units, clamp both flanking cells into range, then lerp
/// per axis. Outside the outermost cell centers both neighbors clamp to the
/// same cell, which reproduces border clamping.
pub fn oracle_bilinear(map: &Array3<f64>, y: f64, x: f64) -> Vec<f64> {
    let (h, w, c) = map.dim();
    let axis = |u: f64, n: usize| -> (usize, usize, f64) {
        let t = (u + 1.0) * 0.5 * n as f64 - 0.5;
        let base = t.floor();
        let frac = t - base;
        let clamp = |v: f64| v.clamp(0.0, (n - 1) as f64) as usize;
        (clamp(base), clamp(base + 1.0), frac)
    };
    let (r0, r1, fy) = axis(y, h);
    let (c0, c1, fx) = axis(x, w);
    (0..c)
        .map(|ch| {
            let top = map[[r0, c0, ch]] * (1.0 - fx) + map[[r0, c1, ch]] * fx;
            let bot = map[[r1, c0, ch]] * (1.0 - fx) + map[[r1, c1, ch]] * fx;
            top * (1.0 - fy) + bot * fy
        })
        .collect()
}

/// The desk recipe: toy dataset at 32 px, surrogate semantics, the full
/// encoder stack, 30 epochs of batch 4. Small enough for a CPU, big enough
/// that the trained variants separate.
pub fn desk_config(root: &Path, seed: u64) -> RunConfig {
    let mut config = RunConfig::default();
    config.run.seed = seed;
    config.run.output_root = Some(root.to_path_buf());
    config.dataset.image_size = 32;
    config.dataset.toy_train_count = 8;
    config.dataset.toy_test_count = 4;
    config.train.epochs = 30;
    config.train.batch_size = 4;
    config.train.query_count = 512;
    config.train.aux_cosine_weight = 0.1;
    config.eval.probe_anchors = AnchorMode::Calibrated;
    config.eval.probe_calibration_images = 8;
    config
}

/// Ablation wiring by name, mirroring the CLI's variant table.
pub fn apply_variant(config: &mut RunConfig, variant: &str) {
    match variant {
        "sair" => {}
        "no-sir" => config.model.use_sir = false,
        "no-appearance" => config.model.use_appearance = false,
        "appearance-only" => {
            config.model.use_sir = false;
            config.model.zero_semantic = true;
        }
        other => panic!("unknown zoo variant {other}"),
    }
}

pub const ZOO_VARIANTS: [&str; 4] = ["sair", "appearance-only", "no-sir", "no-appearance"];
pub const ZOO_SEEDS: [u64; 3] = [0, 1, 2];

pub struct TrainedRun {
    pub variant: &'static str,
    pub seed: u64,
    pub config: RunConfig,
    pub model: SairModel,
    pub outcome: TrainOutcome,
    pub train_seconds: f64,
}

pub struct Zoo {
    pub runs: Vec<TrainedRun>,
    // Keeps checkpoints and logs alive for the whole test binary.
    _root: tempfile::TempDir,
}

/// Train every ablation variant across the shared seeds, once per binary.
/// The directional criteria all read from this set, so comparisons see the
/// same training budget, data, and evaluation masks.
pub fn zoo() -> &'static Zoo {
    static ZOO: OnceLock<Zoo> = OnceLock::new();
    ZOO.get_or_init(|| {
        let root = tempfile::tempdir().expect("zoo tempdir");
        let device = Device::Cpu;
        let mut runs = Vec::with_capacity(ZOO_VARIANTS.len() * ZOO_SEEDS.len());
        for variant in ZOO_VARIANTS {
            for seed in ZOO_SEEDS {
                let mut config = desk_config(root.path(), seed);
                apply_variant(&mut config, variant);
                config.run.name = Some(variant.to_string());
                config.validate().expect("zoo config");
                let started = Instant::now();
                let outcome = run_training(&config, None).expect("zoo training");
                let train_seconds = started.elapsed().as_secs_f64();
                let ckpt =
                    load_checkpoint(&outcome.checkpoint, &device).expect("zoo checkpoint");
                let (model, _params) =
                    model_from_checkpoint(&ckpt, &device).expect("zoo model");
                eprintln!(
                    "[zoo] {variant} seed {seed}: {train_seconds:.1}s, epoch L1 {:.4} -> {:.4}",
                    outcome.first_epoch_l1, outcome.final_epoch_l1
                );
                runs.push(TrainedRun {
                    variant,
                    seed,
                    config,
                    model,
                    outcome,
                    train_seconds,
                });
            }
        }
        Zoo { runs, _root: root }
    })
}

pub fn zoo_run(variant: &str, seed: u64) -> &'static TrainedRun {
    zoo()
        .runs
        .iter()
        .find(|r| r.variant == variant && r.seed == seed)
        .unwrap_or_else(|| panic!("zoo has no {variant} run for seed {seed}"))
}

pub fn test_dataset(run: &TrainedRun) -> Dataset {
    Dataset::open(run.config.dataset_spec(Split::Test)).expect("toy test set")
}

/// Evaluate a zoo run on its test split. The eval mask stream is keyed by
/// the run seed, so variants sharing a seed face identical holes.
pub fn eval_report(run: &TrainedRun, buckets: &[RatioBucket]) -> MetricReport {
    let dataset = test_dataset(run);
    let opts = EvalOptions {
        buckets: buckets.to_vec(),
        seed: run.seed,
        ..EvalOptions::default()
    };
    let mask_kind = run.config.mask_kind().expect("mask kind");
    evaluate(
        &run.model,
        &dataset,
        &mask_kind,
        &opts,
        None,
        &run.config.short_hash(),
    )
    .expect("zoo evaluation")
}

/// Masked-region PSNR on one bucket.
pub fn masked_psnr(run: &TrainedRun, bucket: RatioBucket) -> f64 {
    let report = eval_report(run, &[bucket]);
    report.buckets[bucket.label()]
        .masked_psnr
        .expect("bucket produced no masked pixels")
}

/// Full-image PSNR averaged over the standard buckets.
pub fn mean_psnr(run: &TrainedRun) -> f64 {
    let report = eval_report(run, &RatioBucket::all());
    let vals: Vec<f64> = report.buckets.values().map(|b| b.psnr).collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}
