//! Training loop: seeded batch construction, L1 reconstruction objective
//! with an optional field-consistency term, stepped learning-rate halving,
//! JSONL step logs, and resumable checkpoints that embed the full config.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};

use crate::config::RunConfig;
use crate::coord::EnsembleIndex;
use crate::data::{make_batch, Dataset, MaskedSample, Split};
use crate::error::{Result, SairError};
use crate::masks::{sample_mask, MaskSource};
use crate::model::{build_model, SairModel};
use crate::nn::{Adam, Params};
use crate::rng::{derive_u64, stream_rng};
use crate::semantic::{encode_semantic, sir_dense};

/// Trainable parameters run in f32; metrics and oracles use f64 arrays.
pub const TRAIN_DTYPE: DType = DType::F32;

const CHECKPOINT_FORMAT: &str = "sair-checkpoint-v1";

/// Base rate halved every `halve_every` epochs (0 disables decay).
pub fn lr_for_epoch(lr0: f64, epoch: usize, halve_every: usize) -> f64 {
    if halve_every == 0 {
        lr0
    } else {
        lr0 * 0.5f64.powi((epoch / halve_every) as i32)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepLoss {
    pub total: f64,
    pub l1: f64,
}

/// One optimizer step on a prepared batch. Returns the losses actually
/// optimized; `total` differs from `l1` only when the auxiliary
/// field-consistency weight is nonzero.
pub fn train_step(
    model: &SairModel,
    params: &Params,
    adam: &mut Adam,
    batch: &crate::data::TrainBatch,
    aux_weight: f64,
) -> Result<StepLoss> {
    let refs: Vec<&crate::coord::QueryBatch> = batch.query_batches.iter().collect();
    let index = EnsembleIndex::new(&refs, model.dtype(), model.device())?;
    let pred = model.forward_queries(&batch.images, &batch.masks, &index)?;
    let l1 = (pred - &batch.targets)?.abs()?.mean_all()?;

    let loss = if aux_weight > 0.0 && model.sir_decoder().is_some() {
        let aux = field_consistency_loss(model, batch)?;
        (&l1 + (aux * aux_weight)?)?
    } else {
        l1.clone()
    };

    let grads = loss.backward()?;
    adam.step(&params.trainable(), &grads)?;

    Ok(StepLoss {
        total: loss.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        l1: l1.to_dtype(DType::F64)?.to_scalar::<f64>()?,
    })
}

/// Mean (1 - cosine) between the completed field of the masked input and
/// the encoder's view of the clean image, both at feature resolution.
///
/// Only the completion decoder receives gradient. Both encoder branches
/// are detached: the target because it is a target, and the masked input
/// because an encoder inside this loss warps its feature geometry to make
/// the target cheap (inflating a shared component, or flattening spatial
/// structure outright) instead of learning anything. Stop-gradient alone
/// does not prevent that drift, since the target is recomputed from the
/// same weights every step; keeping the encoder out of the loss entirely
/// does. Its representation is owned by the reconstruction loss alone.
///
/// The score is the mean of two per-position cosines: one on the fields
/// as-is, one after subtracting each field's own spatial mean. Encoder
/// features share a large component across positions, so the plain cosine
/// alone saturates near 1 for a spatially constant completion and teaches
/// no structure, while the centered cosine alone lets the completion's
/// absolute level drift off the feature manifold the probe anchors live
/// on. Together they cap a structureless completion at 1 - (1 + 0)/2 and
/// leave one way down: reproduce the clean features, level and layout.
fn field_consistency_loss(model: &SairModel, batch: &crate::data::TrainBatch) -> Result<Tensor> {
    let encoder = model
        .semantic_encoder()
        .expect("caller checked the semantic branch exists");
    let sir = model
        .sir_decoder()
        .expect("caller checked the completion decoder exists");

    let masked_map = encode_semantic(&batch.images, &batch.masks, encoder)?;
    let masked_map = crate::semantic::SemanticFeatureMap {
        features: masked_map.features.detach(),
        mask: masked_map.mask.detach(),
        downsample_factor: masked_map.downsample_factor,
    };
    let grid = masked_map.grid()?;
    let (gh, gw) = (grid.height(), grid.width());
    let completed = sir_dense(&masked_map, sir, gh, gw)?;

    let zero_mask = batch.masks.zeros_like()?;
    let clean_map = encode_semantic(&batch.clean_images, &zero_mask, encoder)?;
    let target = clean_map.features.detach();

    let level = per_position_cos(&completed, &target)?;
    let structure = per_position_cos(
        &center_spatially(&completed)?,
        &center_spatially(&target)?,
    )?;
    let cos = ((level + structure)? * 0.5)?;
    Ok(cos.affine(-1.0, 1.0)?.mean_all()?)
}

/// Cosine between two [B, C, H, W] maps along the channel axis: [B, H, W].
fn per_position_cos(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dot = (a * b)?.sum(1)?;
    let na = a.sqr()?.sum(1)?.sqrt()?;
    let nb = b.sqr()?.sum(1)?.sqrt()?;
    Ok((dot / ((na * nb)? + 1e-8)?)?)
}

/// Subtract each image's spatial mean per channel from a [B, C, H, W] map.
fn center_spatially(t: &Tensor) -> Result<Tensor> {
    let mean = t.mean_keepdim(3)?.mean_keepdim(2)?;
    Ok(t.broadcast_sub(&mean)?)
}

/// One line per optimizer step in the JSONL log.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub l1: f64,
    pub lr: f64,
}

pub fn save_checkpoint(
    path: &Path,
    params: &Params,
    adam: &Adam,
    epochs_completed: usize,
    config: &RunConfig,
) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = params
        .trainable()
        .into_iter()
        .map(|(name, var)| (format!("param.{name}"), var.as_tensor().clone()))
        .collect();
    tensors.extend(adam.state_tensors());

    let mut metadata = std::collections::HashMap::new();
    metadata.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
    metadata.insert("config".to_string(), config.canonical_json()?);
    metadata.insert("config_hash".to_string(), config.hash());
    metadata.insert("seed".to_string(), config.run.seed.to_string());
    metadata.insert("epochs_completed".to_string(), epochs_completed.to_string());
    metadata.insert("adam_step".to_string(), adam.step_count().to_string());

    let views: Vec<(String, &Tensor)> =
        tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
    safetensors::serialize_to_file(views, Some(metadata), path)
        .map_err(SairError::Safetensors)?;
    Ok(())
}

#[derive(Debug)]
pub struct Checkpoint {
    pub params: BTreeMap<String, Tensor>,
    pub adam_moments: BTreeMap<String, (Tensor, Tensor)>,
    pub adam_step: u64,
    pub epochs_completed: usize,
    pub config: RunConfig,
    pub config_hash: String,
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(SairError::Config(format!(
            "checkpoint not found at {}",
            path.display()
        )));
    }
    let bytes = std::fs::read(path).map_err(|e| SairError::io(path, e))?;
    let metadata = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(SairError::Safetensors)?
        .1;
    let meta = metadata.metadata().clone().unwrap_or_default();
    let field = |key: &str| -> Result<String> {
        meta.get(key)
            .cloned()
            .ok_or_else(|| SairError::Config(format!("checkpoint metadata missing {key}")))
    };
    if field("format")? != CHECKPOINT_FORMAT {
        return Err(SairError::Config(format!(
            "unrecognized checkpoint format {:?}",
            field("format")?
        )));
    }
    let config: RunConfig = serde_json::from_str(&field("config")?)?;
    let config_hash = field("config_hash")?;
    let epochs_completed = field("epochs_completed")?
        .parse::<usize>()
        .map_err(|e| SairError::Config(format!("bad epochs_completed: {e}")))?;
    let adam_step = field("adam_step")?
        .parse::<u64>()
        .map_err(|e| SairError::Config(format!("bad adam_step: {e}")))?;

    let all = candle_core::safetensors::load_buffer(&bytes, device)?;
    let mut params = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, tensor) in all {
        if let Some(rest) = name.strip_prefix("param.") {
            params.insert(rest.to_string(), tensor);
        } else if let Some(rest) = name.strip_prefix("adam.m.") {
            m.insert(rest.to_string(), tensor);
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            v.insert(rest.to_string(), tensor);
        } else {
            return Err(SairError::Config(format!(
                "unexpected tensor {name} in checkpoint"
            )));
        }
    }
    if m.len() != v.len() {
        return Err(SairError::Config(
            "optimizer moment tensors are unpaired".into(),
        ));
    }
    let mut adam_moments = BTreeMap::new();
    for (name, mt) in m {
        let vt = v
            .remove(&name)
            .ok_or_else(|| SairError::Config(format!("missing adam.v.{name}")))?;
        adam_moments.insert(name, (mt, vt));
    }
    Ok(Checkpoint {
        params,
        adam_moments,
        adam_step,
        epochs_completed,
        config,
        config_hash,
    })
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub output_dir: PathBuf,
    pub epochs_completed: usize,
    pub steps: u64,
    /// Mean reconstruction L1 over the first epoch this invocation ran.
    pub first_epoch_l1: f64,
    /// Mean reconstruction L1 over the last epoch.
    pub final_epoch_l1: f64,
}

/// Load one masked training sample. Bucket choice, mask content, and query
/// sampling are all keyed by `(seed, epoch, index)`, so an epoch replays
/// identically regardless of history.
fn masked_training_sample(
    dataset: &Dataset,
    config: &RunConfig,
    epoch: usize,
    index: usize,
) -> Result<MaskedSample> {
    let clean = dataset.load(index)?;
    let (h, w) = clean.dims();
    let buckets = &config.masks.train_buckets;
    let mut bucket_rng = stream_rng(
        config.run.seed,
        &["train-bucket", &epoch.to_string(), &index.to_string()],
    );
    let bucket = buckets[rand::Rng::random_range(&mut bucket_rng, 0..buckets.len())];
    let source = MaskSource {
        kind: config.mask_kind()?,
        bucket,
        seed: derive_u64(
            config.run.seed,
            &["train-mask", &epoch.to_string(), &index.to_string()],
        ),
    };
    clean.apply_mask(sample_mask(&source, h, w)?)
}

pub fn run_training(config: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let device = Device::Cpu;
    let out_dir = config.output_dir();
    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| SairError::io(&ckpt_dir, e))?;
    std::fs::write(out_dir.join("config.json"), config.canonical_json()?)
        .map_err(|e| SairError::io(&out_dir, e))?;

    let params = Params::new(config.run.seed, TRAIN_DTYPE, &device);
    let model = build_model(&config.model_spec(), &params)?;
    let mut adam = Adam::new(config.train.lr).with_grad_clip(config.train.grad_clip);

    let mut start_epoch = 0usize;
    if let Some(path) = resume {
        let ckpt = load_checkpoint(path, &device)?;
        if ckpt.config_hash != config.hash() {
            return Err(SairError::Config(format!(
                "checkpoint at {} was produced by config {}, current config is {}",
                path.display(),
                &ckpt.config_hash[..8],
                config.short_hash()
            )));
        }
        let live: BTreeSet<String> = params
            .trainable()
            .into_iter()
            .map(|(name, _)| name)
            .collect();
        let stored: BTreeSet<String> = ckpt.params.keys().cloned().collect();
        if live != stored {
            return Err(SairError::Config(
                "checkpoint parameter set does not match the model".into(),
            ));
        }
        for (name, tensor) in &ckpt.params {
            params.load(name, tensor)?;
        }
        adam.load_state(ckpt.adam_step, ckpt.adam_moments);
        start_epoch = ckpt.epochs_completed;
    }

    let dataset = Dataset::open(config.dataset_spec(Split::Train))?;
    if dataset.is_empty() {
        return Err(SairError::Config("training split is empty".into()));
    }

    let log_path = out_dir.join("train_log.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| SairError::io(&log_path, e))?;

    let n = dataset.len();
    let mut first_epoch_l1 = f64::NAN;
    let mut final_epoch_l1 = f64::NAN;

    for epoch in start_epoch..config.train.epochs {
        let lr = lr_for_epoch(config.train.lr, epoch, config.train.lr_halve_every);
        adam.set_lr(lr);

        let mut order: Vec<usize> = (0..n).collect();
        let mut order_rng = stream_rng(config.run.seed, &["epoch-order", &epoch.to_string()]);
        for k in (1..order.len()).rev() {
            let pick = rand::Rng::random_range(&mut order_rng, 0..=k);
            order.swap(k, pick);
        }

        let mut epoch_l1 = 0.0;
        let mut epoch_steps = 0usize;
        for chunk in order.chunks(config.train.batch_size) {
            let samples: Vec<MaskedSample> = chunk
                .iter()
                .map(|&idx| masked_training_sample(&dataset, config, epoch, idx))
                .collect::<Result<_>>()?;
            let (h, w) = samples[0].dims();
            let mut query_rng = stream_rng(
                config.run.seed,
                &["queries", &epoch.to_string(), &chunk[0].to_string()],
            );
            let batch = make_batch(
                &samples,
                config.train.query_count.min(h * w),
                &mut query_rng,
                TRAIN_DTYPE,
                &device,
            )?;
            let loss = train_step(
                &model,
                &params,
                &mut adam,
                &batch,
                config.train.aux_cosine_weight,
            )?;

            if !loss.total.is_finite() {
                let dump = out_dir.join("nonfinite_dump.json");
                write_nonfinite_dump(&dump, &params, adam.step_count(), epoch, lr, &loss)?;
                return Err(SairError::NonFiniteLoss {
                    step: adam.step_count(),
                    dump,
                });
            }

            let record = StepRecord {
                step: adam.step_count(),
                epoch,
                loss: loss.total,
                l1: loss.l1,
                lr,
            };
            writeln!(log, "{}", serde_json::to_string(&record)?)
                .map_err(|e| SairError::io(&log_path, e))?;
            epoch_l1 += loss.l1;
            epoch_steps += 1;
        }

        let mean = epoch_l1 / epoch_steps.max(1) as f64;
        if first_epoch_l1.is_nan() {
            first_epoch_l1 = mean;
        }
        final_epoch_l1 = mean;

        let completed = epoch + 1;
        if config.train.checkpoint_every > 0
            && completed % config.train.checkpoint_every == 0
            && completed < config.train.epochs
        {
            save_checkpoint(
                &ckpt_dir.join(format!("epoch_{completed}.safetensors")),
                &params,
                &adam,
                completed,
                config,
            )?;
        }
    }

    let final_path = ckpt_dir.join("final.safetensors");
    save_checkpoint(&final_path, &params, &adam, config.train.epochs, config)?;
    log.flush().map_err(|e| SairError::io(&log_path, e))?;

    Ok(TrainOutcome {
        checkpoint: final_path,
        output_dir: out_dir,
        epochs_completed: config.train.epochs,
        steps: adam.step_count(),
        first_epoch_l1,
        final_epoch_l1,
    })
}

/// Rebuild a model (evaluation-ready) from a checkpoint alone.
pub fn model_from_checkpoint(ckpt: &Checkpoint, device: &Device) -> Result<(SairModel, Params)> {
    let params = Params::new(ckpt.config.run.seed, TRAIN_DTYPE, device);
    let model = build_model(&ckpt.config.model_spec(), &params)?;
    for (name, tensor) in &ckpt.params {
        params.load(name, tensor)?;
    }
    Ok((model, params))
}

fn write_nonfinite_dump(
    path: &Path,
    params: &Params,
    step: u64,
    epoch: usize,
    lr: f64,
    loss: &StepLoss,
) -> Result<()> {
    let mut norms = BTreeMap::new();
    for (name, var) in params.trainable() {
        let norm = var
            .as_tensor()
            .to_dtype(DType::F64)?
            .sqr()?
            .sum_all()?
            .to_scalar::<f64>()?
            .sqrt();
        norms.insert(name, norm);
    }
    let dump = serde_json::json!({
        "step": step,
        "epoch": epoch,
        "lr": lr,
        "loss_total": loss.total,
        "loss_l1": loss.l1,
        "param_l2_norms": norms,
    });
    std::fs::write(path, serde_json::to_string_pretty(&dump)?)
        .map_err(|e| SairError::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    #[test]
    fn lr_schedule_halves_on_boundaries() {
        assert_eq!(lr_for_epoch(1e-4, 0, 100), 1e-4);
        assert_eq!(lr_for_epoch(1e-4, 99, 100), 1e-4);
        assert_eq!(lr_for_epoch(1e-4, 100, 100), 5e-5);
        assert_eq!(lr_for_epoch(1e-4, 199, 100), 5e-5);
        assert_eq!(lr_for_epoch(1e-4, 200, 100), 2.5e-5);
        assert_eq!(lr_for_epoch(1e-4, 250, 100), 2.5e-5);
        assert_eq!(lr_for_epoch(3e-3, 1000, 0), 3e-3);
    }

    fn tiny_config(out: &std::path::Path) -> RunConfig {
        let mut c = RunConfig::default();
        c.run.seed = 5;
        c.run.output_root = Some(out.to_path_buf());
        c.dataset.image_size = 16;
        c.dataset.toy_train_count = 2;
        c.dataset.toy_test_count = 1;
        c.model.sem_channels = 8;
        c.model.hidden = 16;
        c.train.epochs = 2;
        c.train.batch_size = 2;
        c.train.query_count = 48;
        c.train.checkpoint_every = 1;
        c
    }

    fn tensor_bits(t: &Tensor) -> Vec<u32> {
        t.to_dtype(DType::F32)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap()
            .into_iter()
            .map(f32::to_bits)
            .collect()
    }

    #[test]
    fn training_resumed_from_a_checkpoint_matches_the_straight_run() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());

        let straight = run_training(&config, None).unwrap();
        assert!(straight.first_epoch_l1.is_finite());
        let device = Device::Cpu;
        let full = load_checkpoint(&straight.checkpoint, &device).unwrap();
        assert_eq!(full.epochs_completed, 2);

        // The intermediate checkpoint exists because checkpoint_every = 1.
        let mid_path = straight
            .output_dir
            .join("checkpoints/epoch_1.safetensors");
        let resumed = run_training(&config, Some(&mid_path)).unwrap();
        let redone = load_checkpoint(&resumed.checkpoint, &device).unwrap();

        assert_eq!(full.params.len(), redone.params.len());
        for (name, t) in &full.params {
            assert_eq!(
                tensor_bits(t),
                tensor_bits(&redone.params[name]),
                "parameter {name} diverged after resume"
            );
        }
        for (name, (m, v)) in &full.adam_moments {
            let (rm, rv) = &redone.adam_moments[name];
            assert_eq!(tensor_bits(m), tensor_bits(rm), "adam m {name}");
            assert_eq!(tensor_bits(v), tensor_bits(rv), "adam v {name}");
        }
        assert_eq!(full.adam_step, redone.adam_step);
    }

    #[test]
    fn resume_rejects_a_different_config() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());
        let outcome = run_training(&config, None).unwrap();

        let mut other = config.clone();
        other.run.seed = 6;
        let err = run_training(&other, Some(&outcome.checkpoint)).unwrap_err();
        assert!(matches!(err, SairError::Config(_)));
        assert!(err.to_string().contains("config"));
    }

    #[test]
    fn step_log_is_parseable_and_monotonic() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());
        let outcome = run_training(&config, None).unwrap();

        let text =
            std::fs::read_to_string(outcome.output_dir.join("train_log.jsonl")).unwrap();
        let records: Vec<StepRecord> = text
            .lines()
            .map(|line| serde_json::from_str(line).unwrap())
            .collect();
        assert_eq!(records.len() as u64, outcome.steps);
        for (k, r) in records.iter().enumerate() {
            assert_eq!(r.step, k as u64 + 1);
            assert!(r.loss.is_finite());
            assert!(r.lr > 0.0);
            // No auxiliary term configured: the optimized loss is the
            // reconstruction loss.
            assert_eq!(r.loss, r.l1);
        }
    }

    #[test]
    fn checkpoints_round_trip_params_and_optimizer_state() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());
        let outcome = run_training(&config, None).unwrap();

        let device = Device::Cpu;
        let ckpt = load_checkpoint(&outcome.checkpoint, &device).unwrap();
        assert_eq!(ckpt.config_hash, config.hash());
        assert_eq!(ckpt.config, config);
        assert!(!ckpt.params.is_empty());
        assert_eq!(ckpt.params.len(), ckpt.adam_moments.len());

        let (_model, params) = model_from_checkpoint(&ckpt, &device).unwrap();
        for (name, stored) in &ckpt.params {
            let live = params.tensor(name).expect("checkpoint name exists in model");
            assert_eq!(tensor_bits(stored), tensor_bits(&live));
        }
    }

    #[test]
    fn aux_term_increases_total_loss_but_reports_l1_separately() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(dir.path());
        config.train.epochs = 1;
        config.train.aux_cosine_weight = 0.5;
        let outcome = run_training(&config, None).unwrap();
        let text =
            std::fs::read_to_string(outcome.output_dir.join("train_log.jsonl")).unwrap();
        let r: StepRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(r.loss >= r.l1, "total {} vs l1 {}", r.loss, r.l1);
    }
}
