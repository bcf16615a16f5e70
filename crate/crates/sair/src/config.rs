//! Run configuration: one TOML file describes dataset, masks, model,
//! training, and evaluation. The canonical JSON serialization of the fully
//! defaulted config is hashed; the hash namespaces every output directory,
//! so two runs collide only when their configs are identical.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetKind, DatasetSpec, Split};
use crate::error::{Result, SairError};
use crate::masks::{MaskKind, RatioBucket};
use crate::model::{AblationFlags, EncoderVariant, ModelSpec, SemanticVariant};

/// Environment variable consulted for the default output root.
pub const OUTPUT_ROOT_ENV: &str = "SAIR_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Overrides the `SAIR_OUTPUT_ROOT` environment variable and the
    /// `./runs` fallback.
    pub output_root: Option<PathBuf>,
    /// Readable prefix for the output directory name.
    pub name: Option<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            output_root: None,
            name: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub root: Option<PathBuf>,
    pub image_size: usize,
    pub with_labels: bool,
    pub toy_train_count: usize,
    pub toy_test_count: usize,
    pub toy_seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            kind: DatasetKind::Toy,
            root: None,
            image_size: 32,
            with_labels: true,
            toy_train_count: 8,
            toy_test_count: 4,
            toy_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKindName {
    Synthetic,
    FileCorpus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSection {
    pub kind: MaskKindName,
    pub corpus_dir: Option<PathBuf>,
    /// Buckets sampled uniformly during training.
    pub train_buckets: Vec<RatioBucket>,
}

impl Default for MaskSection {
    fn default() -> Self {
        MaskSection {
            kind: MaskKindName::Synthetic,
            corpus_dir: None,
            train_buckets: RatioBucket::all().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub semantic_variant: SemanticVariant,
    pub encoder_variant: EncoderVariant,
    pub use_sir: bool,
    pub use_appearance: bool,
    pub zero_semantic: bool,
    pub sem_channels: usize,
    pub hidden: usize,
    pub clip_weights: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            semantic_variant: SemanticVariant::Surrogate,
            encoder_variant: EncoderVariant::Table3,
            use_sir: true,
            use_appearance: true,
            zero_semantic: false,
            sem_channels: 64,
            hidden: 256,
            clip_weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epoch interval for halving the learning rate; 0 disables decay.
    pub lr_halve_every: usize,
    /// Query pixels sampled per image per step.
    pub query_count: usize,
    /// Epoch interval for intermediate checkpoints; 0 keeps only the final
    /// one.
    pub checkpoint_every: usize,
    pub grad_clip: Option<f64>,
    /// Weight of the auxiliary field-consistency term (cosine against the
    /// clean-image features); 0 trains on reconstruction alone.
    pub aux_cosine_weight: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 200,
            batch_size: 16,
            lr: 1e-4,
            lr_halve_every: 100,
            query_count: 2048,
            checkpoint_every: 0,
            grad_clip: None,
            aux_cosine_weight: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorMode {
    /// Per-category feature prototypes averaged over clean training images.
    Calibrated,
    /// Seeded random unit anchors.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub buckets: Vec<RatioBucket>,
    pub max_samples: Option<usize>,
    /// Emit per-bucket comparison grids next to the reports.
    pub figures: bool,
    /// Paste known pixels over predictions before scoring.
    pub composite: bool,
    pub lpips_weights: Option<PathBuf>,
    pub probe_anchors: AnchorMode,
    pub probe_calibration_images: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            buckets: RatioBucket::all().to_vec(),
            max_samples: None,
            figures: false,
            composite: false,
            lpips_weights: None,
            probe_anchors: AnchorMode::Calibrated,
            probe_calibration_images: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub dataset: DatasetSection,
    pub masks: MaskSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SairError::io(path, e))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| SairError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.query_count == 0 {
            return Err(SairError::Config(
                "train.epochs, train.batch_size and train.query_count must be positive".into(),
            ));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(SairError::Config(format!(
                "train.lr must be positive and finite, got {}",
                t.lr
            )));
        }
        if t.aux_cosine_weight < 0.0 || !t.aux_cosine_weight.is_finite() {
            return Err(SairError::Config(format!(
                "train.aux_cosine_weight must be nonnegative, got {}",
                t.aux_cosine_weight
            )));
        }
        if let Some(clip) = t.grad_clip {
            if !(clip > 0.0 && clip.is_finite()) {
                return Err(SairError::Config(format!(
                    "train.grad_clip must be positive when set, got {clip}"
                )));
            }
        }
        if self.masks.train_buckets.is_empty() || self.eval.buckets.is_empty() {
            return Err(SairError::Config(
                "mask bucket lists must not be empty".into(),
            ));
        }
        if self.masks.kind == MaskKindName::FileCorpus && self.masks.corpus_dir.is_none() {
            return Err(SairError::Config(
                "masks.kind = \"file-corpus\" needs masks.corpus_dir".into(),
            ));
        }
        self.ablation_flags().validate()?;
        if self.model.semantic_variant == SemanticVariant::ClipAdapter
            && !self.model.zero_semantic
            && self.model.clip_weights.is_none()
        {
            return Err(SairError::Config(
                "model.semantic_variant = \"clip-adapter\" needs model.clip_weights".into(),
            ));
        }
        if self.model.sem_channels == 0 || self.model.hidden == 0 {
            return Err(SairError::Config(
                "model.sem_channels and model.hidden must be positive".into(),
            ));
        }
        let size = self.dataset.image_size;
        if size == 0 {
            return Err(SairError::Config("dataset.image_size must be positive".into()));
        }
        // The appearance trunk downsamples twice; the semantic encoder has
        // its own patch factor.
        if size % 4 != 0 {
            return Err(SairError::Config(format!(
                "dataset.image_size must be divisible by 4, got {size}"
            )));
        }
        if !self.model.zero_semantic {
            let factor = match self.model.semantic_variant {
                SemanticVariant::Surrogate => crate::semantic::SURROGATE_PATCH_FACTOR,
                SemanticVariant::ClipAdapter => 16,
            };
            if size % factor != 0 {
                return Err(SairError::Config(format!(
                    "dataset.image_size must be divisible by the semantic patch \
                     factor {factor}, got {size}"
                )));
            }
        }
        if self.eval.probe_calibration_images == 0 {
            return Err(SairError::Config(
                "eval.probe_calibration_images must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Canonical serialization used for hashing: every field present, fixed
    /// order, no whitespace variance.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Hex sha256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let json = self
            .canonical_json()
            .expect("config serialization is infallible");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        format!("{:x}", h.finalize())
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..8].to_string()
    }

    pub fn dataset_spec(&self, split: Split) -> DatasetSpec {
        DatasetSpec {
            kind: self.dataset.kind,
            root: self.dataset.root.clone(),
            split,
            image_size: self.dataset.image_size,
            with_labels: self.dataset.with_labels,
            toy_count: match split {
                Split::Train => self.dataset.toy_train_count,
                Split::Test => self.dataset.toy_test_count,
            },
            toy_seed: self.dataset.toy_seed,
        }
    }

    pub fn mask_kind(&self) -> Result<MaskKind> {
        match self.masks.kind {
            MaskKindName::Synthetic => Ok(MaskKind::Synthetic),
            MaskKindName::FileCorpus => {
                let dir = self.masks.corpus_dir.clone().ok_or_else(|| {
                    SairError::Config("masks.corpus_dir is required for file-corpus".into())
                })?;
                Ok(MaskKind::FileCorpus { dir })
            }
        }
    }

    pub fn ablation_flags(&self) -> AblationFlags {
        AblationFlags {
            use_sir: self.model.use_sir,
            use_appearance: self.model.use_appearance,
            zero_semantic: self.model.zero_semantic,
            encoder_variant: self.model.encoder_variant,
            semantic_variant: self.model.semantic_variant,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            flags: self.ablation_flags(),
            sem_channels: self.model.sem_channels,
            hidden: self.model.hidden,
            clip_weights: self.model.clip_weights.clone(),
        }
    }

    /// Output directory for this config: `<root>/<name->hash8`. Root
    /// precedence: config file, then `SAIR_OUTPUT_ROOT`, then `./runs`.
    pub fn output_dir(&self) -> PathBuf {
        let root = self
            .run
            .output_root
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        let leaf = match &self.run.name {
            Some(name) => format!("{name}-{}", self.short_hash()),
            None => self.short_hash(),
        };
        root.join(leaf)
    }
}
