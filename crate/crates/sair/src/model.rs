//! Model assembly: the trained graph variants (full model, completion
//! bypass, semantic-only, appearance-only, encoder swap) behind one build
//! point, plus dense reconstruction.

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;

use crate::appearance::{
    air_query, encode_appearance, AirDecoder, AppearanceEncoder, AppearanceEncoderVariant,
    EdsrStyleEncoder, APPEARANCE_CHANNELS,
};
use crate::clip::ClipAdapter;
use crate::coord::{CoordinateGrid, EnsembleIndex, QueryBatch};
use crate::data::MaskedSample;
use crate::error::{Result, SairError};
use crate::nn::Params;
use crate::semantic::{
    encode_semantic, sir_dense, upsample_raw, SemanticEncoder, SemanticFeatureMap, SirDecoder,
    SurrogateEncoder,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderVariant {
    Table3,
    EdsrStyle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SemanticVariant {
    Surrogate,
    ClipAdapter,
}

/// Which branches of the graph exist and how they are wired.
///
/// `use_sir = false` bypasses completion (raw bilinear upsampling of the
/// masked semantic grid feeds the color decoder). `use_appearance = false`
/// drops the appearance branch (color from semantics and offsets alone).
/// `zero_semantic = true` is the same-budget appearance-only baseline: the
/// semantic slice keeps its width but is identically zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AblationFlags {
    pub use_sir: bool,
    pub use_appearance: bool,
    pub zero_semantic: bool,
    pub encoder_variant: EncoderVariant,
    pub semantic_variant: SemanticVariant,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_sir: true,
            use_appearance: true,
            zero_semantic: false,
            encoder_variant: EncoderVariant::Table3,
            semantic_variant: SemanticVariant::Surrogate,
        }
    }
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if self.zero_semantic && !self.use_appearance {
            return Err(SairError::InvalidArgument(
                "zeroed semantics with no appearance branch leaves the decoder only offsets"
                    .into(),
            ));
        }
        if self.zero_semantic && self.use_sir {
            return Err(SairError::InvalidArgument(
                "zero_semantic requires use_sir = false (there is nothing to complete)".into(),
            ));
        }
        Ok(())
    }
}

/// Resolved architecture description handed to `build_model`.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub flags: AblationFlags,
    /// Semantic channels for the surrogate/zeroed paths; the frozen adapter
    /// dictates its own width.
    pub sem_channels: usize,
    pub hidden: usize,
    pub clip_weights: Option<PathBuf>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            flags: AblationFlags::default(),
            sem_channels: 64,
            hidden: 256,
            clip_weights: None,
        }
    }
}

#[derive(Debug)]
pub struct SairModel {
    flags: AblationFlags,
    semantic_encoder: Option<SemanticEncoder>,
    sir: Option<SirDecoder>,
    appearance_encoder: Option<AppearanceEncoderVariant>,
    air: AirDecoder,
    sem_channels: usize,
    dtype: DType,
    device: Device,
}

/// Assemble the graph described by `spec`, drawing trainable parameters
/// from `params`. Frozen weights (the pretrained adapter) never enter the
/// store, so the optimizer set stays correct automatically.
pub fn build_model(spec: &ModelSpec, params: &Params) -> Result<SairModel> {
    spec.flags.validate()?;
    let semantic_encoder = if spec.flags.zero_semantic {
        None
    } else {
        Some(match spec.flags.semantic_variant {
            SemanticVariant::Surrogate => SemanticEncoder::Surrogate(SurrogateEncoder::new(
                params,
                "sem",
                spec.sem_channels,
            )?),
            SemanticVariant::ClipAdapter => {
                let path = spec.clip_weights.as_ref().ok_or_else(|| {
                    SairError::Config(
                        "clip-adapter variant needs model.clip_weights in the config".into(),
                    )
                })?;
                SemanticEncoder::ClipAdapter(ClipAdapter::load(path, params.device())?)
            }
        })
    };
    let sem_channels = semantic_encoder
        .as_ref()
        .map(|e| e.out_channels())
        .unwrap_or(spec.sem_channels);
    let sir = match (&semantic_encoder, spec.flags.use_sir) {
        (Some(_), true) => Some(SirDecoder::new(params, "sir", sem_channels, spec.hidden)?),
        _ => None,
    };
    let appearance_encoder = if spec.flags.use_appearance {
        Some(match spec.flags.encoder_variant {
            EncoderVariant::Table3 => {
                AppearanceEncoderVariant::Table3(AppearanceEncoder::new(params, "app")?)
            }
            EncoderVariant::EdsrStyle => {
                AppearanceEncoderVariant::EdsrStyle(EdsrStyleEncoder::new(params, "app")?)
            }
        })
    } else {
        None
    };
    let air = AirDecoder::new(
        params,
        "air",
        if spec.flags.use_appearance {
            APPEARANCE_CHANNELS
        } else {
            0
        },
        sem_channels,
        spec.hidden,
    )?;
    Ok(SairModel {
        flags: spec.flags,
        semantic_encoder,
        sir,
        appearance_encoder,
        air,
        sem_channels,
        dtype: params.dtype(),
        device: params.device().clone(),
    })
}

impl SairModel {
    pub fn flags(&self) -> AblationFlags {
        self.flags
    }

    pub fn sem_channels(&self) -> usize {
        self.sem_channels
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn semantic_encoder(&self) -> Option<&SemanticEncoder> {
        self.semantic_encoder.as_ref()
    }

    pub fn sir_decoder(&self) -> Option<&SirDecoder> {
        self.sir.as_ref()
    }

    pub fn air_decoder(&self) -> &AirDecoder {
        &self.air
    }

    /// Encode the masked batch into the low-resolution semantic grid.
    /// `None` when the semantic branch is zeroed out.
    pub fn semantic_map(
        &self,
        images: &Tensor,
        masks: &Tensor,
    ) -> Result<Option<SemanticFeatureMap>> {
        match &self.semantic_encoder {
            None => Ok(None),
            Some(enc) => Ok(Some(encode_semantic(images, masks, enc)?)),
        }
    }

    /// Dense semantic field at `out_h`×`out_w`: completed through the
    /// decoder, bilinearly upsampled raw (completion bypass), or zeros.
    pub fn semantic_field(
        &self,
        images: &Tensor,
        masks: &Tensor,
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor> {
        let (b, _, _, _) = images.dims4()?;
        match self.semantic_map(images, masks)? {
            None => Ok(Tensor::zeros(
                (b, self.sem_channels, out_h, out_w),
                self.dtype,
                &self.device,
            )?),
            Some(map) => match &self.sir {
                Some(sir) => sir_dense(&map, sir, out_h, out_w),
                None => upsample_raw(&map, out_h, out_w),
            },
        }
    }

    /// Training-path forward: colors at the indexed queries, `[n, 3]`.
    /// The semantic field is evaluated densely at the appearance grid's
    /// native centers once per batch and gathered from there.
    pub fn forward_queries(
        &self,
        images: &Tensor,
        masks: &Tensor,
        index: &EnsembleIndex,
    ) -> Result<Tensor> {
        let (_b, _c, h, w) = images.dims4()?;
        let sem_field = self.semantic_field(images, masks, h, w)?;
        let app = match &self.appearance_encoder {
            Some(enc) => Some(encode_appearance(images, masks, enc)?),
            None => None,
        };
        air_query(app.as_ref(), &sem_field, &self.air, index)
    }

    /// Dense reconstruction at the requested resolution. Both missing and
    /// valid regions are predicted; `composite` pastes known valid pixels
    /// back over the prediction (nearest-neighbor lifted when scaling).
    pub fn reconstruct(
        &self,
        sample: &MaskedSample,
        out_h: usize,
        out_w: usize,
        composite: bool,
    ) -> Result<Array3<f64>> {
        let (h, w) = sample.dims();
        let images = sample.image_tensor(self.dtype, &self.device)?;
        let masks = sample.mask_tensor(self.dtype, &self.device)?;
        let sem_field = self.semantic_field(&images, &masks, h, w)?;
        let app = match &self.appearance_encoder {
            Some(enc) => Some(encode_appearance(&images, &masks, enc)?),
            None => None,
        };

        let grid = CoordinateGrid::new(h, w)?;
        let out_grid = CoordinateGrid::new(out_h, out_w)?;
        let centers = out_grid.centers();
        let mut colors = Vec::with_capacity(out_h * out_w * 3);
        // Chunked dense evaluation keeps peak memory bounded at large
        // output rasters.
        for chunk in centers.chunks(16384) {
            let qb = QueryBatch::build(grid, chunk.to_vec())?;
            let index = EnsembleIndex::new(&[&qb], self.dtype, &self.device)?;
            let out = air_query(app.as_ref(), &sem_field, &self.air, &index)?;
            colors.extend(
                out.to_dtype(DType::F64)?
                    .flatten_all()?
                    .to_vec1::<f64>()?,
            );
        }
        let mut image = Array3::from_shape_vec((out_h, out_w, 3), colors)
            .expect("chunked query output covers the raster");
        image.mapv_inplace(|v| v.clamp(0.0, 1.0));

        if composite {
            for i in 0..out_h {
                let si = i * h / out_h;
                for j in 0..out_w {
                    let sj = j * w / out_w;
                    if sample.mask()[[si, sj]] == 0 {
                        for ch in 0..3 {
                            image[[i, j, ch]] = sample.image()[[si, sj, ch]];
                        }
                    }
                }
            }
        }
        Ok(image)
    }
}
