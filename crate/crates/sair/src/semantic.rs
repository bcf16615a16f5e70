//! Semantic pipeline: dense text-aligned embeddings from a masked image and
//! their continuous completion. The encoder produces a low-resolution grid
//! `Z^sem`; the SIR decoder fills it at arbitrary coordinates from the four
//! surrounding cells, their fractional mask occupancy, and signed offsets.

use candle_core::Tensor;

use crate::clip::ClipAdapter;
use crate::coord::{
    local_ensemble_query, CoordinateGrid, EnsembleIndex, QueryBatch,
};
use crate::error::{Result, SairError};
use crate::nn::{Conv2d, Linear, Mlp, Params};

/// Low-resolution semantic grid with the mask pooled to the same resolution.
#[derive(Debug)]
pub struct SemanticFeatureMap {
    /// `[batch, channels, h, w]`.
    pub features: Tensor,
    /// `[batch, 1, h, w]`, fraction of missing pixels per cell, in [0, 1].
    pub mask: Tensor,
    pub downsample_factor: usize,
}

impl SemanticFeatureMap {
    pub fn batch(&self) -> Result<usize> {
        Ok(self.features.dims4()?.0)
    }

    pub fn channels(&self) -> Result<usize> {
        Ok(self.features.dims4()?.1)
    }

    pub fn grid(&self) -> Result<CoordinateGrid> {
        let (_, _, h, w) = self.features.dims4()?;
        CoordinateGrid::new(h, w)
    }
}

/// Reshape `[B, C, h, w]` into ensemble rows `[B·h·w, C]`, row-major per map.
pub fn flatten_cells(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.permute((0, 2, 3, 1))?.reshape((b * h * w, c))?)
}

/// Inverse of `flatten_cells` for a known raster shape.
pub fn unflatten_cells(x: &Tensor, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let (rows, c) = x.dims2()?;
    if rows != b * h * w {
        return Err(SairError::shape(
            "unflatten cells",
            format!("{} rows", b * h * w),
            format!("{rows} rows"),
        ));
    }
    Ok(x.reshape((b, h, w, c))?.permute((0, 3, 1, 2))?.contiguous()?)
}

/// Area-average pooling of a full-resolution mask down to the feature grid.
/// Each output cell is the fraction of missing pixels in its patch.
pub fn downsample_mask(mask: &Tensor, factor: usize) -> Result<Tensor> {
    let (_b, _c, h, w) = mask.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(SairError::shape(
            "mask downsampling",
            format!("dims divisible by {factor}"),
            format!("{h}x{w}"),
        ));
    }
    Ok(mask.avg_pool2d(factor)?)
}

/// Trainable desk-scale semantic encoder: a small strided conv net with
/// patch factor 4 over `[masked RGB ‖ mask ‖ cell-center y ‖ x]` input,
/// fused with a global pooled branch so features inside large holes still
/// see scene context (a stand-in for the attention-based encoder's global
/// receptive field).
#[derive(Debug)]
pub struct SurrogateEncoder {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    global: Linear,
    fuse: Conv2d,
    out_channels: usize,
}

pub const SURROGATE_PATCH_FACTOR: usize = 4;

impl SurrogateEncoder {
    pub fn new(params: &Params, name: &str, out_channels: usize) -> Result<Self> {
        Ok(SurrogateEncoder {
            conv1: Conv2d::new(params, &format!("{name}.conv1"), 6, 32, 3, 2, 1)?,
            conv2: Conv2d::new(params, &format!("{name}.conv2"), 32, 64, 3, 2, 1)?,
            conv3: Conv2d::new(params, &format!("{name}.conv3"), 64, 64, 3, 1, 1)?,
            global: Linear::new(params, &format!("{name}.global"), 64, 64)?,
            fuse: Conv2d::new(params, &format!("{name}.fuse"), 128, out_channels, 1, 1, 0)?,
            out_channels,
        })
    }

    pub fn forward(&self, images: &Tensor, masks: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(SairError::shape("surrogate encoder", "3 channels", c));
        }
        let dev = images.device();
        let dtype = images.dtype();
        let grid = CoordinateGrid::new(h, w)?;
        let mut yy = Vec::with_capacity(h * w);
        let mut xx = Vec::with_capacity(h * w);
        for p in grid.centers() {
            yy.push(p.y);
            xx.push(p.x);
        }
        let coords = |v: Vec<f64>| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, (1, 1, h, w), dev)?
                .to_dtype(dtype)?
                .broadcast_as((b, 1, h, w))?
                .contiguous()?)
        };
        let x = Tensor::cat(&[images, masks, &coords(yy)?, &coords(xx)?], 1)?;
        let x = self.conv1.forward(&x)?.relu()?;
        let x = self.conv2.forward(&x)?.relu()?;
        let local = self.conv3.forward(&x)?.relu()?;

        let (_, _, fh, fw) = local.dims4()?;
        let pooled = local.mean(3)?.mean(2)?;
        let ctx = self.global.forward(&pooled)?.relu()?;
        let ctx = ctx
            .reshape((b, 64, 1, 1))?
            .broadcast_as((b, 64, fh, fw))?
            .contiguous()?;
        Ok(self.fuse.forward(&Tensor::cat(&[&local, &ctx], 1)?)?)
    }
}

/// The semantic encoder variants behind one dispatch point.
#[derive(Debug)]
pub enum SemanticEncoder {
    Surrogate(SurrogateEncoder),
    ClipAdapter(ClipAdapter),
}

impl SemanticEncoder {
    pub fn out_channels(&self) -> usize {
        match self {
            SemanticEncoder::Surrogate(s) => s.out_channels,
            SemanticEncoder::ClipAdapter(c) => c.out_channels(),
        }
    }

    pub fn patch_factor(&self) -> usize {
        match self {
            SemanticEncoder::Surrogate(_) => SURROGATE_PATCH_FACTOR,
            SemanticEncoder::ClipAdapter(c) => c.patch_size(),
        }
    }

    /// Dtype the encoder's weights live in; inputs must match it.
    pub fn dtype(&self) -> candle_core::DType {
        match self {
            SemanticEncoder::Surrogate(s) => s.conv1.dtype(),
            SemanticEncoder::ClipAdapter(c) => c.dtype(),
        }
    }

    /// Frozen encoders stay out of the optimizer parameter set.
    pub fn is_trainable(&self) -> bool {
        matches!(self, SemanticEncoder::Surrogate(_))
    }

    pub fn encode(&self, images: &Tensor, masks: &Tensor) -> Result<Tensor> {
        match self {
            SemanticEncoder::Surrogate(s) => s.forward(images, masks),
            SemanticEncoder::ClipAdapter(c) => c.encode(images),
        }
    }
}

/// Encode a masked image into a `SemanticFeatureMap`. `images` must already
/// have missing pixels zeroed; `masks` is `[B, 1, H, W]` with 1 = missing.
pub fn encode_semantic(
    images: &Tensor,
    masks: &Tensor,
    encoder: &SemanticEncoder,
) -> Result<SemanticFeatureMap> {
    let (b, _c, h, w) = images.dims4()?;
    let (mb, mc, mh, mw) = masks.dims4()?;
    if (mb, mc, mh, mw) != (b, 1, h, w) {
        return Err(SairError::shape(
            "semantic encoding mask",
            format!("{b}x1x{h}x{w}"),
            format!("{mb}x{mc}x{mh}x{mw}"),
        ));
    }
    let factor = encoder.patch_factor();
    if h % factor != 0 || w % factor != 0 {
        return Err(SairError::shape(
            "semantic encoding",
            format!("dims divisible by {factor}"),
            format!("{h}x{w}"),
        ));
    }
    let features = encoder.encode(images, masks)?;
    let (_, fc, fh, fw) = features.dims4()?;
    debug_assert_eq!((fh, fw), (h / factor, w / factor));
    debug_assert_eq!(fc, encoder.out_channels());
    Ok(SemanticFeatureMap {
        features,
        mask: downsample_mask(masks, factor)?,
        downsample_factor: factor,
    })
}

/// Completion decoder `f_θ`: per-neighbor input `[z_q ‖ M[q] ‖ offset]`
/// (dimension c+3), output a completed c-vector.
#[derive(Debug)]
pub struct SirDecoder {
    mlp: Mlp,
    channels: usize,
}

impl SirDecoder {
    pub fn new(params: &Params, name: &str, channels: usize, hidden: usize) -> Result<Self> {
        let dims = [channels + 3, hidden, hidden, hidden, channels];
        Ok(SirDecoder {
            mlp: Mlp::new(params, name, &dims)?,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn input_dim(&self) -> usize {
        self.channels + 3
    }

    fn decode(&self, features: &Tensor, offsets: &Tensor) -> Result<Tensor> {
        self.mlp.forward(&Tensor::cat(&[features, offsets], 1)?)
    }
}

/// Core of the semantic completion query, generic over the decode so tests
/// can stub it. `decode` maps `([n·4, c+1] cell features ‖ mask, [n·4, 2]
/// offsets)` to `[n·4, c]`.
pub fn sir_query_with<F>(
    map: &SemanticFeatureMap,
    index: &EnsembleIndex,
    decode: F,
) -> Result<Tensor>
where
    F: Fn(&Tensor, &Tensor) -> Result<Tensor>,
{
    let grid = map.grid()?;
    if index.grid() != grid {
        return Err(SairError::shape(
            "sir query",
            format!("{}x{} grid", grid.height(), grid.width()),
            format!("{}x{}", index.grid().height(), index.grid().width()),
        ));
    }
    let with_mask = Tensor::cat(&[&map.features, &map.mask], 1)?;
    let rows = flatten_cells(&with_mask)?;
    local_ensemble_query(&rows, index, |feat, off, _cell| decode(feat, off))
}

/// Completed semantic embedding at each query (Eq.-style area ensemble over
/// the decoded neighbors).
pub fn sir_query(
    map: &SemanticFeatureMap,
    decoder: &SirDecoder,
    index: &EnsembleIndex,
) -> Result<Tensor> {
    sir_query_with(map, index, |f, o| decoder.decode(f, o))
}

/// Dense completion on an `out_h`×`out_w` raster: `[B, c, out_h, out_w]`.
pub fn sir_dense(
    map: &SemanticFeatureMap,
    decoder: &SirDecoder,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    let b = map.batch()?;
    let qb = QueryBatch::dense(map.grid()?, out_h, out_w)?;
    let index = EnsembleIndex::shared(b, &qb, map.features.dtype(), map.features.device())?;
    let rows = sir_query(map, decoder, &index)?;
    unflatten_cells(&rows, b, out_h, out_w)
}

/// Naive completion bypass: bilinear upsampling of the raw masked features,
/// no decoder, no mask channel.
pub fn upsample_raw(map: &SemanticFeatureMap, out_h: usize, out_w: usize) -> Result<Tensor> {
    let b = map.batch()?;
    let qb = QueryBatch::dense(map.grid()?, out_h, out_w)?;
    let index = EnsembleIndex::shared(b, &qb, map.features.dtype(), map.features.device())?;
    let rows = flatten_cells(&map.features)?;
    let out = local_ensemble_query(&rows, &index, crate::coord::identity_decode)?;
    unflatten_cells(&out, b, out_h, out_w)
}

/// Pass-through decode stub: drop the mask column, ignore offsets. Turns
/// `sir_query` into plain interpolation of `Z^sem` for tests.
pub fn passthrough_decode(channels: usize) -> impl Fn(&Tensor, &Tensor) -> Result<Tensor> {
    move |features: &Tensor, _offsets: &Tensor| Ok(features.narrow(1, 0, channels)?)
}
