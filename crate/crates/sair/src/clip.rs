//! Frozen ViT adapter producing dense text-aligned embeddings.
//!
//! The image tower runs as published except for its final block, which is
//! rewired for dense output: the attention query/key paths are dropped and
//! the value and output projections are applied per token (equivalently,
//! 1×1 convolutions over the token grid), followed by the final norm and
//! the joint-space projection. No parameters are added; the skipped ones
//! are the last block's query/key projections and its MLP half.
//!
//! Weights load from a safetensors file with torch-style `[out, in]` linear
//! layouts under these names (`{i}` = block index):
//! `visual.patch_embed.weight`, `visual.class_embedding`,
//! `visual.positional_embedding`, `visual.ln_pre.{weight,bias}`,
//! `visual.blocks.{i}.ln_1.{weight,bias}`,
//! `visual.blocks.{i}.attn.{q,k,v,out}_proj.{weight,bias}`,
//! `visual.blocks.{i}.ln_2.{weight,bias}`,
//! `visual.blocks.{i}.mlp.{fc1,fc2}.{weight,bias}`,
//! `visual.ln_post.{weight,bias}`, `visual.proj`.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SairError};
use crate::nn::layer_norm;

const IMAGE_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const IMAGE_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipAdapterConfig {
    pub patch_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub out_dim: usize,
}

impl ClipAdapterConfig {
    /// The published B/16 image tower.
    pub fn vit_b16() -> Self {
        ClipAdapterConfig {
            patch_size: 16,
            width: 768,
            layers: 12,
            heads: 12,
            out_dim: 512,
        }
    }
}

#[derive(Debug)]
struct LinearW {
    weight: Tensor,
    bias: Tensor,
}

impl LinearW {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?)
    }

    fn param_count(&self) -> usize {
        self.weight.elem_count() + self.bias.elem_count()
    }
}

#[derive(Debug)]
struct NormW {
    weight: Tensor,
    bias: Tensor,
}

impl NormW {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.weight, &self.bias, LN_EPS)
    }

    fn param_count(&self) -> usize {
        self.weight.elem_count() + self.bias.elem_count()
    }
}

#[derive(Debug)]
struct Block {
    ln_1: NormW,
    q: LinearW,
    k: LinearW,
    v: LinearW,
    out: LinearW,
    ln_2: NormW,
    fc1: LinearW,
    fc2: LinearW,
}

/// Frozen dense-feature encoder. Holds plain tensors; nothing here enters
/// the optimizer.
#[derive(Debug)]
pub struct ClipAdapter {
    cfg: ClipAdapterConfig,
    patch_embed: Tensor,
    class_embedding: Tensor,
    positional_embedding: Tensor,
    ln_pre: NormW,
    blocks: Vec<Block>,
    ln_post: NormW,
    proj: Tensor,
}

fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?;
    let e = x.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

fn quick_gelu(x: &Tensor) -> Result<Tensor> {
    let s = (((x * 1.702)?.neg()?.exp()? + 1.0)?).recip()?;
    Ok((x * s)?)
}

impl ClipAdapter {
    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        if !path.exists() {
            return Err(SairError::Config(format!(
                "pretrained adapter weights not found at {}",
                path.display()
            )));
        }
        let tensors = candle_core::safetensors::load(path, device)?;
        Self::from_tensors(tensors)
    }

    /// Assemble from a tensor map, inferring the architecture from shapes.
    /// Head count follows the 64-dim-head convention (`width / 64`).
    pub fn from_tensors(tensors: HashMap<String, Tensor>) -> Result<Self> {
        let get = |name: &str| -> Result<Tensor> {
            tensors
                .get(name)
                .cloned()
                .ok_or_else(|| SairError::Config(format!("adapter weights missing tensor {name}")))
        };
        let patch_embed = get("visual.patch_embed.weight")?;
        let dims = patch_embed.dims4()?;
        let (width, patch_size) = (dims.0, dims.2);
        let mut layers = 0;
        while tensors.contains_key(&format!("visual.blocks.{layers}.ln_1.weight")) {
            layers += 1;
        }
        if layers == 0 {
            return Err(SairError::Config("adapter weights contain no blocks".into()));
        }
        let proj = get("visual.proj")?;
        let out_dim = proj.dims2()?.1;
        let heads = (width / 64).max(1);
        let cfg = ClipAdapterConfig {
            patch_size,
            width,
            layers,
            heads,
            out_dim,
        };
        Self::assemble(cfg, &get)
    }

    /// Random-weight adapter for shape checks and offline smoke runs.
    pub fn synthetic(cfg: ClipAdapterConfig, seed: u64, device: &Device) -> Result<Self> {
        let tensors = synthetic_tensors(cfg, seed, device)?;
        Self::assemble(cfg, &|name: &str| {
            tensors
                .get(name)
                .cloned()
                .ok_or_else(|| SairError::Config(format!("missing synthetic tensor {name}")))
        })
    }

    fn assemble(cfg: ClipAdapterConfig, get: &dyn Fn(&str) -> Result<Tensor>) -> Result<Self> {
        let norm = |name: String| -> Result<NormW> {
            Ok(NormW {
                weight: get(&format!("{name}.weight"))?,
                bias: get(&format!("{name}.bias"))?,
            })
        };
        let linear = |name: String| -> Result<LinearW> {
            Ok(LinearW {
                weight: get(&format!("{name}.weight"))?,
                bias: get(&format!("{name}.bias"))?,
            })
        };
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let b = format!("visual.blocks.{i}");
            blocks.push(Block {
                ln_1: norm(format!("{b}.ln_1"))?,
                q: linear(format!("{b}.attn.q_proj"))?,
                k: linear(format!("{b}.attn.k_proj"))?,
                v: linear(format!("{b}.attn.v_proj"))?,
                out: linear(format!("{b}.attn.out_proj"))?,
                ln_2: norm(format!("{b}.ln_2"))?,
                fc1: linear(format!("{b}.mlp.fc1"))?,
                fc2: linear(format!("{b}.mlp.fc2"))?,
            });
        }
        Ok(ClipAdapter {
            cfg,
            patch_embed: get("visual.patch_embed.weight")?,
            class_embedding: get("visual.class_embedding")?,
            positional_embedding: get("visual.positional_embedding")?,
            ln_pre: norm("visual.ln_pre".to_string())?,
            blocks,
            ln_post: norm("visual.ln_post".to_string())?,
            proj: get("visual.proj")?,
        })
    }

    pub fn config(&self) -> ClipAdapterConfig {
        self.cfg
    }

    pub fn out_channels(&self) -> usize {
        self.cfg.out_dim
    }

    pub fn patch_size(&self) -> usize {
        self.cfg.patch_size
    }

    pub fn dtype(&self) -> candle_core::DType {
        self.patch_embed.dtype()
    }

    /// Parameters the dense forward actually touches: everything except the
    /// last block's query/key projections and MLP half. Rearrangement adds
    /// nothing, so this must equal the checkpoint total minus those tensors.
    pub fn used_param_count(&self) -> usize {
        let mut n = self.patch_embed.elem_count()
            + self.class_embedding.elem_count()
            + self.positional_embedding.elem_count()
            + self.ln_pre.param_count()
            + self.ln_post.param_count()
            + self.proj.elem_count();
        for (i, b) in self.blocks.iter().enumerate() {
            n += b.ln_1.param_count();
            if i + 1 < self.blocks.len() {
                n += b.q.param_count()
                    + b.k.param_count()
                    + b.ln_2.param_count()
                    + b.fc1.param_count()
                    + b.fc2.param_count();
            }
            n += b.v.param_count() + b.out.param_count();
        }
        n
    }

    fn attention(&self, block: &Block, x: &Tensor) -> Result<Tensor> {
        let (b, t, w) = x.dims3()?;
        let heads = self.cfg.heads;
        let dh = w / heads;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((b, t, heads, dh))?
                .permute((0, 2, 1, 3))?
                .contiguous()?)
        };
        let q = split(block.q.forward(x)?)?;
        let k = split(block.k.forward(x)?)?;
        let v = split(block.v.forward(x)?)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let scores = (q.matmul(&k.transpose(2, 3)?)? * scale)?;
        let probs = softmax_last(&scores)?;
        let ctx = probs.matmul(&v)?;
        let ctx = ctx.permute((0, 2, 1, 3))?.contiguous()?.reshape((b, t, w))?;
        block.out.forward(&ctx)
    }

    fn block_forward(&self, block: &Block, x: &Tensor) -> Result<Tensor> {
        let h = block.ln_1.forward(x)?;
        let x = (x + self.attention(block, &h)?)?;
        let h = block.ln_2.forward(&x)?;
        let m = block.fc2.forward(&quick_gelu(&block.fc1.forward(&h)?)?)?;
        Ok((x + m)?)
    }

    /// Positional embedding resized to a `gh`×`gw` token grid. The class
    /// position passes through; spatial positions are interpolated
    /// bilinearly from the native square grid.
    fn positions_for(&self, gh: usize, gw: usize, dtype: DType) -> Result<Tensor> {
        let (n1, w) = self.positional_embedding.dims2()?;
        let n0 = n1 - 1;
        let g0 = (n0 as f64).sqrt().round() as usize;
        if g0 * g0 != n0 {
            return Err(SairError::Config(format!(
                "positional embedding has {n0} spatial entries, not a square grid"
            )));
        }
        if (gh, gw) == (g0, g0) {
            return Ok(self.positional_embedding.clone());
        }
        let data: Vec<f64> = self
            .positional_embedding
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1()?;
        let at = |r: usize, c: usize, ch: usize| data[(1 + r * g0 + c) * w + ch];
        let mut out = Vec::with_capacity((1 + gh * gw) * w);
        out.extend_from_slice(&data[..w]);
        for i in 0..gh {
            // Align-corners-false bilinear resample of the native grid.
            let y = ((i as f64 + 0.5) * g0 as f64 / gh as f64 - 0.5).clamp(0.0, (g0 - 1) as f64);
            let (y0, fy) = (y.floor() as usize, y - y.floor());
            let y1 = (y0 + 1).min(g0 - 1);
            for j in 0..gw {
                let x = ((j as f64 + 0.5) * g0 as f64 / gw as f64 - 0.5)
                    .clamp(0.0, (g0 - 1) as f64);
                let (x0, fx) = (x.floor() as usize, x - x.floor());
                let x1 = (x0 + 1).min(g0 - 1);
                for ch in 0..w {
                    let top = at(y0, x0, ch) * (1.0 - fx) + at(y0, x1, ch) * fx;
                    let bot = at(y1, x0, ch) * (1.0 - fx) + at(y1, x1, ch) * fx;
                    out.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        Ok(
            Tensor::from_vec(out, (1 + gh * gw, w), self.positional_embedding.device())?
                .to_dtype(dtype)?,
        )
    }

    /// Dense embeddings for `[B, 3, H, W]` images in [0, 1]:
    /// `[B, out_dim, H/patch, W/patch]`. Channel normalization is applied
    /// internally.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = images.dims4()?;
        let p = self.cfg.patch_size;
        if c != 3 {
            return Err(SairError::shape("adapter encode", "3 channels", c));
        }
        if h % p != 0 || w % p != 0 {
            return Err(SairError::shape(
                "adapter encode",
                format!("dims divisible by {p}"),
                format!("{h}x{w}"),
            ));
        }
        // The frozen weights dictate the working dtype.
        let dtype = self.patch_embed.dtype();
        let dev = images.device();
        let mean = Tensor::from_vec(IMAGE_MEAN.to_vec(), (1, 3, 1, 1), dev)?.to_dtype(dtype)?;
        let std = Tensor::from_vec(IMAGE_STD.to_vec(), (1, 3, 1, 1), dev)?.to_dtype(dtype)?;
        let x = images.to_dtype(dtype)?;
        let x = x.broadcast_sub(&mean)?.broadcast_div(&std)?;

        let x = x.conv2d(&self.patch_embed, 0, p, 1, 1)?;
        let (gh, gw) = (h / p, w / p);
        let tokens = x.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let cls = self
            .class_embedding
            .reshape((1, 1, self.cfg.width))?
            .broadcast_as((b, 1, self.cfg.width))?
            .contiguous()?;
        let x = Tensor::cat(&[&cls, &tokens], 1)?;
        let x = x.broadcast_add(&self.positions_for(gh, gw, dtype)?)?;
        let mut x = self.ln_pre.forward(&x)?;

        for block in &self.blocks[..self.blocks.len() - 1] {
            x = self.block_forward(block, &x)?;
        }
        // Dense rewiring of the last block: per-token value and output
        // projections only.
        let last = self.blocks.last().unwrap();
        let y = last.ln_1.forward(&x)?;
        let o = last.out.forward(&last.v.forward(&y)?)?;

        let spatial = o.narrow(1, 1, gh * gw)?;
        let z = self.ln_post.forward(&spatial)?;
        let flat = z.reshape((b * gh * gw, self.cfg.width))?;
        let out = flat.matmul(&self.proj)?;
        Ok(out
            .reshape((b, gh, gw, self.cfg.out_dim))?
            .permute((0, 3, 1, 2))?
            .contiguous()?)
    }
}

/// Full synthetic tensor map in the documented layout (small random values).
pub fn synthetic_tensors(
    cfg: ClipAdapterConfig,
    seed: u64,
    device: &Device,
) -> Result<HashMap<String, Tensor>> {
    let mut rng = ChaCha8Rng::from_seed(crate::rng::stream_key(seed, &["clip-synthetic"]));
    let mut tensors = HashMap::new();
    let mut put = |name: String, shape: Vec<usize>, rng: &mut ChaCha8Rng| -> Result<()> {
        let numel: usize = shape.iter().product();
        let scale = 0.02;
        let vals: Vec<f32> = (0..numel)
            .map(|_| ((rng.random::<f64>() * 2.0 - 1.0) * scale) as f32)
            .collect();
        tensors.insert(name, Tensor::from_vec(vals, shape.as_slice(), device)?);
        Ok(())
    };
    let w = cfg.width;
    let native = 224 / cfg.patch_size.min(224);
    put(
        "visual.patch_embed.weight".into(),
        vec![w, 3, cfg.patch_size, cfg.patch_size],
        &mut rng,
    )?;
    put("visual.class_embedding".into(), vec![w], &mut rng)?;
    put(
        "visual.positional_embedding".into(),
        vec![1 + native * native, w],
        &mut rng,
    )?;
    for name in ["visual.ln_pre", "visual.ln_post"] {
        put(format!("{name}.weight"), vec![w], &mut rng)?;
        put(format!("{name}.bias"), vec![w], &mut rng)?;
    }
    for i in 0..cfg.layers {
        let b = format!("visual.blocks.{i}");
        for ln in ["ln_1", "ln_2"] {
            put(format!("{b}.{ln}.weight"), vec![w], &mut rng)?;
            put(format!("{b}.{ln}.bias"), vec![w], &mut rng)?;
        }
        for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
            put(format!("{b}.attn.{proj}.weight"), vec![w, w], &mut rng)?;
            put(format!("{b}.attn.{proj}.bias"), vec![w], &mut rng)?;
        }
        put(format!("{b}.mlp.fc1.weight"), vec![4 * w, w], &mut rng)?;
        put(format!("{b}.mlp.fc1.bias"), vec![4 * w], &mut rng)?;
        put(format!("{b}.mlp.fc2.weight"), vec![w, 4 * w], &mut rng)?;
        put(format!("{b}.mlp.fc2.bias"), vec![w], &mut rng)?;
    }
    put("visual.proj".into(), vec![w, cfg.out_dim], &mut rng)?;
    Ok(tensors)
}
