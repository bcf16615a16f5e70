//! Dataset ingestion: masked samples, directory-layout loaders for the
//! face/scene corpora, and a procedurally generated labeled toy set for
//! desk-scale runs.
//!
//! Directory layout for file-backed datasets: images under `root/<split>/`,
//! label maps under `root/<split>_labels/` with matching stems.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;

use crate::coord::{CoordinateGrid, QueryBatch};
use crate::error::{Result, SairError};
use crate::rng::stream_rng;

/// Sentinel for pixels excluded from segmentation scoring.
pub const IGNORE_LABEL: u16 = u16::MAX;

/// An image with a missing-region mask. The stored image already has
/// missing pixels zeroed; the clean original stays available as ground
/// truth. Values are in [0, 1], layout `(H, W, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSample {
    image: Array3<f64>,
    mask: Array2<u8>,
    ground_truth: Array3<f64>,
    label_map: Option<Array2<u16>>,
}

impl MaskedSample {
    /// Wrap a clean image (mask unset, so image == ground truth).
    pub fn new(clean: Array3<f64>, label_map: Option<Array2<u16>>) -> Self {
        let (h, w, _) = clean.dim();
        if let Some(labels) = &label_map {
            assert_eq!(labels.dim(), (h, w), "label map must match image dims");
        }
        debug_assert!(clean.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        MaskedSample {
            image: clean.clone(),
            mask: Array2::zeros((h, w)),
            ground_truth: clean,
            label_map,
        }
    }

    /// Apply a missing-region mask (1 = missing): zeroes those pixels in
    /// the input image. Replaces any previously applied mask.
    pub fn apply_mask(mut self, mask: Array2<u8>) -> Result<Self> {
        let (h, w, _) = self.ground_truth.dim();
        if mask.dim() != (h, w) {
            return Err(SairError::shape(
                "sample mask",
                format!("{h}x{w}"),
                format!("{}x{}", mask.dim().0, mask.dim().1),
            ));
        }
        if mask.iter().any(|&m| m > 1) {
            return Err(SairError::InvalidArgument(
                "mask values must be 0 or 1".into(),
            ));
        }
        let mut image = self.ground_truth.clone();
        for ((i, j), &m) in mask.indexed_iter() {
            if m == 1 {
                for c in 0..3 {
                    image[[i, j, c]] = 0.0;
                }
            }
        }
        self.image = image;
        self.mask = mask;
        Ok(self)
    }

    pub fn dims(&self) -> (usize, usize) {
        let (h, w, _) = self.ground_truth.dim();
        (h, w)
    }

    /// Masked input image (missing pixels zeroed).
    pub fn image(&self) -> &Array3<f64> {
        &self.image
    }

    pub fn mask(&self) -> &Array2<u8> {
        &self.mask
    }

    pub fn ground_truth(&self) -> &Array3<f64> {
        &self.ground_truth
    }

    pub fn label_map(&self) -> Option<&Array2<u16>> {
        self.label_map.as_ref()
    }

    pub fn mask_ratio(&self) -> f64 {
        let total = self.mask.len();
        let missing = self.mask.iter().filter(|&&m| m == 1).count();
        missing as f64 / total as f64
    }

    /// `[1, 3, H, W]` tensor of the masked input.
    pub fn image_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w) = self.dims();
        let mut v = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    v.push(self.image[[i, j, c]]);
                }
            }
        }
        Ok(Tensor::from_vec(v, (1, 3, h, w), device)?.to_dtype(dtype)?)
    }

    /// `[1, 1, H, W]` tensor of the mask.
    pub fn mask_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w) = self.dims();
        let v: Vec<f64> = self.mask.iter().map(|&m| m as f64).collect();
        Ok(Tensor::from_vec(v, (1, 1, h, w), device)?.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Toy,
    Celebahq,
    Ade20k,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    #[serde(default)]
    pub root: Option<PathBuf>,
    pub split: Split,
    pub image_size: usize,
    #[serde(default = "default_true")]
    pub with_labels: bool,
    /// Per-split sample count for the procedural toy set.
    #[serde(default = "default_toy_count")]
    pub toy_count: usize,
    /// Content stream for the toy set, independent of the run seed so the
    /// "dataset" is stable across experiments.
    #[serde(default)]
    pub toy_seed: u64,
}

fn default_true() -> bool {
    true
}

fn default_toy_count() -> usize {
    8
}

/// Open dataset handle: resolved file list (or a virtual index for the toy
/// set). Loading is stateless, so handles are freely shareable.
#[derive(Debug)]
pub struct Dataset {
    spec: DatasetSpec,
    entries: Vec<PathBuf>,
    label_dir: Option<PathBuf>,
}

impl Dataset {
    pub fn open(spec: DatasetSpec) -> Result<Self> {
        if spec.image_size == 0 {
            return Err(SairError::Config("dataset image_size must be positive".into()));
        }
        match spec.kind {
            DatasetKind::Toy => Ok(Dataset {
                spec,
                entries: Vec::new(),
                label_dir: None,
            }),
            DatasetKind::Celebahq | DatasetKind::Ade20k => {
                let root = spec.root.clone().ok_or_else(|| {
                    SairError::Config("file-backed dataset needs a root path".into())
                })?;
                let image_dir = root.join(spec.split.dir_name());
                let mut entries: Vec<PathBuf> = std::fs::read_dir(&image_dir)
                    .map_err(|e| SairError::io(&image_dir, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        matches!(
                            p.extension().and_then(|e| e.to_str()),
                            Some("png" | "jpg" | "jpeg")
                        )
                    })
                    .collect();
                entries.sort();
                if entries.is_empty() {
                    return Err(SairError::Config(format!(
                        "no images found under {}",
                        image_dir.display()
                    )));
                }
                let label_dir = root.join(format!("{}_labels", spec.split.dir_name()));
                let label_dir = (spec.with_labels && label_dir.is_dir()).then_some(label_dir);
                Ok(Dataset {
                    spec,
                    entries,
                    label_dir,
                })
            }
        }
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        match self.spec.kind {
            DatasetKind::Toy => self.spec.toy_count,
            _ => self.entries.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Category count for segmentation scoring.
    pub fn categories(&self) -> usize {
        match self.spec.kind {
            DatasetKind::Toy => TOY_CATEGORIES,
            DatasetKind::Celebahq => 19,
            DatasetKind::Ade20k => 150,
        }
    }

    pub fn has_labels(&self) -> bool {
        match self.spec.kind {
            DatasetKind::Toy => self.spec.with_labels,
            _ => self.label_dir.is_some(),
        }
    }

    /// Load one sample (mask unset). Images are resized so the shorter side
    /// matches `image_size`, then center-cropped square.
    pub fn load(&self, index: usize) -> Result<MaskedSample> {
        if index >= self.len() {
            return Err(SairError::InvalidArgument(format!(
                "sample index {index} out of range (dataset has {})",
                self.len()
            )));
        }
        match self.spec.kind {
            DatasetKind::Toy => Ok(generate_toy_sample(
                self.spec.toy_seed,
                self.spec.split.dir_name(),
                index,
                self.spec.image_size,
                self.spec.with_labels,
            )),
            _ => self.load_file(index),
        }
    }

    fn load_file(&self, index: usize) -> Result<MaskedSample> {
        let path = &self.entries[index];
        let size = self.spec.image_size;
        let img = image::open(path)?.to_rgb8();
        let (w0, h0) = (img.width() as usize, img.height() as usize);
        let (rw, rh, oy, ox) = resize_crop_geometry(h0, w0, size);
        let resized = image::imageops::resize(
            &img,
            rw as u32,
            rh as u32,
            image::imageops::FilterType::CatmullRom,
        );
        let mut clean = Array3::zeros((size, size, 3));
        for i in 0..size {
            for j in 0..size {
                let p = resized.get_pixel((j + ox) as u32, (i + oy) as u32);
                for c in 0..3 {
                    clean[[i, j, c]] = p.0[c] as f64 / 255.0;
                }
            }
        }

        let label_map = match &self.label_dir {
            None => None,
            Some(dir) => {
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
                let lpath = dir.join(format!("{stem}.png"));
                if !lpath.exists() {
                    return Err(SairError::io(
                        &lpath,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "label map missing"),
                    ));
                }
                let labels = image::open(&lpath)?.to_luma8();
                let (lw0, lh0) = (labels.width() as usize, labels.height() as usize);
                let (lrw, lrh, loy, lox) = resize_crop_geometry(lh0, lw0, size);
                let mut map = Array2::zeros((size, size));
                for i in 0..size {
                    for j in 0..size {
                        // Nearest-neighbor through the same geometry.
                        let si = ((i + loy) as f64 + 0.5) * lh0 as f64 / lrh as f64;
                        let sj = ((j + lox) as f64 + 0.5) * lw0 as f64 / lrw as f64;
                        let si = (si as usize).min(lh0 - 1);
                        let sj = (sj as usize).min(lw0 - 1);
                        let raw = labels.get_pixel(sj as u32, si as u32).0[0] as u16;
                        map[[i, j]] = match self.spec.kind {
                            // Scene annotations use 0 for unlabeled.
                            DatasetKind::Ade20k => {
                                if raw == 0 {
                                    IGNORE_LABEL
                                } else {
                                    raw - 1
                                }
                            }
                            _ => raw,
                        };
                    }
                }
                Some(map)
            }
        };
        Ok(MaskedSample::new(clean, label_map))
    }
}

/// Resize-shorter-then-center-crop geometry: returns the resized dims and
/// the crop offsets.
fn resize_crop_geometry(h0: usize, w0: usize, size: usize) -> (usize, usize, usize, usize) {
    let scale = size as f64 / h0.min(w0) as f64;
    let rh = ((h0 as f64 * scale).round() as usize).max(size);
    let rw = ((w0 as f64 * scale).round() as usize).max(size);
    ((rw), (rh), (rh - size) / 2, (rw - size) / 2)
}

/// Load an RGB image file at its native resolution, values in [0, 1].
pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let p = img.get_pixel(j as u32, i as u32);
            for c in 0..3 {
                out[[i, j, c]] = p.0[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Load a grayscale mask file at its native resolution: luma ≥ 128 marks a
/// missing pixel.
pub fn load_binary_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            out[[i, j]] = u8::from(img.get_pixel(j as u32, i as u32).0[0] >= 128);
        }
    }
    Ok(out)
}

pub const TOY_CATEGORIES: usize = 5;

/// Deterministic toy image: a soft background gradient with 2–3 flat-color
/// geometric shapes whose category is tied to color (circle/square/
/// triangle/diamond), hard edges, labels exact. Shape placement, palette
/// jitter, and shading direction come from the `(seed, split, index)`
/// stream only.
pub fn generate_toy_sample(
    seed: u64,
    split: &str,
    index: usize,
    size: usize,
    with_labels: bool,
) -> MaskedSample {
    use rand::Rng;
    let mut rng = stream_rng(seed, &["toy", split, &index.to_string()]);
    let s = size as f64;

    let bases = [
        [0.55, 0.60, 0.66],
        [0.63, 0.58, 0.50],
        [0.50, 0.62, 0.55],
    ];
    let base = bases[rng.random_range(0..bases.len())];
    let tilt: f64 = rng.random_range(-0.12..0.12);
    let horizontal = rng.random::<bool>();

    let mut image = Array3::zeros((size, size, 3));
    let mut labels = Array2::<u16>::zeros((size, size));
    for i in 0..size {
        for j in 0..size {
            let t = if horizontal { j } else { i } as f64 / s;
            for c in 0..3 {
                image[[i, j, c]] = (base[c] + tilt * (t - 0.5)).clamp(0.05, 0.95);
            }
        }
    }

    let palette = [
        [0.85, 0.16, 0.14],
        [0.16, 0.72, 0.25],
        [0.18, 0.30, 0.88],
        [0.92, 0.83, 0.18],
    ];
    let mut cats = [1u16, 2, 3, 4];
    // Partial shuffle picks distinct categories.
    for k in 0..cats.len() {
        let pick = rng.random_range(k..cats.len());
        cats.swap(k, pick);
    }
    let count = rng.random_range(2..=3);
    let shade_gain: f64 = rng.random_range(0.12..0.22);

    for &cat in cats.iter().take(count) {
        let cy: f64 = rng.random_range(0.25 * s..0.75 * s);
        let cx: f64 = rng.random_range(0.25 * s..0.75 * s);
        let r: f64 = rng.random_range(0.18 * s..0.32 * s);
        let jitter: [f64; 3] = [
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
        ];
        let color = palette[(cat - 1) as usize];
        for i in 0..size {
            for j in 0..size {
                let dy = i as f64 + 0.5 - cy;
                let dx = j as f64 + 0.5 - cx;
                let inside = match cat {
                    1 => dy * dy + dx * dx <= r * r,
                    2 => dy.abs() <= r * 0.85 && dx.abs() <= r * 0.85,
                    3 => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
                    _ => dy.abs() + dx.abs() <= r * 1.2,
                };
                if inside {
                    // Flat color with a gentle diagonal shade.
                    let t = (i + j) as f64 / (2.0 * s);
                    let shade = 1.0 - shade_gain / 2.0 + shade_gain * t;
                    for c in 0..3 {
                        image[[i, j, c]] = ((color[c] + jitter[c]) * shade).clamp(0.02, 0.98);
                    }
                    labels[[i, j]] = cat;
                }
            }
        }
    }
    MaskedSample::new(image, with_labels.then_some(labels))
}

/// Device-ready training batch: masked inputs, masks, per-image query
/// coordinates on the native grid, and ground-truth colors at the queries.
/// Clean images ride along for auxiliary objectives that reference the
/// unmasked scene.
#[derive(Debug)]
pub struct TrainBatch {
    pub images: Tensor,
    pub masks: Tensor,
    pub clean_images: Tensor,
    pub query_batches: Vec<QueryBatch>,
    pub targets: Tensor,
}

/// Stack samples and draw `query_count` distinct pixel-center queries per
/// image (without replacement; `query_count == H·W` visits every pixel).
/// Targets always come from the ground truth, never the masked input.
pub fn make_batch(
    samples: &[MaskedSample],
    query_count: usize,
    rng: &mut ChaCha8Rng,
    dtype: DType,
    device: &Device,
) -> Result<TrainBatch> {
    use rand::Rng;
    let Some(first) = samples.first() else {
        return Err(SairError::InvalidArgument("empty batch".into()));
    };
    let (h, w) = first.dims();
    if query_count == 0 {
        return Err(SairError::InvalidArgument("query_count must be ≥ 1".into()));
    }
    if query_count > h * w {
        return Err(SairError::InvalidArgument(format!(
            "query_count {query_count} exceeds pixel count {}",
            h * w
        )));
    }
    let grid = CoordinateGrid::new(h, w)?;

    let mut images = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut clean = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    let mut query_batches = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len() * query_count * 3);
    for sample in samples {
        if sample.dims() != (h, w) {
            return Err(SairError::shape(
                "batch samples",
                format!("{h}x{w}"),
                format!("{}x{}", sample.dims().0, sample.dims().1),
            ));
        }
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    images.push(sample.image()[[i, j, c]]);
                    clean.push(sample.ground_truth()[[i, j, c]]);
                }
            }
        }
        masks.extend(sample.mask().iter().map(|&m| m as f64));

        // Partial Fisher-Yates: first `query_count` entries of a uniform
        // permutation of the pixel grid.
        let mut ids: Vec<usize> = (0..h * w).collect();
        for k in 0..query_count {
            let pick = rng.random_range(k..ids.len());
            ids.swap(k, pick);
        }
        let mut coords = Vec::with_capacity(query_count);
        for &id in ids.iter().take(query_count) {
            let (i, j) = (id / w, id % w);
            coords.push(grid.coord(i, j));
            for c in 0..3 {
                targets.push(sample.ground_truth()[[i, j, c]]);
            }
        }
        query_batches.push(QueryBatch::build(grid, coords)?);
    }

    let b = samples.len();
    Ok(TrainBatch {
        images: Tensor::from_vec(images, (b, 3, h, w), device)?.to_dtype(dtype)?,
        masks: Tensor::from_vec(masks, (b, 1, h, w), device)?.to_dtype(dtype)?,
        clean_images: Tensor::from_vec(clean, (b, 3, h, w), device)?.to_dtype(dtype)?,
        query_batches,
        targets: Tensor::from_vec(targets, (b * query_count, 3), device)?.to_dtype(dtype)?,
    })
}
