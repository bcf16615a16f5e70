//! Linear segmentation probe over semantic fields.
//!
//! The probe holds one unit anchor vector per category; a field cell is
//! assigned the category whose anchor has the highest cosine score.
//! Scoring completed fields against raw bilinear upsampling measures how
//! much semantic structure the completion decoder restores inside holes.

use candle_core::Tensor;
use ndarray::{Array2, Array3};
use rand::Rng;

use crate::data::{Dataset, DatasetKind, IGNORE_LABEL};
use crate::error::{Result, SairError};
use crate::masks::{sample_mask, MaskKind, MaskSource, RatioBucket};
use crate::metrics::miou;
use crate::model::SairModel;
use crate::rng::{derive_u64, stream_rng};
use crate::semantic::{encode_semantic, sir_dense, upsample_raw, SemanticEncoder};

/// Category anchors for nearest-anchor segmentation. Rows are
/// unit-normalized at construction.
#[derive(Debug, Clone)]
pub struct SegmentationProbe {
    anchors: Array2<f64>,
    labels: Vec<String>,
}

impl SegmentationProbe {
    pub fn new(anchors: Array2<f64>, labels: Vec<String>) -> Result<Self> {
        let (cats, channels) = anchors.dim();
        if cats == 0 || channels == 0 {
            return Err(SairError::InvalidArgument(
                "probe needs at least one category and one channel".into(),
            ));
        }
        if labels.len() != cats {
            return Err(SairError::InvalidArgument(format!(
                "{} labels for {} anchor rows",
                labels.len(),
                cats
            )));
        }
        let mut anchors = anchors;
        for mut row in anchors.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(SairError::InvalidArgument(
                    "anchor row has zero norm".into(),
                ));
            }
            row.mapv_inplace(|v| v / norm);
        }
        Ok(Self { anchors, labels })
    }

    /// Seeded random unit anchors. Useful as a no-calibration baseline;
    /// category identities are arbitrary under it.
    pub fn random(categories: usize, channels: usize, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, &["probe-anchors"]);
        let anchors = Array2::from_shape_fn((categories, channels), |_| gaussian(&mut rng));
        let labels = (0..categories).map(|i| format!("category_{i}")).collect();
        Self::new(anchors, labels)
    }

    pub fn categories(&self) -> usize {
        self.anchors.dim().0
    }

    pub fn channels(&self) -> usize {
        self.anchors.dim().1
    }

    pub fn anchors(&self) -> &Array2<f64> {
        &self.anchors
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; u1 bounded away from zero keeps the log finite.
    let u1: f64 = rng.random_range(1e-12..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Nearest-anchor labels for a `(h, w, channels)` field. Ties, including
/// the all-zero cell whose cosine is zero against every anchor, resolve to
/// the lowest category id.
pub fn segment(field: &Array3<f64>, probe: &SegmentationProbe) -> Result<Array2<u16>> {
    let (h, w, c) = field.dim();
    if c != probe.channels() {
        return Err(SairError::shape(
            "segment",
            format!("{} channels", probe.channels()),
            format!("{c} channels"),
        ));
    }
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let norm = (0..c).map(|k| field[[i, j, k]].powi(2)).sum::<f64>().sqrt();
            let mut best = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for (cat, row) in probe.anchors.rows().into_iter().enumerate() {
                let score = if norm < 1e-12 {
                    0.0
                } else {
                    (0..c).map(|k| field[[i, j, k]] * row[k]).sum::<f64>() / norm
                };
                if score > best_score {
                    best_score = score;
                    best = cat;
                }
            }
            out[[i, j]] = best as u16;
        }
    }
    Ok(out)
}

/// `[1, c, h, w]` tensor to an `(h, w, c)` array.
pub fn field_to_array(field: &Tensor) -> Result<Array3<f64>> {
    let (b, c, h, w) = field.dims4()?;
    if b != 1 {
        return Err(SairError::shape("field_to_array", "batch 1", format!("batch {b}")));
    }
    let flat = field
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    Ok(Array3::from_shape_fn((h, w, c), |(i, j, k)| {
        flat[k * h * w + i * w + j]
    }))
}

fn display_labels(dataset: &Dataset) -> Vec<String> {
    match dataset.spec().kind {
        DatasetKind::Toy => ["background", "circle", "square", "triangle", "diamond"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        _ => (0..dataset.categories())
            .map(|i| format!("category_{i}"))
            .collect(),
    }
}

/// Majority label over one encoder patch, skipping ignored pixels; ties go
/// to the lowest id. `None` when every pixel in the patch is ignored.
fn patch_majority(
    labels: &Array2<u16>,
    i: usize,
    j: usize,
    factor: usize,
    categories: usize,
) -> Option<usize> {
    let mut counts = vec![0usize; categories];
    for di in 0..factor {
        for dj in 0..factor {
            let v = labels[[i * factor + di, j * factor + dj]];
            if v != IGNORE_LABEL && (v as usize) < categories {
                counts[v as usize] += 1;
            }
        }
    }
    let best = counts.iter().copied().max()?;
    if best == 0 {
        return None;
    }
    counts.iter().position(|&c| c == best)
}

/// Build prototype anchors by averaging encoder features of unmasked
/// training images per category. Categories never observed fall back to
/// seeded random unit rows.
pub fn calibrate_prototypes(
    encoder: &SemanticEncoder,
    dataset: &Dataset,
    seed: u64,
    max_images: usize,
) -> Result<SegmentationProbe> {
    if !dataset.has_labels() {
        return Err(SairError::InvalidArgument(
            "prototype calibration needs a labeled dataset".into(),
        ));
    }
    let categories = dataset.categories();
    let channels = encoder.out_channels();
    let factor = encoder.patch_factor();
    let mut sums = Array2::<f64>::zeros((categories, channels));
    let mut counts = vec![0usize; categories];

    let n = dataset.len().min(max_images.max(1));
    for idx in 0..n {
        let sample = dataset.load(idx)?;
        let labels = sample
            .label_map()
            .ok_or_else(|| SairError::InvalidArgument("sample carries no label map".into()))?
            .clone();
        let device = candle_core::Device::Cpu;
        let dtype = encoder.dtype();
        let images = sample.image_tensor(dtype, &device)?;
        let masks = sample.mask_tensor(dtype, &device)?;
        let map = encode_semantic(&images, &masks, encoder)?;
        let field = field_to_array(&map.features)?;
        let (gh, gw, _) = field.dim();
        for i in 0..gh {
            for j in 0..gw {
                if let Some(cat) = patch_majority(&labels, i, j, factor, categories) {
                    for k in 0..channels {
                        sums[[cat, k]] += field[[i, j, k]];
                    }
                    counts[cat] += 1;
                }
            }
        }
    }

    let mut rng = stream_rng(seed, &["probe-calibration-fallback"]);
    let mut anchors = Array2::zeros((categories, channels));
    for cat in 0..categories {
        if counts[cat] > 0 {
            for k in 0..channels {
                anchors[[cat, k]] = sums[[cat, k]] / counts[cat] as f64;
            }
        } else {
            for k in 0..channels {
                anchors[[cat, k]] = gaussian(&mut rng);
            }
        }
    }
    SegmentationProbe::new(anchors, display_labels(dataset))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ProbeOutcome {
    /// Mean IoU when segmenting the raw bilinearly upsampled features.
    pub raw_miou: f64,
    /// Mean IoU when segmenting the completed field.
    pub sir_miou: f64,
    pub sample_count: usize,
}

/// Segment completed vs raw-upsampled fields of masked test images against
/// ground-truth labels. The model must carry both a semantic encoder and a
/// completion decoder.
pub fn probe_dataset(
    model: &SairModel,
    dataset: &Dataset,
    mask_kind: &MaskKind,
    bucket: RatioBucket,
    seed: u64,
    probe: &SegmentationProbe,
    max_samples: Option<usize>,
) -> Result<ProbeOutcome> {
    if model.semantic_encoder().is_none() {
        return Err(SairError::Config(
            "model has no semantic branch to probe".into(),
        ));
    }
    let sir = model
        .sir_decoder()
        .ok_or_else(|| SairError::Config("model has no completion decoder to probe".into()))?;
    if !dataset.has_labels() {
        return Err(SairError::InvalidArgument(
            "probing needs a labeled dataset".into(),
        ));
    }
    let n = dataset.len().min(max_samples.unwrap_or(usize::MAX));
    if n == 0 {
        return Err(SairError::InvalidArgument("empty dataset".into()));
    }

    let mut raw_sum = 0.0;
    let mut sir_sum = 0.0;
    for idx in 0..n {
        let clean = dataset.load(idx)?;
        let (h, w) = clean.dims();
        let source = MaskSource {
            kind: mask_kind.clone(),
            bucket,
            seed: derive_u64(seed, &["probe-mask", &idx.to_string()]),
        };
        let sample = clean.apply_mask(sample_mask(&source, h, w)?)?;
        let gt = sample
            .label_map()
            .ok_or_else(|| SairError::InvalidArgument("sample carries no label map".into()))?
            .clone();

        let images = sample.image_tensor(model.dtype(), model.device())?;
        let masks = sample.mask_tensor(model.dtype(), model.device())?;
        let map = model
            .semantic_map(&images, &masks)?
            .expect("semantic encoder presence checked above");

        let raw_field = field_to_array(&upsample_raw(&map, h, w)?)?;
        let sir_field = field_to_array(&sir_dense(&map, sir, h, w)?)?;

        let raw_labels = segment(&raw_field, probe)?;
        let sir_labels = segment(&sir_field, probe)?;
        raw_sum += miou(&raw_labels, &gt, probe.categories(), Some(IGNORE_LABEL))?;
        sir_sum += miou(&sir_labels, &gt, probe.categories(), Some(IGNORE_LABEL))?;
    }

    Ok(ProbeOutcome {
        raw_miou: raw_sum / n as f64,
        sir_miou: sir_sum / n as f64,
        sample_count: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors_are_normalized_and_validated() {
        let anchors =
            Array2::from_shape_vec((2, 3), vec![2.0, 0.0, 0.0, 0.0, 0.0, 5.0]).unwrap();
        let probe =
            SegmentationProbe::new(anchors, vec!["a".into(), "b".into()]).unwrap();
        for row in probe.anchors().rows() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }

        let zero_row = Array2::from_shape_vec((1, 2), vec![0.0, 0.0]).unwrap();
        assert!(SegmentationProbe::new(zero_row, vec!["z".into()]).is_err());

        let ok = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        assert!(SegmentationProbe::new(ok, vec![]).is_err());
    }

    #[test]
    fn segment_picks_nearest_anchor_and_breaks_ties_low() {
        let anchors =
            Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
        let probe = SegmentationProbe::new(
            anchors,
            vec!["x".into(), "y".into(), "neg".into()],
        )
        .unwrap();

        let mut field = Array3::zeros((2, 2, 2));
        field[[0, 0, 0]] = 3.0; // along anchor 0
        field[[0, 1, 1]] = 0.5; // along anchor 1
        field[[1, 0, 0]] = -2.0; // along anchor 2
        // (1,1) stays zero: ties across all anchors resolve to id 0.
        let labels = segment(&field, &probe).unwrap();
        assert_eq!(labels[[0, 0]], 0);
        assert_eq!(labels[[0, 1]], 1);
        assert_eq!(labels[[1, 0]], 2);
        assert_eq!(labels[[1, 1]], 0);

        // Cosine is scale-free: rescaling the field changes nothing.
        let doubled = field.mapv(|v| v * 2.0);
        assert_eq!(segment(&doubled, &probe).unwrap(), labels);
    }

    #[test]
    fn equidistant_tie_prefers_lower_id() {
        // Two identical anchors: every cell ties, so everything maps to 0.
        let anchors = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let probe =
            SegmentationProbe::new(anchors, vec!["first".into(), "second".into()]).unwrap();
        let field = Array3::from_elem((3, 3, 2), 0.7);
        assert!(segment(&field, &probe).unwrap().iter().all(|&v| v == 0));
    }

    #[test]
    fn random_probe_is_seeded() {
        let a = SegmentationProbe::random(5, 16, 11).unwrap();
        let b = SegmentationProbe::random(5, 16, 11).unwrap();
        let c = SegmentationProbe::random(5, 16, 12).unwrap();
        assert_eq!(a.anchors(), b.anchors());
        assert_ne!(a.anchors(), c.anchors());
        assert_eq!(a.categories(), 5);
        assert_eq!(a.channels(), 16);
    }

    #[test]
    fn field_to_array_preserves_layout() {
        let dev = candle_core::Device::Cpu;
        let t = Tensor::from_vec(
            (0..24).map(|v| v as f64).collect::<Vec<_>>(),
            (1, 2, 3, 4),
            &dev,
        )
        .unwrap();
        let arr = field_to_array(&t).unwrap();
        assert_eq!(arr.dim(), (3, 4, 2));
        assert_eq!(arr[[0, 0, 0]], 0.0);
        assert_eq!(arr[[0, 1, 0]], 1.0);
        assert_eq!(arr[[1, 0, 0]], 4.0);
        assert_eq!(arr[[0, 0, 1]], 12.0);
    }

    #[test]
    fn patch_majority_skips_ignored_pixels() {
        let mut labels = Array2::from_elem((4, 4), 2u16);
        labels[[0, 0]] = IGNORE_LABEL;
        labels[[0, 1]] = 1;
        assert_eq!(patch_majority(&labels, 0, 0, 4, 3), Some(2));

        let all_ignored = Array2::from_elem((2, 2), IGNORE_LABEL);
        assert_eq!(patch_majority(&all_ignored, 0, 0, 2, 3), None);
    }

    #[test]
    fn calibration_follows_the_encoder_dtype() {
        use crate::data::{Dataset, DatasetKind, DatasetSpec, Split};
        use crate::nn::Params;
        use crate::semantic::SurrogateEncoder;
        use candle_core::{DType, Device};

        let dataset = Dataset::open(DatasetSpec {
            kind: DatasetKind::Toy,
            root: None,
            split: Split::Train,
            image_size: 16,
            with_labels: true,
            toy_count: 2,
            toy_seed: 0,
        })
        .unwrap();
        // Single precision is the training dtype; calibration must not
        // assume anything wider.
        let params = Params::new(0, DType::F32, &Device::Cpu);
        let encoder = SemanticEncoder::Surrogate(
            SurrogateEncoder::new(&params, "enc", 8).unwrap(),
        );
        let probe = calibrate_prototypes(&encoder, &dataset, 0, 2).unwrap();
        assert_eq!(probe.channels(), 8);
        assert_eq!(probe.categories(), dataset.categories());
    }
}
