//! Image-quality metrics in f64 over `(H, W, 3)` arrays in [0, 1], the
//! segmentation overlap score, and the per-bucket metric report.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};

use crate::error::{Result, SairError};

/// Declared PSNR value for (near-)identical images; keeps reports finite.
pub const PSNR_CEILING: f64 = 100.0;

fn check_image_pair(pred: &Array3<f64>, gt: &Array3<f64>, context: &str) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(SairError::shape(
            context,
            format!("{:?}", gt.dim()),
            format!("{:?}", pred.dim()),
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over the full image, capped at
/// `PSNR_CEILING`.
pub fn psnr(pred: &Array3<f64>, gt: &Array3<f64>) -> Result<f64> {
    check_image_pair(pred, gt, "psnr")?;
    let mse = pred
        .iter()
        .zip(gt.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(psnr_from_mse(mse))
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CEILING;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CEILING)
}

/// PSNR restricted to missing pixels (mask 1). `None` when the mask is
/// empty.
pub fn psnr_masked(
    pred: &Array3<f64>,
    gt: &Array3<f64>,
    mask: &Array2<u8>,
) -> Result<Option<f64>> {
    check_image_pair(pred, gt, "masked psnr")?;
    let (h, w, _) = pred.dim();
    if mask.dim() != (h, w) {
        return Err(SairError::shape(
            "masked psnr mask",
            format!("{h}x{w}"),
            format!("{:?}", mask.dim()),
        ));
    }
    let mut sq = 0.0;
    let mut n = 0usize;
    for ((i, j), &m) in mask.indexed_iter() {
        if m == 1 {
            for c in 0..3 {
                let d = pred[[i, j, c]] - gt[[i, j, c]];
                sq += d * d;
            }
            n += 3;
        }
    }
    if n == 0 {
        return Ok(None);
    }
    Ok(Some(psnr_from_mse(sq / n as f64)))
}

/// Mean absolute error.
pub fn l1(pred: &Array3<f64>, gt: &Array3<f64>) -> Result<f64> {
    check_image_pair(pred, gt, "l1")?;
    Ok(pred
        .iter()
        .zip(gt.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-region filtering: output is (H-10)×(W-10).
fn filter_valid(x: &Array2<f64>, kernel: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = x.dim();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = Array2::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * x[[i, j + k]];
            }
            rows[[i, j]] = acc;
        }
    }
    let mut out = Array2::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * rows[[i + k, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Structural similarity with the standard 11×11 Gaussian window (σ = 1.5)
/// and stability constants, computed per channel on the valid region and
/// averaged. Needs images at least 11×11.
pub fn ssim(pred: &Array3<f64>, gt: &Array3<f64>) -> Result<f64> {
    check_image_pair(pred, gt, "ssim")?;
    let (h, w, _) = pred.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(SairError::InvalidArgument(format!(
            "ssim needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let kernel = gaussian_kernel();
    let mut total = 0.0;
    for c in 0..3 {
        let a = Array2::from_shape_fn((h, w), |(i, j)| pred[[i, j, c]]);
        let b = Array2::from_shape_fn((h, w), |(i, j)| gt[[i, j, c]]);
        let mu_a = filter_valid(&a, &kernel);
        let mu_b = filter_valid(&b, &kernel);
        let aa = filter_valid(&(&a * &a), &kernel);
        let bb = filter_valid(&(&b * &b), &kernel);
        let ab = filter_valid(&(&a * &b), &kernel);

        let mut acc = 0.0;
        for ((i, j), &ma) in mu_a.indexed_iter() {
            let mb = mu_b[[i, j]];
            let va = aa[[i, j]] - ma * ma;
            let vb = bb[[i, j]] - mb * mb;
            let cov = ab[[i, j]] - ma * mb;
            acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / 3.0)
}

/// Mean intersection-over-union across the categories present in the
/// ground truth. Pixels whose ground-truth label equals `ignore` are
/// excluded entirely.
pub fn miou(
    pred: &Array2<u16>,
    gt: &Array2<u16>,
    categories: usize,
    ignore: Option<u16>,
) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(SairError::shape(
            "miou",
            format!("{:?}", gt.dim()),
            format!("{:?}", pred.dim()),
        ));
    }
    if categories == 0 || categories > u16::MAX as usize {
        return Err(SairError::InvalidArgument(format!(
            "category count {categories} out of range"
        )));
    }
    let in_range = |v: u16| (v as usize) < categories;
    let mut inter = vec![0u64; categories];
    let mut union = vec![0u64; categories];
    for (p, g) in pred.iter().zip(gt.iter()) {
        if Some(*g) == ignore {
            continue;
        }
        if !in_range(*g) || !in_range(*p) {
            return Err(SairError::InvalidArgument(format!(
                "label out of range: pred {p}, gt {g}, categories {categories}"
            )));
        }
        if p == g {
            inter[*g as usize] += 1;
            union[*g as usize] += 1;
        } else {
            union[*g as usize] += 1;
            union[*p as usize] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    let mut gt_counts = vec![false; categories];
    for g in gt.iter() {
        if Some(*g) != ignore {
            gt_counts[*g as usize] = true;
        }
    }
    for cat in 0..categories {
        if gt_counts[cat] {
            present += 1;
            sum += inter[cat] as f64 / union[cat] as f64;
        }
    }
    if present == 0 {
        return Err(SairError::InvalidArgument(
            "ground truth contains no scorable categories".into(),
        ));
    }
    Ok(sum / present as f64)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BucketMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
    /// Absent (never fabricated) when no perceptual backend is configured.
    pub lpips: Option<f64>,
    /// PSNR over missing pixels only; labeled extra next to the standard
    /// full-image metrics.
    pub masked_psnr: Option<f64>,
    pub sample_count: usize,
}

/// Per-bucket evaluation results plus the provenance needed to reproduce
/// them. Serialization is canonical (sorted buckets, fixed field order), so
/// identical evaluations produce identical bytes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub config_hash: String,
    pub seed: u64,
    pub buckets: BTreeMap<String, BucketMetrics>,
    pub notes: Vec<String>,
}

impl MetricReport {
    pub fn standard_notes() -> Vec<String> {
        vec![
            format!("psnr capped at {PSNR_CEILING} dB for identical images"),
            "ssim: 11x11 gaussian window, sigma 1.5, per-channel averaged".to_string(),
            "masked_psnr: missing-region pixels only".to_string(),
        ]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Human-readable table; column layout mirrors the machine record.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "config {}  seed {}\n",
            &self.config_hash[..self.config_hash.len().min(12)],
            self.seed
        ));
        out.push_str(&format!(
            "{:<8} {:>8} {:>8} {:>9} {:>9} {:>12} {:>8}\n",
            "bucket", "psnr", "ssim", "l1", "lpips", "masked_psnr", "samples"
        ));
        let fmt_opt = |v: Option<f64>| match v {
            Some(v) => format!("{v:.4}"),
            None => "-".to_string(),
        };
        for (bucket, m) in &self.buckets {
            out.push_str(&format!(
                "{:<8} {:>8.4} {:>8.4} {:>9.6} {:>9} {:>12} {:>8}\n",
                bucket,
                m.psnr,
                m.ssim,
                m.l1,
                fmt_opt(m.lpips),
                fmt_opt(m.masked_psnr),
                m.sample_count
            ));
        }
        for note in &self.notes {
            out.push_str(&format!("note: {note}\n"));
        }
        out
    }
}
