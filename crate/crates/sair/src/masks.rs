//! Irregular-mask sourcing: a seeded synthetic stroke/rectangle generator
//! and a file-corpus loader, both constrained to the declared mask-ratio
//! bucket. Masks use 1 = missing.

use std::path::PathBuf;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SairError};
use crate::rng::stream_rng;

const MAX_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum RatioBucket {
    #[serde(rename = "0-20")]
    Low,
    #[serde(rename = "20-40")]
    Mid,
    #[serde(rename = "40-60")]
    High,
}

impl RatioBucket {
    pub fn all() -> [RatioBucket; 3] {
        [RatioBucket::Low, RatioBucket::Mid, RatioBucket::High]
    }

    /// Closed bounds on the fraction of missing pixels.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            RatioBucket::Low => (0.0, 0.2),
            RatioBucket::Mid => (0.2, 0.4),
            RatioBucket::High => (0.4, 0.6),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            RatioBucket::Low => "0-20",
            RatioBucket::Mid => "20-40",
            RatioBucket::High => "40-60",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().trim_end_matches('%') {
            "0-20" => Ok(RatioBucket::Low),
            "20-40" => Ok(RatioBucket::Mid),
            "40-60" => Ok(RatioBucket::High),
            other => Err(SairError::InvalidArgument(format!(
                "unknown mask ratio bucket '{other}' (expected 0-20, 20-40, or 40-60)"
            ))),
        }
    }

    pub fn contains(&self, ratio: f64) -> bool {
        let (lo, hi) = self.bounds();
        (lo..=hi).contains(&ratio)
    }
}

impl std::fmt::Display for RatioBucket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskKind {
    Synthetic,
    /// Flat directory of grayscale mask images; white (≥ 0.5) = missing.
    FileCorpus { dir: PathBuf },
}

/// Fully determined mask description: `sample_mask` is a pure function of
/// `(source, height, width)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSource {
    pub kind: MaskKind,
    pub bucket: RatioBucket,
    pub seed: u64,
}

pub fn sample_mask(source: &MaskSource, height: usize, width: usize) -> Result<Array2<u8>> {
    if height == 0 || width == 0 {
        return Err(SairError::InvalidArgument(
            "mask dimensions must be positive".into(),
        ));
    }
    let mut rng = stream_rng(source.seed, &["mask", source.bucket.label()]);
    match &source.kind {
        MaskKind::Synthetic => synthetic_mask(&mut rng, source.bucket, height, width),
        MaskKind::FileCorpus { dir } => corpus_mask(&mut rng, source.bucket, dir, height, width),
    }
}

fn ratio(mask: &Array2<u8>) -> f64 {
    mask.iter().filter(|&&m| m == 1).count() as f64 / mask.len() as f64
}

/// Random strokes and rectangles accumulated until a target ratio inside
/// the bucket is reached; whole canvases are retried when an element
/// overshoots the upper bound.
fn synthetic_mask(
    rng: &mut ChaCha8Rng,
    bucket: RatioBucket,
    height: usize,
    width: usize,
) -> Result<Array2<u8>> {
    let (lo, hi) = bucket.bounds();
    let span = hi - lo;
    for _ in 0..MAX_ATTEMPTS {
        let target = lo + span * rng.random_range(0.1..0.9);
        let mut mask = Array2::<u8>::zeros((height, width));
        let mut overshoot = false;
        while ratio(&mask) < target {
            if rng.random::<f64>() < 0.7 {
                draw_stroke(rng, &mut mask);
            } else {
                draw_rectangle(rng, &mut mask);
            }
            if ratio(&mask) > hi {
                overshoot = true;
                break;
            }
        }
        let r = ratio(&mask);
        if !overshoot && r >= lo && r <= hi {
            return Ok(mask);
        }
    }
    Err(SairError::Generation(format!(
        "could not hit bucket {bucket} on a {height}x{width} canvas after {MAX_ATTEMPTS} attempts"
    )))
}

/// Thick random-walk polyline, stamped as discs along each segment.
fn draw_stroke(rng: &mut ChaCha8Rng, mask: &mut Array2<u8>) {
    let (h, w) = mask.dim();
    let s = h.min(w) as f64;
    let mut y: f64 = rng.random_range(0.0..h as f64);
    let mut x: f64 = rng.random_range(0.0..w as f64);
    let segments = rng.random_range(3..=6);
    let thickness = rng.random_range((s / 16.0).max(1.0)..(s / 7.0).max(2.0));
    for _ in 0..segments {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let length = rng.random_range(0.2 * s..0.5 * s);
        let (dy, dx) = (angle.sin(), angle.cos());
        let steps = length.ceil() as usize;
        for _ in 0..steps {
            y = (y + dy).clamp(0.0, h as f64 - 1.0);
            x = (x + dx).clamp(0.0, w as f64 - 1.0);
            stamp_disc(mask, y, x, thickness / 2.0);
        }
    }
}

fn stamp_disc(mask: &mut Array2<u8>, cy: f64, cx: f64, radius: f64) {
    let (h, w) = mask.dim();
    let r = radius.max(0.5);
    let (i0, i1) = (
        (cy - r).floor().max(0.0) as usize,
        ((cy + r).ceil() as usize).min(h - 1),
    );
    let (j0, j1) = (
        (cx - r).floor().max(0.0) as usize,
        ((cx + r).ceil() as usize).min(w - 1),
    );
    for i in i0..=i1 {
        for j in j0..=j1 {
            let dy = i as f64 + 0.5 - cy;
            let dx = j as f64 + 0.5 - cx;
            if dy * dy + dx * dx <= r * r {
                mask[[i, j]] = 1;
            }
        }
    }
}

fn draw_rectangle(rng: &mut ChaCha8Rng, mask: &mut Array2<u8>) {
    let (h, w) = mask.dim();
    let rh = rng.random_range((h as f64 * 0.15) as usize..=(h as f64 * 0.35) as usize).max(1);
    let rw = rng.random_range((w as f64 * 0.15) as usize..=(w as f64 * 0.35) as usize).max(1);
    let i0 = rng.random_range(0..h.saturating_sub(rh).max(1));
    let j0 = rng.random_range(0..w.saturating_sub(rw).max(1));
    for i in i0..(i0 + rh).min(h) {
        for j in j0..(j0 + rw).min(w) {
            mask[[i, j]] = 1;
        }
    }
}

/// Draw corpus files until one lands in the bucket after binarization at
/// 0.5 and nearest-neighbor resizing.
fn corpus_mask(
    rng: &mut ChaCha8Rng,
    bucket: RatioBucket,
    dir: &PathBuf,
    height: usize,
    width: usize,
) -> Result<Array2<u8>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| SairError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(SairError::Config(format!(
            "mask corpus {} contains no images",
            dir.display()
        )));
    }
    for _ in 0..MAX_ATTEMPTS {
        let path = &files[rng.random_range(0..files.len())];
        let img = image::open(path)?.to_luma8();
        let (w0, h0) = (img.width() as usize, img.height() as usize);
        let mut mask = Array2::<u8>::zeros((height, width));
        for i in 0..height {
            for j in 0..width {
                let si = (((i as f64 + 0.5) * h0 as f64 / height as f64) as usize).min(h0 - 1);
                let sj = (((j as f64 + 0.5) * w0 as f64 / width as f64) as usize).min(w0 - 1);
                mask[[i, j]] = u8::from(img.get_pixel(sj as u32, si as u32).0[0] >= 128);
            }
        }
        if bucket.contains(ratio(&mask)) {
            return Ok(mask);
        }
    }
    Err(SairError::Generation(format!(
        "no corpus mask in {} fits bucket {bucket} after {MAX_ATTEMPTS} draws",
        dir.display()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_parsing_round_trips() {
        for bucket in RatioBucket::all() {
            assert_eq!(RatioBucket::parse(bucket.label()).unwrap(), bucket);
        }
        assert_eq!(RatioBucket::parse("40-60%").unwrap(), RatioBucket::High);
        assert!(RatioBucket::parse("10-30").is_err());
    }

    #[test]
    fn synthetic_masks_stay_in_bucket() {
        for bucket in RatioBucket::all() {
            for seed in 0..1000 {
                let source = MaskSource {
                    kind: MaskKind::Synthetic,
                    bucket,
                    seed,
                };
                let mask = sample_mask(&source, 32, 32).unwrap();
                let r = ratio(&mask);
                assert!(
                    bucket.contains(r),
                    "seed {seed} bucket {bucket} got ratio {r}"
                );
            }
        }
    }

    #[test]
    fn same_source_is_bitwise_reproducible() {
        let source = MaskSource {
            kind: MaskKind::Synthetic,
            bucket: RatioBucket::High,
            seed: 42,
        };
        let a = sample_mask(&source, 24, 24).unwrap();
        let b = sample_mask(&source, 24, 24).unwrap();
        assert_eq!(a, b);

        let other = MaskSource {
            seed: 43,
            ..source.clone()
        };
        assert_ne!(a, sample_mask(&other, 24, 24).unwrap());
    }

    #[test]
    fn rectangular_canvases_work() {
        let source = MaskSource {
            kind: MaskKind::Synthetic,
            bucket: RatioBucket::Mid,
            seed: 7,
        };
        let mask = sample_mask(&source, 20, 44).unwrap();
        assert_eq!(mask.dim(), (20, 44));
    }

    #[test]
    fn corpus_masks_binarize_resize_and_keep_ratio() {
        let dir = tempfile::tempdir().unwrap();
        // Half-plane mask at 64x64: ratio exactly 0.5, structured so
        // nearest-neighbor resizing preserves it.
        let mut img = image::GrayImage::new(64, 64);
        for y in 0..64 {
            for x in 0..64 {
                img.put_pixel(x, y, image::Luma([if y < 32 { 255 } else { 0 }]));
            }
        }
        let path = dir.path().join("half.png");
        img.save(&path).unwrap();

        let source = MaskSource {
            kind: MaskKind::FileCorpus {
                dir: dir.path().to_path_buf(),
            },
            bucket: RatioBucket::High,
            seed: 1,
        };
        let mask = sample_mask(&source, 48, 48).unwrap();
        assert!((ratio(&mask) - 0.5).abs() <= 0.02);

        // The same corpus cannot serve the low bucket.
        let low = MaskSource {
            bucket: RatioBucket::Low,
            ..source
        };
        match sample_mask(&low, 48, 48) {
            Err(SairError::Generation(_)) => {}
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn empty_corpus_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let source = MaskSource {
            kind: MaskKind::FileCorpus {
                dir: dir.path().to_path_buf(),
            },
            bucket: RatioBucket::Low,
            seed: 0,
        };
        match sample_mask(&source, 16, 16) {
            Err(SairError::Config(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
