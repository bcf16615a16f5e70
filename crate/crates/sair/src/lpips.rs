//! Learned perceptual distance with a pluggable backend.
//!
//! The metric is only meaningful with trained feature weights, so there is
//! no built-in fallback: when no backend is configured the score is
//! reported as absent rather than approximated.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;

use crate::error::{Result, SairError};

/// A perceptual-distance implementation. Distances are nonnegative and
/// zero for identical inputs.
pub trait PerceptualBackend {
    fn distance(&self, pred: &Array3<f64>, gt: &Array3<f64>) -> Result<f64>;
    fn name(&self) -> &str;
}

/// Perceptual distance, or `None` when no backend is configured. Shape
/// checking happens either way so a missing backend does not hide bad
/// callers.
pub fn lpips(
    pred: &Array3<f64>,
    gt: &Array3<f64>,
    backend: Option<&dyn PerceptualBackend>,
) -> Result<Option<f64>> {
    if pred.dim() != gt.dim() {
        return Err(SairError::shape(
            "lpips",
            format!("{:?}", gt.dim()),
            format!("{:?}", pred.dim()),
        ));
    }
    match backend {
        Some(b) => Ok(Some(b.distance(pred, gt)?)),
        None => Ok(None),
    }
}

/// Feature-space distance network: a stack of stride-1 3x3 conv stages with
/// ReLU, 2x average pooling between stages, unit-normalized channel
/// activations, and per-channel nonnegative weights on squared feature
/// differences.
///
/// Weights load from a safetensors file with names `stage.{i}.weight`
/// `[c_out, c_in, 3, 3]`, `stage.{i}.bias` `[c_out]`, and `lin.{i}.weight`
/// `[c_out]`; stage 0 consumes RGB.
pub struct ConvPerceptualNet {
    stages: Vec<(Tensor, Tensor)>,
    lin: Vec<Tensor>,
    device: Device,
}

impl ConvPerceptualNet {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(SairError::Config(format!(
                "perceptual weights not found at {}",
                path.display()
            )));
        }
        let device = Device::Cpu;
        let tensors = candle_core::safetensors::load(path, &device)?;
        Self::from_tensors(&tensors, device)
    }

    pub fn from_tensors(tensors: &HashMap<String, Tensor>, device: Device) -> Result<Self> {
        let mut stages = Vec::new();
        let mut lin = Vec::new();
        for i in 0.. {
            let Some(w) = tensors.get(&format!("stage.{i}.weight")) else {
                break;
            };
            let b = tensors
                .get(&format!("stage.{i}.bias"))
                .ok_or_else(|| SairError::Config(format!("missing stage.{i}.bias")))?;
            let l = tensors
                .get(&format!("lin.{i}.weight"))
                .ok_or_else(|| SairError::Config(format!("missing lin.{i}.weight")))?;
            let w = w.to_dtype(DType::F64)?;
            let b = b.to_dtype(DType::F64)?;
            // Nonnegative channel weights keep the metric a distance.
            let l = l.to_dtype(DType::F64)?.abs()?;
            let expected_in = if i == 0 {
                3
            } else {
                stages
                    .last()
                    .map(|(pw, _): &(Tensor, Tensor)| pw.dim(0).unwrap_or(0))
                    .unwrap_or(3)
            };
            if w.dims() != [w.dim(0)?, expected_in, 3, 3] {
                return Err(SairError::shape(
                    &format!("stage.{i}.weight"),
                    format!("[c_out, {expected_in}, 3, 3]"),
                    format!("{:?}", w.dims()),
                ));
            }
            if l.dims() != [w.dim(0)?] {
                return Err(SairError::shape(
                    &format!("lin.{i}.weight"),
                    format!("[{}]", w.dim(0)?),
                    format!("{:?}", l.dims()),
                ));
            }
            stages.push((w, b));
            lin.push(l);
        }
        if stages.is_empty() {
            return Err(SairError::Config(
                "perceptual weights contain no stage.0.weight".into(),
            ));
        }
        Ok(Self {
            stages,
            lin,
            device,
        })
    }

    /// Small randomly weighted instance for tests and smoke runs. The
    /// weights are untrained, so scores rank distortions only coarsely.
    pub fn synthetic(seed: u64) -> Result<Self> {
        let device = Device::Cpu;
        let mut tensors = HashMap::new();
        let widths = [3usize, 8, 16];
        for i in 0..widths.len() - 1 {
            let (c_in, c_out) = (widths[i], widths[i + 1]);
            let mut rng = crate::rng::stream_rng(seed, &["perceptual", &i.to_string()]);
            let bound = 1.0 / ((c_in * 9) as f64).sqrt();
            let w: Vec<f64> = (0..c_out * c_in * 9)
                .map(|_| rand::Rng::random_range(&mut rng, -bound..bound))
                .collect();
            let l: Vec<f64> = (0..c_out)
                .map(|_| rand::Rng::random_range(&mut rng, 0.1..1.0))
                .collect();
            tensors.insert(
                format!("stage.{i}.weight"),
                Tensor::from_vec(w, (c_out, c_in, 3, 3), &device)?,
            );
            tensors.insert(
                format!("stage.{i}.bias"),
                Tensor::zeros((c_out,), DType::F64, &device)?,
            );
            tensors.insert(
                format!("lin.{i}.weight"),
                Tensor::from_vec(l, (c_out,), &device)?,
            );
        }
        Self::from_tensors(&tensors, device)
    }

    fn features(&self, image: &Array3<f64>) -> Result<Vec<Tensor>> {
        let (h, w, _) = image.dim();
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    data.push(2.0 * image[[i, j, c]] - 1.0);
                }
            }
        }
        let mut x = Tensor::from_vec(data, (1, 3, h, w), &self.device)?;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, (wt, b)) in self.stages.iter().enumerate() {
            if i > 0 {
                x = x.avg_pool2d(2)?;
            }
            x = x
                .conv2d(wt, 1, 1, 1, 1)?
                .broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?
                .relu()?;
            // Unit-normalize along channels so the comparison is about
            // feature direction, not magnitude.
            let norm = x.sqr()?.sum_keepdim(1)?.sqrt()?;
            out.push(x.broadcast_div(&(norm + 1e-10)?)?);
        }
        Ok(out)
    }
}

impl PerceptualBackend for ConvPerceptualNet {
    fn distance(&self, pred: &Array3<f64>, gt: &Array3<f64>) -> Result<f64> {
        let (h, w, _) = pred.dim();
        let min_side = 1 << (self.stages.len() - 1);
        if h < min_side * 4 || w < min_side * 4 {
            return Err(SairError::InvalidArgument(format!(
                "perceptual backend with {} stages needs images at least {}x{}, got {h}x{w}",
                self.stages.len(),
                min_side * 4,
                min_side * 4
            )));
        }
        let fa = self.features(pred)?;
        let fb = self.features(gt)?;
        let mut total = 0.0;
        for ((a, b), l) in fa.iter().zip(fb.iter()).zip(self.lin.iter()) {
            let diff = (a - b)?.sqr()?;
            let weighted = diff.broadcast_mul(&l.reshape((1, l.dim(0)?, 1, 1))?)?;
            // Sum over channels, mean over pixels.
            total += weighted.sum(1)?.mean_all()?.to_scalar::<f64>()?;
        }
        Ok(total)
    }

    fn name(&self) -> &str {
        "conv-perceptual"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, phase: f64) -> Array3<f64> {
        Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
            (0.5 + 0.4 * ((i as f64 * 0.31 + j as f64 * 0.17 + c as f64 + phase).sin()))
                .clamp(0.0, 1.0)
        })
    }

    #[test]
    fn absent_backend_reports_none_but_checks_shapes() {
        let a = image(16, 16, 0.0);
        let b = image(16, 16, 1.0);
        assert_eq!(lpips(&a, &b, None).unwrap(), None);
        let c = image(16, 18, 0.0);
        assert!(lpips(&a, &c, None).is_err());
    }

    #[test]
    fn identical_images_have_zero_distance() {
        let net = ConvPerceptualNet::synthetic(0).unwrap();
        let a = image(16, 16, 0.3);
        let d = lpips(&a, &a, Some(&net)).unwrap().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn distance_grows_with_distortion_and_is_symmetric() {
        let net = ConvPerceptualNet::synthetic(0).unwrap();
        let gt = image(16, 16, 0.0);
        let mut near = gt.clone();
        let mut far = gt.clone();
        for (k, v) in near.iter_mut().enumerate() {
            *v = (*v + if k % 2 == 0 { 0.03 } else { -0.03 }).clamp(0.0, 1.0);
        }
        for (k, v) in far.iter_mut().enumerate() {
            *v = (*v + if k % 2 == 0 { 0.35 } else { -0.35 }).clamp(0.0, 1.0);
        }
        let d_near = net.distance(&near, &gt).unwrap();
        let d_far = net.distance(&far, &gt).unwrap();
        assert!(d_near > 0.0);
        assert!(d_far > d_near, "d_far {d_far} vs d_near {d_near}");
        let d_rev = net.distance(&gt, &far).unwrap();
        assert!((d_far - d_rev).abs() < 1e-12);
    }

    #[test]
    fn weight_files_round_trip() {
        let net = ConvPerceptualNet::synthetic(3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("perceptual.safetensors");
        let mut tensors = std::collections::HashMap::new();
        for (i, (w, b)) in net.stages.iter().enumerate() {
            tensors.insert(format!("stage.{i}.weight"), w.clone());
            tensors.insert(format!("stage.{i}.bias"), b.clone());
            tensors.insert(format!("lin.{i}.weight"), net.lin[i].clone());
        }
        candle_core::safetensors::save(&tensors, &path).unwrap();
        let loaded = ConvPerceptualNet::load(&path).unwrap();
        let a = image(16, 16, 0.0);
        let b = image(16, 16, 2.0);
        let d0 = net.distance(&a, &b).unwrap();
        let d1 = loaded.distance(&a, &b).unwrap();
        assert!((d0 - d1).abs() < 1e-12);

        assert!(matches!(
            ConvPerceptualNet::load(&dir.path().join("missing.safetensors")),
            Err(SairError::Config(_))
        ));
    }
}
