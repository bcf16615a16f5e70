//! Appearance pipeline: full-resolution appearance features from the masked
//! image and the continuous color decoder that fuses them with the completed
//! semantic field.

use candle_core::Tensor;

use crate::coord::{local_ensemble_query, EnsembleIndex};
use crate::error::{Result, SairError};
use crate::nn::{Conv2d, ConvTranspose2d, Mlp, Params};
use crate::semantic::flatten_cells;

/// Full-resolution appearance grid `Z^app`, `[B, C, H, W]` with C = 64.
#[derive(Debug)]
pub struct AppearanceFeatureMap {
    pub features: Tensor,
}

/// Hourglass appearance encoder. Stage roster (input `[B, 4, H, W]`):
/// 7×7 stride-1 into 64ch, two stride-2 downs (128, 256), eight residual
/// blocks at H/4, then two stride-2 transposed convs back up (128, 64).
/// Every conv is followed by ReLU; block skips are additive.
///
/// The final two stages must be transposed convolutions: stride-2 forward
/// convs cannot reach the declared output sizes (H/2, then H×W).
#[derive(Debug)]
pub struct AppearanceEncoder {
    conv_in: Conv2d,
    down1: Conv2d,
    down2: Conv2d,
    blocks: Vec<(Conv2d, Conv2d)>,
    up1: ConvTranspose2d,
    up2: ConvTranspose2d,
}

pub const APPEARANCE_CHANNELS: usize = 64;

impl AppearanceEncoder {
    pub fn new(params: &Params, name: &str) -> Result<Self> {
        let mut blocks = Vec::with_capacity(8);
        for i in 0..8 {
            blocks.push((
                Conv2d::new(params, &format!("{name}.block{i}.0"), 256, 256, 3, 1, 1)?,
                Conv2d::new(params, &format!("{name}.block{i}.1"), 256, 256, 3, 1, 1)?,
            ));
        }
        Ok(AppearanceEncoder {
            conv_in: Conv2d::new(params, &format!("{name}.conv_in"), 4, 64, 7, 1, 3)?,
            down1: Conv2d::new(params, &format!("{name}.down1"), 64, 128, 4, 2, 1)?,
            down2: Conv2d::new(params, &format!("{name}.down2"), 128, 256, 4, 2, 1)?,
            blocks,
            up1: ConvTranspose2d::new(params, &format!("{name}.up1"), 256, 128, 4, 2, 1)?,
            up2: ConvTranspose2d::new(params, &format!("{name}.up2"), 128, 64, 4, 2, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(x)?.pop().unwrap().1)
    }

    /// Forward pass that returns every stage output, for shape auditing.
    pub fn forward_traced(&self, x: &Tensor) -> Result<Vec<(String, Tensor)>> {
        let (_b, c, h, w) = x.dims4()?;
        if c != 4 {
            return Err(SairError::shape("appearance encoder", "4 channels", c));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(SairError::shape(
                "appearance encoder",
                "dims divisible by 4",
                format!("{h}x{w}"),
            ));
        }
        let mut trace = Vec::with_capacity(13);
        let x = self.conv_in.forward(x)?.relu()?;
        trace.push(("conv_in".to_string(), x.clone()));
        let x = self.down1.forward(&x)?.relu()?;
        trace.push(("down1".to_string(), x.clone()));
        let mut x = self.down2.forward(&x)?.relu()?;
        trace.push(("down2".to_string(), x.clone()));
        for (i, (a, b)) in self.blocks.iter().enumerate() {
            let h = a.forward(&x)?.relu()?;
            let h = b.forward(&h)?.relu()?;
            x = (x + h)?;
            trace.push((format!("block{i}"), x.clone()));
        }
        let x = self.up1.forward(&x)?.relu()?;
        trace.push(("up1".to_string(), x.clone()));
        let x = self.up2.forward(&x)?.relu()?;
        trace.push(("up2".to_string(), x.clone()));
        Ok(trace)
    }
}

/// Residual super-resolution-style alternative: stride-1 throughout, a head
/// conv, eight residual blocks at 64 channels, and a tail conv with a global
/// skip. Same input/output contract as the hourglass encoder.
#[derive(Debug)]
pub struct EdsrStyleEncoder {
    head: Conv2d,
    blocks: Vec<(Conv2d, Conv2d)>,
    tail: Conv2d,
}

impl EdsrStyleEncoder {
    pub fn new(params: &Params, name: &str) -> Result<Self> {
        let mut blocks = Vec::with_capacity(8);
        for i in 0..8 {
            blocks.push((
                Conv2d::new(params, &format!("{name}.block{i}.0"), 64, 64, 3, 1, 1)?,
                Conv2d::new(params, &format!("{name}.block{i}.1"), 64, 64, 3, 1, 1)?,
            ));
        }
        Ok(EdsrStyleEncoder {
            head: Conv2d::new(params, &format!("{name}.head"), 4, 64, 3, 1, 1)?,
            blocks,
            tail: Conv2d::new(params, &format!("{name}.tail"), 64, 64, 3, 1, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_b, c, _h, _w) = x.dims4()?;
        if c != 4 {
            return Err(SairError::shape("edsr-style encoder", "4 channels", c));
        }
        let head = self.head.forward(x)?;
        let mut x = head.clone();
        for (a, b) in &self.blocks {
            let h = a.forward(&x)?.relu()?;
            let h = b.forward(&h)?;
            x = (x + h)?;
        }
        Ok((self.tail.forward(&x)? + head)?)
    }
}

#[derive(Debug)]
pub enum AppearanceEncoderVariant {
    Table3(AppearanceEncoder),
    EdsrStyle(EdsrStyleEncoder),
}

impl AppearanceEncoderVariant {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            AppearanceEncoderVariant::Table3(e) => e.forward(x),
            AppearanceEncoderVariant::EdsrStyle(e) => e.forward(x),
        }
    }
}

/// Encode `[masked RGB ‖ mask]` into the appearance grid. Missing pixels
/// must already be zeroed; the mask channel carries the missingness signal.
pub fn encode_appearance(
    images: &Tensor,
    masks: &Tensor,
    encoder: &AppearanceEncoderVariant,
) -> Result<AppearanceFeatureMap> {
    let x = Tensor::cat(&[images, masks], 1)?;
    Ok(AppearanceFeatureMap {
        features: encoder.forward(&x)?,
    })
}

/// Color decoder `f_β`: per-neighbor input `[z_q^app ‖ z_q^sem ‖ offset]`
/// (dimension C+c+2), output RGB. The appearance slice is dropped entirely
/// in the semantic-only wiring (input c+2).
#[derive(Debug)]
pub struct AirDecoder {
    mlp: Mlp,
    app_channels: usize,
    sem_channels: usize,
}

impl AirDecoder {
    pub fn new(
        params: &Params,
        name: &str,
        app_channels: usize,
        sem_channels: usize,
        hidden: usize,
    ) -> Result<Self> {
        let input = app_channels + sem_channels + 2;
        let dims = [input, hidden, hidden, hidden, 3];
        Ok(AirDecoder {
            mlp: Mlp::new(params, name, &dims)?,
            app_channels,
            sem_channels,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.app_channels + self.sem_channels + 2
    }

    pub fn app_channels(&self) -> usize {
        self.app_channels
    }

    pub fn sem_channels(&self) -> usize {
        self.sem_channels
    }

    fn decode(&self, features: &Tensor, offsets: &Tensor) -> Result<Tensor> {
        self.mlp.forward(&Tensor::cat(&[features, offsets], 1)?)
    }
}

/// Continuous color query (area ensemble over decoded neighbors). The
/// semantic field is the dense completion cached at the appearance grid's
/// native cell centers, so neighbor lookups are plain gathers. Colors are
/// unconstrained here; clamping to [0,1] happens at image emission.
pub fn air_query(
    app: Option<&AppearanceFeatureMap>,
    sem_field: &Tensor,
    decoder: &AirDecoder,
    index: &EnsembleIndex,
) -> Result<Tensor> {
    let (_b, sc, h, w) = sem_field.dims4()?;
    if index.grid().height() != h || index.grid().width() != w {
        return Err(SairError::shape(
            "air query",
            format!("{h}x{w} grid"),
            format!("{}x{}", index.grid().height(), index.grid().width()),
        ));
    }
    if sc != decoder.sem_channels() {
        return Err(SairError::shape(
            "air query semantic channels",
            decoder.sem_channels(),
            sc,
        ));
    }
    let rows = match app {
        Some(app) => {
            let (_, ac, ah, aw) = app.features.dims4()?;
            if (ah, aw) != (h, w) {
                return Err(SairError::shape(
                    "air query appearance grid",
                    format!("{h}x{w}"),
                    format!("{ah}x{aw}"),
                ));
            }
            if ac != decoder.app_channels() {
                return Err(SairError::shape(
                    "air query appearance channels",
                    decoder.app_channels(),
                    ac,
                ));
            }
            flatten_cells(&Tensor::cat(&[&app.features, sem_field], 1)?)?
        }
        None => {
            if decoder.app_channels() != 0 {
                return Err(SairError::InvalidArgument(
                    "decoder expects appearance features but none were given".into(),
                ));
            }
            flatten_cells(sem_field)?
        }
    };
    local_ensemble_query(&rows, index, |f, o, _| decoder.decode(f, o))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coord::{CoordinateGrid, QueryBatch};
    use candle_core::{DType, Device};

    fn params() -> Params {
        Params::new(5, DType::F32, &Device::Cpu)
    }

    #[test]
    fn hourglass_output_matches_input_resolution() {
        let p = params();
        let enc = AppearanceEncoder::new(&p, "app").unwrap();
        let x = Tensor::zeros((1, 4, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let y = enc.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 64, 64, 64]);
    }

    #[test]
    fn stage_trace_follows_the_declared_ledger() {
        let p = params();
        let enc = AppearanceEncoder::new(&p, "app").unwrap();
        let x = Tensor::zeros((1, 4, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let trace = enc.forward_traced(&x).unwrap();
        let shape = |name: &str| {
            trace
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.dims().to_vec())
                .unwrap()
        };
        assert_eq!(shape("conv_in"), vec![1, 64, 64, 64]);
        assert_eq!(shape("down1"), vec![1, 128, 32, 32]);
        assert_eq!(shape("down2"), vec![1, 256, 16, 16]);
        for i in 0..8 {
            assert_eq!(shape(&format!("block{i}")), vec![1, 256, 16, 16]);
        }
        assert_eq!(shape("up1"), vec![1, 128, 32, 32]);
        assert_eq!(shape("up2"), vec![1, 64, 64, 64]);
    }

    #[test]
    fn wrong_channel_count_and_odd_dims_rejected() {
        let p = params();
        let enc = AppearanceEncoder::new(&p, "app").unwrap();
        let bad_c = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(enc.forward(&bad_c).is_err());
        let bad_dims = Tensor::zeros((1, 4, 18, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(enc.forward(&bad_dims).is_err());
    }

    #[test]
    fn encoder_is_deterministic() {
        let p = params();
        let enc = AppearanceEncoder::new(&p, "app").unwrap();
        let x = Tensor::rand(0f32, 1f32, (1, 4, 16, 16), &Device::Cpu).unwrap();
        let a: Vec<f32> = enc.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = enc.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn edsr_variant_keeps_the_output_contract() {
        let p = params();
        let enc = EdsrStyleEncoder::new(&p, "app").unwrap();
        let x = Tensor::rand(0f32, 1f32, (2, 4, 16, 12), &Device::Cpu).unwrap();
        let y = enc.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 64, 16, 12]);
    }

    #[test]
    fn decoder_input_layout_is_app_sem_offset() {
        let p = params();
        let dec = AirDecoder::new(&p, "air", 64, 24, 256).unwrap();
        assert_eq!(dec.input_dim(), 64 + 24 + 2);
        let ous = AirDecoder::new(&p, "air_ous", 0, 24, 256).unwrap();
        assert_eq!(ous.input_dim(), 24 + 2);
    }

    #[test]
    fn queries_at_cell_centers_share_one_color_for_constant_fields() {
        // At interior cell centers the own-cell weight is 1 and the offset
        // is 0, so constant feature fields must give one constant color.
        let dev = Device::Cpu;
        let p = params();
        let dec = AirDecoder::new(&p, "air", 6, 2, 16).unwrap();
        let grid = CoordinateGrid::new(8, 8).unwrap();
        let queries = vec![grid.coord(2, 2), grid.coord(3, 6), grid.coord(5, 1)];
        let qb = QueryBatch::build(grid, queries).unwrap();
        let idx = crate::coord::EnsembleIndex::new(&[&qb], DType::F32, &dev).unwrap();
        let app = AppearanceFeatureMap {
            features: Tensor::full(0.3f32, (1, 6, 8, 8), &dev).unwrap(),
        };
        let sem = Tensor::full(-0.7f32, (1, 2, 8, 8), &dev).unwrap();
        let out = air_query(Some(&app), &sem, &dec, &idx).unwrap();
        let v: Vec<f32> = out.flatten_all().unwrap().to_vec1().unwrap();
        for k in 0..3 {
            for ch in 0..3 {
                assert!((v[k * 3 + ch] - v[ch]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn grid_mismatch_is_shape_error() {
        let dev = Device::Cpu;
        let p = params();
        let dec = AirDecoder::new(&p, "air", 4, 2, 16).unwrap();
        let grid = CoordinateGrid::new(4, 4).unwrap();
        let qb = QueryBatch::dense(grid, 4, 4).unwrap();
        let idx = crate::coord::EnsembleIndex::new(&[&qb], DType::F32, &dev).unwrap();
        let app = AppearanceFeatureMap {
            features: Tensor::zeros((1, 4, 6, 6), DType::F32, &dev).unwrap(),
        };
        let sem = Tensor::zeros((1, 2, 6, 6), DType::F32, &dev).unwrap();
        match air_query(Some(&app), &sem, &dec, &idx) {
            Err(SairError::Shape { .. }) => {}
            other => panic!("expected shape error, got {other:?}"),
        }
    }
}
