//! Minimal trainable-layer toolkit over candle tensors: a name-keyed
//! parameter store with seeded init, the conv/linear/MLP layers the models
//! are assembled from, and an Adam optimizer whose state round-trips through
//! checkpoints bit-for-bit.

use std::cell::RefCell;
use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SairError};
use crate::rng::stream_key;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in ±1/sqrt(fan_in), the conventional conv/linear default.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

/// Name-keyed store of trainable parameters.
///
/// Initial values depend only on `(seed, name, shape)`, never on creation
/// order, so rebuilding a model under the same seed reproduces identical
/// weights. Loading a checkpoint pre-seeds names; `take` then returns the
/// stored value instead of drawing a fresh one.
#[derive(Debug)]
pub struct Params {
    seed: u64,
    dtype: DType,
    device: Device,
    vars: RefCell<BTreeMap<String, Var>>,
}

impl Params {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Params {
            seed,
            dtype,
            device: device.clone(),
            vars: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fetch the parameter `name`, drawing it from the seeded init if it
    /// does not exist yet. Shape conflicts with a stored value are errors.
    pub fn take(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut vars = self.vars.borrow_mut();
        if let Some(var) = vars.get(name) {
            if var.dims() != shape {
                return Err(SairError::shape(
                    format!("parameter {name}"),
                    format!("{shape:?}"),
                    format!("{:?}", var.dims()),
                ));
            }
            return Ok(var.as_tensor().clone());
        }
        let numel: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut rng = ChaCha8Rng::from_seed(stream_key(self.seed, &["param", name]));
                (0..numel)
                    .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
                    .collect()
            }
        };
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Overwrite (or create) a parameter from a checkpointed tensor.
    pub fn load(&self, name: &str, tensor: &Tensor) -> Result<()> {
        let tensor = tensor.to_dtype(self.dtype)?.to_device(&self.device)?;
        let mut vars = self.vars.borrow_mut();
        if let Some(var) = vars.get(name) {
            var.set(&tensor)?;
        } else {
            vars.insert(name.to_string(), Var::from_tensor(&tensor)?);
        }
        Ok(())
    }

    /// All parameters in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.vars
            .borrow()
            .iter()
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        self.vars.borrow().get(name).map(|v| v.as_tensor().clone())
    }

    pub fn param_count(&self) -> usize {
        self.vars
            .borrow()
            .values()
            .map(|v| v.elem_count())
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn dtype(&self) -> DType {
        self.weight.dtype()
    }

    pub fn new(
        params: &Params,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = params.take(
            &format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            Init::Uniform { fan_in },
        )?;
        let bias = params.take(&format!("{name}.bias"), &[out_ch], Init::Uniform { fan_in })?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let bias = self.bias.reshape((1, self.bias.elem_count(), 1, 1))?;
        Ok(y.broadcast_add(&bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        params: &Params,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        // Transposed-conv weight layout is (in, out, k, k).
        let weight = params.take(
            &format!("{name}.weight"),
            &[in_ch, out_ch, kernel, kernel],
            Init::Uniform { fan_in },
        )?;
        let bias = params.take(&format!("{name}.bias"), &[out_ch], Init::Uniform { fan_in })?;
        Ok(ConvTranspose2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, self.padding, 0, self.stride, 1)?;
        let bias = self.bias.reshape((1, self.bias.elem_count(), 1, 1))?;
        Ok(y.broadcast_add(&bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(params: &Params, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = params.take(
            &format!("{name}.weight"),
            &[out_dim, in_dim],
            Init::Uniform { fan_in: in_dim },
        )?;
        let bias = params.take(
            &format!("{name}.bias"),
            &[out_dim],
            Init::Uniform { fan_in: in_dim },
        )?;
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Fully-connected stack with ReLU between layers, linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists every layer boundary: `[in, h1, ..., out]`.
    pub fn new(params: &Params, name: &str, dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(SairError::InvalidArgument(format!(
                "mlp {name} needs at least input and output dims"
            )));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, pair) in dims.windows(2).enumerate() {
            layers.push(Linear::new(
                params,
                &format!("{name}.{i}"),
                pair[0],
                pair[1],
            )?);
        }
        Ok(Mlp { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }
}

/// LayerNorm over the last dimension with affine weights.
pub fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mu = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mu)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(weight)?.broadcast_add(bias)?)
}

/// Adam with bias correction. Moments are name-keyed so optimizer state can
/// be checkpointed next to the parameters and restored exactly.
#[derive(Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    grad_clip: Option<f64>,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn with_grad_clip(mut self, clip: Option<f64>) -> Self {
        self.grad_clip = clip;
        self
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &[(String, Var)], grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);

        let scale = match self.grad_clip {
            None => 1.0,
            Some(clip) => {
                let mut sq = 0.0f64;
                for (_, var) in params {
                    if let Some(g) = grads.get(var.as_tensor()) {
                        sq += g
                            .sqr()?
                            .sum_all()?
                            .to_dtype(DType::F64)?
                            .to_scalar::<f64>()?;
                    }
                }
                let norm = sq.sqrt();
                if norm > clip {
                    clip / norm
                } else {
                    1.0
                }
            }
        };

        for (name, var) in params {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let grad = if scale != 1.0 {
                (grad * scale)?
            } else {
                grad.clone()
            };
            if !self.moments.contains_key(name) {
                let zeros = grad.zeros_like()?;
                self.moments
                    .insert(name.clone(), (zeros.clone(), zeros));
            }
            let (m, v) = self.moments.get_mut(name).unwrap();
            // Detach: without this the moments would chain to the step's
            // whole autodiff graph (and, transitively, every prior step's),
            // pinning it in memory for the rest of the run.
            *m = ((&*m * self.beta1)? + (&grad * (1.0 - self.beta1))?)?.detach();
            *v = ((&*v * self.beta2)? + (grad.sqr()? * (1.0 - self.beta2))?)?.detach();
            let m_hat = (&*m / c1)?;
            let v_hat = (&*v / c2)?;
            let update = (m_hat * self.lr)?.div(&(v_hat.sqrt()? + self.eps)?)?;
            var.set(&var.as_tensor().sub(&update)?)?;
        }
        Ok(())
    }

    /// Moment tensors under stable names for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.moments.len() * 2);
        for (name, (m, v)) in &self.moments {
            out.push((format!("adam.m.{name}"), m.clone()));
            out.push((format!("adam.v.{name}"), v.clone()));
        }
        out
    }

    pub fn load_state(&mut self, step: u64, moments: BTreeMap<String, (Tensor, Tensor)>) {
        self.step = step;
        self.moments = moments;
    }

    pub fn moments(&self) -> &BTreeMap<String, (Tensor, Tensor)> {
        &self.moments
    }
}
