use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// Named trainable parameters of one network, in a stable (sorted) order.
///
/// Initialisation draws from an explicit seeded generator, so two stores
/// built from the same config and seed hold bit-identical values.
#[derive(Clone, Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        if self.vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name, var.clone());
        Ok(var)
    }

    /// Registers a free parameter with the given initial values.
    pub fn variable(&mut self, name: &str, init: &Tensor) -> Result<Var> {
        let values = init.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        self.insert(name.to_string(), values, init.dims())
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn var_list(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.dims().to_vec()))
            .collect()
    }

    /// Detached copies of every parameter.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites every parameter from `tensors`; names and shapes must match exactly.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.vars.len(),
                tensors.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// 3×3-style convolution with PyTorch's default uniform initialisation,
    /// optionally scaled (ESRGAN scales residual-branch weights by 0.1).
    pub fn conv2d(
        &mut self,
        name: &str,
        cfg: ConvSpec,
        init: ConvInit,
        rng: &mut ChaCha8Rng,
    ) -> Result<Conv2d> {
        let fan_in = cfg.in_channels * cfg.kernel * cfg.kernel;
        let n = cfg.out_channels * fan_in;
        let weights: Vec<f64> = match init {
            ConvInit::Default => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            ConvInit::KaimingScaled(scale) => {
                let std = (2.0 / fan_in as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| dist.sample(rng) * scale).collect()
            }
        };
        let bias: Vec<f64> = match init {
            ConvInit::Default => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..cfg.out_channels)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect()
            }
            ConvInit::KaimingScaled(_) => vec![0.0; cfg.out_channels],
        };
        let weight = self.insert(
            format!("{name}.weight"),
            weights,
            &[cfg.out_channels, cfg.in_channels, cfg.kernel, cfg.kernel],
        )?;
        let bias = self.insert(format!("{name}.bias"), bias, &[cfg.out_channels])?;
        Ok(Conv2d {
            weight: weight.as_tensor().clone(),
            bias: bias.as_tensor().clone(),
            padding: cfg.padding,
            stride: cfg.stride,
        })
    }

    pub fn linear(
        &mut self,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Linear> {
        let bound = 1.0 / (in_features as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
        let w: Vec<f64> = (0..in_features * out_features)
            .map(|_| dist.sample(rng))
            .collect();
        let b: Vec<f64> = (0..out_features).map(|_| dist.sample(rng)).collect();
        let weight = self.insert(format!("{name}.weight"), w, &[out_features, in_features])?;
        let bias = self.insert(format!("{name}.bias"), b, &[out_features])?;
        Ok(Linear {
            weight: weight.as_tensor().clone(),
            bias: bias.as_tensor().clone(),
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn same3x3(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 3,
            padding: 1,
            stride: 1,
        }
    }

    pub fn with_stride(self, stride: usize) -> Self {
        Self { stride, ..self }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum ConvInit {
    Default,
    KaimingScaled(f64),
}

/// Convolution whose weight and bias share storage with a [`ParamStore`] var.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
    stride: usize,
}

impl Conv2d {
    pub fn from_tensors(weight: Tensor, bias: Tensor, padding: usize, stride: usize) -> Self {
        Self {
            weight,
            bias,
            padding,
            stride,
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let ys = xs.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        ys.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        xs.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}

pub(crate) fn leaky_relu(xs: &Tensor, slope: f64) -> candle_core::Result<Tensor> {
    candle_nn::ops::leaky_relu(xs, slope)
}
