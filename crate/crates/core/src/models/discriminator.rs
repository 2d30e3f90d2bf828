use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{leaky_relu, Conv2d, ConvInit, ConvSpec, Linear, ParamStore};
use crate::error::{Error, Result};

const LRELU_SLOPE: f64 = 0.2;

/// SRGAN-style classifier: pairs of (stride 1, stride 2) 3×3 convolutions
/// doubling channels per pair, then two dense layers and a sigmoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub input_size: usize,
    pub base_channels: usize,
    pub n_downsample_stages: usize,
    pub dense_units: usize,
    pub channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            base_channels: 64,
            n_downsample_stages: 4,
            dense_units: 1024,
            channels: 3,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        let stride = 1usize << self.n_downsample_stages;
        if self.n_downsample_stages == 0 || self.input_size % stride != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 2^{}",
                self.input_size, self.n_downsample_stages
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!(
                "discriminator channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.base_channels == 0 || self.dense_units == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }

    fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage.min(3)
    }

    /// Receptive field of the classifier output. The dense head reads every
    /// position of the final feature grid, which tiles the whole input.
    pub fn receptive_field(&self) -> usize {
        self.input_size.max(self.conv_receptive_field())
    }

    /// Receptive field, in input pixels, of one feature after the conv stack.
    pub fn conv_receptive_field(&self) -> usize {
        let (mut rf, mut jump) = (1usize, 1usize);
        for _ in 0..self.n_downsample_stages {
            rf += 2 * jump;
            rf += 2 * jump;
            jump *= 2;
        }
        rf
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamStore,
    convs: Vec<Conv2d>,
    dense1: Linear,
    dense2: Linear,
}

impl Discriminator {
    pub fn new(
        config: &DiscriminatorConfig,
        dtype: DType,
        device: &Device,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(dtype, device);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut cin = config.channels;
        for stage in 0..config.n_downsample_stages {
            let cout = config.stage_channels(stage);
            for (k, stride) in [(0, 1), (1, 2)] {
                convs.push(params.conv2d(
                    &format!("conv{}", 2 * stage + k),
                    ConvSpec::same3x3(cin, cout).with_stride(stride),
                    ConvInit::Default,
                    &mut rng,
                )?);
                cin = cout;
            }
        }
        let side = config.input_size >> config.n_downsample_stages;
        let dense1 = params.linear("dense1", cin * side * side, config.dense_units, &mut rng)?;
        let dense2 = params.linear("dense2", config.dense_units, 1, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            params,
            convs,
            dense1,
            dense2,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Pre-sigmoid scores, shape `(N,)`. Input is a `[0, 1]` NCHW batch.
    pub fn logits(&self, img: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = img.dims4()?;
        let size = self.config.input_size;
        if h != size || w != size {
            return Err(Error::Shape(format!(
                "discriminator expects {size}x{size} inputs, got {h}x{w}"
            )));
        }
        let mut x = match (c, self.config.channels) {
            (a, b) if a == b => img.clone(),
            (1, 3) => img.repeat((1, 3, 1, 1))?,
            (a, b) => {
                return Err(Error::Channel(format!(
                    "discriminator expects {b} channels, got {a}"
                )))
            }
        };
        x = x.affine(2.0, -1.0)?;
        for conv in &self.convs {
            x = leaky_relu(&conv.forward(&x)?, LRELU_SLOPE)?;
        }
        let x = x.reshape((n, ()))?;
        let x = leaky_relu(&self.dense1.forward(&x)?, LRELU_SLOPE)?;
        Ok(self.dense2.forward(&x)?.reshape(n)?)
    }

    /// Real/fake probabilities in `(0, 1)`, shape `(N,)`.
    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.logits(img)?)?)
    }
}
