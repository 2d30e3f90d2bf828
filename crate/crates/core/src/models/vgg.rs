//! Frozen VGG-19 feature extractor for perceptual losses.
//!
//! The tap `(pool_index i, conv_index j)` selects the `j`-th convolution of
//! block `i`, i.e. the `j`-th convolution before the `i`-th max-pool; the
//! default `(5, 4)` is `conv5_4`. Weights come from a safetensors file in
//! torchvision layout (`features.{idx}.weight`) or, when none is given, from
//! a seeded He-normal initialisation. Either way they are plain tensors,
//! never optimiser variables.

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::Conv2d;
use crate::error::{Error, Result};

/// Convolutions per block for VGG-19.
const VGG19_BLOCKS: [usize; 5] = [2, 2, 4, 4, 4];
const VGG19_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    Vgg19Imagenet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tap {
    pub pool_index: usize,
    pub conv_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureExtractorSpec {
    pub backbone: Backbone,
    pub tap: Tap,
    pub pre_activation: bool,
    /// Divides every layer width; 1 is the standard network. Values above 1
    /// are only meaningful without pretrained weights.
    pub width_divisor: usize,
    pub weights: Option<PathBuf>,
    pub seed: u64,
}

impl Default for FeatureExtractorSpec {
    fn default() -> Self {
        Self {
            backbone: Backbone::Vgg19Imagenet,
            tap: Tap {
                pool_index: 5,
                conv_index: 4,
            },
            pre_activation: true,
            width_divisor: 1,
            weights: None,
            seed: 0x5eed_f00d,
        }
    }
}

impl FeatureExtractorSpec {
    pub fn with_tap(mut self, pool_index: usize, conv_index: usize) -> Self {
        self.tap = Tap {
            pool_index,
            conv_index,
        };
        self
    }

    pub fn with_width_divisor(mut self, d: usize) -> Self {
        self.width_divisor = d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let Tap {
            pool_index,
            conv_index,
        } = self.tap;
        if pool_index == 0 || pool_index > VGG19_BLOCKS.len() {
            return Err(Error::Config(format!(
                "tap pool_index must be 1..=5, got {pool_index}"
            )));
        }
        let convs = VGG19_BLOCKS[pool_index - 1];
        if conv_index == 0 || conv_index > convs {
            return Err(Error::Config(format!(
                "block {pool_index} has {convs} convolutions, tap conv_index {conv_index} does not exist"
            )));
        }
        if self.width_divisor == 0 {
            return Err(Error::Config("width_divisor must be >= 1".into()));
        }
        if self.weights.is_some() && self.width_divisor != 1 {
            return Err(Error::Config(
                "pretrained weights require width_divisor = 1".into(),
            ));
        }
        Ok(())
    }

    /// Spatial reduction between the input and the tap.
    pub fn downsampling(&self) -> usize {
        1 << (self.tap.pool_index - 1)
    }

    /// Channel count of the tapped feature map.
    pub fn tap_channels(&self) -> usize {
        (VGG19_WIDTHS[self.tap.pool_index - 1] / self.width_divisor).max(1)
    }
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    spec: FeatureExtractorSpec,
    /// Convolutions grouped by block; the last block is truncated at the tap.
    blocks: Vec<Vec<Conv2d>>,
    mean: Tensor,
    std: Tensor,
}

impl FeatureExtractor {
    pub fn new(spec: &FeatureExtractorSpec, dtype: DType, device: &Device) -> Result<Self> {
        spec.validate()?;
        let pretrained = match &spec.weights {
            Some(path) => Some(
                candle_core::safetensors::load(path, device).map_err(|e| {
                    Error::Checkpoint(format!("loading {}: {e}", path.display()))
                })?,
            ),
            None => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut blocks = Vec::new();
        let mut cin = 3;
        // torchvision index: conv, relu per conv and one pool per block
        let mut layer_idx = 0;
        for (b, (&n_convs, &width)) in VGG19_BLOCKS.iter().zip(&VGG19_WIDTHS).enumerate() {
            if b >= spec.tap.pool_index {
                break;
            }
            let cout = (width / spec.width_divisor).max(1);
            let mut convs = Vec::new();
            let last = if b + 1 == spec.tap.pool_index {
                spec.tap.conv_index
            } else {
                n_convs
            };
            for _ in 0..last {
                let (w, bias) = match &pretrained {
                    Some(map) => {
                        let fetch = |suffix: &str| {
                            let key = format!("features.{layer_idx}.{suffix}");
                            map.get(&key)
                                .cloned()
                                .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))
                        };
                        let w = fetch("weight")?;
                        if w.dims() != [cout, cin, 3, 3] {
                            return Err(Error::Checkpoint(format!(
                                "features.{layer_idx}.weight has shape {:?}, expected {:?}",
                                w.dims(),
                                [cout, cin, 3, 3]
                            )));
                        }
                        (w, fetch("bias")?)
                    }
                    None => {
                        let std = (2.0 / (cin * 9) as f64).sqrt();
                        let dist = Normal::new(0.0, std).expect("valid std");
                        let w: Vec<f64> = (0..cout * cin * 9).map(|_| dist.sample(&mut rng)).collect();
                        (
                            Tensor::from_vec(w, (cout, cin, 3, 3), device)?,
                            Tensor::zeros(cout, DType::F64, device)?,
                        )
                    }
                };
                convs.push(Conv2d::from_tensors(
                    w.to_dtype(dtype)?,
                    bias.to_dtype(dtype)?,
                    1,
                    1,
                ));
                cin = cout;
                layer_idx += 2;
            }
            layer_idx += 1;
            blocks.push(convs);
        }
        let mean = Tensor::from_slice(&IMAGENET_MEAN, (1, 3, 1, 1), device)?.to_dtype(dtype)?;
        let std = Tensor::from_slice(&IMAGENET_STD, (1, 3, 1, 1), device)?.to_dtype(dtype)?;
        Ok(Self {
            spec: spec.clone(),
            blocks,
            mean,
            std,
        })
    }

    pub fn spec(&self) -> &FeatureExtractorSpec {
        &self.spec
    }

    /// Weights and biases of every convolution up to the tap, in order.
    pub fn layers(&self) -> impl Iterator<Item = (&Tensor, &Tensor)> {
        self.blocks
            .iter()
            .flatten()
            .map(|c| (c.weight(), c.bias()))
    }

    /// Input normalisation statistics (per-channel mean and std).
    pub fn normalization(&self) -> ([f64; 3], [f64; 3]) {
        (IMAGENET_MEAN, IMAGENET_STD)
    }

    /// Tap features of a `[0, 1]` three-channel NCHW batch.
    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = img.dims4()?;
        if c != 3 {
            return Err(Error::Channel(format!(
                "feature extractor needs 3-channel input, got {c}; replicate grayscale channels upstream"
            )));
        }
        let down = self.spec.downsampling();
        if h < down || w < down || h % down != 0 || w % down != 0 {
            return Err(Error::Shape(format!(
                "tap {:?} needs inputs that are positive multiples of {down}, got {h}x{w}",
                self.spec.tap
            )));
        }
        let mut x = img
            .to_dtype(self.mean.dtype())?
            .broadcast_sub(&self.mean)?
            .broadcast_div(&self.std)?;
        let n_blocks = self.blocks.len();
        for (b, convs) in self.blocks.iter().enumerate() {
            let is_tap_block = b + 1 == n_blocks;
            for (k, conv) in convs.iter().enumerate() {
                x = conv.forward(&x)?;
                let is_tap = is_tap_block && k + 1 == convs.len();
                if !(is_tap && self.spec.pre_activation) {
                    x = x.relu()?;
                }
            }
            if !is_tap_block {
                x = max_pool_2x2(&x)?;
            }
        }
        Ok(x)
    }
}

/// 2×2 max-pool built from reductions.
///
/// candle's fused `max_pool2d` backward scales the gradient by the share of
/// maxima in the window instead of dividing by it, so it is avoided here.
fn max_pool_2x2(xs: &Tensor) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = xs.dims4()?;
    xs.reshape((n, c, h / 2, 2, w / 2, 2))?.max(5)?.max(3)
}
