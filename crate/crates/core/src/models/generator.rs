use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{leaky_relu, Conv2d, ConvInit, ConvSpec, ParamStore};
use crate::error::{Error, Result};

const LRELU_SLOPE: f64 = 0.2;

/// RRDB generator hyper-parameters. Defaults are the ESRGAN ×4 network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_rrdb_blocks: usize,
    pub base_channels: usize,
    pub growth_channels: usize,
    pub scale: usize,
    pub residual_scaling: f64,
    pub channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_rrdb_blocks: 23,
            base_channels: 64,
            growth_channels: 32,
            scale: 4,
            residual_scaling: 0.2,
            channels: 3,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4, 8].contains(&self.scale) {
            return Err(Error::Config(format!(
                "generator scale must be 1, 2, 4 or 8, got {}",
                self.scale
            )));
        }
        if !(self.residual_scaling > 0.0 && self.residual_scaling <= 1.0) {
            return Err(Error::Config(format!(
                "residual_scaling must be in (0, 1], got {}",
                self.residual_scaling
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!(
                "generator channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.base_channels == 0 || self.growth_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }

    /// Number of ×2 nearest-neighbour + conv stages.
    pub fn upsample_stages(&self) -> usize {
        self.scale.trailing_zeros() as usize
    }
}

/// Five densely connected convolutions with a scaled residual.
#[derive(Clone, Debug)]
struct DenseBlock {
    convs: [Conv2d; 5],
    residual_scaling: f64,
}

impl DenseBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &GeneratorConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (nf, gc) = (cfg.base_channels, cfg.growth_channels);
        let mut make = |i: usize, cin: usize, cout: usize| {
            store.conv2d(
                &format!("{name}.conv{i}"),
                ConvSpec::same3x3(cin, cout),
                ConvInit::KaimingScaled(0.1),
                rng,
            )
        };
        Ok(Self {
            convs: [
                make(1, nf, gc)?,
                make(2, nf + gc, gc)?,
                make(3, nf + 2 * gc, gc)?,
                make(4, nf + 3 * gc, gc)?,
                make(5, nf + 4 * gc, nf)?,
            ],
            residual_scaling: cfg.residual_scaling,
        })
    }

    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let mut feats = vec![xs.clone()];
        for conv in &self.convs[..4] {
            let input = Tensor::cat(&feats, 1)?;
            feats.push(leaky_relu(&conv.forward(&input)?, LRELU_SLOPE)?);
        }
        let out = self.convs[4].forward(&Tensor::cat(&feats, 1)?)?;
        (out * self.residual_scaling)? + xs
    }
}

#[derive(Clone, Debug)]
struct Rrdb {
    blocks: [DenseBlock; 3],
    residual_scaling: f64,
}

impl Rrdb {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = xs.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        (h * self.residual_scaling)? + xs
    }
}

/// The super-resolution network `G`.
///
/// Takes and returns `[0, 1]` NCHW tensors; internally the network runs on
/// the symmetric `[-1, 1]` range. The output is not clamped.
#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamStore,
    conv_first: Conv2d,
    body: Vec<Rrdb>,
    conv_body: Conv2d,
    upsample: Vec<Conv2d>,
    conv_hr: Conv2d,
    conv_last: Conv2d,
}

impl Generator {
    pub fn new(config: &GeneratorConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(dtype, device);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nf = config.base_channels;
        let conv_first = params.conv2d(
            "conv_first",
            ConvSpec::same3x3(config.channels, nf),
            ConvInit::Default,
            &mut rng,
        )?;
        let mut body = Vec::with_capacity(config.n_rrdb_blocks);
        for i in 0..config.n_rrdb_blocks {
            let mut block = |j: usize| {
                DenseBlock::new(&mut params, &format!("body.{i}.rdb{j}"), config, &mut rng)
            };
            let blocks = [block(1)?, block(2)?, block(3)?];
            body.push(Rrdb {
                blocks,
                residual_scaling: config.residual_scaling,
            });
        }
        let conv_body = params.conv2d(
            "conv_body",
            ConvSpec::same3x3(nf, nf),
            ConvInit::Default,
            &mut rng,
        )?;
        let upsample = (0..config.upsample_stages())
            .map(|i| {
                params.conv2d(
                    &format!("conv_up{}", i + 1),
                    ConvSpec::same3x3(nf, nf),
                    ConvInit::Default,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let conv_hr = params.conv2d(
            "conv_hr",
            ConvSpec::same3x3(nf, nf),
            ConvInit::Default,
            &mut rng,
        )?;
        let conv_last = params.conv2d(
            "conv_last",
            ConvSpec::same3x3(nf, config.channels),
            ConvInit::Default,
            &mut rng,
        )?;
        Ok(Self {
            config: config.clone(),
            params,
            conv_first,
            body,
            conv_body,
            upsample,
            conv_hr,
            conv_last,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn forward(&self, lr: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = lr.dims4()?;
        if c != self.config.channels {
            return Err(Error::Channel(format!(
                "generator expects {} channels, got {c}",
                self.config.channels
            )));
        }
        let x = lr.affine(2.0, -1.0)?;
        let feat = self.conv_first.forward(&x)?;
        let mut body = feat.clone();
        for block in &self.body {
            body = block.forward(&body)?;
        }
        let mut feat = (feat + self.conv_body.forward(&body)?)?;
        for conv in &self.upsample {
            let (_, _, fh, fw) = feat.dims4()?;
            feat = feat.upsample_nearest2d(fh * 2, fw * 2)?;
            feat = leaky_relu(&conv.forward(&feat)?, LRELU_SLOPE)?;
        }
        let feat = leaky_relu(&self.conv_hr.forward(&feat)?, LRELU_SLOPE)?;
        Ok(self.conv_last.forward(&feat)?.affine(0.5, 0.5)?)
    }
}
