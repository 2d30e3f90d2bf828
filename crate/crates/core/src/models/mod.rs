//! Networks: the RRDB generator, the discriminator and the frozen
//! perceptual feature extractor, plus the checkpoint container.

pub mod checkpoint;
mod discriminator;
mod generator;
mod params;
mod vgg;

use candle_core::Tensor;

pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::{Generator, GeneratorConfig};
pub use params::{Conv2d, ConvInit, ConvSpec, Linear, ParamStore};
pub use vgg::{Backbone, FeatureExtractor, FeatureExtractorSpec, Tap};

use crate::error::Result;

/// Repeats a single-channel NCHW batch to three channels; other inputs pass through.
pub fn replicate_to_rgb(xs: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = xs.dims4()?;
    Ok(if c == 1 {
        xs.repeat((1, 3, 1, 1))?
    } else {
        xs.clone()
    })
}
