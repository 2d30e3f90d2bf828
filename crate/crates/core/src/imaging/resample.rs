//! Separable resampling weights.
//!
//! Every resize in the crate (degradation, dataset preparation, FID input
//! scaling) is expressed as a pair of dense weight matrices, one per axis:
//! `out = Wh · img · Wwᵀ`. The plain-array path in [`super::degrade`] and the
//! autodiff path in [`super::degrade_tensor`] both consume the same matrices.

use serde::{Deserialize, Serialize};

/// Cubic convolution coefficient. `-0.5` is the Keys kernel used by PIL and
/// torchvision's antialiased bicubic.
pub const BICUBIC_A: f64 = -0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kernel {
    Bicubic,
    AveragePool,
    Nearest,
}

fn cubic(x: f64) -> f64 {
    let a = BICUBIC_A;
    let x = x.abs();
    if x < 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * a
    } else {
        0.0
    }
}

/// Row-major `out_len × in_len` weight matrix for one axis.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisWeights {
    pub out_len: usize,
    pub in_len: usize,
    pub weights: Vec<f64>,
}

impl AxisWeights {
    pub fn row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.in_len..(o + 1) * self.in_len]
    }

    /// Weights for resizing an axis of `in_len` samples to `out_len` samples.
    ///
    /// `antialias` only affects bicubic downscaling, where it widens the
    /// kernel support by the scale factor. Rows always sum to one.
    pub fn new(kernel: Kernel, in_len: usize, out_len: usize, antialias: bool) -> Self {
        assert!(in_len > 0 && out_len > 0, "axis lengths must be positive");
        let mut weights = vec![0.0; out_len * in_len];
        let scale = in_len as f64 / out_len as f64;
        match kernel {
            Kernel::Nearest => {
                for o in 0..out_len {
                    let src = (((o as f64 + 0.5) * scale).floor() as usize).min(in_len - 1);
                    weights[o * in_len + src] = 1.0;
                }
            }
            Kernel::AveragePool => {
                // Box filter over the source footprint of each output sample;
                // for integer factors this is an exact block mean.
                for o in 0..out_len {
                    let lo = o as f64 * scale;
                    let hi = (o as f64 + 1.0) * scale;
                    let row = &mut weights[o * in_len..(o + 1) * in_len];
                    if scale <= 1.0 {
                        let src = ((lo + hi) * 0.5).floor() as usize;
                        row[src.min(in_len - 1)] = 1.0;
                        continue;
                    }
                    for (x, w) in row.iter_mut().enumerate() {
                        let overlap = (hi.min(x as f64 + 1.0) - lo.max(x as f64)).max(0.0);
                        *w = overlap / scale;
                    }
                }
            }
            Kernel::Bicubic => {
                let filter_scale = if antialias { scale.max(1.0) } else { 1.0 };
                let support = 2.0 * filter_scale;
                for o in 0..out_len {
                    let center = (o as f64 + 0.5) * scale;
                    let xmin = ((center - support).floor().max(0.0)) as usize;
                    let xmax = ((center + support).ceil() as usize).min(in_len);
                    let row = &mut weights[o * in_len..(o + 1) * in_len];
                    let mut total = 0.0;
                    for (x, w) in row.iter_mut().enumerate().take(xmax).skip(xmin) {
                        *w = cubic((x as f64 + 0.5 - center) / filter_scale);
                        total += *w;
                    }
                    if total != 0.0 {
                        for w in &mut row[xmin..xmax] {
                            *w /= total;
                        }
                    }
                }
            }
        }
        Self {
            out_len,
            in_len,
            weights,
        }
    }
}
