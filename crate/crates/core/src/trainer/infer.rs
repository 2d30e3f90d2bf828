use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{images_to_tensor, ImageTensor, ValueRange};
use crate::models::Generator;

/// Largest LR area processed in one pass when no tiling is configured.
pub const MAX_UNTILED_PIXELS: usize = 512 * 512;

/// Overlapping LR tiles whose outputs are feathered together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tiling {
    /// Tile side in LR pixels.
    pub tile: usize,
    /// Overlap between neighbouring tiles in LR pixels.
    pub overlap: usize,
}

impl Tiling {
    fn starts(&self, len: usize) -> Vec<usize> {
        if len <= self.tile {
            return vec![0];
        }
        let step = self.tile - self.overlap;
        let mut s: Vec<usize> = (0..len - self.tile).step_by(step).collect();
        s.push(len - self.tile);
        s
    }
}

/// Blend weights along one tile axis: a linear ramp over the overlap at
/// every edge that is interior to the image.
fn ramp(len: usize, ramp_len: usize, ramp_start: bool, ramp_end: bool) -> Vec<f32> {
    let rise = |d: usize| {
        if ramp_len == 0 {
            1.0
        } else {
            ((d as f32 + 0.5) / ramp_len as f32).min(1.0)
        }
    };
    (0..len)
        .map(|i| {
            let mut w = 1.0f32;
            if ramp_start {
                w = w.min(rise(i));
            }
            if ramp_end {
                w = w.min(rise(len - 1 - i));
            }
            w
        })
        .collect()
}

fn run(generator: &Generator, lr: &ImageTensor) -> Result<(usize, usize, usize, Vec<f32>)> {
    let dtype = generator.params().dtype();
    let x = images_to_tensor(std::slice::from_ref(lr), dtype, generator.params().device())?;
    let y: Tensor = generator.forward(&x)?.to_dtype(DType::F32)?;
    let (_, c, h, w) = y.dims4()?;
    let hwc = y.squeeze(0)?.permute((1, 2, 0))?.contiguous()?.flatten_all()?.to_vec1::<f32>()?;
    Ok((h, w, c, hwc))
}

/// Super-resolves one `[0, 1]` image; the output is clamped to `[0, 1]`.
pub fn infer(generator: &Generator, lr: &ImageTensor, tiling: Option<Tiling>) -> Result<ImageTensor> {
    let lr = lr.to_range(ValueRange::Unit);
    let Some(t) = tiling else {
        if lr.height() * lr.width() > MAX_UNTILED_PIXELS {
            return Err(Error::Config(format!(
                "a {}x{} input is too large for a single pass; configure tiling (tile and overlap)",
                lr.height(),
                lr.width()
            )));
        }
        let (h, w, c, data) = run(generator, &lr)?;
        return ImageTensor::new(h, w, c, ValueRange::Unit, data);
    };
    if t.tile == 0 || t.overlap >= t.tile {
        return Err(Error::Config(format!(
            "tiling needs tile > overlap, got tile {} and overlap {}",
            t.tile, t.overlap
        )));
    }
    let s = generator.config().scale;
    let (h, w, c) = lr.shape();
    let (oh, ow) = (h * s, w * s);
    let mut acc = vec![0.0f32; oh * ow * c];
    let mut weight = vec![0.0f32; oh * ow];
    let (ys, xs) = (t.starts(h), t.starts(w));
    for &y0 in &ys {
        for &x0 in &xs {
            let (th, tw) = (t.tile.min(h), t.tile.min(w));
            let tile = lr.crop(y0, x0, th, tw)?;
            let (rh, rw, _, out) = run(generator, &tile)?;
            let wy = ramp(rh, t.overlap * s, y0 > 0, y0 + th < h);
            let wx = ramp(rw, t.overlap * s, x0 > 0, x0 + tw < w);
            for i in 0..rh {
                for j in 0..rw {
                    let wt = wy[i] * wx[j];
                    let dst = (y0 * s + i) * ow + x0 * s + j;
                    weight[dst] += wt;
                    for ch in 0..c {
                        acc[dst * c + ch] += wt * out[(i * rw + j) * c + ch];
                    }
                }
            }
        }
    }
    for (px, &wt) in weight.iter().enumerate() {
        for ch in 0..c {
            acc[px * c + ch] /= wt;
        }
    }
    ImageTensor::new(oh, ow, c, ValueRange::Unit, acc)
}
