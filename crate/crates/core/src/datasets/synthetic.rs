//! Procedural "shapes" images for tests and desk-scale runs: a smooth
//! background gradient with a few filled discs and rectangles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imaging::{ImageTensor, ValueRange};

/// `n` images of `size × size` with `channels` channels, deterministic in `seed`.
pub fn shapes(n: usize, size: usize, channels: usize, seed: u64) -> Vec<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| one(size, channels, &mut rng)).collect()
}

fn one(size: usize, channels: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    let s = size as f32;
    let color = |rng: &mut ChaCha8Rng| -> Vec<f32> { (0..channels).map(|_| rng.random::<f32>()).collect() };
    let c0 = color(rng);
    let c1 = color(rng);
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut data = vec![0.0f32; size * size * channels];
    for y in 0..size {
        for x in 0..size {
            let t = 0.5 + 0.5 * ((x as f32 / s - 0.5) * dx + (y as f32 / s - 0.5) * dy);
            for c in 0..channels {
                data[(y * size + x) * channels + c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }
    let n_shapes = rng.random_range(2..=4);
    for _ in 0..n_shapes {
        let fill = color(rng);
        let cx = rng.random_range(0.0..s);
        let cy = rng.random_range(0.0..s);
        let r = rng.random_range(0.12 * s..0.35 * s);
        let disc = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let inside = if disc {
                    px * px + py * py <= r * r
                } else {
                    px.abs() <= r && py.abs() <= 0.6 * r
                };
                if inside {
                    data[(y * size + x) * channels..][..channels].copy_from_slice(&fill);
                }
            }
        }
    }
    ImageTensor::new(size, size, channels, ValueRange::Unit, data).expect("valid synthetic image")
}
