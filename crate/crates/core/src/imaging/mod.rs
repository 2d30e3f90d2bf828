//! Image I/O, value ranges and the SR → LR degradation operator.
//!
//! Images are stored height-major, width, then channel (HWC interleaved);
//! three-channel images are RGB. Tensors handed to networks are NCHW.

mod resample;

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use resample::{AxisWeights, Kernel, BICUBIC_A};

/// Declared value interval of an [`ImageTensor`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueRange {
    /// `[0, 1]`, the working range of the whole pipeline.
    #[default]
    Unit,
    /// `[-1, 1]`.
    Symmetric,
}

impl ValueRange {
    pub fn bounds(self) -> (f32, f32) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Symmetric => (-1.0, 1.0),
        }
    }

    /// Maps a unit-interval intensity into this range.
    fn from_unit(self, v: f32) -> f32 {
        match self {
            ValueRange::Unit => v,
            ValueRange::Symmetric => v * 2.0 - 1.0,
        }
    }

    fn to_unit(self, v: f32) -> f32 {
        match self {
            ValueRange::Unit => v,
            ValueRange::Symmetric => (v + 1.0) * 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    range: ValueRange,
    data: Vec<f32>,
}

impl ImageTensor {
    /// Builds an image from HWC data, clamping every value into `range`.
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        range: ValueRange,
        mut data: Vec<f32>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "image must be at least 1x1, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Channel(format!(
                "images must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values do not fill a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        let (lo, hi) = range.bounds();
        for v in &mut data {
            *v = v.clamp(lo, hi);
        }
        Ok(Self {
            height,
            width,
            channels,
            range,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            ValueRange::Unit,
            vec![value; height * width * channels],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Re-expresses the image in another value range.
    pub fn to_range(&self, range: ValueRange) -> ImageTensor {
        if range == self.range {
            return self.clone();
        }
        let data = self
            .data
            .iter()
            .map(|&v| range.from_unit(self.range.to_unit(v)))
            .collect();
        ImageTensor {
            range,
            data,
            ..*self
        }
    }

    /// Replicates a single channel into three; three-channel images are returned as is.
    pub fn to_rgb(&self) -> ImageTensor {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImageTensor {
            channels: 3,
            data,
            ..*self
        }
    }

    /// Crops the largest centred square.
    pub fn center_crop_square(&self) -> ImageTensor {
        let side = self.height.min(self.width);
        let y0 = (self.height - side) / 2;
        let x0 = (self.width - side) / 2;
        self.crop(y0, x0, side, side)
            .expect("centred square always fits")
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<ImageTensor> {
        if y0 + height > self.height || x0 + width > self.width || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "crop {height}x{width} at ({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in y0..y0 + height {
            let start = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(ImageTensor {
            height,
            width,
            data,
            ..*self
        })
    }

    pub fn mean_abs_diff(&self, other: &ImageTensor) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok(sum / self.data.len() as f64)
    }
}

/// Reads a PNG or JPEG raster into the given range.
///
/// Grayscale files give one channel, colour files three (RGB). Alpha is
/// accepted only when fully opaque, and is dropped.
pub fn load_image(path: &Path, range: ValueRange) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| Error::Format {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    decode_dynamic(decoded, range).map_err(|e| match e {
        Error::Channel(message) => Error::Format {
            path: path.to_owned(),
            message,
        },
        other => other,
    })
}

fn decode_dynamic(img: image::DynamicImage, range: ValueRange) -> Result<ImageTensor> {
    use image::ColorType;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let color = img.color();
    let (channels, unit): (usize, Vec<f32>) = match color {
        ColorType::L8 | ColorType::L16 => {
            let g = img.into_luma16();
            (1, g.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect())
        }
        ColorType::Rgb8 | ColorType::Rgb16 | ColorType::Rgb32F => {
            let g = img.into_rgb32f();
            (3, g.into_raw())
        }
        ColorType::Rgba8 | ColorType::Rgba16 | ColorType::Rgba32F | ColorType::La8
        | ColorType::La16 => {
            let rgba = img.to_rgba32f();
            if rgba.pixels().any(|p| p[3] < 1.0) {
                return Err(Error::Channel(format!(
                    "{color:?} with transparency is not supported; expected 1 or 3 channels"
                )));
            }
            if matches!(color, ColorType::La8 | ColorType::La16) {
                let g = img.into_luma16();
                (1, g.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect())
            } else {
                (3, img.into_rgb32f().into_raw())
            }
        }
        other => {
            return Err(Error::Channel(format!("unsupported colour type {other:?}")));
        }
    };
    let data = unit.into_iter().map(|v| range.from_unit(v)).collect();
    ImageTensor::new(h, w, channels, range, data)
}

/// Writes an 8-bit PNG (grayscale or RGB).
pub fn save_png(img: &ImageTensor, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (img.range.to_unit(v).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let color = if img.channels == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    image::save_buffer_with_format(path, &bytes, w, h, color, image::ImageFormat::Png).map_err(
        |e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format {
                path: path.to_owned(),
                message: other.to_string(),
            },
        },
    )
}

/// The downsampling operator `F`. Blur and noise are not modelled: the
/// operator is a pure resampling by `scale` along both axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationSpec {
    pub scale: usize,
    pub kernel: Kernel,
    #[serde(default = "default_antialias")]
    pub antialias: bool,
}

fn default_antialias() -> bool {
    true
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            scale: 4,
            kernel: Kernel::Bicubic,
            antialias: true,
        }
    }
}

impl DegradationSpec {
    pub fn new(scale: usize, kernel: Kernel) -> Self {
        Self {
            scale,
            kernel,
            antialias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale < 2 {
            return Err(Error::Config(format!(
                "degradation scale must be >= 2, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    /// Output size for an input of `height × width`.
    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        self.validate()?;
        if height % self.scale != 0 || width % self.scale != 0 {
            return Err(Error::Shape(format!(
                "{height}x{width} is not divisible by scale {}",
                self.scale
            )));
        }
        Ok((height / self.scale, width / self.scale))
    }

    fn axis_weights(&self, height: usize, width: usize) -> Result<(AxisWeights, AxisWeights)> {
        let (oh, ow) = self.output_dims(height, width)?;
        Ok((
            AxisWeights::new(self.kernel, height, oh, self.antialias),
            AxisWeights::new(self.kernel, width, ow, self.antialias),
        ))
    }
}

/// Resizes an image to `out_h × out_w` with the given kernel and clamps the
/// result to the image's range.
pub fn resize(
    img: &ImageTensor,
    out_h: usize,
    out_w: usize,
    kernel: Kernel,
    antialias: bool,
) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("resize target must be at least 1x1".into()));
    }
    let wh = AxisWeights::new(kernel, img.height, out_h, antialias);
    let ww = AxisWeights::new(kernel, img.width, out_w, antialias);
    Ok(apply_separable(img, &wh, &ww))
}

fn apply_separable(img: &ImageTensor, wh: &AxisWeights, ww: &AxisWeights) -> ImageTensor {
    let (_, w, c) = img.shape();
    let (oh, ow) = (wh.out_len, ww.out_len);
    // rows first: (h, w, c) -> (oh, w, c)
    let mut tmp = vec![0.0f64; oh * w * c];
    for o in 0..oh {
        for (y, &k) in wh.row(o).iter().enumerate() {
            if k == 0.0 {
                continue;
            }
            let src = &img.data[y * w * c..(y + 1) * w * c];
            let dst = &mut tmp[o * w * c..(o + 1) * w * c];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += k * s as f64;
            }
        }
    }
    let (lo, hi) = img.range.bounds();
    let mut acc = vec![0.0f64; oh * ow * c];
    for y in 0..oh {
        for ox in 0..ow {
            for (x, &k) in ww.row(ox).iter().enumerate() {
                if k == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    acc[(y * ow + ox) * c + ch] += k * tmp[(y * w + x) * c + ch];
                }
            }
        }
    }
    // round once, at the end
    let out = acc.iter().map(|&v| (v as f32).clamp(lo, hi)).collect();
    ImageTensor {
        height: oh,
        width: ow,
        channels: c,
        range: img.range,
        data: out,
    }
}

/// Applies `F` to a single image outside of any autodiff graph.
pub fn degrade(img: &ImageTensor, spec: &DegradationSpec) -> Result<ImageTensor> {
    let (wh, ww) = spec.axis_weights(img.height, img.width)?;
    Ok(apply_separable(img, &wh, &ww))
}

/// Applies `F` to an NCHW tensor inside the autodiff graph.
///
/// Uses the same weights as [`degrade`] and clamps to `range`, so gradients
/// reach every input pixel whose output is not saturated.
pub fn degrade_tensor(xs: &Tensor, spec: &DegradationSpec, range: ValueRange) -> Result<Tensor> {
    let (n, c, h, w) = xs.dims4()?;
    let (wh, ww) = spec.axis_weights(h, w)?;
    let (oh, ow) = (wh.out_len, ww.out_len);
    let dtype = xs.dtype();
    let device = xs.device();
    let wh_t = Tensor::from_vec(wh.weights, (oh, h), device)?
        .to_dtype(dtype)?
        .t()?;
    let ww_t = Tensor::from_vec(ww.weights, (ow, w), device)?
        .to_dtype(dtype)?
        .t()?;
    // (nc, h, w) -> (nc*w, h) · (h, oh) -> (nc, oh, w) -> (nc*oh, w) · (w, ow)
    let cols = xs
        .reshape((n * c, h, w))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n * c * w, h))?
        .matmul(&wh_t)?;
    let rows = cols
        .reshape((n * c, w, oh))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n * c * oh, w))?
        .matmul(&ww_t)?;
    let (lo, hi) = range.bounds();
    Ok(rows.reshape((n, c, oh, ow))?.clamp(lo as f64, hi as f64)?)
}

/// Replicates each pixel into a `scale × scale` block.
pub fn upsample_naive(img: &ImageTensor, scale: usize) -> Result<ImageTensor> {
    if scale == 0 {
        return Err(Error::Shape("upsample scale must be >= 1".into()));
    }
    let (h, w, c) = img.shape();
    let (oh, ow) = (h * scale, w * scale);
    let mut data = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x in 0..ow {
            let src = ((y / scale) * w + x / scale) * c;
            data.extend_from_slice(&img.data[src..src + c]);
        }
    }
    Ok(ImageTensor {
        height: oh,
        width: ow,
        data,
        ..*img
    })
}

/// Stacks equally-shaped images into an `(N, C, H, W)` tensor.
pub fn images_to_tensor(images: &[ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("cannot stack an empty image batch".into()))?;
    let (h, w, c) = first.shape();
    let mut buf = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if img.shape() != (h, w, c) {
            return Err(Error::Shape(format!(
                "non-uniform batch: {:?} vs {:?}",
                img.shape(),
                (h, w, c)
            )));
        }
        buf.extend_from_slice(&img.data);
    }
    let t = Tensor::from_vec(buf, (images.len(), h, w, c), device)?
        .permute((0, 3, 1, 2))?
        .contiguous()?
        .to_dtype(dtype)?;
    Ok(t)
}

/// Splits an `(N, C, H, W)` tensor into images, clamping to `range`.
pub fn tensor_to_images(xs: &Tensor, range: ValueRange) -> Result<Vec<ImageTensor>> {
    let (n, c, h, w) = xs.dims4()?;
    let hwc = xs
        .to_dtype(DType::F32)?
        .permute((0, 2, 3, 1))?
        .contiguous()?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let per = h * w * c;
    (0..n)
        .map(|i| ImageTensor::new(h, w, c, range, hwc[i * per..(i + 1) * per].to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;
    use proptest::prelude::*;

    fn gradient_image(h: usize, w: usize, c: usize) -> ImageTensor {
        let data = (0..h * w * c)
            .map(|i| ((i * 37 % 101) as f32) / 100.0)
            .collect();
        ImageTensor::new(h, w, c, ValueRange::Unit, data).unwrap()
    }

    #[test]
    fn new_rejects_bad_channels_and_empty() {
        assert!(matches!(
            ImageTensor::new(2, 2, 2, ValueRange::Unit, vec![0.0; 8]),
            Err(Error::Channel(_))
        ));
        assert!(matches!(
            ImageTensor::new(0, 2, 1, ValueRange::Unit, vec![]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn new_clamps_to_range() {
        let img = ImageTensor::new(1, 2, 1, ValueRange::Unit, vec![-0.5, 1.5]).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn png_extremes_normalise_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        for (value, expect) in [(255u8, 1.0f32), (0, 0.0)] {
            let path = dir.path().join(format!("c{value}.png"));
            image::save_buffer(&path, &vec![value; 4 * 4 * 3], 4, 4, image::ColorType::Rgb8)
                .unwrap();
            let img = load_image(&path, ValueRange::Unit).unwrap();
            assert!(img.data().iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn load_keeps_shape_and_channel_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        let mut raw = vec![0u8; 256 * 256 * 3];
        raw[0] = 255; // red at (0, 0)
        image::save_buffer(&path, &raw, 256, 256, image::ColorType::Rgb8).unwrap();
        let img = load_image(&path, ValueRange::Unit).unwrap();
        assert_eq!(img.shape(), (256, 256, 3));
        assert_eq!((img.get(0, 0, 0), img.get(0, 0, 1)), (1.0, 0.0));
    }

    #[test]
    fn load_grayscale_gives_one_channel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        image::save_buffer(&path, &[0u8, 255, 255, 0], 2, 2, image::ColorType::L8).unwrap();
        let img = load_image(&path, ValueRange::Symmetric).unwrap();
        assert_eq!(img.shape(), (2, 2, 1));
        assert_eq!(img.data(), &[-1.0, 1.0, 1.0, -1.0]);
    }

    #[test]
    fn load_rejects_transparent_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        image::save_buffer(&path, &[9u8, 9, 9, 10], 1, 1, image::ColorType::Rgba8).unwrap();
        assert!(matches!(
            load_image(&path, ValueRange::Unit),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            load_image(&dir.path().join("nope.png"), ValueRange::Unit),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.png");
        let img = ImageTensor::new(
            1,
            3,
            3,
            ValueRange::Unit,
            (0..9).map(|i| i as f32 * 17.0 / 255.0).collect(),
        )
        .unwrap();
        save_png(&img, &path).unwrap();
        let back = load_image(&path, ValueRange::Unit).unwrap();
        assert!(img.mean_abs_diff(&back).unwrap() < 1e-6);
    }

    #[test]
    fn degrade_shape_law_256_to_64() {
        let img = gradient_image(256, 256, 3);
        let out = degrade(&img, &DegradationSpec::default()).unwrap();
        assert_eq!(out.shape(), (64, 64, 3));
    }

    #[test]
    fn degrade_rejects_non_divisible() {
        let img = gradient_image(10, 12, 1);
        assert!(matches!(
            degrade(&img, &DegradationSpec::new(4, Kernel::Bicubic)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            degrade(&img, &DegradationSpec::new(1, Kernel::Bicubic)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn constant_is_fixed_point_for_all_kernels() {
        let img = ImageTensor::filled(256, 256, 3, 0.5).unwrap();
        for kernel in [Kernel::Bicubic, Kernel::AveragePool, Kernel::Nearest] {
            for antialias in [true, false] {
                let spec = DegradationSpec {
                    scale: 4,
                    kernel,
                    antialias,
                };
                let out = degrade(&img, &spec).unwrap();
                assert_eq!(out.shape(), (64, 64, 3));
                assert!(out.data().iter().all(|v| (v - 0.5).abs() < 1e-6));
            }
        }
    }

    #[test]
    fn average_pool_two_by_two_by_hand() {
        let (a, b, c, d) = (0.1f32, 0.4, 0.7, 0.2);
        let img = ImageTensor::new(2, 2, 1, ValueRange::Unit, vec![a, b, c, d]).unwrap();
        let out = degrade(&img, &DegradationSpec::new(2, Kernel::AveragePool)).unwrap();
        assert_eq!(out.shape(), (1, 1, 1));
        assert!((out.data()[0] - (a + b + c + d) / 4.0).abs() < 1e-7);
    }

    #[test]
    fn upsample_naive_replicates() {
        let one = ImageTensor::filled(1, 1, 1, 0.3).unwrap();
        let up = upsample_naive(&one, 4).unwrap();
        assert_eq!(up.shape(), (4, 4, 1));
        assert!(up.data().iter().all(|&v| v == 0.3));
        let img = gradient_image(3, 5, 3);
        assert_eq!(upsample_naive(&img, 1).unwrap(), img);
    }

    #[test]
    fn bicubic_may_overshoot_but_is_clamped() {
        // a hard step edge rings under a negative-lobe kernel
        let mut data = vec![0.0f32; 16 * 16];
        for y in 0..16 {
            for x in 8..16 {
                data[y * 16 + x] = 1.0;
            }
        }
        let img = ImageTensor::new(16, 16, 1, ValueRange::Unit, data).unwrap();
        let spec = DegradationSpec {
            scale: 2,
            kernel: Kernel::Bicubic,
            antialias: false,
        };
        let out = degrade(&img, &spec).unwrap();
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn tensor_path_matches_array_path() {
        let img = gradient_image(16, 12, 3);
        for kernel in [Kernel::Bicubic, Kernel::AveragePool, Kernel::Nearest] {
            let spec = DegradationSpec::new(4, kernel);
            let expect = degrade(&img, &spec).unwrap();
            let t = images_to_tensor(std::slice::from_ref(&img), DType::F64, &Device::Cpu)
                .unwrap();
            let got = degrade_tensor(&t, &spec, ValueRange::Unit).unwrap();
            let got = tensor_to_images(&got, ValueRange::Unit).unwrap().remove(0);
            assert!(got.mean_abs_diff(&expect).unwrap() < 1e-6, "{kernel:?}");
        }
    }

    #[test]
    fn degrade_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let spec = DegradationSpec::new(2, Kernel::Bicubic);
        let vals: Vec<f64> = (0..2 * 8 * 8)
            .map(|i| 0.2 + 0.6 * (((i * 29) % 53) as f64 / 53.0))
            .collect();
        let x = Var::from_vec(vals.clone(), (1, 2, 8, 8), &dev).unwrap();
        // weight each output so the check is not just a column-sum test
        let probe = |t: &Tensor| -> Tensor {
            let (_, _, h, w) = t.dims4().unwrap();
            let wts: Vec<f64> = (0..2 * h * w).map(|i| 1.0 + (i % 7) as f64).collect();
            let wts = Tensor::from_vec(wts, (1, 2, h, w), &dev).unwrap();
            (t * wts).unwrap().sum_all().unwrap()
        };
        let y = probe(&degrade_tensor(x.as_tensor(), &spec, ValueRange::Unit).unwrap());
        let grads = y.backward().unwrap();
        let g = grads.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let f = |v: &[f64]| -> f64 {
            let t = Tensor::from_vec(v.to_vec(), (1, 2, 8, 8), &dev).unwrap();
            probe(&degrade_tensor(&t, &spec, ValueRange::Unit).unwrap())
                .to_scalar::<f64>()
                .unwrap()
        };
        let h = 1e-6;
        for i in 0..vals.len() {
            let mut p = vals.clone();
            let mut m = vals.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "pixel {i}: fd {fd} vs autodiff {}", g[i]);
        }
    }

    proptest! {
        #[test]
        fn replicate_then_average_pool_is_identity(
            h in 1usize..6, w in 1usize..6, three in any::<bool>(), s in 2usize..5,
            seed in any::<u64>(),
        ) {
            let c = if three { 3 } else { 1 };
            let mut state = seed | 1;
            let data: Vec<f32> = (0..h * w * c).map(|_| {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                (state % 1000) as f32 / 999.0
            }).collect();
            let img = ImageTensor::new(h, w, c, ValueRange::Unit, data).unwrap();
            let up = upsample_naive(&img, s).unwrap();
            let back = degrade(&up, &DegradationSpec::new(s, Kernel::AveragePool)).unwrap();
            prop_assert_eq!(back.shape(), img.shape());
            for (a, b) in back.data().iter().zip(img.data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn degrade_stays_in_range(
            seed in any::<u64>(), kernel in prop_oneof![
                Just(Kernel::Bicubic), Just(Kernel::AveragePool), Just(Kernel::Nearest)
            ],
        ) {
            let mut state = seed | 1;
            let data: Vec<f32> = (0..16 * 16).map(|_| {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                (state % 2) as f32
            }).collect();
            let img = ImageTensor::new(16, 16, 1, ValueRange::Unit, data).unwrap();
            let out = degrade(&img, &DegradationSpec::new(4, kernel)).unwrap();
            prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
