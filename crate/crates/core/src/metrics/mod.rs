//! Fréchet distance between feature Gaussians, and mean opinion scores.

mod rating;

use std::path::Path;

use candle_core::{DType, Device};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::datasets::list_images;
use crate::error::{Error, Result};
use crate::imaging::{images_to_tensor, load_image, resize, ImageTensor, Kernel, ValueRange};
use crate::models::{replicate_to_rgb, FeatureExtractor, FeatureExtractorSpec};

pub use rating::{mos, mos_table, read_ratings, write_rating, MosSummary, RatingRecord};

/// Ridge added to both covariances when there are fewer samples than
/// feature dimensions.
pub const SHRINKAGE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance of the rows of `features` (n × d).
pub fn gaussian_stats(features: &DMatrix<f64>) -> Result<GaussianStats> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::InsufficientSamples(n));
    }
    let mean = features.row_mean().transpose();
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov, n })
}

/// Symmetric eigendecomposition with eigenvalues clipped at zero.
fn clipped_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    eig.eigenvalues.iter_mut().for_each(|l| *l = l.max(0.0));
    eig
}

fn psd_power(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = clipped_eigen(m);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `Tr((Ca·Cb)^{1/2})`, computed as `Tr((Ca^{1/2} Cb Ca^{1/2})^{1/2})`, which has
/// the same eigenvalues but is symmetric.
fn trace_sqrt_product(ca: &DMatrix<f64>, cb: &DMatrix<f64>) -> f64 {
    let sa = psd_power(ca, f64::sqrt);
    let m = &sa * cb * &sa;
    clipped_eigen(&m).eigenvalues.iter().map(|l| l.sqrt()).sum()
}

/// A square root of `Ca·Cb`, namely `Ca^{1/2} (Ca^{1/2} Cb Ca^{1/2})^{1/2} Ca^{-1/2}`.
/// `Ca` must be positive definite.
pub fn product_sqrt(ca: &DMatrix<f64>, cb: &DMatrix<f64>) -> DMatrix<f64> {
    let sa = psd_power(ca, f64::sqrt);
    let sa_inv = psd_power(ca, |l| if l > 0.0 { 1.0 / l.sqrt() } else { 0.0 });
    let m = &sa * cb * &sa;
    &sa * psd_power(&m, f64::sqrt) * sa_inv
}

/// `‖μa − μb‖² + Tr(Ca + Cb − 2 (Ca·Cb)^{1/2})`, never negative.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.shape() != b.cov.shape() {
        return Err(Error::Shape(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    if a.mean == b.mean && a.cov == b.cov {
        return Ok(0.0);
    }
    let dmu = (&a.mean - &b.mean).norm_squared();
    let d = dmu + a.cov.trace() + b.cov.trace() - 2.0 * trace_sqrt_product(&a.cov, &b.cov);
    Ok(d.max(0.0))
}

/// Feature network used for FID: tap activations of the VGG-19 backbone,
/// global-average-pooled, on images resized to `input_size`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FidConfig {
    pub features: FeatureExtractorSpec,
    pub input_size: usize,
}

impl Default for FidConfig {
    fn default() -> Self {
        let mut features = FeatureExtractorSpec::default();
        features.pre_activation = false;
        Self {
            features,
            input_size: 224,
        }
    }
}

impl FidConfig {
    /// Narrow, shallow variant for CI-sized runs.
    pub fn small() -> Self {
        let mut features = FeatureExtractorSpec::default()
            .with_tap(3, 4)
            .with_width_divisor(4);
        features.pre_activation = false;
        Self {
            features,
            input_size: 32,
        }
    }
}

pub struct FidExtractor {
    extractor: FeatureExtractor,
    input_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub fid: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub dim: usize,
    /// Set when either set had no more samples than dimensions.
    pub shrinkage: bool,
}

impl FidExtractor {
    pub fn new(cfg: &FidConfig, device: &Device) -> Result<Self> {
        let down = cfg.features.downsampling();
        if cfg.input_size == 0 || cfg.input_size % down != 0 {
            return Err(Error::Config(format!(
                "fid input_size {} must be a positive multiple of {down}",
                cfg.input_size
            )));
        }
        Ok(Self {
            extractor: FeatureExtractor::new(&cfg.features, DType::F32, device)?,
            input_size: cfg.input_size,
        })
    }

    pub fn dim(&self) -> usize {
        self.extractor.spec().tap_channels()
    }

    /// Pooled features, one row per image.
    pub fn features(&self, images: &[ImageTensor]) -> Result<DMatrix<f64>> {
        let s = self.input_size;
        let mut rows = Vec::with_capacity(images.len() * self.dim());
        for chunk in images.chunks(16) {
            let resized = chunk
                .iter()
                .map(|img| {
                    let img = img.to_range(ValueRange::Unit);
                    if img.height() == s && img.width() == s {
                        Ok(img)
                    } else {
                        resize(&img, s, s, Kernel::Bicubic, true)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let channels = resized[0].channels();
            if resized.iter().any(|i| i.channels() != channels) {
                return Err(Error::Channel("mixed channel counts in one image set".into()));
            }
            let xs = images_to_tensor(&resized, DType::F32, &Device::Cpu)?;
            let f = self.extractor.forward(&replicate_to_rgb(&xs)?)?;
            let pooled = f.mean((2, 3))?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            rows.extend(pooled.into_iter().flatten());
        }
        Ok(DMatrix::from_row_slice(images.len(), self.dim(), &rows))
    }

    pub fn fid(&self, real: &[ImageTensor], fake: &[ImageTensor]) -> Result<FidReport> {
        if real.is_empty() || fake.is_empty() {
            return Err(Error::EmptySet("FID needs non-empty real and fake sets".into()));
        }
        let mut a = gaussian_stats(&self.features(real)?)?;
        let mut b = gaussian_stats(&self.features(fake)?)?;
        let dim = a.dim();
        let shrinkage = a.n <= dim || b.n <= dim;
        if shrinkage {
            log::warn!(
                "FID with {} real / {} fake samples for {dim} features: covariance is singular, adding {SHRINKAGE}·I",
                a.n,
                b.n
            );
            let ridge = DMatrix::<f64>::identity(dim, dim) * SHRINKAGE;
            a.cov += &ridge;
            b.cov += &ridge;
        }
        Ok(FidReport {
            fid: frechet_distance(&a, &b)?,
            n_real: a.n,
            n_fake: b.n,
            dim,
            shrinkage,
        })
    }

    /// FID between two image directories, each read in file-name order and
    /// truncated to `n_max` images.
    pub fn fid_dirs(&self, real: &Path, fake: &Path, n_max: Option<usize>) -> Result<FidReport> {
        let load = |dir: &Path| -> Result<Vec<ImageTensor>> {
            let mut files = list_images(dir)?;
            if let Some(n) = n_max {
                files.truncate(n);
            }
            files.iter().map(|p| load_image(p, ValueRange::Unit)).collect()
        };
        self.fid(&load(real)?, &load(fake)?)
    }
}
