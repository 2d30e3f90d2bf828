//! Objective terms for the generator and discriminator.
//!
//! Every differentiable term is a scalar [`Tensor`] so it can sit inside the
//! autodiff graph; [`LossReport`] carries the detached `f64` values.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{degrade_tensor, DegradationSpec, ValueRange};
use crate::models::{replicate_to_rgb, FeatureExtractor};

/// Lower clamp applied to probabilities (and `1 - p`) before taking logs.
pub const PROB_EPS: f64 = 1e-12;

/// Coefficients of the full generator objective
/// `percep_s + λ·adv_s + η·l1_s + α·percep_u + γ·adv_u + β·l1_u`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_sup_adv: f64,
    pub eta_sup_l1: f64,
    pub alpha_cons_percep: f64,
    pub gamma_unsup_adv: f64,
    pub beta_cons_l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::semi_supervised()
    }
}

impl LossWeights {
    /// λ = 2.5e-3, η = 1e-2, α = 1e-1, γ = 2.5e-3, β = 5e-3.
    pub fn semi_supervised() -> Self {
        Self {
            lambda_sup_adv: 2.5e-3,
            eta_sup_l1: 1e-2,
            alpha_cons_percep: 1e-1,
            gamma_unsup_adv: 2.5e-3,
            beta_cons_l1: 5e-3,
        }
    }

    /// No consistency loss (α = β = 0); unpaired images still feed the adversarial term.
    pub fn ablation_1() -> Self {
        Self {
            alpha_cons_percep: 0.0,
            beta_cons_l1: 0.0,
            ..Self::semi_supervised()
        }
    }

    /// Consistency loss without its perceptual part (α = 0).
    pub fn ablation_2() -> Self {
        Self {
            alpha_cons_percep: 0.0,
            ..Self::semi_supervised()
        }
    }

    /// The ESRGAN objective: every unsupervised weight zeroed.
    pub fn supervised_only() -> Self {
        Self {
            alpha_cons_percep: 0.0,
            gamma_unsup_adv: 0.0,
            beta_cons_l1: 0.0,
            ..Self::semi_supervised()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_sup_adv", self.lambda_sup_adv),
            ("eta_sup_l1", self.eta_sup_l1),
            ("alpha_cons_percep", self.alpha_cons_percep),
            ("gamma_unsup_adv", self.gamma_unsup_adv),
            ("beta_cons_l1", self.beta_cons_l1),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Detached loss values for one step. `None` marks a term that was not
/// computed at that step (warmup, or no unpaired data).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l1_sup: Option<f64>,
    pub percep_sup: Option<f64>,
    pub adv_g_sup: Option<f64>,
    pub adv_g_unsup: Option<f64>,
    pub cons_l1: Option<f64>,
    pub cons_percep: Option<f64>,
    pub total_g: Option<f64>,
    pub d_loss: Option<f64>,
}

impl LossReport {
    pub fn values(&self) -> impl Iterator<Item = (&'static str, Option<f64>)> {
        [
            ("l1_sup", self.l1_sup),
            ("percep_sup", self.percep_sup),
            ("adv_g_sup", self.adv_g_sup),
            ("adv_g_unsup", self.adv_g_unsup),
            ("cons_l1", self.cons_l1),
            ("cons_percep", self.cons_percep),
            ("total_g", self.total_g),
            ("d_loss", self.d_loss),
        ]
        .into_iter()
    }

    /// First present value that is NaN or infinite.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.values()
            .find(|(_, v)| v.is_some_and(|v| !v.is_finite()))
            .map(|(k, _)| k)
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "loss operands differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean absolute difference over every pixel and channel.
pub fn l1_pixel(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b)?;
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Mean absolute difference between tap features of `a` and `b`.
///
/// Single-channel batches are replicated to RGB first.
pub fn perceptual(a: &Tensor, b: &Tensor, extractor: &FeatureExtractor) -> Result<Tensor> {
    same_shape(a, b)?;
    let fa = extractor.forward(&replicate_to_rgb(a)?)?;
    let fb = extractor.forward(&replicate_to_rgb(b)?)?;
    Ok((fa - fb)?.abs()?.mean_all()?)
}

fn check_probabilities(p: &Tensor) -> Result<()> {
    let values = p.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("probability {bad} outside [0, 1]")));
    }
    Ok(())
}

/// `mean(-log p)` over the batch of discriminator outputs on generated images.
pub fn adv_generator(d_on_fake: &Tensor) -> Result<Tensor> {
    check_probabilities(d_on_fake)?;
    Ok(d_on_fake.clamp(PROB_EPS, 1.0)?.log()?.neg()?.mean_all()?)
}

/// Binary cross-entropy of the discriminator:
/// `mean(-log p_real) + mean(-log(1 - p_fake))`.
pub fn adv_discriminator(d_on_real: &Tensor, d_on_fake: &Tensor) -> Result<Tensor> {
    check_probabilities(d_on_real)?;
    check_probabilities(d_on_fake)?;
    let real = d_on_real.clamp(PROB_EPS, 1.0)?.log()?.neg()?.mean_all()?;
    let fake = d_on_fake
        .affine(-1.0, 1.0)?
        .clamp(PROB_EPS, 1.0)?
        .log()?
        .neg()?
        .mean_all()?;
    Ok((real + fake)?)
}

/// Relativistic average losses on discriminator logits, `(generator, discriminator)`.
pub fn relativistic(real_logits: &Tensor, fake_logits: &Tensor) -> Result<(Tensor, Tensor)> {
    let bce = |logits: &Tensor, target_real: bool| -> Result<Tensor> {
        let p = candle_nn::ops::sigmoid(logits)?;
        let p = if target_real { p } else { p.affine(-1.0, 1.0)? };
        Ok(p.clamp(PROB_EPS, 1.0)?.log()?.neg()?.mean_all()?)
    };
    let real_rel = real_logits.broadcast_sub(&fake_logits.mean_all()?)?;
    let fake_rel = fake_logits.broadcast_sub(&real_logits.mean_all()?)?;
    let g = ((bce(&real_rel, false)? + bce(&fake_rel, true)?)? * 0.5)?;
    let d = ((bce(&real_rel, true)? + bce(&fake_rel, false)?)? * 0.5)?;
    Ok((g, d))
}

/// `(cons_l1, cons_percep)` between unpaired LR inputs and `F(G(LR))`.
///
/// Gradients flow through the degradation into `sr_u`.
pub fn consistency(
    unpaired_lr: &Tensor,
    sr_u: &Tensor,
    degradation: &DegradationSpec,
    extractor: &FeatureExtractor,
) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = unpaired_lr.dims4()?;
    let (sn, sc, sh, sw) = sr_u.dims4()?;
    let s = degradation.scale;
    if (sn, sc, sh, sw) != (n, c, h * s, w * s) {
        return Err(Error::Shape(format!(
            "SR batch {:?} is not the x{s} counterpart of LR batch {:?}",
            sr_u.dims(),
            unpaired_lr.dims()
        )));
    }
    let reprojected = degrade_tensor(sr_u, degradation, ValueRange::Unit)?;
    let l1 = l1_pixel(unpaired_lr, &reprojected)?;
    let percep = perceptual(unpaired_lr, &reprojected, extractor)?;
    Ok((l1, percep))
}

/// Weighted generator objective from detached components. Absent terms count as zero.
pub fn total_generator(components: &LossReport, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    let v = |x: Option<f64>| x.unwrap_or(0.0);
    Ok(v(components.percep_sup)
        + w.lambda_sup_adv * v(components.adv_g_sup)
        + w.eta_sup_l1 * v(components.l1_sup)
        + w.alpha_cons_percep * v(components.cons_percep)
        + w.gamma_unsup_adv * v(components.adv_g_unsup)
        + w.beta_cons_l1 * v(components.cons_l1))
}

/// Differentiable terms of one generator step.
#[derive(Clone, Debug)]
pub struct GeneratorTerms {
    pub l1_sup: Tensor,
    pub percep_sup: Tensor,
    pub adv_g_sup: Tensor,
    pub unsup: Option<UnsupervisedTerms>,
}

#[derive(Clone, Debug)]
pub struct UnsupervisedTerms {
    pub adv_g_unsup: Tensor,
    pub cons_l1: Tensor,
    pub cons_percep: Tensor,
}

impl GeneratorTerms {
    /// The same weighted sum as [`total_generator`], kept in the graph.
    pub fn total(&self, w: &LossWeights) -> Result<Tensor> {
        w.validate()?;
        let mut total = (&self.percep_sup + (&self.adv_g_sup * w.lambda_sup_adv)?)?;
        total = (total + (&self.l1_sup * w.eta_sup_l1)?)?;
        if let Some(u) = &self.unsup {
            total = (total + (&u.cons_percep * w.alpha_cons_percep)?)?;
            total = (total + (&u.adv_g_unsup * w.gamma_unsup_adv)?)?;
            total = (total + (&u.cons_l1 * w.beta_cons_l1)?)?;
        }
        Ok(total)
    }

    pub fn report(&self, total: &Tensor, d_loss: Option<f64>) -> Result<LossReport> {
        let s = |t: &Tensor| -> Result<f64> {
            Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
        };
        let mut r = LossReport {
            l1_sup: Some(s(&self.l1_sup)?),
            percep_sup: Some(s(&self.percep_sup)?),
            adv_g_sup: Some(s(&self.adv_g_sup)?),
            total_g: Some(s(total)?),
            d_loss,
            ..LossReport::default()
        };
        if let Some(u) = &self.unsup {
            r.adv_g_unsup = Some(s(&u.adv_g_unsup)?);
            r.cons_l1 = Some(s(&u.cons_l1)?);
            r.cons_percep = Some(s(&u.cons_percep)?);
        }
        Ok(r)
    }
}
