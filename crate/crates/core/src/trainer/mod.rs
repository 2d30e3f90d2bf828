//! Two-stage training: an L1-only generator warmup, then alternating
//! discriminator / generator updates on mixed paired + unpaired batches.

mod adam;
mod infer;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AdversarialKind, ExperimentConfig};
use crate::datasets::{BatchLoader, SampleBatch, Sampler, TrainingData};
use crate::error::{Error, Result};
use crate::imaging::{images_to_tensor, ImageTensor};
use crate::losses::{
    adv_discriminator, adv_generator, consistency, l1_pixel, perceptual, relativistic,
    GeneratorTerms, LossReport, UnsupervisedTerms,
};
use crate::metrics::{FidExtractor, FidReport};
use crate::models::checkpoint::{
    add_prefixed, check_config, read_checkpoint, take_prefixed, write_checkpoint,
    CheckpointHeader,
};
use crate::models::{Discriminator, FeatureExtractor, Generator, GeneratorConfig};

pub use adam::Adam;
pub use infer::{infer, Tiling};

pub const LOSS_LOG: &str = "losses.jsonl";
pub const VALIDATION_LOG: &str = "validation.jsonl";
pub const LAST_CHECKPOINT: &str = "last.safetensors";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup,
    Adversarial,
}

/// One line of the loss log. Terms not computed at that step are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub stage: Stage,
    #[serde(flatten)]
    pub report: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    /// Number of batches trained when the validation ran.
    pub step: u64,
    pub l1: f64,
    pub fid: Option<f64>,
}

/// Seeds for every random source, drawn from one root generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub root: u64,
    pub generator: u64,
    pub discriminator: u64,
    pub sampler: u64,
}

impl SeedRecord {
    pub fn from_root(root: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(root);
        Self {
            root,
            generator: rng.next_u64(),
            discriminator: rng.next_u64(),
            sampler: rng.next_u64(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// Number of batches already trained on; the next step consumes batch `batch_idx`.
    pub batch_idx: u64,
    pub seeds: SeedRecord,
    pub best_metric: Option<f64>,
    pub evals_since_best: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StateHeader {
    batch_idx: u64,
    stage: Stage,
    seeds: SeedRecord,
    opt_g_steps: u64,
    opt_d_steps: u64,
    best_metric: Option<f64>,
    evals_since_best: usize,
}

pub struct Trainer {
    cfg: ExperimentConfig,
    dtype: DType,
    device: Device,
    extractor: FeatureExtractor,
    pub state: TrainState,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let dtype = cfg.trainer.precision.dtype();
        let seeds = SeedRecord::from_root(cfg.trainer.seed);
        let t = &cfg.trainer;
        let state = TrainState {
            generator: Generator::new(&cfg.model.generator, dtype, device, seeds.generator)?,
            discriminator: Discriminator::new(
                &cfg.model.discriminator,
                dtype,
                device,
                seeds.discriminator,
            )?,
            opt_g: Adam::new(t.adam_beta1, t.adam_beta2, t.adam_eps),
            opt_d: Adam::new(t.adam_beta1, t.adam_beta2, t.adam_eps),
            batch_idx: 0,
            seeds,
            best_metric: None,
            evals_since_best: 0,
        };
        Ok(Self {
            extractor: FeatureExtractor::new(&cfg.model.features, dtype, device)?,
            cfg: cfg.clone(),
            dtype,
            device: device.clone(),
            state,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn stage(&self) -> Stage {
        stage_at(self.state.batch_idx, self.cfg.trainer.warmup_batches)
    }

    pub fn generator(&self) -> &Generator {
        &self.state.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.state.discriminator
    }

    /// One optimisation step on `batch`; advances `batch_idx` on success.
    ///
    /// A non-finite loss aborts before the affected network is updated.
    pub fn step(&mut self, batch: &SampleBatch) -> Result<LossReport> {
        let (lr_p, hr_p, lr_u) = batch.to_tensors(self.dtype, &self.device)?;
        let (lr_p, hr_p) = match (lr_p, hr_p) {
            (Some(l), Some(h)) => (l, h),
            _ => {
                return Err(Error::Config(
                    "every training step needs paired images (n_sup > 0)".into(),
                ))
            }
        };
        let k = self.state.batch_idx;
        let lr = self.cfg.trainer.learning_rate(k);
        let report = match self.stage() {
            Stage::Warmup => self.warmup_step(&lr_p, &hr_p, lr)?,
            Stage::Adversarial => self.adversarial_step(&lr_p, &hr_p, lr_u.as_ref(), lr)?,
        };
        self.state.batch_idx += 1;
        Ok(report)
    }

    fn check_finite(&self, report: &LossReport) -> Result<()> {
        match report.first_non_finite() {
            Some(term) => Err(Error::NonFinite {
                batch_idx: self.state.batch_idx,
                detail: format!(
                    "{term} is not finite in stage {:?}; report: {}",
                    self.stage(),
                    serde_json::to_string(report).unwrap_or_default()
                ),
            }),
            None => Ok(()),
        }
    }

    fn warmup_step(&mut self, lr_p: &Tensor, hr_p: &Tensor, lr: f64) -> Result<LossReport> {
        let sr = self.state.generator.forward(lr_p)?;
        let l1 = l1_pixel(&sr, hr_p)?;
        let v = scalar(&l1)?;
        let report = LossReport {
            l1_sup: Some(v),
            total_g: Some(v),
            ..LossReport::default()
        };
        self.check_finite(&report)?;
        let grads = l1.backward()?;
        self.state
            .opt_g
            .step(self.state.generator.params(), &grads, lr)?;
        Ok(report)
    }

    fn adversarial_step(
        &mut self,
        lr_p: &Tensor,
        hr_p: &Tensor,
        lr_u: Option<&Tensor>,
        lr: f64,
    ) -> Result<LossReport> {
        let g = &self.state.generator;
        let sr_p = g.forward(lr_p)?;
        let sr_u = lr_u.map(|x| g.forward(x)).transpose()?;
        let n_p = sr_p.dim(0)?;
        let n_real = hr_p.dim(0)?;
        // D sees the union of paired and unpaired generated images, equally weighted
        let fakes = match &sr_u {
            Some(u) => Tensor::cat(&[&sr_p, u], 0)?,
            None => sr_p.clone(),
        };
        let n_fake = fakes.dim(0)?;
        let relativistic_mode = self.cfg.model.adversarial == AdversarialKind::Relativistic;

        // discriminator update
        let d = &self.state.discriminator;
        let all = Tensor::cat(&[hr_p, &fakes.detach()], 0)?;
        let d_loss = if relativistic_mode {
            let logits = d.logits(&all)?;
            relativistic(&logits.narrow(0, 0, n_real)?, &logits.narrow(0, n_real, n_fake)?)?.1
        } else {
            let p = d.forward(&all)?;
            adv_discriminator(&p.narrow(0, 0, n_real)?, &p.narrow(0, n_real, n_fake)?)?
        };
        let d_value = scalar(&d_loss)?;
        self.check_finite(&LossReport {
            d_loss: Some(d_value),
            ..LossReport::default()
        })?;
        let grads = d_loss.backward()?;
        self.state
            .opt_d
            .step(self.state.discriminator.params(), &grads, lr)?;

        // generator update against the refreshed discriminator
        let d = &self.state.discriminator;
        let (adv_s, adv_u) = if relativistic_mode {
            let real = d.logits(hr_p)?.detach();
            let fake = d.logits(&fakes)?;
            let adv_s = relativistic(&real, &fake.narrow(0, 0, n_p)?)?.0;
            let adv_u = match &sr_u {
                Some(_) => Some(relativistic(&real, &fake.narrow(0, n_p, n_fake - n_p)?)?.0),
                None => None,
            };
            (adv_s, adv_u)
        } else {
            let p = d.forward(&fakes)?;
            let adv_s = adv_generator(&p.narrow(0, 0, n_p)?)?;
            let adv_u = match &sr_u {
                Some(_) => Some(adv_generator(&p.narrow(0, n_p, n_fake - n_p)?)?),
                None => None,
            };
            (adv_s, adv_u)
        };
        let unsup = match (lr_u, &sr_u, adv_u) {
            (Some(lr_u), Some(sr_u), Some(adv_g_unsup)) => {
                let (cons_l1, cons_percep) =
                    consistency(lr_u, sr_u, &self.cfg.degradation, &self.extractor)?;
                Some(UnsupervisedTerms {
                    adv_g_unsup,
                    cons_l1,
                    cons_percep,
                })
            }
            _ => None,
        };
        let terms = GeneratorTerms {
            l1_sup: l1_pixel(&sr_p, hr_p)?,
            percep_sup: perceptual(&sr_p, hr_p, &self.extractor)?,
            adv_g_sup: adv_s,
            unsup,
        };
        let total = terms.total(&self.cfg.loss_weights)?;
        let report = terms.report(&total, Some(d_value))?;
        self.check_finite(&report)?;
        let grads = total.backward()?;
        self.state
            .opt_g
            .step(self.state.generator.params(), &grads, lr)?;
        Ok(report)
    }

    /// Mean L1 between `G(lr)` (clamped to `[0, 1]`) and `hr` over `pairs`.
    pub fn validation_l1(&self, pairs: &[(ImageTensor, ImageTensor)]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::EmptySet("validation set is empty".into()));
        }
        let mut sum = 0.0;
        for chunk in pairs.chunks(8) {
            let lr: Vec<_> = chunk.iter().map(|p| p.0.clone()).collect();
            let hr: Vec<_> = chunk.iter().map(|p| p.1.clone()).collect();
            let sr = self
                .state
                .generator
                .forward(&images_to_tensor(&lr, self.dtype, &self.device)?)?
                .clamp(0.0, 1.0)?;
            let hr = images_to_tensor(&hr, self.dtype, &self.device)?;
            sum += scalar(&l1_pixel(&sr, &hr)?)? * chunk.len() as f64;
        }
        Ok(sum / pairs.len() as f64)
    }

    /// Super-resolves every LR image of `pairs`.
    pub fn super_resolve(&self, lrs: &[ImageTensor]) -> Result<Vec<ImageTensor>> {
        lrs.iter()
            .map(|lr| infer(&self.state.generator, lr, None))
            .collect()
    }

    pub fn fid(&self, pairs: &[(ImageTensor, ImageTensor)], ex: &FidExtractor) -> Result<FidReport> {
        let lrs: Vec<_> = pairs.iter().map(|p| p.0.clone()).collect();
        let hrs: Vec<_> = pairs.iter().map(|p| p.1.clone()).collect();
        ex.fid(&hrs, &self.super_resolve(&lrs)?)
    }

    fn checkpoint_tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        let s = &self.state;
        let mut out = BTreeMap::new();
        add_prefixed(&mut out, "g", s.generator.params().snapshot()?);
        add_prefixed(&mut out, "d", s.discriminator.params().snapshot()?);
        add_prefixed(&mut out, "opt_g", s.opt_g.state_tensors());
        add_prefixed(&mut out, "opt_d", s.opt_d.state_tensors());
        Ok(out)
    }

    fn checkpoint_header(&self) -> Result<CheckpointHeader> {
        let s = &self.state;
        let state = StateHeader {
            batch_idx: s.batch_idx,
            stage: self.stage(),
            seeds: s.seeds,
            opt_g_steps: s.opt_g.steps(),
            opt_d_steps: s.opt_d.steps(),
            best_metric: s.best_metric,
            evals_since_best: s.evals_since_best,
        };
        Ok(CheckpointHeader::new(
            self.cfg.model_echo()?,
            serde_json::to_value(state)?,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.checkpoint_header()?, &self.checkpoint_tensors()?)
    }

    /// Restores a training state. The checkpoint's model config must match
    /// `cfg` unless `allow_mismatch` is set.
    pub fn load(
        cfg: &ExperimentConfig,
        path: &Path,
        device: &Device,
        allow_mismatch: bool,
    ) -> Result<Self> {
        let (header, tensors) = read_checkpoint(path, device)?;
        check_config(&header.config, &cfg.model_echo()?, allow_mismatch)?;
        let st: StateHeader = serde_json::from_value(header.state)?;
        let mut t = Self::new(cfg, device)?;
        let s = &mut t.state;
        s.generator.params().load(&take_prefixed(&tensors, "g"))?;
        s.discriminator.params().load(&take_prefixed(&tensors, "d"))?;
        s.opt_g
            .load_state(st.opt_g_steps, &take_prefixed(&tensors, "opt_g"), s.generator.params())?;
        s.opt_d.load_state(
            st.opt_d_steps,
            &take_prefixed(&tensors, "opt_d"),
            s.discriminator.params(),
        )?;
        s.batch_idx = st.batch_idx;
        s.seeds = st.seeds;
        s.best_metric = st.best_metric;
        s.evals_since_best = st.evals_since_best;
        Ok(t)
    }
}

pub fn stage_at(batch_idx: u64, warmup_batches: u64) -> Stage {
    if batch_idx < warmup_batches {
        Stage::Warmup
    } else {
        Stage::Adversarial
    }
}

/// Loads only the generator from a training checkpoint, for inference.
pub fn load_generator(path: &Path, dtype: DType, device: &Device) -> Result<Generator> {
    let (header, tensors) = read_checkpoint(path, device)?;
    let gcfg: GeneratorConfig = serde_json::from_value(
        header
            .config
            .get("model")
            .and_then(|m| m.get("generator"))
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("{}: no generator config", path.display())))?,
    )?;
    let g = Generator::new(&gcfg, dtype, device, 0)?;
    g.params().load(&take_prefixed(&tensors, "g"))?;
    Ok(g)
}

/// Resolves a checkpoint argument: a directory means its last checkpoint.
pub fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(LAST_CHECKPOINT)
    } else {
        path.to_owned()
    }
}

pub struct FitOutcome {
    pub trainer: Trainer,
    pub last: Option<LossRecord>,
    pub validations: Vec<ValidationRecord>,
    pub stopped_early: bool,
    pub final_checkpoint: PathBuf,
}

fn open_log(path: &Path, keep_before: Option<u64>) -> Result<std::fs::File> {
    let kept: Vec<String> = match keep_before {
        Some(limit) if path.exists() => {
            let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            std::io::BufReader::new(f)
                .lines()
                .map_while(std::result::Result::ok)
                .filter(|line| {
                    serde_json::from_str::<serde_json::Value>(line)
                        .ok()
                        .and_then(|v| v.get("step").and_then(|s| s.as_u64()))
                        .is_some_and(|s| s < limit)
                })
                .collect()
        }
        _ => Vec::new(),
    };
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for line in kept {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

fn append(f: &mut std::fs::File, path: &Path, value: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(value)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Writes a checkpoint, falling back to a dump in the temp directory when
/// the target cannot be written.
fn save_or_dump(trainer: &Trainer, path: &Path) -> Result<()> {
    match trainer.save(path) {
        Ok(()) => Ok(()),
        Err(first) => {
            let dump = std::env::temp_dir().join(format!(
                "ssr-dump-step{}-{}.safetensors",
                trainer.state.batch_idx,
                std::process::id()
            ));
            let fallback = match trainer.save(&dump) {
                Ok(()) => format!("state dumped to {}", dump.display()),
                Err(e) => format!("dump to {} also failed: {e}", dump.display()),
            };
            Err(Error::Checkpoint(format!(
                "writing {} failed ({first}); {fallback}",
                path.display()
            )))
        }
    }
}

/// Runs training until `max_batches` or early stopping.
///
/// Writes `losses.jsonl`, `validation.jsonl`, periodic `ckpt_<step>.safetensors`
/// and `last.safetensors` into `out_dir`. With `resume`, training continues from
/// that checkpoint and log lines at or after its step are discarded.
pub fn fit(
    cfg: &ExperimentConfig,
    data: Arc<TrainingData>,
    out_dir: &Path,
    resume: Option<&Path>,
    device: &Device,
) -> Result<FitOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut trainer = match resume {
        Some(p) => Trainer::load(cfg, p, device, false)?,
        None => Trainer::new(cfg, device)?,
    };
    let t = cfg.trainer.clone();
    let start = trainer.state.batch_idx;
    let keep = resume.map(|_| start);
    let loss_path = out_dir.join(LOSS_LOG);
    let val_path = out_dir.join(VALIDATION_LOG);
    let mut loss_log = open_log(&loss_path, keep)?;
    // validation at `start` was already recorded by the interrupted run
    let mut val_log = open_log(&val_path, keep.map(|s| s + 1))?;

    let fid = if t.validation_fid && data.validation.len() >= 2 {
        Some(FidExtractor::new(&cfg.fid, device)?)
    } else {
        None
    };
    let mut validations = Vec::new();
    let mut validate = |trainer: &Trainer| -> Result<Option<ValidationRecord>> {
        if data.validation.is_empty() {
            return Ok(None);
        }
        let rec = ValidationRecord {
            step: trainer.state.batch_idx,
            l1: trainer.validation_l1(&data.validation)?,
            fid: fid
                .as_ref()
                .map(|ex| trainer.fid(&data.validation, ex).map(|r| r.fid))
                .transpose()?,
        };
        append(&mut val_log, &val_path, &rec)?;
        Ok(Some(rec))
    };
    if resume.is_none() {
        if let Some(r) = validate(&trainer)? {
            validations.push(r);
        }
    }

    let sampler = Sampler::new(data.clone(), t.batch, trainer.state.seeds.sampler)?;
    let mut loader = BatchLoader::new(sampler, start, t.workers, 2);
    let mut last = None;
    let mut stopped_early = false;
    while trainer.state.batch_idx < t.max_batches {
        let step = trainer.state.batch_idx;
        let stage = trainer.stage();
        let batch = loader
            .next()
            .ok_or_else(|| Error::Config("batch loader stopped unexpectedly".into()))??;
        let report = match trainer.step(&batch) {
            Ok(r) => r,
            Err(e @ Error::NonFinite { .. }) => {
                let dump = out_dir.join(format!("nonfinite_step{step}.safetensors"));
                let _ = trainer.save(&dump);
                let note = out_dir.join(format!("nonfinite_step{step}.json"));
                let _ = std::fs::write(
                    &note,
                    serde_json::json!({
                        "step": step,
                        "stage": stage,
                        "error": e.to_string(),
                        "learning_rate": t.learning_rate(step),
                        "state_dump": dump,
                    })
                    .to_string(),
                );
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let rec = LossRecord {
            step,
            stage,
            report,
        };
        append(&mut loss_log, &loss_path, &rec)?;
        last = Some(rec);

        let done = trainer.state.batch_idx;
        if t.validate_every > 0 && (done % t.validate_every == 0 || done == t.max_batches) {
            if let Some(r) = validate(&trainer)? {
                let metric = r.fid.unwrap_or(r.l1);
                validations.push(r);
                if trainer.stage() == Stage::Adversarial {
                    let s = &mut trainer.state;
                    if s.best_metric.is_none_or(|b| metric < b) {
                        s.best_metric = Some(metric);
                        s.evals_since_best = 0;
                    } else {
                        s.evals_since_best += 1;
                    }
                    if t.early_stop_patience > 0 && s.evals_since_best >= t.early_stop_patience {
                        log::info!("early stop at batch {done}: no improvement in {} validations", s.evals_since_best);
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
        if t.checkpoint_every > 0 && done % t.checkpoint_every == 0 {
            save_or_dump(&trainer, &out_dir.join(format!("ckpt_{done:08}.safetensors")))?;
            save_or_dump(&trainer, &out_dir.join(LAST_CHECKPOINT))?;
        }
    }
    let final_checkpoint = out_dir.join(LAST_CHECKPOINT);
    save_or_dump(&trainer, &final_checkpoint)?;
    Ok(FitOutcome {
        trainer,
        last,
        validations,
        stopped_early,
        final_checkpoint,
    })
}

/// Parses a loss log written by [`fit`].
pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    std::io::BufReader::new(f)
        .lines()
        .map(|line| {
            let line = line.map_err(|e| Error::io(path, e))?;
            Ok(serde_json::from_str(&line)?)
        })
        .collect()
}
