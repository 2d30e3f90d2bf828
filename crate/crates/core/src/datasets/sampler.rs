use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainingData;
use crate::error::{Error, Result};
use crate::imaging::{images_to_tensor, ImageTensor};

const STREAM_PAIRED: u64 = 0;
const STREAM_UNPAIRED: u64 = 1;
const STREAM_CROP: u64 = 2;

/// Per-step composition of a minibatch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSpec {
    pub n_sup: usize,
    pub n_unsup: usize,
    /// Side of the random LR crop; `None` uses whole images.
    #[serde(default)]
    pub lr_patch: Option<usize>,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            n_sup: 8,
            n_unsup: 8,
            lr_patch: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub index: u64,
    pub paired_lr: Vec<ImageTensor>,
    pub paired_hr: Vec<ImageTensor>,
    pub unpaired_lr: Vec<ImageTensor>,
}

impl SampleBatch {
    /// `(paired_lr, paired_hr, unpaired_lr)` as NCHW tensors; empty parts are `None`.
    pub fn to_tensors(
        &self,
        dtype: DType,
        device: &Device,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let stack = |imgs: &[ImageTensor]| -> Result<Option<Tensor>> {
            if imgs.is_empty() {
                Ok(None)
            } else {
                images_to_tensor(imgs, dtype, device).map(Some)
            }
        };
        Ok((
            stack(&self.paired_lr)?,
            stack(&self.paired_hr)?,
            stack(&self.unpaired_lr)?,
        ))
    }
}

/// Stateless sampler: batch `k` is a pure function of `(seed, k)`.
///
/// Each component is an endless stream of per-epoch seeded permutations and
/// batch `k` takes stream items `[k·n, (k+1)·n)`, so every item appears exactly
/// once per epoch, and resuming at any `k` or splitting work across threads
/// reproduces the same sequence.
#[derive(Clone, Debug)]
pub struct Sampler {
    data: Arc<TrainingData>,
    spec: BatchSpec,
    seed: u64,
}

impl Sampler {
    pub fn new(data: Arc<TrainingData>, spec: BatchSpec, seed: u64) -> Result<Self> {
        if spec.n_sup == 0 && spec.n_unsup == 0 {
            return Err(Error::Config("batch spec requests no images".into()));
        }
        if spec.n_sup > 0 && data.paired.is_empty() {
            return Err(Error::Config(
                "n_sup > 0 but the split has no paired images".into(),
            ));
        }
        if spec.n_unsup > 0 && data.unpaired.is_empty() {
            return Err(Error::Config(
                "n_unsup > 0 but the split has no unpaired images".into(),
            ));
        }
        if let Some(p) = spec.lr_patch {
            let lrs = data
                .paired
                .iter()
                .map(|(lr, _)| lr)
                .chain(data.unpaired.iter());
            for lr in lrs {
                if p == 0 || p > lr.height() || p > lr.width() {
                    return Err(Error::Config(format!(
                        "lr_patch {p} does not fit a {}x{} LR image",
                        lr.height(),
                        lr.width()
                    )));
                }
            }
        }
        Ok(Self { data, spec, seed })
    }

    pub fn spec(&self) -> &BatchSpec {
        &self.spec
    }

    pub fn data(&self) -> &TrainingData {
        &self.data
    }

    fn rng(&self, stream: u64, counter: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((counter << 2) | stream);
        rng
    }

    fn permutation(&self, stream: u64, len: usize, epoch: u64) -> Vec<usize> {
        let mut p: Vec<usize> = (0..len).collect();
        p.shuffle(&mut self.rng(stream, epoch));
        p
    }

    /// Indices of stream items `[k·per, (k+1)·per)`.
    fn indices(&self, stream: u64, len: usize, per: usize, k: u64) -> Vec<usize> {
        let mut out = Vec::with_capacity(per);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for i in 0..per as u64 {
            let pos = k * per as u64 + i;
            let epoch = pos / len as u64;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, self.permutation(stream, len, epoch)));
            }
            out.push(cached.as_ref().expect("set above").1[(pos % len as u64) as usize]);
        }
        out
    }

    /// Paired and unpaired item indices of batch `k`.
    pub fn batch_indices(&self, k: u64) -> (Vec<usize>, Vec<usize>) {
        let paired = if self.spec.n_sup > 0 {
            self.indices(STREAM_PAIRED, self.data.paired.len(), self.spec.n_sup, k)
        } else {
            Vec::new()
        };
        let unpaired = if self.spec.n_unsup > 0 {
            self.indices(STREAM_UNPAIRED, self.data.unpaired.len(), self.spec.n_unsup, k)
        } else {
            Vec::new()
        };
        (paired, unpaired)
    }

    pub fn batch(&self, k: u64) -> Result<SampleBatch> {
        let (pi, ui) = self.batch_indices(k);
        let mut rng = self.rng(STREAM_CROP, k);
        let scale = self.data.scale;
        let mut crop = |lr: &ImageTensor| -> (usize, usize, usize, usize) {
            match self.spec.lr_patch {
                Some(p) => (
                    rng.random_range(0..=lr.height() - p),
                    rng.random_range(0..=lr.width() - p),
                    p,
                    p,
                ),
                None => (0, 0, lr.height(), lr.width()),
            }
        };
        let mut batch = SampleBatch {
            index: k,
            paired_lr: Vec::with_capacity(pi.len()),
            paired_hr: Vec::with_capacity(pi.len()),
            unpaired_lr: Vec::with_capacity(ui.len()),
        };
        for i in pi {
            let (lr, hr) = &self.data.paired[i];
            let (y, x, h, w) = crop(lr);
            batch.paired_lr.push(lr.crop(y, x, h, w)?);
            batch
                .paired_hr
                .push(hr.crop(y * scale, x * scale, h * scale, w * scale)?);
        }
        for i in ui {
            let lr = &self.data.unpaired[i];
            let (y, x, h, w) = crop(lr);
            batch.unpaired_lr.push(lr.crop(y, x, h, w)?);
        }
        Ok(batch)
    }
}

/// Prefetching iterator over batches `start, start+1, ...`.
///
/// Worker `w` of `W` builds the batches with `k ≡ w (mod W)` and the consumer
/// reads workers round-robin, so the emitted sequence does not depend on `W`.
/// With zero workers batches are built on the calling thread.
pub struct BatchLoader {
    sampler: Sampler,
    next: u64,
    receivers: Vec<Receiver<Result<SampleBatch>>>,
    handles: Vec<JoinHandle<()>>,
}

impl BatchLoader {
    pub fn new(sampler: Sampler, start: u64, workers: usize, depth: usize) -> Self {
        let mut receivers = Vec::with_capacity(workers);
        let mut handles = Vec::with_capacity(workers);
        for w in 0..workers as u64 {
            let (tx, rx) = sync_channel(depth.max(1));
            let s = sampler.clone();
            handles.push(std::thread::spawn(move || {
                let mut k = start + w;
                while tx.send(s.batch(k)).is_ok() {
                    k += workers as u64;
                }
            }));
            receivers.push(rx);
        }
        Self {
            sampler,
            next: start,
            receivers,
            handles,
        }
    }
}

impl Iterator for BatchLoader {
    type Item = Result<SampleBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        let k = self.next;
        self.next += 1;
        if self.receivers.is_empty() {
            return Some(self.sampler.batch(k));
        }
        let w = (k % self.receivers.len() as u64) as usize;
        self.receivers[w].recv().ok()
    }
}

impl Drop for BatchLoader {
    fn drop(&mut self) {
        self.receivers.clear();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}
