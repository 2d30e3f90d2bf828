//! Paired/unpaired splits, their on-disk manifest, and minibatch sampling.
//!
//! A prepared split lives in one directory:
//!
//! ```text
//! <out>/manifest.jsonl   header line, then one record per image
//! <out>/hr/<id>.png      paired and test HR images only
//! <out>/lr/<id>.png      every LR image
//! ```
//!
//! Unpaired records carry no HR path and their HR image is never written.

mod sampler;
pub mod synthetic;

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{degrade, load_image, resize, save_png, DegradationSpec, ImageTensor, Kernel, ValueRange};

pub use sampler::{BatchLoader, BatchSpec, SampleBatch, Sampler};

pub const MANIFEST_FORMAT: &str = "ssr-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Where source images come from: an HR directory and, optionally, an LR
/// directory whose files share stems with the HR files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceLayout {
    pub hr_dir: PathBuf,
    pub lr_dir: Option<PathBuf>,
}

impl SourceLayout {
    /// `<root>/hr` plus `<root>/lr` when present; a root without an `hr`
    /// subdirectory is itself the HR directory.
    pub fn discover(root: &Path) -> Self {
        let hr = root.join("hr");
        if hr.is_dir() {
            let lr = root.join("lr");
            Self {
                hr_dir: hr,
                lr_dir: lr.is_dir().then_some(lr),
            }
        } else {
            Self {
                hr_dir: root.to_owned(),
                lr_dir: None,
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub n_paired: usize,
    /// `None` takes every image left after the test and paired draws.
    #[serde(default)]
    pub n_unpaired: Option<usize>,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default)]
    pub seed: u64,
    /// HR side after center-cropping to square; LR side is `hr_size / scale`.
    #[serde(default = "default_hr_size")]
    pub hr_size: usize,
}

fn default_n_test() -> usize {
    238
}

fn default_hr_size() -> usize {
    256
}

impl SplitConfig {
    pub fn new(n_paired: usize, seed: u64) -> Self {
        Self {
            n_paired,
            n_unpaired: None,
            n_test: default_n_test(),
            seed,
            hr_size: default_hr_size(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub scale: usize,
    pub kernel: Kernel,
    pub antialias: bool,
    pub hr_size: usize,
    pub lr_size: usize,
    pub channels: usize,
    pub n_paired: usize,
    pub n_unpaired: usize,
    pub n_test: usize,
}

impl ManifestHeader {
    pub fn degradation(&self) -> DegradationSpec {
        DegradationSpec {
            scale: self.scale,
            kernel: self.kernel,
            antialias: self.antialias,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: String,
    pub lr: PathBuf,
    pub hr: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnpairedEntry {
    pub id: String,
    pub lr: PathBuf,
}

/// One manifest line after the header. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "split", rename_all = "snake_case", deny_unknown_fields)]
enum Record {
    Paired { id: String, lr: PathBuf, hr: PathBuf },
    Unpaired { id: String, lr: PathBuf },
    Test { id: String, lr: PathBuf, hr: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitManifest {
    pub header: ManifestHeader,
    pub paired: Vec<PairEntry>,
    pub unpaired: Vec<UnpairedEntry>,
    pub test: Vec<PairEntry>,
    /// Directory the relative entry paths resolve against.
    pub root: PathBuf,
}

impl SplitManifest {
    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        let records = self
            .paired
            .iter()
            .map(|e| Record::Paired {
                id: e.id.clone(),
                lr: e.lr.clone(),
                hr: e.hr.clone(),
            })
            .chain(self.unpaired.iter().map(|e| Record::Unpaired {
                id: e.id.clone(),
                lr: e.lr.clone(),
            }))
            .chain(self.test.iter().map(|e| Record::Test {
                id: e.id.clone(),
                lr: e.lr.clone(),
                hr: e.hr.clone(),
            }));
        for r in records {
            out.push_str(&serde_json::to_string(&r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest file, or `<dir>/manifest.jsonl` when given a directory.
    pub fn read(path: &Path) -> Result<Self> {
        let path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_owned()
        };
        let bad = |message: String| Error::Format {
            path: path.clone(),
            message,
        };
        let f = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = std::io::BufReader::new(f).lines();
        let first = lines
            .next()
            .ok_or_else(|| bad("empty manifest".into()))?
            .map_err(|e| Error::io(&path, e))?;
        let header: ManifestHeader =
            serde_json::from_str(&first).map_err(|e| bad(format!("header: {e}")))?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(bad(format!(
                "unsupported manifest {} v{}",
                header.format, header.version
            )));
        }
        let mut m = SplitManifest {
            header,
            paired: Vec::new(),
            unpaired: Vec::new(),
            test: Vec::new(),
            root: path.parent().map(Path::to_owned).unwrap_or_default(),
        };
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record =
                serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", i + 2)))?;
            match rec {
                Record::Paired { id, lr, hr } => m.paired.push(PairEntry { id, lr, hr }),
                Record::Unpaired { id, lr } => m.unpaired.push(UnpairedEntry { id, lr }),
                Record::Test { id, lr, hr } => m.test.push(PairEntry { id, lr, hr }),
            }
        }
        let counts = (m.paired.len(), m.unpaired.len(), m.test.len());
        let declared = (m.header.n_paired, m.header.n_unpaired, m.header.n_test);
        if counts != declared {
            return Err(bad(format!(
                "header declares {declared:?} (paired, unpaired, test) but records give {counts:?}"
            )));
        }
        Ok(m)
    }
}

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Center-crops to square and resizes to `size × size` (bicubic, antialiased).
pub fn square_resize(img: &ImageTensor, size: usize) -> Result<ImageTensor> {
    let sq = img.center_crop_square();
    if sq.height() == size {
        return Ok(sq);
    }
    resize(&sq, size, size, Kernel::Bicubic, true)
}

/// Draws test, paired and unpaired subsets from the source pool with a seeded
/// shuffle, prepares their images under `out_dir`, and writes the manifest.
pub fn build_split(
    source: &SourceLayout,
    out_dir: &Path,
    cfg: &SplitConfig,
    degradation: &DegradationSpec,
) -> Result<SplitManifest> {
    let lr_size = degradation.output_dims(cfg.hr_size, cfg.hr_size)?.0;
    let pool = list_images(&source.hr_dir)?;
    let mut seen = BTreeSet::new();
    for p in &pool {
        if !seen.insert(stem(p)) {
            return Err(Error::Format {
                path: p.clone(),
                message: format!("duplicate image stem {:?}", stem(p)),
            });
        }
    }
    let n_unpaired = match cfg.n_unpaired {
        Some(n) => n,
        None => pool.len().saturating_sub(cfg.n_test + cfg.n_paired),
    };
    let requested = cfg.n_test + cfg.n_paired + n_unpaired;
    if requested > pool.len() {
        return Err(Error::Capacity {
            requested,
            available: pool.len(),
        });
    }

    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let test_idx = &order[..cfg.n_test];
    let paired_idx = &order[cfg.n_test..cfg.n_test + cfg.n_paired];
    let unpaired_idx = &order[cfg.n_test + cfg.n_paired..requested];

    std::fs::create_dir_all(out_dir.join("hr")).map_err(|e| Error::io(out_dir, e))?;
    std::fs::create_dir_all(out_dir.join("lr")).map_err(|e| Error::io(out_dir, e))?;

    let mut channels = None;
    let mut prepare = |idx: usize, keep_hr: bool| -> Result<(String, PathBuf, PathBuf)> {
        let src = &pool[idx];
        let id = stem(src);
        let hr = square_resize(&load_image(src, ValueRange::Unit)?, cfg.hr_size)?;
        match channels {
            None => channels = Some(hr.channels()),
            Some(c) if c != hr.channels() => {
                return Err(Error::Channel(format!(
                    "{} has {} channels, earlier images have {c}",
                    src.display(),
                    hr.channels()
                )))
            }
            _ => {}
        }
        let lr_src = source.lr_dir.as_ref().and_then(|d| {
            IMAGE_EXTENSIONS
                .iter()
                .map(|ext| d.join(format!("{id}.{ext}")))
                .find(|p| p.is_file())
        });
        let lr = match lr_src {
            Some(p) => {
                let lr = square_resize(&load_image(&p, ValueRange::Unit)?, lr_size)?;
                if lr.channels() != hr.channels() {
                    return Err(Error::Channel(format!(
                        "{} and its HR counterpart differ in channel count",
                        p.display()
                    )));
                }
                lr
            }
            None => degrade(&hr, degradation)?,
        };
        let lr_rel = PathBuf::from("lr").join(format!("{id}.png"));
        let hr_rel = PathBuf::from("hr").join(format!("{id}.png"));
        save_png(&lr, &out_dir.join(&lr_rel))?;
        if keep_hr {
            save_png(&hr, &out_dir.join(&hr_rel))?;
        }
        Ok((id, lr_rel, hr_rel))
    };

    let test = test_idx
        .iter()
        .map(|&i| prepare(i, true).map(|(id, lr, hr)| PairEntry { id, lr, hr }))
        .collect::<Result<Vec<_>>>()?;
    let paired = paired_idx
        .iter()
        .map(|&i| prepare(i, true).map(|(id, lr, hr)| PairEntry { id, lr, hr }))
        .collect::<Result<Vec<_>>>()?;
    let unpaired = unpaired_idx
        .iter()
        .map(|&i| prepare(i, false).map(|(id, lr, _)| UnpairedEntry { id, lr }))
        .collect::<Result<Vec<_>>>()?;

    let manifest = SplitManifest {
        header: ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            seed: cfg.seed,
            scale: degradation.scale,
            kernel: degradation.kernel,
            antialias: degradation.antialias,
            hr_size: cfg.hr_size,
            lr_size,
            channels: channels.unwrap_or(3),
            n_paired: paired.len(),
            n_unpaired: unpaired.len(),
            n_test: test.len(),
        },
        paired,
        unpaired,
        test,
        root: out_dir.to_owned(),
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// In-memory images of a split, ready for sampling.
#[derive(Clone, Debug, Default)]
pub struct TrainingData {
    pub paired: Vec<(ImageTensor, ImageTensor)>,
    pub unpaired: Vec<ImageTensor>,
    pub validation: Vec<(ImageTensor, ImageTensor)>,
    pub scale: usize,
}

impl TrainingData {
    pub fn new(
        paired: Vec<(ImageTensor, ImageTensor)>,
        unpaired: Vec<ImageTensor>,
        validation: Vec<(ImageTensor, ImageTensor)>,
        scale: usize,
    ) -> Result<Self> {
        for (lr, hr) in paired.iter().chain(&validation) {
            if hr.height() != scale * lr.height() || hr.width() != scale * lr.width() {
                return Err(Error::Shape(format!(
                    "pair {:?} / {:?} does not follow the x{scale} shape law",
                    lr.shape(),
                    hr.shape()
                )));
            }
        }
        Ok(Self {
            paired,
            unpaired,
            validation,
            scale,
        })
    }

    /// Loads paired and unpaired images; the test split becomes the validation set.
    pub fn from_manifest(m: &SplitManifest) -> Result<Self> {
        let load = |rel: &Path| load_image(&m.resolve(rel), ValueRange::Unit);
        let pair = |e: &PairEntry| Ok((load(&e.lr)?, load(&e.hr)?));
        Self::new(
            m.paired.iter().map(pair).collect::<Result<_>>()?,
            m.unpaired.iter().map(|e| load(&e.lr)).collect::<Result<_>>()?,
            m.test.iter().map(pair).collect::<Result<_>>()?,
            m.header.scale,
        )
    }

    /// Builds pairs by degrading HR images with `spec`.
    pub fn synthesize(
        paired_hr: &[ImageTensor],
        unpaired_hr: &[ImageTensor],
        validation_hr: &[ImageTensor],
        spec: &DegradationSpec,
    ) -> Result<Self> {
        let pairs = |hrs: &[ImageTensor]| -> Result<Vec<_>> {
            hrs.iter()
                .map(|hr| Ok((degrade(hr, spec)?, hr.clone())))
                .collect()
        };
        Self::new(
            pairs(paired_hr)?,
            unpaired_hr
                .iter()
                .map(|hr| degrade(hr, spec))
                .collect::<Result<_>>()?,
            pairs(validation_hr)?,
            spec.scale,
        )
    }
}
