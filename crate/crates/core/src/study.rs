//! Blinded rating study: bundle export and the session/rating backend.
//!
//! A bundle directory holds `study.json` (items and references), the PNGs
//! under `images/`, and `.blinding-key.json`, the only place that maps opaque
//! method ids to models. The key is never read by the service.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use base64::Engine;
use candle_core::{DType, Device};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{save_png, ImageTensor};
use crate::metrics::{read_ratings, write_rating, RatingRecord};
use crate::trainer::{infer, load_generator, Tiling};

pub const STUDY_FILE: &str = "study.json";
pub const KEY_FILE: &str = ".blinding-key.json";
pub const STUDY_FORMAT: &str = "ssr-study";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyReference {
    pub image_id: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyItem {
    pub item_id: String,
    pub image_id: String,
    pub method_id: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub references: Vec<StudyReference>,
    /// Grouped by image; within an image in seeded random order.
    pub items: Vec<StudyItem>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyEntry {
    pub method_id: String,
    pub name: String,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindingKey {
    pub seed: u64,
    pub methods: Vec<KeyEntry>,
}

impl BlindingKey {
    pub fn read(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }

    pub fn name_of(&self, method_id: &str) -> Option<&str> {
        self.methods
            .iter()
            .find(|m| m.method_id == method_id)
            .map(|m| m.name.as_str())
    }
}

/// A model to include in the study.
#[derive(Clone, Debug)]
pub struct StudyMethod {
    pub name: String,
    pub checkpoint: PathBuf,
}

/// A test image: the LR input every method super-resolves, and its HR reference.
#[derive(Clone, Debug)]
pub struct StudyImage {
    pub image_id: String,
    pub lr: ImageTensor,
    pub hr: ImageTensor,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub n_methods: usize,
    pub n_images: usize,
    pub n_items: usize,
    pub n_references: usize,
    pub seed: u64,
}

fn token(rng: &mut ChaCha8Rng, prefix: char, taken: &mut BTreeSet<String>) -> String {
    loop {
        let mut b = [0u8; 6];
        rng.fill_bytes(&mut b);
        let t = format!("{prefix}{}", hex::encode(b));
        if taken.insert(t.clone()) {
            return t;
        }
    }
}

fn write_private(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut opts = std::fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts.open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Renders every method's output for every image and writes a study bundle.
pub fn export_study(
    methods: &[StudyMethod],
    images: &[StudyImage],
    out_dir: &Path,
    seed: u64,
    tiling: Option<Tiling>,
) -> Result<ExportSummary> {
    if methods.is_empty() {
        return Err(Error::EmptySet("a study needs at least one checkpoint".into()));
    }
    if images.is_empty() {
        return Err(Error::EmptySet("a study needs at least one test image".into()));
    }
    for m in methods {
        if !m.checkpoint.is_file() {
            return Err(Error::NotFound(format!(
                "checkpoint {} for method {:?}",
                m.checkpoint.display(),
                m.name
            )));
        }
    }
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = BTreeSet::new();
    let key = BlindingKey {
        seed,
        methods: methods
            .iter()
            .map(|m| KeyEntry {
                method_id: token(&mut rng, 'm', &mut taken),
                name: m.name.clone(),
                checkpoint: m.checkpoint.clone(),
            })
            .collect(),
    };

    let mut references = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let path = PathBuf::from("images").join(format!("ref-{i:04}.png"));
        save_png(&img.hr, &out_dir.join(&path))?;
        references.push(StudyReference {
            image_id: img.image_id.clone(),
            path,
        });
    }
    let mut per_image: Vec<Vec<StudyItem>> = vec![Vec::new(); images.len()];
    for (m, entry) in methods.iter().zip(&key.methods) {
        let g = load_generator(&m.checkpoint, DType::F32, &Device::Cpu)?;
        for (i, img) in images.iter().enumerate() {
            let item_id = token(&mut rng, 'i', &mut taken);
            let path = PathBuf::from("images").join(format!("{item_id}.png"));
            save_png(&infer(&g, &img.lr, tiling)?, &out_dir.join(&path))?;
            per_image[i].push(StudyItem {
                item_id,
                image_id: img.image_id.clone(),
                method_id: entry.method_id.clone(),
                path,
            });
        }
    }
    for group in &mut per_image {
        group.shuffle(&mut rng);
    }
    let manifest = StudyManifest {
        format: STUDY_FORMAT.into(),
        version: 1,
        seed,
        references,
        items: per_image.into_iter().flatten().collect(),
    };
    let study_path = out_dir.join(STUDY_FILE);
    std::fs::write(&study_path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&study_path, e))?;
    write_private(&out_dir.join(KEY_FILE), serde_json::to_string_pretty(&key)?.as_bytes())?;
    Ok(ExportSummary {
        n_methods: methods.len(),
        n_images: images.len(),
        n_items: manifest.items.len(),
        n_references: manifest.references.len(),
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub rater_id: String,
    pub done: usize,
    pub total: usize,
}

/// Response of `next`: one reference/candidate pair, or the completion marker.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextItem {
    Item {
        session_id: String,
        item_id: String,
        image_id: String,
        position: usize,
        total: usize,
        /// Base64-encoded PNG.
        reference_png: String,
        candidate_png: String,
    },
    Complete {
        session_id: String,
        total: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingAck {
    pub session_id: String,
    pub item_id: String,
    pub done: usize,
    pub total: usize,
}

#[derive(Debug)]
struct Session {
    rater_id: String,
    order: Vec<usize>,
    rated: usize,
    /// Item index and serve time of the item at the cursor, once served.
    served: Option<(usize, u64)>,
}

struct Inner {
    sessions: HashMap<String, Session>,
    log: std::fs::File,
}

pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

pub struct StudyService {
    dir: PathBuf,
    study: StudyManifest,
    item_index: HashMap<String, usize>,
    reference_index: HashMap<String, usize>,
    log_path: PathBuf,
    inner: Mutex<Inner>,
    clock: Clock,
}

fn system_clock() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn digest(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

fn validate_rater(rater_id: &str) -> Result<()> {
    let ok = !rater_id.is_empty()
        && rater_id.len() <= 128
        && rater_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
    if ok {
        Ok(())
    } else {
        Err(Error::Validation(
            "rater id must be 1-128 characters of [A-Za-z0-9._-]".into(),
        ))
    }
}

/// Drops a partially written last line so appends start on a fresh line.
fn truncate_torn_tail(path: &Path) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .read(true)
        .write(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    if buf.is_empty() || buf.ends_with(b"\n") {
        return Ok(());
    }
    let keep = buf.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    f.set_len(keep as u64).map_err(|e| Error::io(path, e))?;
    f.seek(SeekFrom::End(0)).map_err(|e| Error::io(path, e))?;
    f.sync_data().map_err(|e| Error::io(path, e))
}

impl StudyService {
    /// Opens a bundle and replays the ratings log, restoring every session's cursor.
    pub fn open(bundle_dir: &Path, log_path: &Path) -> Result<Self> {
        Self::open_with_clock(bundle_dir, log_path, Arc::new(system_clock))
    }

    pub fn open_with_clock(bundle_dir: &Path, log_path: &Path, clock: Clock) -> Result<Self> {
        let study_path = bundle_dir.join(STUDY_FILE);
        let raw = std::fs::read_to_string(&study_path).map_err(|e| Error::io(&study_path, e))?;
        let study: StudyManifest = serde_json::from_str(&raw)?;
        if study.format != STUDY_FORMAT {
            return Err(Error::Format {
                path: study_path,
                message: format!("unknown study format {:?}", study.format),
            });
        }
        let item_index = study
            .items
            .iter()
            .enumerate()
            .map(|(i, it)| (it.item_id.clone(), i))
            .collect();
        let reference_index = study
            .references
            .iter()
            .enumerate()
            .map(|(i, r)| (r.image_id.clone(), i))
            .collect();
        let log = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(log_path)
            .map_err(|e| Error::io(log_path, e))?;
        truncate_torn_tail(log_path)?;
        let svc = Self {
            dir: bundle_dir.to_owned(),
            study,
            item_index,
            reference_index,
            log_path: log_path.to_owned(),
            inner: Mutex::new(Inner {
                sessions: HashMap::new(),
                log,
            }),
            clock,
        };
        let records = read_ratings(log_path)?;
        {
            let mut inner = svc.inner.lock().expect("study lock");
            for r in records {
                let sid = svc.session_id(&r.rater_id);
                let session = inner
                    .sessions
                    .entry(sid)
                    .or_insert_with(|| svc.new_session(&r.rater_id));
                session.rated += 1;
            }
        }
        Ok(svc)
    }

    pub fn total(&self) -> usize {
        self.study.items.len()
    }

    fn session_id(&self, rater_id: &str) -> String {
        let d = digest(&[b"session", &self.study.seed.to_le_bytes(), rater_id.as_bytes()]);
        format!("s{}", hex::encode(&d[..8]))
    }

    fn new_session(&self, rater_id: &str) -> Session {
        let d = digest(&[b"order", &self.study.seed.to_le_bytes(), rater_id.as_bytes()]);
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&d);
        let mut order: Vec<usize> = (0..self.study.items.len()).collect();
        order.shuffle(&mut ChaCha8Rng::from_seed(seed));
        Session {
            rater_id: rater_id.to_string(),
            order,
            rated: 0,
            served: None,
        }
    }

    /// Starts or resumes the session of `rater_id`.
    pub fn session(&self, rater_id: &str) -> Result<SessionInfo> {
        validate_rater(rater_id)?;
        let sid = self.session_id(rater_id);
        let mut inner = self.inner.lock().expect("study lock");
        let s = inner
            .sessions
            .entry(sid.clone())
            .or_insert_with(|| self.new_session(rater_id));
        Ok(SessionInfo {
            session_id: sid,
            rater_id: s.rater_id.clone(),
            done: s.rated,
            total: s.order.len(),
        })
    }

    fn png_base64(&self, rel: &Path) -> Result<String> {
        let path = self.dir.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn next_item(&self, session_id: &str) -> Result<NextItem> {
        let now = (self.clock)();
        let (idx, position, total) = {
            let mut inner = self.inner.lock().expect("study lock");
            let s = inner
                .sessions
                .get_mut(session_id)
                .ok_or_else(|| Error::NotFound(format!("session {session_id}")))?;
            let total = s.order.len();
            if s.rated >= total {
                return Ok(NextItem::Complete {
                    session_id: session_id.to_string(),
                    total,
                });
            }
            let idx = s.order[s.rated];
            if s.served.map(|(i, _)| i) != Some(idx) {
                s.served = Some((idx, now));
            }
            (idx, s.rated, total)
        };
        let item = &self.study.items[idx];
        let reference = self
            .reference_index
            .get(&item.image_id)
            .map(|&r| &self.study.references[r])
            .ok_or_else(|| Error::NotFound(format!("reference for image {}", item.image_id)))?;
        Ok(NextItem::Item {
            session_id: session_id.to_string(),
            item_id: item.item_id.clone(),
            image_id: item.image_id.clone(),
            position,
            total,
            reference_png: self.png_base64(&reference.path)?,
            candidate_png: self.png_base64(&item.path)?,
        })
    }

    /// Records a score for the item currently served to `session_id`.
    ///
    /// The record is flushed to disk before the acknowledgement is returned.
    pub fn submit(&self, session_id: &str, item_id: &str, score: i64) -> Result<RatingAck> {
        let mut inner = self.inner.lock().expect("study lock");
        let Inner { sessions, log } = &mut *inner;
        let s = sessions
            .get_mut(session_id)
            .ok_or_else(|| Error::NotFound(format!("session {session_id}")))?;
        let idx = *self
            .item_index
            .get(item_id)
            .ok_or_else(|| Error::NotFound(format!("item {item_id}")))?;
        if s.order[..s.rated].contains(&idx) {
            return Err(Error::Conflict(format!(
                "item {item_id} was already rated in session {session_id}"
            )));
        }
        let (served_idx, presented_at) = s.served.ok_or_else(|| {
            Error::Validation(format!("item {item_id} has not been served to this session"))
        })?;
        if served_idx != idx || s.order.get(s.rated) != Some(&idx) {
            return Err(Error::Validation(format!(
                "item {item_id} is not the item currently served to this session"
            )));
        }
        if !(1..=5).contains(&score) {
            return Err(Error::Validation(format!(
                "score must be between 1 and 5, got {score}"
            )));
        }
        let item = &self.study.items[idx];
        let record = RatingRecord {
            rater_id: s.rater_id.clone(),
            session_id: session_id.to_string(),
            item_id: item.item_id.clone(),
            image_id: item.image_id.clone(),
            method_id: item.method_id.clone(),
            score: score as u8,
            position: s.rated,
            presented_at,
        };
        write_rating(log, &record).map_err(|e| Error::io(&self.log_path, e))?;
        s.rated += 1;
        s.served = None;
        Ok(RatingAck {
            session_id: session_id.to_string(),
            item_id: item_id.to_string(),
            done: s.rated,
            total: s.order.len(),
        })
    }

    /// Per-session progress, keyed by session id.
    pub fn progress(&self) -> BTreeMap<String, (usize, usize)> {
        let inner = self.inner.lock().expect("study lock");
        inner
            .sessions
            .iter()
            .map(|(k, s)| (k.clone(), (s.rated, s.order.len())))
            .collect()
    }
}
