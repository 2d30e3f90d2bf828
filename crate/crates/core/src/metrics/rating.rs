use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One rater's 1–5 score for one blinded output. Stored one per line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatingRecord {
    pub rater_id: String,
    pub session_id: String,
    pub item_id: String,
    pub image_id: String,
    /// Opaque method id; the mapping to models is kept in the blinding key.
    pub method_id: String,
    pub score: u8,
    /// Zero-based position of the item in the rater's presentation order.
    pub position: usize,
    /// Unix time in milliseconds when the item was served.
    pub presented_at: u64,
}

impl RatingRecord {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.score) {
            return Err(Error::Validation(format!(
                "score must be between 1 and 5, got {}",
                self.score
            )));
        }
        Ok(())
    }
}

/// Appends one record and flushes it to disk before returning.
pub fn write_rating(file: &mut std::fs::File, record: &RatingRecord) -> std::io::Result<()> {
    let mut line = serde_json::to_string(record).map_err(std::io::Error::other)?;
    line.push('\n');
    file.write_all(line.as_bytes())?;
    file.sync_data()
}

/// Reads a ratings log, rejecting out-of-range scores and repeated
/// `(rater, image, method)` triples. A torn final line (no trailing newline
/// and not valid JSON) is ignored.
pub fn read_ratings(path: &Path) -> Result<Vec<RatingRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = std::io::BufReader::new(f)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    let mut out = Vec::with_capacity(lines.len());
    let mut seen = BTreeSet::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RatingRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => {
                return Err(Error::Format {
                    path: path.to_owned(),
                    message: format!("line {}: {e}", i + 1),
                })
            }
        };
        rec.validate()?;
        let key = (rec.rater_id.clone(), rec.image_id.clone(), rec.method_id.clone());
        if !seen.insert(key) {
            return Err(Error::Validation(format!(
                "duplicate rating by {} for image {} / method {}",
                rec.rater_id, rec.image_id, rec.method_id
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosSummary {
    pub method_id: String,
    pub mean: f64,
    pub count: usize,
    /// Sample standard deviation (divisor n − 1); 0 for a single score.
    pub std: f64,
}

/// Mean opinion score of one method. Uses integer sums, so the result does
/// not depend on record order.
pub fn mos(records: &[RatingRecord], method_id: &str) -> Result<MosSummary> {
    let scores: Vec<i64> = records
        .iter()
        .filter(|r| r.method_id == method_id)
        .map(|r| r.score as i64)
        .collect();
    let n = scores.len() as i64;
    if n == 0 {
        return Err(Error::EmptySet(format!("no ratings for method {method_id}")));
    }
    let sum: i64 = scores.iter().sum();
    let sum_sq: i64 = scores.iter().map(|s| s * s).sum();
    let std = if n > 1 {
        (((n * sum_sq - sum * sum) as f64) / ((n * (n - 1)) as f64)).sqrt()
    } else {
        0.0
    };
    Ok(MosSummary {
        method_id: method_id.to_string(),
        mean: sum as f64 / n as f64,
        count: n as usize,
        std,
    })
}

/// One summary per method, sorted by method id.
pub fn mos_table(records: &[RatingRecord]) -> Result<Vec<MosSummary>> {
    let methods: BTreeMap<&str, ()> = records.iter().map(|r| (r.method_id.as_str(), ())).collect();
    if methods.is_empty() {
        return Err(Error::EmptySet("no ratings".into()));
    }
    methods.keys().map(|m| mos(records, m)).collect()
}
