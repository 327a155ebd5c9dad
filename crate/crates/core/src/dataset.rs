//! Dataset records, JSON-lines I/O and count-compressed batches.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// One labelled comparison. Pairs are stored in canonical order
/// (`y_w < y_l` when produced by the sampler); which response won is carried
/// by `y_w_preferred`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawPreference", into = "RawPreference")]
pub struct PreferenceSample {
    pub x: usize,
    pub y_w: usize,
    pub y_l: usize,
    pub y_w_preferred: bool,
}

impl PreferenceSample {
    pub fn new(x: usize, y_w: usize, y_l: usize, y_w_preferred: bool) -> Self {
        PreferenceSample {
            x,
            y_w,
            y_l,
            y_w_preferred,
        }
    }

    /// The indicator as a real, `1.0` when `y_w` won.
    #[inline]
    pub fn indicator(&self) -> f64 {
        if self.y_w_preferred {
            1.0
        } else {
            0.0
        }
    }

    /// Same comparison with the two slots exchanged and the label flipped.
    pub fn swapped(&self) -> Self {
        PreferenceSample::new(self.x, self.y_l, self.y_w, !self.y_w_preferred)
    }

    /// `(winner, loser)` according to the label.
    #[inline]
    pub fn winner_loser(&self) -> (usize, usize) {
        if self.y_w_preferred {
            (self.y_w, self.y_l)
        } else {
            (self.y_l, self.y_w)
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RawPreference {
    x: usize,
    yw: usize,
    yl: usize,
    i: u8,
}

impl TryFrom<RawPreference> for PreferenceSample {
    type Error = String;

    fn try_from(r: RawPreference) -> std::result::Result<Self, String> {
        if r.i > 1 {
            return Err(format!("indicator must be 0 or 1, got {}", r.i));
        }
        if r.yw == r.yl {
            return Err(format!("yw and yl must differ, both are {}", r.yw));
        }
        Ok(PreferenceSample::new(r.x, r.yw, r.yl, r.i == 1))
    }
}

impl From<PreferenceSample> for RawPreference {
    fn from(s: PreferenceSample) -> Self {
        RawPreference {
            x: s.x,
            yw: s.y_w,
            yl: s.y_l,
            i: s.y_w_preferred as u8,
        }
    }
}

/// A `(context, response)` record from reference or pretraining data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairSample {
    pub x: usize,
    pub y: usize,
}

impl PairSample {
    pub fn new(x: usize, y: usize) -> Self {
        PairSample { x, y }
    }
}

/// A batch element carrying a nonnegative weight. Losses are weighted means
/// over such elements, so a raw record (weight 1) and a count-compressed
/// record give the same objective.
pub trait Weighted<T>: Sync {
    fn item(&self) -> &T;
    fn weight(&self) -> f64;
}

impl Weighted<PreferenceSample> for PreferenceSample {
    #[inline]
    fn item(&self) -> &PreferenceSample {
        self
    }
    #[inline]
    fn weight(&self) -> f64 {
        1.0
    }
}

impl Weighted<PairSample> for PairSample {
    #[inline]
    fn item(&self) -> &PairSample {
        self
    }
    #[inline]
    fn weight(&self) -> f64 {
        1.0
    }
}

/// A distinct record with its multiplicity.
#[derive(Debug, Clone, PartialEq)]
pub struct Counted<T> {
    pub item: T,
    pub count: u64,
}

impl<T: Sync> Weighted<T> for Counted<T> {
    #[inline]
    fn item(&self) -> &T {
        &self.item
    }
    #[inline]
    fn weight(&self) -> f64 {
        self.count as f64
    }
}

/// Collapse duplicates into counted records, sorted by record.
pub fn tally<T: Ord + Clone>(records: &[T]) -> Vec<Counted<T>> {
    let mut counts: BTreeMap<&T, u64> = BTreeMap::new();
    for r in records {
        *counts.entry(r).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(item, count)| Counted {
            item: item.clone(),
            count,
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.write_all(b"\n").map_err(|e| LabError::io(path, e))?;
    }
    out.flush().map_err(|e| LabError::io(path, e))
}

/// Read a JSON-lines file. Blank lines are skipped; errors name the line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LabError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| LabError::parse(path, idx + 1, e))?;
        out.push(rec);
    }
    Ok(out)
}

/// Check every preference record against a `contexts x responses` shape.
pub fn validate_preferences(records: &[PreferenceSample], shape: (usize, usize)) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        if r.x >= shape.0 || r.y_w >= shape.1 || r.y_l >= shape.1 {
            return Err(LabError::Shape(format!(
                "preference record {i} ({r:?}) outside {}x{}",
                shape.0, shape.1
            )));
        }
        if r.y_w == r.y_l {
            return Err(LabError::InvalidPair(r.y_w));
        }
    }
    Ok(())
}

pub fn validate_pairs(records: &[PairSample], shape: (usize, usize)) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        if r.x >= shape.0 || r.y >= shape.1 {
            return Err(LabError::Shape(format!(
                "pair record {i} ({r:?}) outside {}x{}",
                shape.0, shape.1
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preference_wire_format() {
        let s = PreferenceSample::new(2, 0, 3, true);
        assert_eq!(serde_json::to_string(&s).unwrap(), r#"{"x":2,"yw":0,"yl":3,"i":1}"#);
        let back: PreferenceSample = serde_json::from_str(r#"{"x":2,"yw":0,"yl":3,"i":0}"#).unwrap();
        assert!(!back.y_w_preferred);
        assert!(serde_json::from_str::<PreferenceSample>(r#"{"x":0,"yw":1,"yl":1,"i":0}"#).is_err());
        assert!(serde_json::from_str::<PreferenceSample>(r#"{"x":0,"yw":1,"yl":2,"i":2}"#).is_err());
    }

    #[test]
    fn pair_wire_format() {
        assert_eq!(serde_json::to_string(&PairSample::new(1, 4)).unwrap(), r#"{"x":1,"y":4}"#);
    }

    #[test]
    fn tally_counts_duplicates() {
        let recs = vec![PairSample::new(0, 1), PairSample::new(0, 0), PairSample::new(0, 1)];
        let t = tally(&recs);
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].item, PairSample::new(0, 0));
        assert_eq!(t[1].count, 2);
    }

    #[test]
    fn jsonl_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"x\":0,\"y\":1}\n\n{\"x\":0}\n").unwrap();
        match read_jsonl::<PairSample>(&path) {
            Err(LabError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
