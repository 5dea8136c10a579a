//! Discrete unit sequences, de-duplication and the decoder token vocabulary.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cluster ids in `0..k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSequence {
    pub units: Vec<u32>,
    /// True once adjacent repeats have been collapsed.
    pub deduped: bool,
}

impl UnitSequence {
    pub fn new(units: Vec<u32>) -> Self {
        Self {
            units,
            deduped: false,
        }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn check_range(&self, k: usize) -> Result<()> {
        match self.units.iter().find(|&&u| u as usize >= k) {
            Some(u) => Err(Error::contract(format!("unit {u} outside 0..{k}"))),
            None => Ok(()),
        }
    }

    /// Concatenate two sequences; the result is not guaranteed run-free at
    /// the seam, so it keeps the flag only if both inputs carry it.
    pub fn concat(&self, other: &UnitSequence) -> UnitSequence {
        let mut units = self.units.clone();
        units.extend_from_slice(&other.units);
        UnitSequence {
            units,
            deduped: self.deduped && other.deduped,
        }
    }
}

/// Collapse every run of equal adjacent units to one occurrence.
pub fn dedup(seq: &UnitSequence) -> UnitSequence {
    let mut units = seq.units.clone();
    units.dedup();
    UnitSequence {
        units,
        deduped: true,
    }
}

/// Special tokens, in id order after the unit ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Special {
    Filler,
    Pad,
}

/// Token ids: unit `u` is token `u`; specials follow at `k_units..`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitVocabulary {
    pub k_units: usize,
}

impl UnitVocabulary {
    pub const SPECIALS: [Special; 2] = [Special::Filler, Special::Pad];

    pub fn new(k_units: usize) -> Self {
        Self { k_units }
    }

    pub fn total_size(&self) -> usize {
        self.k_units + Self::SPECIALS.len()
    }

    pub fn special(&self, s: Special) -> u32 {
        let pos = Self::SPECIALS.iter().position(|&x| x == s).unwrap();
        (self.k_units + pos) as u32
    }

    pub fn filler(&self) -> u32 {
        self.special(Special::Filler)
    }

    pub fn pad(&self) -> u32 {
        self.special(Special::Pad)
    }

    /// Unit ids followed by FILLER up to `target_len`, the frame count the
    /// decoder will generate. Units are never truncated.
    pub fn to_tokens(&self, seq: &UnitSequence, target_len: usize) -> Result<Vec<u32>> {
        if !seq.deduped {
            return Err(Error::contract("token streams are built from deduplicated units"));
        }
        if seq.len() > target_len {
            return Err(Error::contract(format!(
                "{} units do not fit in {target_len} frames",
                seq.len()
            )));
        }
        seq.check_range(self.k_units)?;
        let mut tokens = seq.units.clone();
        tokens.resize(target_len, self.filler());
        Ok(tokens)
    }
}

/// One line of a unit file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitRecord {
    pub id: String,
    pub deduped: bool,
    pub units: Vec<u32>,
}

impl UnitRecord {
    pub fn new(id: impl Into<String>, seq: &UnitSequence) -> Self {
        Self {
            id: id.into(),
            deduped: seq.deduped,
            units: seq.units.clone(),
        }
    }

    pub fn sequence(&self) -> UnitSequence {
        UnitSequence {
            units: self.units.clone(),
            deduped: self.deduped,
        }
    }
}

pub fn write_unit_records(path: impl AsRef<Path>, records: &[UnitRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("record serializes");
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_unit_records(path: impl AsRef<Path>) -> Result<Vec<UnitRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(v: &[u32]) -> UnitSequence {
        UnitSequence::new(v.to_vec())
    }

    #[test]
    fn dedup_examples() {
        assert_eq!(dedup(&seq(&[1, 1, 2, 2, 2, 3])).units, vec![1, 2, 3]);
        assert_eq!(dedup(&seq(&[])).units, Vec::<u32>::new());
        assert_eq!(dedup(&seq(&[5, 5, 5, 5])).units, vec![5]);
        assert!(dedup(&seq(&[1])).deduped);
    }

    #[test]
    fn token_padding() {
        let vocab = UnitVocabulary::new(500);
        assert_eq!(vocab.total_size(), 502);
        assert_eq!(vocab.filler(), 500);
        assert_eq!(vocab.pad(), 501);
        let s = dedup(&seq(&[1, 2, 3]));
        assert_eq!(vocab.to_tokens(&s, 5).unwrap(), vec![1, 2, 3, 500, 500]);
        assert_eq!(vocab.to_tokens(&s, 3).unwrap(), vec![1, 2, 3]);
        assert!(matches!(vocab.to_tokens(&s, 2), Err(Error::Contract(_))));
        assert!(matches!(vocab.to_tokens(&seq(&[1, 2]), 5), Err(Error::Contract(_))));
        assert!(vocab.to_tokens(&dedup(&seq(&[600])), 5).is_err());
    }

    #[test]
    fn unit_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.jsonl");
        let recs = vec![
            UnitRecord::new("a", &dedup(&seq(&[1, 1, 4]))),
            UnitRecord::new("b", &seq(&[7, 7])),
        ];
        write_unit_records(&p, &recs).unwrap();
        assert_eq!(read_unit_records(&p).unwrap(), recs);
    }

    proptest! {
        #[test]
        fn dedup_idempotent(v in prop::collection::vec(0u32..6, 0..64)) {
            let once = dedup(&seq(&v));
            prop_assert_eq!(dedup(&once).units, once.units);
        }

        #[test]
        fn dedup_output_has_no_adjacent_repeats(v in prop::collection::vec(0u32..4, 0..64)) {
            let out = dedup(&seq(&v)).units;
            prop_assert!(out.windows(2).all(|w| w[0] != w[1]));
            prop_assert!(out.len() <= v.len());
            let already_clean = v.windows(2).all(|w| w[0] != w[1]);
            prop_assert_eq!(out.len() == v.len(), already_clean);
        }
    }
}
