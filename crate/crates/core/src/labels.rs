//! Vertebra label indices, their canonical names, and 3D annotations.
//!
//! Labels are 1-based indices into the fixed cranial-to-caudal name table
//! C1..C7, T1..T13, L1..L6 (26 categories, covering the transitional T13/L6
//! anatomies). The working number of categories `c` may be any prefix length
//! of that table; index `i` always names the same vertebra regardless of `c`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point3;

/// Number of label categories used by default (C1..L6).
pub const DEFAULT_CATEGORIES: usize = 26;

const NAMES: [&str; DEFAULT_CATEGORIES] = [
    "C1", "C2", "C3", "C4", "C5", "C6", "C7", //
    "T1", "T2", "T3", "T4", "T5", "T6", "T7", "T8", "T9", "T10", "T11", "T12", "T13", //
    "L1", "L2", "L3", "L4", "L5", "L6",
];

/// A vertebra category: a 1-based index with a canonical anatomical name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VertebraLabel(u8);

impl VertebraLabel {
    /// Label from a 1-based index; `index` must be in `1..=26`.
    pub fn new(index: usize) -> Result<Self> {
        if (1..=DEFAULT_CATEGORIES).contains(&index) {
            Ok(VertebraLabel(index as u8))
        } else {
            Err(Error::Config(format!(
                "vertebra index {index} outside 1..={DEFAULT_CATEGORIES}"
            )))
        }
    }

    /// 1-based index of this label.
    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Canonical name, e.g. index 11 -> "T4".
    pub fn name(self) -> &'static str {
        NAMES[self.0 as usize - 1]
    }

    /// Inverse of [`VertebraLabel::name`].
    pub fn from_name(name: &str) -> Result<Self> {
        NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| VertebraLabel(i as u8 + 1))
            .ok_or_else(|| Error::Data(format!("unknown vertebra name {name:?}")))
    }

    /// Label `offset` positions caudal of this one, if it stays in range.
    pub fn offset(self, offset: i64) -> Result<Self> {
        let idx = self.0 as i64 + offset;
        if idx < 1 || idx > DEFAULT_CATEGORIES as i64 {
            return Err(Error::Config(format!(
                "label {} offset {offset} leaves 1..={DEFAULT_CATEGORIES}",
                self.name()
            )));
        }
        Ok(VertebraLabel(idx as u8))
    }
}

impl std::fmt::Display for VertebraLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for VertebraLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for VertebraLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        VertebraLabel::from_name(&name).map_err(serde::de::Error::custom)
    }
}

/// One labeled 3D center in world millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedCenter {
    pub label: VertebraLabel,
    pub center_mm: [f64; 3],
}

impl AnnotatedCenter {
    pub fn center(&self) -> Point3 {
        Point3::new(self.center_mm[0], self.center_mm[1], self.center_mm[2])
    }
}

/// Ground-truth annotation: labeled centers, strictly ascending by label
/// index (each label appears at most once).
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation3 {
    entries: Vec<AnnotatedCenter>,
}

impl Annotation3 {
    /// Validating constructor; entries must be sorted strictly ascending by
    /// label index.
    pub fn new(entries: Vec<AnnotatedCenter>) -> Result<Self> {
        for pair in entries.windows(2) {
            if pair[0].label.index() >= pair[1].label.index() {
                return Err(Error::Data(format!(
                    "annotation labels not strictly ascending: {} then {}",
                    pair[0].label, pair[1].label
                )));
            }
        }
        for e in &entries {
            if !e.center_mm.iter().all(|v| v.is_finite()) {
                return Err(Error::Data(format!("non-finite center for {}", e.label)));
            }
        }
        Ok(Annotation3 { entries })
    }

    pub fn entries(&self) -> &[AnnotatedCenter] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Serialize as a JSON array of `{"label": "T4", "center_mm": [x,y,z]}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("annotation serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let entries: Vec<AnnotatedCenter> =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("annotation json: {e}")))?;
        Annotation3::new(entries)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }
}
