//! Dataset manifest: a CSV with `FileName`, `EF` and `Split` columns.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TRAIN" => Some(Split::Train),
            "VAL" => Some(Split::Val),
            "TEST" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "TRAIN",
            Split::Val => "VAL",
            Split::Test => "TEST",
        }
    }
}

/// Ejection-fraction class. Class 1 is EF > 50, class 2 is 40 ≤ EF ≤ 50 and
/// class 3 is EF < 40.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LvefClass {
    Preserved = 1,
    MildlyReduced = 2,
    Reduced = 3,
}

impl LvefClass {
    pub const ALL: [LvefClass; 3] = [LvefClass::Preserved, LvefClass::MildlyReduced, LvefClass::Reduced];

    pub fn from_ef(ef: f64) -> LvefClass {
        if ef > 50.0 {
            LvefClass::Preserved
        } else if ef >= 40.0 {
            LvefClass::MildlyReduced
        } else {
            LvefClass::Reduced
        }
    }

    /// 1-based class number.
    pub fn number(self) -> usize {
        self as usize
    }

    /// 0-based index used by the classifier.
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn from_index(i: usize) -> Option<LvefClass> {
        LvefClass::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub file_name: String,
    pub ef: f64,
    pub split: Split,
}

impl ManifestRow {
    pub fn class(&self) -> LvefClass {
        LvefClass::from_ef(self.ef)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn find(&self, file_name: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.file_name == file_name)
    }

    pub fn to_csv(&self) -> Result<String> {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| vec![r.file_name.clone(), format!("{}", r.ef), r.split.as_str().to_string()])
            .collect();
        super::csv_text(&["FileName", "EF", "Split"], &rows)
    }

    /// Parses manifest text. Error rows count data rows from 1, the header
    /// being row 0.
    pub fn parse(text: &str) -> Result<Manifest> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let perr = |row: usize, column: &str, message: String| Error::Parse {
            row,
            column: column.to_string(),
            message,
        };
        let headers = rdr
            .headers()
            .map_err(|e| perr(0, "header", e.to_string()))?
            .clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.eq_ignore_ascii_case(name))
                .ok_or_else(|| perr(0, name, format!("missing column `{name}`")))
        };
        let (fi, ei, si) = (col("FileName")?, col("EF")?, col("Split")?);
        let mut seen = HashSet::new();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| perr(row, "record", e.to_string()))?;
            let field = |idx: usize, name: &str| {
                rec.get(idx)
                    .ok_or_else(|| perr(row, name, "missing field".to_string()))
            };
            let file_name = field(fi, "FileName")?.to_string();
            if file_name.is_empty() {
                return Err(perr(row, "FileName", "empty file name".into()));
            }
            if !seen.insert(file_name.clone()) {
                return Err(perr(row, "FileName", format!("duplicate file `{file_name}`")));
            }
            let raw = field(ei, "EF")?;
            let ef: f64 = raw
                .parse()
                .map_err(|_| perr(row, "EF", format!("`{raw}` is not a number")))?;
            if !(0.0..=100.0).contains(&ef) {
                return Err(perr(row, "EF", format!("{ef} is outside [0, 100]")));
            }
            let raw = field(si, "Split")?;
            let split =
                Split::parse(raw).ok_or_else(|| perr(row, "Split", format!("unknown split `{raw}`")))?;
            rows.push(ManifestRow { file_name, ef, split });
        }
        Ok(Manifest { rows })
    }
}

pub fn parse_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Manifest::parse(&text)
}
