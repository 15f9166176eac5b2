//! The 13-class cell-type registry.
//!
//! Registry order fixes the meaning of every logit column, so it is loaded
//! once and shared read-only for the lifetime of a run.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of classes every model predicts.
pub const NUM_CLASSES: usize = 13;

/// Canonical class codes, in logit-column order.
pub const CLASS_CODES: [&str; NUM_CLASSES] = [
    "SNE", "LY", "MO", "BL", "EO", "MY", "BNE", "VLY", "MMY", "PMY", "PC", "PLY", "BA",
];

const BUILTIN_V1: &str = include_str!("../resources/registry.v1.csv");

/// Haematopoietic branch a class belongs to. Used only for report grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lineage {
    Granulopoiesis,
    Monocytopoiesis,
    Lymphopoiesis,
    Unassigned,
}

impl Lineage {
    pub fn as_str(self) -> &'static str {
        match self {
            Lineage::Granulopoiesis => "granulopoiesis",
            Lineage::Monocytopoiesis => "monocytopoiesis",
            Lineage::Lymphopoiesis => "lymphopoiesis",
            Lineage::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Lineage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Lineage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "granulopoiesis" => Ok(Lineage::Granulopoiesis),
            "monocytopoiesis" => Ok(Lineage::Monocytopoiesis),
            "lymphopoiesis" => Ok(Lineage::Lymphopoiesis),
            "unassigned" => Ok(Lineage::Unassigned),
            other => Err(Error::Registry(format!("unknown lineage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub code: String,
    pub name: String,
    pub lineage: Lineage,
}

/// Ordered class registry. Always holds exactly the 13 canonical codes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRegistry {
    entries: Vec<ClassEntry>,
}

impl ClassRegistry {
    /// The registry shipped with the crate (`resources/registry.v1.csv`).
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_V1).expect("builtin registry is valid")
    }

    /// Parses `code,name,lineage` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    what: "class registry",
                    line: lineno + 1,
                    reason: format!("expected 3 fields, found {}", fields.len()),
                });
            }
            entries.push(ClassEntry {
                code: fields[0].to_string(),
                name: fields[1].to_string(),
                lineage: fields[2].parse()?,
            });
        }
        Self::from_entries(entries)
    }

    pub fn from_entries(entries: Vec<ClassEntry>) -> Result<Self> {
        if entries.len() != NUM_CLASSES {
            return Err(Error::Registry(format!(
                "expected {NUM_CLASSES} classes, found {}",
                entries.len()
            )));
        }
        for (i, e) in entries.iter().enumerate() {
            if entries[..i].iter().any(|o| o.code == e.code) {
                return Err(Error::Registry(format!("duplicate code `{}`", e.code)));
            }
            if !CLASS_CODES.contains(&e.code.as_str()) {
                return Err(Error::Registry(format!("unknown code `{}`", e.code)));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn codes(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.code.as_str())
    }

    pub fn code(&self, index: usize) -> &str {
        &self.entries[index].code
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.code == code)
    }

    pub fn require_index(&self, code: &str) -> Result<usize> {
        self.index_of(code)
            .ok_or_else(|| Error::UnknownLabel(code.to_string()))
    }

    pub fn lineage(&self, index: usize) -> Lineage {
        self.entries[index].lineage
    }

    /// Class indices grouped by lineage, in registry order.
    pub fn lineage_groups(&self) -> Vec<(Lineage, Vec<usize>)> {
        let mut groups: Vec<(Lineage, Vec<usize>)> = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            match groups.iter_mut().find(|(l, _)| *l == e.lineage) {
                Some((_, members)) => members.push(i),
                None => groups.push((e.lineage, vec![i])),
            }
        }
        groups
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# class registry v1: code,name,lineage\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{}\n", e.code, e.name, e.lineage));
        }
        out
    }
}

impl Default for ClassRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_has_canonical_codes_in_order() {
        let reg = ClassRegistry::builtin();
        assert_eq!(reg.len(), 13);
        let codes: Vec<&str> = reg.codes().collect();
        assert_eq!(codes, CLASS_CODES);
        assert_eq!(reg.lineage(reg.index_of("BL").unwrap()), Lineage::Unassigned);
        assert_eq!(reg.lineage(reg.index_of("MO").unwrap()), Lineage::Monocytopoiesis);
    }

    #[test]
    fn text_round_trips() {
        let reg = ClassRegistry::builtin();
        assert_eq!(ClassRegistry::parse(&reg.to_text()).unwrap(), reg);
    }

    #[test]
    fn rejects_wrong_size_and_duplicates() {
        assert!(ClassRegistry::parse("SNE,a,granulopoiesis\n").is_err());
        let dup = BUILTIN_V1.replace("BA,basophil", "SNE,basophil");
        assert!(matches!(ClassRegistry::parse(&dup), Err(Error::Registry(_))));
        let bad = BUILTIN_V1.replace("basophil,granulopoiesis", "basophil,erythropoiesis");
        assert!(ClassRegistry::parse(&bad).is_err());
    }
}
