//! Anomaly class registry.
//!
//! Eight slots. The first three carry fixed names; the remaining five ship with
//! placeholder names and are meant to be renamed in the config file.

use std::fmt;

use serde::{Deserialize, Serialize};

/// COCO-style category identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: ClassId,
    pub name: String,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ClassError {
    #[error("class id {0} is not registered")]
    UnknownId(ClassId),
    #[error("class name '{0}' is not registered")]
    UnknownName(String),
    #[error("duplicate class {0}")]
    Duplicate(String),
    #[error("class registry is empty")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassEntry>", into = "Vec<ClassEntry>")]
pub struct ClassRegistry {
    entries: Vec<ClassEntry>,
}

pub const OIL_SPILL: ClassId = ClassId(1);
pub const FLOOR_STAIN: ClassId = ClassId(2);
pub const CHEMICAL_DISCOLORATION: ClassId = ClassId(3);

impl Default for ClassRegistry {
    fn default() -> Self {
        let names = [
            "oil-spill",
            "floor-stain",
            "chemical-discoloration",
            "anomaly-4",
            "anomaly-5",
            "anomaly-6",
            "anomaly-7",
            "anomaly-8",
        ];
        let entries = names
            .iter()
            .enumerate()
            .map(|(i, n)| ClassEntry {
                id: ClassId(i as u32 + 1),
                name: (*n).to_string(),
            })
            .collect();
        Self { entries }
    }
}

impl TryFrom<Vec<ClassEntry>> for ClassRegistry {
    type Error = ClassError;

    fn try_from(entries: Vec<ClassEntry>) -> Result<Self, Self::Error> {
        Self::new(entries)
    }
}

impl From<ClassRegistry> for Vec<ClassEntry> {
    fn from(r: ClassRegistry) -> Self {
        r.entries
    }
}

impl ClassRegistry {
    pub fn new(entries: Vec<ClassEntry>) -> Result<Self, ClassError> {
        if entries.is_empty() {
            return Err(ClassError::Empty);
        }
        for (i, e) in entries.iter().enumerate() {
            if entries[..i].iter().any(|o| o.id == e.id) {
                return Err(ClassError::Duplicate(e.id.to_string()));
            }
            if entries[..i].iter().any(|o| o.name == e.name) {
                return Err(ClassError::Duplicate(e.name.clone()));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.entries.iter().map(|e| e.id)
    }

    pub fn name(&self, id: ClassId) -> Result<&str, ClassError> {
        self.entries
            .iter()
            .find(|e| e.id == id)
            .map(|e| e.name.as_str())
            .ok_or(ClassError::UnknownId(id))
    }

    pub fn id_of(&self, name: &str) -> Result<ClassId, ClassError> {
        self.entries
            .iter()
            .find(|e| e.name.eq_ignore_ascii_case(name))
            .map(|e| e.id)
            .ok_or_else(|| ClassError::UnknownName(name.to_string()))
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.entries.iter().any(|e| e.id == id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
