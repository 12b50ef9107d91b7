//! Three-level hierarchical pathology labels and the text-prompt template.
//!
//! A label has the shape `[anatomical region]-[histological structure]-[object type]`,
//! for example `Breast-Nuclei-Epithelial`. Parsing is case-insensitive and the
//! canonical form is lowercase.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Level separator of the canonical string form.
pub const SEPARATOR: char = '-';

/// The 160 labels of the public PathSeg release, one per line.
pub const PATHSEG_LABELS: &str = include_str!("../data/pathseg_labels.txt");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("malformed label {0:?}: expected region-structure-object with exactly two '-' separators")]
    MalformedLabel(String),
    #[error("unknown histological structure {0:?} (expected tissue, cell or nuclei)")]
    UnknownStructure(String),
    #[error("empty label set")]
    EmptyLabelSet,
}

/// Histological structure, the middle level of a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Tissue,
    Cell,
    Nuclei,
}

impl Structure {
    pub const ALL: [Structure; 3] = [Structure::Tissue, Structure::Cell, Structure::Nuclei];

    pub fn as_str(self) -> &'static str {
        match self {
            Structure::Tissue => "tissue",
            Structure::Cell => "cell",
            Structure::Nuclei => "nuclei",
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Structure {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "tissue" => Ok(Structure::Tissue),
            "cell" => Ok(Structure::Cell),
            "nuclei" => Ok(Structure::Nuclei),
            _ => Err(TaxonomyError::UnknownStructure(s.to_string())),
        }
    }
}

/// A hierarchical semantic label. All levels are stored lowercase.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HierLabel {
    region: String,
    structure: Structure,
    object_type: String,
}

impl HierLabel {
    pub fn new(
        region: &str,
        structure: Structure,
        object_type: &str,
    ) -> Result<Self, TaxonomyError> {
        let region = region.trim().to_lowercase();
        let object_type = object_type.trim().to_lowercase();
        if region.is_empty()
            || object_type.is_empty()
            || region.contains(SEPARATOR)
            || object_type.contains(SEPARATOR)
        {
            return Err(TaxonomyError::MalformedLabel(format!(
                "{region}{SEPARATOR}{structure}{SEPARATOR}{object_type}"
            )));
        }
        Ok(Self {
            region,
            structure,
            object_type,
        })
    }

    pub fn region(&self) -> &str {
        &self.region
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    pub fn object_type(&self) -> &str {
        &self.object_type
    }
}

impl fmt::Display for HierLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{SEPARATOR}{}{SEPARATOR}{}",
            self.region, self.structure, self.object_type
        )
    }
}

impl FromStr for HierLabel {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_label(s)
    }
}

impl Serialize for HierLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HierLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        parse_label(&raw).map_err(serde::de::Error::custom)
    }
}

/// Parses `Region-Structure-Object type`, case-insensitively.
pub fn parse_label(raw: &str) -> Result<HierLabel, TaxonomyError> {
    let levels: Vec<&str> = raw.trim().split(SEPARATOR).collect();
    if levels.len() != 3 || levels.iter().any(|l| l.trim().is_empty()) {
        return Err(TaxonomyError::MalformedLabel(raw.to_string()));
    }
    let structure: Structure = levels[1].parse()?;
    HierLabel::new(levels[0], structure, levels[2])
        .map_err(|_| TaxonomyError::MalformedLabel(raw.to_string()))
}

/// Instantiates `[structure]-level [object type] in [region] pathology.`
pub fn render_prompt(label: &HierLabel) -> String {
    format!(
        "{}-level {} in {} pathology.",
        label.structure, label.object_type, label.region
    )
}

/// Distinct counts per level of a label set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyStats {
    pub n_regions: usize,
    pub n_structures: usize,
    pub n_object_types: usize,
    pub n_labels: usize,
}

pub fn validate_taxonomy(labels: &[HierLabel]) -> Result<TaxonomyStats, TaxonomyError> {
    if labels.is_empty() {
        return Err(TaxonomyError::EmptyLabelSet);
    }
    let regions: BTreeSet<&str> = labels.iter().map(|l| l.region()).collect();
    let structures: BTreeSet<Structure> = labels.iter().map(|l| l.structure()).collect();
    let objects: BTreeSet<&str> = labels.iter().map(|l| l.object_type()).collect();
    let distinct: BTreeSet<&HierLabel> = labels.iter().collect();
    Ok(TaxonomyStats {
        n_regions: regions.len(),
        n_structures: structures.len(),
        n_object_types: objects.len(),
        n_labels: distinct.len(),
    })
}

/// Reads a taxonomy file: one label per line, blank lines and `#` comments ignored.
pub fn parse_taxonomy(text: &str) -> Result<Vec<HierLabel>, TaxonomyError> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(parse_label)
        .collect()
}

/// The bundled PathSeg label set.
pub fn pathseg_labels() -> Vec<HierLabel> {
    parse_taxonomy(PATHSEG_LABELS).expect("bundled label file is well-formed")
}
