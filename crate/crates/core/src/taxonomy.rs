//! Defect taxonomy, imaging modalities, label standardization and the
//! dataset manifest shared by every stage of the pipeline.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("unknown defect label `{0}`")]
    UnknownLabel(String),
    #[error("unknown modality `{0}`")]
    UnknownModality(String),
    #[error("unknown split `{0}`")]
    UnknownSplit(String),
    #[error("label `{label}` from dataset `{dataset}` is neither mapped nor canonical")]
    UnmappedLabel { label: String, dataset: String },
    #[error("label map line {line}: {message}")]
    LabelMapParse { line: usize, message: String },
    #[error("manifest line {line}: {message}")]
    ManifestParse { line: usize, message: String },
    #[error("duplicate sample id `{0}` in manifest")]
    DuplicateId(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The eight defect categories. `CleanPanel` is the only non-defect value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DefectClass {
    CleanPanel,
    Crack,
    ShortCircuit,
    ThickLine,
    HorizontalDislocation,
    VerticalDislocation,
    Finger,
    BlackCore,
}

impl DefectClass {
    /// All classes in canonical order. This order is used wherever classes are
    /// rendered or indexed (probability lists, confusion matrices).
    pub const ALL: [DefectClass; 8] = [
        DefectClass::CleanPanel,
        DefectClass::Crack,
        DefectClass::ShortCircuit,
        DefectClass::ThickLine,
        DefectClass::HorizontalDislocation,
        DefectClass::VerticalDislocation,
        DefectClass::Finger,
        DefectClass::BlackCore,
    ];

    pub const COUNT: usize = 8;

    pub fn canonical_name(self) -> &'static str {
        match self {
            DefectClass::CleanPanel => "clean_panel",
            DefectClass::Crack => "crack",
            DefectClass::ShortCircuit => "short_circuit",
            DefectClass::ThickLine => "thick_line",
            DefectClass::HorizontalDislocation => "horizontal_dislocation",
            DefectClass::VerticalDislocation => "vertical_dislocation",
            DefectClass::Finger => "finger",
            DefectClass::BlackCore => "black_core",
        }
    }

    pub fn is_defect(self) -> bool {
        self != DefectClass::CleanPanel
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<DefectClass> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for DefectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_name())
    }
}

/// Lowercases and drops separators so that "Clean Panel", "clean_panel",
/// "clean-panel" and "CleanPanel" all compare equal.
fn squash(s: &str) -> String {
    s.chars()
        .filter(|c| !(c.is_whitespace() || *c == '_' || *c == '-'))
        .flat_map(char::to_lowercase)
        .collect()
}

/// Parses a defect label against the eight canonical names, ignoring case,
/// whitespace, underscores and hyphens.
pub fn parse_label(s: &str) -> Result<DefectClass, TaxonomyError> {
    let key = squash(s);
    DefectClass::ALL
        .iter()
        .copied()
        .find(|c| squash(c.canonical_name()) == key)
        .ok_or_else(|| TaxonomyError::UnknownLabel(s.to_string()))
}

impl FromStr for DefectClass {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_label(s)
    }
}

impl Serialize for DefectClass {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.canonical_name())
    }
}

impl<'de> Deserialize<'de> for DefectClass {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_label(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    El,
    Thermal,
    Rgb,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::El, Modality::Thermal, Modality::Rgb];

    pub fn canonical_name(self) -> &'static str {
        match self {
            Modality::El => "el",
            Modality::Thermal => "thermal",
            Modality::Rgb => "rgb",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_name())
    }
}

impl FromStr for Modality {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = squash(s);
        Modality::ALL
            .iter()
            .copied()
            .find(|m| m.canonical_name() == key)
            .ok_or_else(|| TaxonomyError::UnknownModality(s.to_string()))
    }
}

impl Serialize for Modality {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.canonical_name())
    }
}

impl<'de> Deserialize<'de> for Modality {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

impl Split {
    pub fn canonical_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_name())
    }
}

impl FromStr for Split {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match squash(s).as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" | "" => Ok(Split::Unassigned),
            _ => Err(TaxonomyError::UnknownSplit(s.to_string())),
        }
    }
}

impl Serialize for Split {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.canonical_name())
    }
}

impl<'de> Deserialize<'de> for Split {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One image in the curated corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub path: String,
    pub modality: Modality,
    pub label: DefectClass,
    #[serde(default)]
    pub split: Split,
    pub provenance: String,
    /// Set only on records synthesized by the curator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation_tag: Option<String>,
}

impl SampleRecord {
    pub fn is_augmented(&self) -> bool {
        self.augmentation_tag.is_some()
    }
}

/// Ordered collection of [`SampleRecord`]s with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<SampleRecord>) -> Result<Self, TaxonomyError> {
        let m = DatasetManifest { records };
        m.check_unique_ids()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count_class(&self, class: DefectClass) -> usize {
        self.records.iter().filter(|r| r.label == class).count()
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn check_unique_ids(&self) -> Result<(), TaxonomyError> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(TaxonomyError::DuplicateId(r.id.clone()));
            }
        }
        Ok(())
    }

    /// Parses the line-delimited JSON form. Blank lines are skipped.
    pub fn from_jsonl(text: &str) -> Result<Self, TaxonomyError> {
        Self::read_from(text.as_bytes())
    }

    pub fn read_from<R: std::io::Read>(reader: R) -> Result<Self, TaxonomyError> {
        let mut records = Vec::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: SampleRecord =
                serde_json::from_str(&line).map_err(|e| TaxonomyError::ManifestParse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            records.push(record);
        }
        DatasetManifest::new(records)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("sample record serializes"));
            out.push('\n');
        }
        out
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, TaxonomyError> {
    let file = fs::File::open(path)?;
    DatasetManifest::read_from(file)
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<(), TaxonomyError> {
    let mut file = fs::File::create(path)?;
    file.write_all(manifest.to_jsonl().as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMapEntry {
    pub source_dataset: String,
    pub source_label: String,
    pub class: DefectClass,
}

/// Source-dataset labels mapped onto the unified taxonomy.
///
/// The file form is headerless comma-separated text with columns
/// `source_dataset,source_label,canonical_class`; `#` starts a comment line.
/// Lookups are case-insensitive on both the dataset and the label.
#[derive(Debug, Clone, Default)]
pub struct LabelMap {
    entries: Vec<LabelMapEntry>,
    index: HashMap<(String, String), DefectClass>,
}

fn map_key(dataset: &str, label: &str) -> (String, String) {
    (dataset.trim().to_lowercase(), label.trim().to_lowercase())
}

impl LabelMap {
    pub fn from_entries(entries: Vec<LabelMapEntry>) -> Result<Self, TaxonomyError> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            let key = map_key(&e.source_dataset, &e.source_label);
            if let Some(prev) = index.insert(key, e.class) {
                if prev != e.class {
                    return Err(TaxonomyError::LabelMapParse {
                        line: i + 1,
                        message: format!(
                            "`{}` in `{}` maps to both {} and {}",
                            e.source_label, e.source_dataset, prev, e.class
                        ),
                    });
                }
            }
        }
        Ok(LabelMap { entries, index })
    }

    pub fn parse(text: &str) -> Result<Self, TaxonomyError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(text.as_bytes());
        let mut entries = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|e| TaxonomyError::LabelMapParse {
                line: e.position().map(|p| p.line() as usize).unwrap_or(0),
                message: e.to_string(),
            })?;
            let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
            if row.iter().all(str::is_empty) {
                continue;
            }
            if row.len() != 3 {
                return Err(TaxonomyError::LabelMapParse {
                    line,
                    message: format!("expected 3 columns, found {}", row.len()),
                });
            }
            let class = parse_label(&row[2]).map_err(|e| TaxonomyError::LabelMapParse {
                line,
                message: e.to_string(),
            })?;
            entries.push(LabelMapEntry {
                source_dataset: row[0].to_string(),
                source_label: row[1].to_string(),
                class,
            });
        }
        Self::from_entries(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TaxonomyError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn entries(&self) -> &[LabelMapEntry] {
        &self.entries
    }

    pub fn lookup(&self, raw: &str, dataset: &str) -> Option<DefectClass> {
        self.index.get(&map_key(dataset, raw)).copied()
    }
}

/// Maps a source label to the unified taxonomy, falling back to the canonical
/// names when the pair is not in the table.
pub fn apply_label_map(map: &LabelMap, raw: &str, dataset: &str) -> Result<DefectClass, TaxonomyError> {
    if let Some(c) = map.lookup(raw, dataset) {
        return Ok(c);
    }
    parse_label(raw).map_err(|_| TaxonomyError::UnmappedLabel {
        label: raw.to_string(),
        dataset: dataset.to_string(),
    })
}
