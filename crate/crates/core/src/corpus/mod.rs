//! Dataset ingestion into one canonical corpus shape, the on-disk manifest
//! format, and the synthetic receipt generator.

mod cord;
mod funsd;
mod sroie;
mod synthetic;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evaluation::LinkPair;
use crate::model::{validate_values, Document, DocumentSchema, DocumentValues, ModelError};

pub use cord::{cord_document, load_cord};
pub use funsd::{funsd_document, load_funsd};
pub use sroie::{load_sroie, recover_support, sroie_document};
pub use synthetic::{counting_corpus, generate_synthetic, CountingPattern, synthetic_receipt, ItemSpec, ReceiptSpec, SyntheticShape};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("checksum mismatch for {0}")]
    Checksum(String),
    #[error("{dataset} has no {split} split")]
    NoSplit { dataset: String, split: String },
    #[error("unknown {what} {value:?}")]
    Unknown { what: &'static str, value: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub(crate) fn io_error(path: &Path, e: impl fmt::Display) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

pub(crate) fn malformed(path: &Path, reason: impl fmt::Display) -> CorpusError {
    CorpusError::Malformed {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Cord,
    Sroie,
    Funsd,
    Synthetic,
}

impl DatasetName {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Cord => "cord",
            DatasetName::Sroie => "sroie",
            DatasetName::Funsd => "funsd",
            DatasetName::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cord" => Ok(DatasetName::Cord),
            "sroie" => Ok(DatasetName::Sroie),
            "funsd" => Ok(DatasetName::Funsd),
            "synthetic" => Ok(DatasetName::Synthetic),
            _ => Err(CorpusError::Unknown {
                what: "dataset",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" | "training" => Ok(Split::Train),
            "validation" | "valid" | "dev" | "val" => Ok(Split::Validation),
            "test" | "testing" => Ok(Split::Test),
            _ => Err(CorpusError::Unknown {
                what: "split",
                value: s.to_string(),
            }),
        }
    }
}

/// Where a dataset split lives and how many documents it should hold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub name: DatasetName,
    pub split: Split,
    pub root: PathBuf,
    pub expected: Option<usize>,
}

impl DatasetDescriptor {
    pub fn new(name: DatasetName, split: Split, root: impl Into<PathBuf>) -> Self {
        Self {
            name,
            split,
            root: root.into(),
            expected: Self::expected_count(name, split),
        }
    }

    /// Official split sizes.
    pub fn expected_count(name: DatasetName, split: Split) -> Option<usize> {
        match (name, split) {
            (DatasetName::Cord, Split::Train) => Some(800),
            (DatasetName::Cord, Split::Validation) => Some(100),
            (DatasetName::Cord, Split::Test) => Some(100),
            (DatasetName::Sroie, Split::Train) => Some(626),
            (DatasetName::Sroie, Split::Test) => Some(347),
            (DatasetName::Funsd, Split::Train) => Some(149),
            (DatasetName::Funsd, Split::Test) => Some(50),
            _ => None,
        }
    }

    /// Loads the split; a count that differs from the official one is a
    /// warning.
    pub fn load(&self) -> Result<Corpus, CorpusError> {
        let corpus = match self.name {
            DatasetName::Cord => load_cord(&self.root, self.split)?,
            DatasetName::Sroie => load_sroie(&self.root, self.split)?,
            DatasetName::Funsd => load_funsd(&self.root, self.split)?,
            DatasetName::Synthetic => load_manifest(&self.root.join(self.split.as_str()))?,
        };
        if let Some(n) = self.expected.filter(|n| *n != corpus.len()) {
            warn!("{} {}: expected {n} documents, found {}", self.name, self.split, corpus.len());
        }
        Ok(corpus)
    }
}

pub fn bundled_schema(name: DatasetName) -> DocumentSchema {
    let raw = match name {
        DatasetName::Cord | DatasetName::Synthetic => include_str!("../../data/schemas/cord.json"),
        DatasetName::Sroie => include_str!("../../data/schemas/sroie.json"),
        DatasetName::Funsd => include_str!("../../data/schemas/funsd.json"),
    };
    DocumentSchema::from_json_str(raw).expect("bundled schema is valid")
}

/// One document with its gold annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub doc: Document,
    pub gold: DocumentValues,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub links: Vec<LinkPair>,
    /// Value-absent queries whose answer is not printed in the document.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub value_absent: Vec<String>,
}

impl CorpusItem {
    pub fn new(doc: Document, gold: DocumentValues) -> Self {
        Self {
            doc,
            gold,
            links: Vec::new(),
            value_absent: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: DatasetName,
    pub split: Split,
    pub schema: DocumentSchema,
    pub items: Vec<CorpusItem>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item(&self, doc_id: &str) -> Option<&CorpusItem> {
        self.items.iter().find(|i| i.doc.doc_id == doc_id)
    }

    /// Docs whose gold breaks the schema, with the first violation.
    pub fn invalid_documents(&self) -> Vec<(String, String)> {
        self.items
            .iter()
            .filter_map(|i| {
                let r = validate_values(&self.schema, &i.gold);
                r.violations.first().map(|v| (i.doc.doc_id.clone(), v.to_string()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub doc_id: String,
    /// Relative to the manifest directory.
    pub document: String,
    pub gold: String,
    /// Hex SHA-256 over the document file bytes followed by the gold file bytes.
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: DatasetName,
    pub split: Split,
    pub schema: String,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct GoldFile {
    values: DocumentValues,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    links: Vec<LinkPair>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    value_absent: Vec<String>,
}

fn checksum(doc: &[u8], gold: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(doc);
    h.update(gold);
    hex::encode(h.finalize())
}

fn write(path: &Path, contents: &str) -> Result<(), CorpusError> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| io_error(p, e))?;
    }
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>, CorpusError> {
    fs::read(path).map_err(|e| io_error(path, e))
}

/// Writes `dir/manifest.json`, `dir/schema.json` and per-document files.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<Manifest, CorpusError> {
    let schema_json = serde_json::to_string_pretty(&corpus.schema).expect("schema serializes");
    write(&dir.join("schema.json"), &schema_json)?;
    let mut entries = Vec::new();
    for item in &corpus.items {
        let id = &item.doc.doc_id;
        let doc = serde_json::to_string_pretty(&item.doc).expect("document serializes");
        let gold = serde_json::to_string_pretty(&GoldFile {
            values: item.gold.clone(),
            links: item.links.clone(),
            value_absent: item.value_absent.clone(),
        })
        .expect("gold serializes");
        let entry = ManifestEntry {
            doc_id: id.clone(),
            document: format!("docs/{id}.json"),
            gold: format!("gold/{id}.json"),
            checksum: checksum(doc.as_bytes(), gold.as_bytes()),
        };
        write(&dir.join(&entry.document), &doc)?;
        write(&dir.join(&entry.gold), &gold)?;
        entries.push(entry);
    }
    let manifest = Manifest {
        name: corpus.name,
        split: corpus.split,
        schema: "schema.json".into(),
        entries,
    };
    write(&dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    Ok(manifest)
}

/// Reads a corpus written by [`save_corpus`], verifying checksums.
pub fn load_manifest(dir: &Path) -> Result<Corpus, CorpusError> {
    let mpath = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&read(&mpath)?).map_err(|e| malformed(&mpath, e))?;
    let spath = dir.join(&manifest.schema);
    let schema: DocumentSchema = serde_json::from_slice(&read(&spath)?).map_err(|e| malformed(&spath, e))?;
    let mut items = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let (dpath, gpath) = (dir.join(&e.document), dir.join(&e.gold));
        let (doc_bytes, gold_bytes) = (read(&dpath)?, read(&gpath)?);
        if checksum(&doc_bytes, &gold_bytes) != e.checksum {
            return Err(CorpusError::Checksum(e.doc_id.clone()));
        }
        let doc: Document = serde_json::from_slice(&doc_bytes).map_err(|err| malformed(&dpath, err))?;
        let gold: GoldFile = serde_json::from_slice(&gold_bytes).map_err(|err| malformed(&gpath, err))?;
        items.push(CorpusItem {
            doc,
            gold: gold.values,
            links: gold.links,
            value_absent: gold.value_absent,
        });
    }
    Ok(Corpus {
        name: manifest.name,
        split: manifest.split,
        schema,
        items,
        warnings: Vec::new(),
    })
}

/// `*.json` (or other extension) files of a directory, sorted by name.
pub(crate) fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, CorpusError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_error(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case(ext)))
        .collect();
    out.sort();
    Ok(out)
}

/// First existing directory among `root/<alias>/<sub>` for the split's
/// aliases.
pub(crate) fn split_dir(root: &Path, aliases: &[&str], subs: &[&str], dataset: DatasetName, split: Split) -> Result<PathBuf, CorpusError> {
    for a in aliases {
        for s in subs {
            let p = if s.is_empty() { root.join(a) } else { root.join(a).join(s) };
            if p.is_dir() {
                return Ok(p);
            }
        }
    }
    Err(CorpusError::NoSplit {
        dataset: dataset.to_string(),
        split: split.to_string(),
    })
}
