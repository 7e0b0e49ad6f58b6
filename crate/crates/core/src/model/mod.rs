//! Documents, segments, schemas and entity values.
//!
//! A [`Document`] is the OCR output of one page set: an ordered list of
//! tokens with normalized boxes. A [`Segment`] is any subset of its tokens;
//! the whole document is itself a segment. [`DocumentValues`] instantiate a
//! [`DocumentSchema`] for a document or a segment of it.

mod schema;
mod text;
mod values;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use schema::{DocumentSchema, SchemaNode};
pub use text::normalize_text;
pub use values::{
    first_difference, merge_values, restrict_values, retain_valid, validate_values, DocumentValues,
    FieldValue, LeafValue, MergeConflict, MergeOutcome, Record, ValidationReport, Violation,
    ViolationKind,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid bounding box [{x0}, {y0}, {x1}, {y1}]")]
    InvalidBox { x0: f64, y0: f64, x1: f64, y1: f64 },
    #[error("document {doc_id}: {reason}")]
    InvalidDocument { doc_id: String, reason: String },
    #[error("foreign segment: {0}")]
    ForeignSegment(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("malformed values at {path}: {reason}")]
    MalformedValues { path: String, reason: String },
    #[error("invalid entity path {0:?}")]
    InvalidPath(String),
}

/// Axis-aligned box in normalized page coordinates, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, ModelError> {
        let b = Self { x0, y0, x1, y1 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(ModelError::InvalidBox { x0, y0, x1, y1 })
        }
    }

    /// Normalizes a pixel-space box by the page size, clamping into `[0, 1]`
    /// and reordering corners when needed.
    pub fn from_pixels(x0: f64, y0: f64, x1: f64, y1: f64, width: f64, height: f64) -> Self {
        let w = if width > 0.0 { width } else { 1.0 };
        let h = if height > 0.0 { height } else { 1.0 };
        let nx = |v: f64| (v / w).clamp(0.0, 1.0);
        let ny = |v: f64| (v / h).clamp(0.0, 1.0);
        let (ax, bx) = (nx(x0), nx(x1));
        let (ay, by) = (ny(y0), ny(y1));
        Self {
            x0: ax.min(bx),
            y0: ay.min(by),
            x1: ax.max(bx),
            y1: ay.max(by),
        }
    }

    pub fn is_valid(&self) -> bool {
        let coords = [self.x0, self.y0, self.x1, self.y1];
        coords.iter().all(|c| c.is_finite() && (0.0..=1.0).contains(c))
            && self.x0 <= self.x1
            && self.y0 <= self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    /// Integer per-mille coordinates `[x0, y0, x1, y1]`, used in prompts.
    pub fn per_mille(&self) -> [u32; 4] {
        let q = |v: f64| (v * 1000.0).round() as u32;
        [q(self.x0), q(self.y0), q(self.x1), q(self.y1)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub token_id: usize,
    pub text: String,
    pub bbox: BoundingBox,
    #[serde(default)]
    pub page_index: u32,
}

/// OCR tokens of one document in reading order. Token ids are dense `0..n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DocumentRepr")]
pub struct Document {
    pub doc_id: String,
    pub tokens: Vec<Token>,
    pub source_tag: String,
}

#[derive(Deserialize)]
struct DocumentRepr {
    doc_id: String,
    tokens: Vec<Token>,
    #[serde(default = "synthetic_tag")]
    source_tag: String,
}

fn synthetic_tag() -> String {
    "synthetic".to_string()
}

impl TryFrom<DocumentRepr> for Document {
    type Error = ModelError;

    fn try_from(r: DocumentRepr) -> Result<Self, Self::Error> {
        Document::new(r.doc_id, r.tokens, r.source_tag)
    }
}

impl Document {
    pub fn new(
        doc_id: impl Into<String>,
        tokens: Vec<Token>,
        source_tag: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let doc_id = doc_id.into();
        let invalid = |reason: String| ModelError::InvalidDocument {
            doc_id: doc_id.clone(),
            reason,
        };
        for (i, t) in tokens.iter().enumerate() {
            if t.token_id != i {
                return Err(invalid(format!(
                    "token ids must be dense, found {} at position {i}",
                    t.token_id
                )));
            }
            if t.text.trim().is_empty() {
                return Err(invalid(format!("token {i} has empty text")));
            }
            if !t.bbox.is_valid() {
                return Err(invalid(format!("token {i} has an invalid box")));
            }
        }
        Ok(Self {
            doc_id,
            tokens,
            source_tag: source_tag.into(),
        })
    }

    /// Builds a document from `(text, bbox, page)` triples, assigning ids in
    /// order. Tokens whose text is blank are skipped.
    pub fn from_words<I>(doc_id: impl Into<String>, words: I, source_tag: &str) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = (String, BoundingBox, u32)>,
    {
        let tokens = words
            .into_iter()
            .filter(|(text, _, _)| !text.trim().is_empty())
            .enumerate()
            .map(|(token_id, (text, bbox, page_index))| Token {
                token_id,
                text,
                bbox,
                page_index,
            })
            .collect();
        Document::new(doc_id, tokens, source_tag)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&Token> {
        self.tokens.get(id)
    }

    /// All token texts joined by single spaces, in reading order.
    pub fn text(&self) -> String {
        self.text_of(0..self.tokens.len())
    }

    pub fn text_of<I: IntoIterator<Item = usize>>(&self, ids: I) -> String {
        ids.into_iter()
            .filter_map(|i| self.tokens.get(i))
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn whole_segment(&self) -> Segment {
        Segment {
            doc_id: self.doc_id.clone(),
            token_ids: (0..self.tokens.len()).collect(),
        }
    }

    pub fn segment<I: IntoIterator<Item = usize>>(&self, ids: I) -> Segment {
        Segment {
            doc_id: self.doc_id.clone(),
            token_ids: ids.into_iter().collect(),
        }
    }

    /// Checks that `segment` refers to this document and only to existing tokens.
    pub fn check_segment(&self, segment: &Segment) -> Result<(), ModelError> {
        if segment.doc_id != self.doc_id {
            return Err(ModelError::ForeignSegment(format!(
                "segment of {} used with document {}",
                segment.doc_id, self.doc_id
            )));
        }
        if let Some(bad) = segment.token_ids.iter().find(|&&i| i >= self.tokens.len()) {
            return Err(ModelError::ForeignSegment(format!(
                "token {bad} does not exist in {}",
                self.doc_id
            )));
        }
        Ok(())
    }

    pub fn is_whole(&self, segment: &Segment) -> bool {
        segment.doc_id == self.doc_id && segment.token_ids.len() == self.tokens.len()
    }
}

/// A set of tokens of one document.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub doc_id: String,
    pub token_ids: BTreeSet<usize>,
}

impl Segment {
    pub fn contains_all(&self, ids: &BTreeSet<usize>) -> bool {
        ids.is_subset(&self.token_ids)
    }
}

/// Dotted address of a schema node, e.g. `menu.sub.nm`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct EntityPath(Vec<String>);

impl EntityPath {
    pub fn new<S: Into<String>, I: IntoIterator<Item = S>>(parts: I) -> Result<Self, ModelError> {
        let parts: Vec<String> = parts.into_iter().map(Into::into).collect();
        if parts.is_empty() || parts.iter().any(|p| p.is_empty() || p.contains('.')) {
            return Err(ModelError::InvalidPath(parts.join(".")));
        }
        Ok(Self(parts))
    }

    pub fn parse(dotted: &str) -> Result<Self, ModelError> {
        Self::new(dotted.split('.'))
    }

    pub fn segments(&self) -> &[String] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn child(&self, name: &str) -> EntityPath {
        let mut parts = self.0.clone();
        parts.push(name.to_string());
        EntityPath(parts)
    }

    pub fn leaf_name(&self) -> &str {
        self.0.last().map(String::as_str).unwrap_or_default()
    }
}

impl fmt::Display for EntityPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join("."))
    }
}

impl From<EntityPath> for String {
    fn from(p: EntityPath) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for EntityPath {
    type Error = ModelError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        EntityPath::parse(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb() -> BoundingBox {
        BoundingBox::new(0.1, 0.1, 0.2, 0.15).unwrap()
    }

    #[test]
    fn box_rejects_inverted_and_out_of_range() {
        assert!(BoundingBox::new(0.5, 0.0, 0.4, 0.1).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.2, 0.1).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn pixel_boxes_are_normalized_and_clamped() {
        let b = BoundingBox::from_pixels(120.0, 50.0, 20.0, 1050.0, 200.0, 1000.0);
        assert_eq!(b, BoundingBox { x0: 0.1, y0: 0.05, x1: 0.6, y1: 1.0 });
        assert_eq!(b.per_mille(), [100, 50, 600, 1000]);
    }

    #[test]
    fn document_requires_dense_ids_and_text() {
        let t = |id, text: &str| Token { token_id: id, text: text.into(), bbox: bb(), page_index: 0 };
        assert!(Document::new("d", vec![t(0, "a"), t(1, "b")], "synthetic").is_ok());
        assert!(Document::new("d", vec![t(0, "a"), t(2, "b")], "synthetic").is_err());
        assert!(Document::new("d", vec![t(0, "  ")], "synthetic").is_err());
        let json = r#"{"doc_id":"d","tokens":[{"token_id":1,"text":"x","bbox":{"x0":0,"y0":0,"x1":0,"y1":0}}]}"#;
        assert!(serde_json::from_str::<Document>(json).is_err());
    }

    #[test]
    fn segments_are_checked_against_their_document() {
        let doc = Document::from_words("d", vec![("a".to_string(), bb(), 0)], "synthetic").unwrap();
        assert!(doc.check_segment(&doc.whole_segment()).is_ok());
        assert!(doc.check_segment(&doc.segment([3])).is_err());
        let mut other = doc.whole_segment();
        other.doc_id = "e".into();
        assert!(doc.check_segment(&other).is_err());
    }

    #[test]
    fn entity_path_round_trips_through_strings() {
        let p = EntityPath::parse("menu.sub.nm").unwrap();
        assert_eq!(p.depth(), 3);
        assert_eq!(p.to_string(), "menu.sub.nm");
        assert!(EntityPath::parse("menu..nm").is_err());
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<EntityPath>(&json).unwrap(), p);
    }
}
