//! Semantic atoms, linkages and blocks.
//!
//! A block is a segment that can be parsed without outside context: parsing
//! it alone, parsing it within the whole document, and restricting the gold
//! values to it all agree. [`check_block_condition`] tests exactly that, and
//! [`oracle_blocks_from_labels`] builds the reference blocks used for
//! block-level scoring.

mod atoms;
mod oracle;

use std::collections::{BTreeMap, BTreeSet};

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    first_difference, restrict_values, Document, DocumentSchema, DocumentValues, FieldValue, LeafValue,
    ModelError, Record, SchemaNode, Segment,
};

pub use atoms::{group_atoms, GeometryParams, Layout, SemanticAtom};
pub use oracle::oracle_blocks_from_labels;

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("linkage {from} -> {to} references an unknown atom")]
    DanglingLinkage { from: usize, to: usize },
    #[error("linkage {0} -> {0} links an atom to itself")]
    SelfLinkage(usize),
    #[error("unsupported gold: {0} has no supporting tokens")]
    UnsupportedGold(String),
    #[error("block set of {found} used with document {expected}")]
    DocumentMismatch { expected: String, found: String },
    #[error("token {0} appears in more than one block")]
    Overlap(usize),
    #[error("annotator failed: {0}")]
    Annotator(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    AttributeValue,
    Hierarchy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linkage {
    pub from_atom: usize,
    pub to_atom: usize,
    pub kind: LinkKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticBlock {
    pub block_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub atom_ids: Vec<usize>,
    /// Sorted, i.e. in reading order.
    pub token_ids: Vec<usize>,
    #[serde(default)]
    pub reason: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partial_values: Option<DocumentValues>,
    /// Text grounding no schema entity.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub others: bool,
}

impl SemanticBlock {
    /// Block over `token_ids` with text taken from the document.
    pub fn from_tokens<I: IntoIterator<Item = usize>>(doc: &Document, token_ids: I, reason: impl Into<String>) -> Self {
        let ids: BTreeSet<usize> = token_ids.into_iter().collect();
        let token_ids: Vec<usize> = ids.into_iter().collect();
        Self {
            block_id: String::new(),
            atom_ids: Vec::new(),
            text: doc.text_of(token_ids.iter().copied()),
            token_ids,
            reason: reason.into(),
            partial_values: None,
            others: false,
        }
    }

    pub fn segment(&self, doc_id: &str) -> Segment {
        Segment {
            doc_id: doc_id.to_string(),
            token_ids: self.token_ids.iter().copied().collect(),
        }
    }

    fn first_token(&self) -> usize {
        self.token_ids.first().copied().unwrap_or(usize::MAX)
    }
}

/// Blocks of one document ordered by first token, numbered `block_1`, ...
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSet {
    pub doc_id: String,
    pub blocks: Vec<SemanticBlock>,
}

impl BlockSet {
    pub fn new(doc_id: impl Into<String>, mut blocks: Vec<SemanticBlock>) -> Self {
        blocks.retain(|b| !b.token_ids.is_empty());
        blocks.sort_by_key(SemanticBlock::first_token);
        for (i, b) in blocks.iter_mut().enumerate() {
            b.block_id = format!("block_{}", i + 1);
        }
        Self {
            doc_id: doc_id.into(),
            blocks,
        }
    }

    pub fn empty(doc_id: impl Into<String>) -> Self {
        Self::new(doc_id, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block(&self, block_id: &str) -> Option<&SemanticBlock> {
        self.blocks.iter().find(|b| b.block_id == block_id)
    }

    /// Checks that blocks are pairwise disjoint; with `require_cover`, also
    /// that they cover every document token.
    pub fn check_partition(&self, doc: &Document, require_cover: bool) -> Result<(), SegmentationError> {
        if self.doc_id != doc.doc_id {
            return Err(SegmentationError::DocumentMismatch {
                expected: doc.doc_id.clone(),
                found: self.doc_id.clone(),
            });
        }
        let mut seen = BTreeSet::new();
        for b in &self.blocks {
            for &t in &b.token_ids {
                if t >= doc.len() {
                    return Err(ModelError::ForeignSegment(format!("token {t} in {}", b.block_id)).into());
                }
                if !seen.insert(t) {
                    return Err(SegmentationError::Overlap(t));
                }
            }
        }
        if require_cover && seen.len() != doc.len() {
            let missing = (0..doc.len()).find(|t| !seen.contains(t)).unwrap_or_default();
            return Err(ModelError::ForeignSegment(format!("token {missing} is in no block")).into());
        }
        Ok(())
    }
}

/// Blocks are the connected components of the linkage graph over atoms;
/// atoms without links become singleton blocks.
pub fn assemble_blocks(
    doc: &Document,
    atoms: &[SemanticAtom],
    linkages: &[Linkage],
) -> Result<BlockSet, SegmentationError> {
    let index: BTreeMap<usize, usize> = atoms.iter().enumerate().map(|(i, a)| (a.atom_id, i)).collect();
    let mut uf = UnionFind::<usize>::new(atoms.len());
    for l in linkages {
        if l.from_atom == l.to_atom {
            return Err(SegmentationError::SelfLinkage(l.from_atom));
        }
        match (index.get(&l.from_atom), index.get(&l.to_atom)) {
            (Some(&a), Some(&b)) => {
                uf.union(a, b);
            }
            _ => {
                return Err(SegmentationError::DanglingLinkage {
                    from: l.from_atom,
                    to: l.to_atom,
                })
            }
        }
    }
    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, root) in uf.into_labeling().into_iter().enumerate() {
        components.entry(root).or_default().push(i);
    }
    let blocks = components
        .into_values()
        .map(|members| {
            let mut atom_ids: Vec<usize> = members.iter().map(|&i| atoms[i].atom_id).collect();
            atom_ids.sort_unstable();
            let tokens = members.iter().flat_map(|&i| atoms[i].token_ids.iter().copied());
            let mut block = SemanticBlock::from_tokens(doc, tokens, "");
            block.atom_ids = atom_ids;
            block
        })
        .collect();
    Ok(BlockSet::new(doc.doc_id.clone(), blocks))
}

/// The annotation operation: parse `target` against the schema using only
/// the words of `context`.
pub trait Annotator: Sync {
    fn annotate(&self, target: &Segment, context: &Segment) -> Result<DocumentValues, SegmentationError>;
}

/// Annotator backed by gold labels.
///
/// Values inside a repeatable group instance are attributable only when the
/// context holds every supporting token of that instance; otherwise the
/// target cannot tell which instance (say, which line item) a fragment
/// belongs to, and the fragment parses as blank. Non-repeatable groups and
/// top-level leaves need no outside context.
#[derive(Debug, Clone, Copy)]
pub struct OracleAnnotator<'a> {
    pub doc: &'a Document,
    pub gold: &'a DocumentValues,
    pub schema: &'a DocumentSchema,
}

impl<'a> OracleAnnotator<'a> {
    pub fn new(doc: &'a Document, gold: &'a DocumentValues, schema: &'a DocumentSchema) -> Self {
        Self { doc, gold, schema }
    }
}

fn record_support(rec: &Record) -> BTreeSet<usize> {
    DocumentValues { fields: rec.clone() }.support()
}

fn resolvable(rec: &Record, nodes: &[SchemaNode], context: &Segment) -> Record {
    let mut out = Record::new();
    for (k, fv) in rec {
        let node = nodes.iter().find(|n| &n.name == k);
        match (fv, node) {
            (FieldValue::Group(recs), Some(n)) => {
                let kept = recs
                    .iter()
                    .filter(|r| !n.repeatable || context.contains_all(&record_support(r)))
                    .map(|r| resolvable(r, &n.children, context))
                    .collect();
                out.insert(k.clone(), FieldValue::Group(kept));
            }
            _ => {
                out.insert(k.clone(), fv.clone());
            }
        }
    }
    out
}

impl Annotator for OracleAnnotator<'_> {
    fn annotate(&self, target: &Segment, context: &Segment) -> Result<DocumentValues, SegmentationError> {
        self.doc.check_segment(context)?;
        let visible = DocumentValues {
            fields: resolvable(&self.gold.fields, &self.schema.roots, context),
        };
        Ok(restrict_values(self.doc, &visible, target)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockWitness {
    /// Which pair of parses disagreed, e.g. `v(B,B) vs v(B,D)`.
    pub comparison: String,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub is_block: bool,
    pub witness: Option<BlockWitness>,
}

/// A segment is a semantic block iff parsing it alone, parsing it in the
/// whole document, and restricting the gold to it agree (after text
/// normalization).
pub fn check_block_condition(
    block: &SemanticBlock,
    doc: &Document,
    gold: &DocumentValues,
    annotator: &dyn Annotator,
) -> Result<BlockCheck, SegmentationError> {
    let seg = block.segment(&doc.doc_id);
    let whole = doc.whole_segment();
    let alone = annotator.annotate(&seg, &seg)?;
    let in_doc = annotator.annotate(&seg, &whole)?;
    let truth = restrict_values(doc, gold, &seg)?;
    for (comparison, a, b) in [("v(B,B) vs v(B,D)", &alone, &in_doc), ("v(B,D) vs V(B)", &in_doc, &truth)] {
        if let Some(path) = first_difference(a, b) {
            return Ok(BlockCheck {
                is_block: false,
                witness: Some(BlockWitness {
                    comparison: comparison.to_string(),
                    path: if path.is_empty() { "<root>".into() } else { path },
                }),
            });
        }
    }
    Ok(BlockCheck {
        is_block: true,
        witness: None,
    })
}

/// Leaf values with token support, with their dotted paths.
pub(crate) fn supported_leaves(values: &DocumentValues) -> Vec<(String, &LeafValue)> {
    fn walk<'a>(rec: &'a Record, prefix: &str, out: &mut Vec<(String, &'a LeafValue)>) {
        for (k, fv) in rec {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match fv {
                FieldValue::Leaf(vals) => out.extend(vals.iter().map(|v| (path.clone(), v))),
                FieldValue::Group(recs) => recs.iter().for_each(|r| walk(r, &path, out)),
            }
        }
    }
    let mut out = Vec::new();
    walk(&values.fields, "", &mut out);
    out
}

#[cfg(test)]
pub(crate) mod tests;
