//! Extraction metrics: entity micro-F1, link F1, block F1 and counting
//! accuracy. Counts are pooled over documents before computing ratios.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    normalize_text, validate_values, DocumentSchema, DocumentValues, EntityPath, FieldValue, Record, SchemaNode,
};
use crate::segmentation::BlockSet;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{side} values of {doc_id} do not fit the schema: {detail}")]
    SchemaMismatch {
        doc_id: String,
        side: &'static str,
        detail: String,
    },
    #[error("block sets disagree on the document: {pred} vs {gold}")]
    DocumentMismatch { pred: String, gold: String },
    #[error("no cases")]
    NoCases,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

impl Counts {
    fn from_totals(tp: usize, predicted: usize, gold: usize) -> Self {
        Self {
            tp,
            fp: predicted - tp,
            fn_: gold - tp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl F1Score {
    /// Ratios with a zero denominator are 0.
    pub fn from_counts(c: Counts) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocScore {
    pub doc_id: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub f1: f64,
}

/// Pooled score plus per-document counts, ordered by doc id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    #[serde(flatten)]
    pub score: F1Score,
    pub per_doc: Vec<DocScore>,
}

impl MetricReport {
    fn pool(metric: &str, per_doc: BTreeMap<String, Counts>) -> Self {
        let mut total = Counts::default();
        let per_doc = per_doc
            .into_iter()
            .map(|(doc_id, c)| {
                total += c;
                DocScore {
                    doc_id,
                    tp: c.tp,
                    fp: c.fp,
                    fn_: c.fn_,
                    f1: F1Score::from_counts(c).f1,
                }
            })
            .collect();
        Self {
            metric: metric.to_string(),
            score: F1Score::from_counts(total),
            per_doc,
        }
    }
}

/// One scored value: leaf path, the indices of its enclosing group
/// instances, and the normalized text.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityMention {
    pub path: EntityPath,
    pub instance: Vec<usize>,
    pub value: String,
}

/// Mentions in schema order; values outside the schema are ignored.
pub fn flatten_mentions(values: &DocumentValues, schema: &DocumentSchema) -> Vec<EntityMention> {
    fn walk(rec: &Record, nodes: &[SchemaNode], path: &[String], inst: &[usize], out: &mut Vec<EntityMention>) {
        for node in nodes {
            let Some(fv) = rec.get(&node.name) else { continue };
            let mut p = path.to_vec();
            p.push(node.name.clone());
            match fv {
                FieldValue::Leaf(vals) if node.is_leaf() => {
                    let ep = EntityPath::new(p.clone()).expect("schema names are valid");
                    out.extend(vals.iter().map(|v| EntityMention {
                        path: ep.clone(),
                        instance: inst.to_vec(),
                        value: normalize_text(&v.text),
                    }))
                }
                FieldValue::Group(recs) if !node.is_leaf() => {
                    for (i, r) in recs.iter().enumerate() {
                        let mut ii = inst.to_vec();
                        ii.push(i);
                        walk(r, &node.children, &p, &ii, out);
                    }
                }
                _ => {}
            }
        }
    }
    let mut out = Vec::new();
    walk(&values.fields, &schema.roots, &[], &[], &mut out);
    out
}

fn multiset_overlap<T: Ord>(a: impl IntoIterator<Item = T>, b: impl IntoIterator<Item = T>) -> usize {
    let mut counts: BTreeMap<T, usize> = BTreeMap::new();
    for x in a {
        *counts.entry(x).or_default() += 1;
    }
    let mut tp = 0;
    for y in b {
        if let Some(n) = counts.get_mut(&y).filter(|n| **n > 0) {
            *n -= 1;
            tp += 1;
        }
    }
    tp
}

/// Best total of a weight matrix under one-to-one assignment.
pub fn max_assignment(weights: &[Vec<usize>]) -> usize {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return 0;
    }
    let m = if rows <= cols {
        Matrix::from_rows(weights.iter().map(|r| r.iter().map(|&w| w as i64).collect::<Vec<_>>()))
    } else {
        Matrix::from_rows((0..cols).map(|j| weights.iter().map(|r| r[j] as i64).collect::<Vec<_>>()))
    }
    .expect("rectangular weights");
    kuhn_munkres(&m).0 as usize
}

fn leaf_count(rec: &Record, nodes: &[SchemaNode]) -> usize {
    nodes
        .iter()
        .filter_map(|n| rec.get(&n.name).map(|fv| (n, fv)))
        .map(|(n, fv)| match fv {
            FieldValue::Leaf(v) if n.is_leaf() => v.len(),
            FieldValue::Group(rs) if !n.is_leaf() => rs.iter().map(|r| leaf_count(r, &n.children)).sum(),
            _ => 0,
        })
        .sum()
}

/// True positives with group instances aligned to maximize matches.
fn record_tp(pred: &Record, gold: &Record, nodes: &[SchemaNode]) -> usize {
    nodes
        .iter()
        .map(|n| match (pred.get(&n.name), gold.get(&n.name)) {
            (Some(FieldValue::Leaf(p)), Some(FieldValue::Leaf(g))) if n.is_leaf() => multiset_overlap(
                p.iter().map(|v| normalize_text(&v.text)),
                g.iter().map(|v| normalize_text(&v.text)),
            ),
            (Some(FieldValue::Group(p)), Some(FieldValue::Group(g))) if !n.is_leaf() => {
                let w: Vec<Vec<usize>> = p
                    .iter()
                    .map(|pr| g.iter().map(|gr| record_tp(pr, gr, &n.children)).collect())
                    .collect();
                max_assignment(&w)
            }
            _ => 0,
        })
        .sum()
}

/// Entity counts for one document.
pub fn entity_counts(pred: &DocumentValues, gold: &DocumentValues, schema: &DocumentSchema) -> Counts {
    let tp = record_tp(&pred.fields, &gold.fields, &schema.roots);
    Counts::from_totals(tp, leaf_count(&pred.fields, &schema.roots), leaf_count(&gold.fields, &schema.roots))
}

fn check_valid(doc_id: &str, side: &'static str, v: &DocumentValues, schema: &DocumentSchema) -> Result<(), EvalError> {
    let report = validate_values(schema, v);
    if report.is_valid() {
        Ok(())
    } else {
        Err(EvalError::SchemaMismatch {
            doc_id: doc_id.to_string(),
            side,
            detail: report.violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "),
        })
    }
}

/// Entity micro-F1 over all documents in either map; a document missing on
/// one side counts as empty there.
pub fn entity_micro_f1(
    pred: &BTreeMap<String, DocumentValues>,
    gold: &BTreeMap<String, DocumentValues>,
    schema: &DocumentSchema,
) -> Result<MetricReport, EvalError> {
    let empty = DocumentValues::new();
    let ids: BTreeSet<&String> = pred.keys().chain(gold.keys()).collect();
    let mut per_doc = BTreeMap::new();
    for id in ids {
        let p = pred.get(id).unwrap_or(&empty);
        let g = gold.get(id).unwrap_or(&empty);
        check_valid(id, "predicted", p, schema)?;
        check_valid(id, "gold", g, schema)?;
        per_doc.insert(id.clone(), entity_counts(p, g, schema));
    }
    Ok(MetricReport::pool("ser", per_doc))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkPair {
    pub source: String,
    pub target: String,
    pub kind: String,
}

impl LinkPair {
    /// Normalized pair, or `None` if either span is blank.
    pub fn new(source: &str, target: &str, kind: &str) -> Option<Self> {
        let (source, target) = (normalize_text(source), normalize_text(target));
        (!source.is_empty() && !target.is_empty()).then(|| Self {
            source,
            target,
            kind: kind.to_string(),
        })
    }
}

/// Links encoded as values: every top-level group with exactly two leaf
/// children yields (first, second) pairs per instance, of the group's kind.
pub fn links_from_values(values: &DocumentValues, schema: &DocumentSchema) -> Vec<LinkPair> {
    let mut out = Vec::new();
    for node in &schema.roots {
        let [a, b] = node.children.as_slice() else { continue };
        if !(a.is_leaf() && b.is_leaf()) {
            continue;
        }
        let Some(FieldValue::Group(recs)) = values.fields.get(&node.name) else { continue };
        for r in recs {
            let texts = |name: &str| match r.get(name) {
                Some(FieldValue::Leaf(v)) => v.iter().map(|l| l.text.clone()).collect(),
                _ => Vec::new(),
            };
            for s in texts(&a.name) {
                for t in texts(&b.name) {
                    out.extend(LinkPair::new(&s, &t, &node.name));
                }
            }
        }
    }
    out
}

pub fn link_counts(pred: &[LinkPair], gold: &[LinkPair]) -> Counts {
    Counts::from_totals(multiset_overlap(pred.iter(), gold.iter()), pred.len(), gold.len())
}

pub fn linking_f1(
    pred: &BTreeMap<String, Vec<LinkPair>>,
    gold: &BTreeMap<String, Vec<LinkPair>>,
) -> MetricReport {
    let ids: BTreeSet<&String> = pred.keys().chain(gold.keys()).collect();
    let per_doc = ids
        .into_iter()
        .map(|id| {
            let p = pred.get(id).map(Vec::as_slice).unwrap_or_default();
            let g = gold.get(id).map(Vec::as_slice).unwrap_or_default();
            (id.clone(), link_counts(p, g))
        })
        .collect();
    MetricReport::pool("el", per_doc)
}

fn block_key(text: &str) -> Vec<String> {
    let mut words: Vec<String> = normalize_text(text).split(' ').filter(|w| !w.is_empty()).map(String::from).collect();
    words.sort();
    words
}

/// A predicted block matches a gold block with the same multiset of
/// normalized words.
pub fn block_counts(pred: &BlockSet, gold: &BlockSet) -> Result<Counts, EvalError> {
    if pred.doc_id != gold.doc_id {
        return Err(EvalError::DocumentMismatch {
            pred: pred.doc_id.clone(),
            gold: gold.doc_id.clone(),
        });
    }
    let tp = multiset_overlap(
        pred.blocks.iter().map(|b| block_key(&b.text)),
        gold.blocks.iter().map(|b| block_key(&b.text)),
    );
    Ok(Counts::from_totals(tp, pred.len(), gold.len()))
}

pub fn block_f1(pred: &BTreeMap<String, BlockSet>, gold: &BTreeMap<String, BlockSet>) -> Result<MetricReport, EvalError> {
    let ids: BTreeSet<&String> = pred.keys().chain(gold.keys()).collect();
    let mut per_doc = BTreeMap::new();
    for id in ids {
        let p = pred.get(id).cloned().unwrap_or_else(|| BlockSet::empty(id.as_str()));
        let g = gold.get(id).cloned().unwrap_or_else(|| BlockSet::empty(id.as_str()));
        per_doc.insert(id.clone(), block_counts(&p, &g)?);
    }
    Ok(MetricReport::pool("block", per_doc))
}

/// Fraction of (predicted, expected) pairs that agree.
pub fn counting_accuracy(cases: &[(i64, i64)]) -> Result<f64, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::NoCases);
    }
    Ok(cases.iter().filter(|(p, o)| p == o).count() as f64 / cases.len() as f64)
}

/// Plain-text table: one row per model tag, one column per metric.
pub fn render_table(rows: &[(String, Vec<MetricReport>)]) -> String {
    let metrics: Vec<String> = {
        let mut seen = Vec::new();
        for (_, reports) in rows {
            for r in reports {
                if !seen.contains(&r.metric) {
                    seen.push(r.metric.clone());
                }
            }
        }
        seen
    };
    let tag_w = rows.iter().map(|(t, _)| t.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = write!(out, "{:<tag_w$}", "model");
    for m in &metrics {
        let _ = write!(out, " | {:>10}", format!("{m} F1"));
    }
    out.push('\n');
    out.push_str(&"-".repeat(tag_w + metrics.len() * 13));
    out.push('\n');
    for (tag, reports) in rows {
        let _ = write!(out, "{tag:<tag_w$}");
        for m in &metrics {
            match reports.iter().find(|r| &r.metric == m) {
                Some(r) => {
                    let _ = write!(out, " | {:>10.2}", r.score.f1 * 100.0);
                }
                None => {
                    let _ = write!(out, " | {:>10}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}
