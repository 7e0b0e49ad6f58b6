//! SROIE in its common layout: `<split>/box/<id>.txt` with lines
//! `x1,y1,x2,y2,x3,y3,x4,y4,text` and `<split>/entities/<id>.txt` holding a
//! JSON object with company, date, address and total.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;

use super::{bundled_schema, files_with_ext, io_error, malformed, split_dir, Corpus, CorpusError, CorpusItem, DatasetName, Split};
use crate::model::{normalize_text, BoundingBox, Document, DocumentValues, FieldValue, LeafValue, Record};

struct BoxLine {
    corners: (f64, f64, f64, f64),
    text: String,
}

fn parse_box_line(line: &str) -> Result<Option<BoxLine>, String> {
    let line = line.trim_start_matches('\u{feff}').trim();
    if line.is_empty() {
        return Ok(None);
    }
    let parts: Vec<&str> = line.splitn(9, ',').collect();
    if parts.len() < 9 {
        return Err(format!("expected 8 coordinates and text in {line:?}"));
    }
    let mut c = [0.0; 8];
    for (slot, p) in c.iter_mut().zip(&parts) {
        *slot = p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))?;
    }
    let xs = [c[0], c[2], c[4], c[6]];
    let ys = [c[1], c[3], c[5], c[7]];
    let min = |v: [f64; 4]| v.into_iter().fold(f64::INFINITY, f64::min);
    let max = |v: [f64; 4]| v.into_iter().fold(f64::NEG_INFINITY, f64::max);
    Ok(Some(BoxLine {
        corners: (min(xs), min(ys), max(xs), max(ys)),
        text: parts[8].to_string(),
    }))
}

/// Splits each OCR line into words, giving each word the slice of the line
/// box proportional to its character offsets.
fn line_words(lines: &[BoxLine]) -> Vec<(String, BoundingBox, u32)> {
    let width = lines.iter().map(|l| l.corners.2).fold(0.0, f64::max);
    let height = lines.iter().map(|l| l.corners.3).fold(0.0, f64::max);
    let mut out = Vec::new();
    for l in lines {
        let (x0, y0, x1, y1) = l.corners;
        let n = l.text.chars().count().max(1) as f64;
        let mut offset = 0usize;
        for piece in l.text.split(char::is_whitespace) {
            let len = piece.chars().count();
            if !piece.is_empty() {
                let a = x0 + (x1 - x0) * offset as f64 / n;
                let b = x0 + (x1 - x0) * (offset + len) as f64 / n;
                out.push((piece.to_string(), BoundingBox::from_pixels(a, y0, b, y1, width, height), 0));
            }
            offset += len + 1;
        }
    }
    out
}

/// Token ids of the one place where `value`'s words occur as a contiguous
/// run of whole tokens, or `None` when there is no such place or several.
pub fn recover_support(doc: &Document, value: &str) -> Option<BTreeSet<usize>> {
    let needle: Vec<String> = normalize_text(value).split(' ').map(str::to_string).collect();
    if needle.iter().all(String::is_empty) {
        return None;
    }
    let hay: Vec<String> = doc.tokens.iter().map(|t| normalize_text(&t.text)).collect();
    let mut hits = (0..hay.len().saturating_sub(needle.len() - 1)).filter(|&i| hay[i..i + needle.len()] == needle[..]);
    let start = hits.next()?;
    if hits.next().is_some() {
        return None;
    }
    Some((start..start + needle.len()).collect())
}

/// Builds one item from the box file and entity file contents.
pub fn sroie_document(doc_id: &str, boxes: &str, entities: &str) -> Result<(CorpusItem, Vec<String>), String> {
    let mut lines = Vec::new();
    for (i, l) in boxes.lines().enumerate() {
        if let Some(b) = parse_box_line(l).map_err(|e| format!("line {}: {e}", i + 1))? {
            lines.push(b);
        }
    }
    let doc = Document::from_words(doc_id, line_words(&lines), "sroie").map_err(|e| e.to_string())?;
    let labels: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(entities.trim_start_matches('\u{feff}')).map_err(|e| format!("entities: {e}"))?;
    let schema = bundled_schema(DatasetName::Sroie);
    let mut warnings = Vec::new();
    let mut fields = Record::new();
    for (k, v) in &labels {
        let Some(text) = v.as_str().filter(|t| !t.trim().is_empty()) else { continue };
        if schema.root(k).is_none() {
            warnings.push(format!("{doc_id}: unknown label {k:?} routed to others"));
            continue;
        }
        let value = match recover_support(&doc, text) {
            Some(ids) => LeafValue::supported(text, ids),
            None => LeafValue::inferred(text),
        };
        fields.insert(k.clone(), FieldValue::Leaf(vec![value]));
    }
    Ok((CorpusItem::new(doc, DocumentValues::from_record(fields)), warnings))
}

/// Loads `root/<split>/{box,entities}/*.txt`, pairing files by stem.
pub fn load_sroie(root: &Path, split: Split) -> Result<Corpus, CorpusError> {
    let aliases: &[&str] = match split {
        Split::Train => &["train", "training"],
        Split::Validation => &[],
        Split::Test => &["test", "testing"],
    };
    let dir = split_dir(root, aliases, &[""], DatasetName::Sroie, split)?;
    let box_dir = dir.join("box");
    let ent_dir = dir.join("entities");
    let files = files_with_ext(&box_dir, "txt")?;
    let parsed: Vec<(CorpusItem, Vec<String>)> = files
        .par_iter()
        .map(|bpath| {
            let stem = bpath.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let epath = ent_dir.join(format!("{stem}.txt"));
            let boxes = fs::read_to_string(bpath).map_err(|e| io_error(bpath, e))?;
            let entities = fs::read_to_string(&epath).map_err(|e| io_error(&epath, e))?;
            sroie_document(&stem, &boxes, &entities).map_err(|e| malformed(bpath, e))
        })
        .collect::<Result<_, _>>()?;
    let mut items = Vec::with_capacity(parsed.len());
    let mut warnings = Vec::new();
    for (item, w) in parsed {
        items.push(item);
        warnings.extend(w);
    }
    for w in &warnings {
        warn!("{w}");
    }
    Ok(Corpus {
        name: DatasetName::Sroie,
        split,
        schema: bundled_schema(DatasetName::Sroie),
        items,
        warnings,
    })
}
