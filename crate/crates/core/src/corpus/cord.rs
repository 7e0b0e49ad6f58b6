//! Per-receipt CORD JSON: `valid_line` entries of words with quads, a
//! `category` such as `menu.sub_nm`, and `group_id`/`sub_group_id`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::Deserialize;

use super::{bundled_schema, files_with_ext, io_error, malformed, split_dir, Corpus, CorpusError, CorpusItem, DatasetName, Split};
use crate::model::{retain_valid, BoundingBox, Document, DocumentSchema, DocumentValues, FieldValue, LeafValue, Record};

#[derive(Debug, Deserialize)]
struct Quad {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    x3: f64,
    y3: f64,
    x4: f64,
    y4: f64,
}

impl Quad {
    fn corners(&self) -> (f64, f64, f64, f64) {
        let xs = [self.x1, self.x2, self.x3, self.x4];
        let ys = [self.y1, self.y2, self.y3, self.y4];
        let min = |v: [f64; 4]| v.into_iter().fold(f64::INFINITY, f64::min);
        let max = |v: [f64; 4]| v.into_iter().fold(f64::NEG_INFINITY, f64::max);
        (min(xs), min(ys), max(xs), max(ys))
    }
}

#[derive(Debug, Deserialize)]
struct Word {
    quad: Quad,
    #[serde(default)]
    is_key: i64,
    #[serde(default)]
    row_id: Option<i64>,
    text: String,
}

#[derive(Debug, Deserialize)]
struct Line {
    words: Vec<Word>,
    category: String,
    #[serde(default)]
    group_id: i64,
    #[serde(default)]
    sub_group_id: i64,
}

#[derive(Debug, Default, Deserialize)]
struct ImageSize {
    width: f64,
    height: f64,
}

#[derive(Debug, Default, Deserialize)]
struct Meta {
    #[serde(default)]
    image_size: Option<ImageSize>,
}

#[derive(Debug, Deserialize)]
struct CordFile {
    valid_line: Vec<Line>,
    #[serde(default)]
    meta: Meta,
}

/// Where a CORD category lands in the bundled schema.
enum Target {
    /// `(group, leaf)` of a top-level group.
    Top(&'static str, String),
    /// A leaf of `menu.sub`.
    Sub(String),
}

fn route(schema: &DocumentSchema, category: &str) -> Option<Target> {
    let (head, leaf) = category.split_once('.')?;
    let group = match head {
        "menu" => "menu",
        "void_menu" => "void_menu",
        "sub_total" | "subtotal" => "subtotal",
        "total" => "total",
        _ => return None,
    };
    let node = schema.root(group)?;
    if group == "menu" {
        if let Some(sub_leaf) = leaf.strip_prefix("sub_") {
            let sub = node.child("sub")?;
            return sub.child(sub_leaf).filter(|n| n.is_leaf()).map(|_| Target::Sub(sub_leaf.to_string()));
        }
    }
    node.child(leaf).filter(|n| n.is_leaf()).map(|_| Target::Top(group, leaf.to_string()))
}

#[derive(Default)]
struct Span {
    text: Vec<String>,
    all: Vec<String>,
    ids: Vec<usize>,
}

impl Span {
    fn value(&self) -> LeafValue {
        let words = if self.text.is_empty() { &self.all } else { &self.text };
        LeafValue::supported(words.join(" "), self.ids.iter().copied())
    }
}

fn push_leaf(rec: &mut Record, leaf: &str, v: LeafValue) {
    match rec.entry(leaf.to_string()).or_insert_with(|| FieldValue::Leaf(Vec::new())) {
        FieldValue::Leaf(vals) => vals.push(v),
        FieldValue::Group(_) => unreachable!("routed leaves are schema leaves"),
    }
}

/// Parses one CORD file; returns the item and any warnings.
pub fn cord_document(doc_id: &str, raw: &str) -> Result<(CorpusItem, Vec<String>), String> {
    let file: CordFile = serde_json::from_str(raw).map_err(|e| e.to_string())?;
    let schema = bundled_schema(DatasetName::Cord);
    let mut warnings = Vec::new();
    let (mut width, mut height) = file
        .meta
        .image_size
        .as_ref()
        .map(|s| (s.width, s.height))
        .unwrap_or((0.0, 0.0));
    if width <= 0.0 || height <= 0.0 {
        for w in file.valid_line.iter().flat_map(|l| &l.words) {
            let (_, _, x1, y1) = w.quad.corners();
            width = width.max(x1);
            height = height.max(y1);
        }
    }

    // (row, x0, line, word) in reading order.
    let mut order = Vec::new();
    for (li, line) in file.valid_line.iter().enumerate() {
        for (wi, w) in line.words.iter().enumerate() {
            if w.text.trim().is_empty() {
                continue;
            }
            let (x0, y0, _, y1) = w.quad.corners();
            let row = w.row_id.map(|r| r as f64).unwrap_or((y0 + y1) / 2.0);
            order.push((row, x0, li, wi));
        }
    }
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then((a.2, a.3).cmp(&(b.2, b.3))));

    let mut words = Vec::with_capacity(order.len());
    let mut spans: BTreeMap<(usize, i64, i64), Span> = BTreeMap::new();
    let mut first_line: BTreeMap<(String, i64, i64), usize> = BTreeMap::new();
    for (id, &(_, _, li, wi)) in order.iter().enumerate() {
        let line = &file.valid_line[li];
        let w = &line.words[wi];
        let (x0, y0, x1, y1) = w.quad.corners();
        words.push((w.text.trim().to_string(), BoundingBox::from_pixels(x0, y0, x1, y1, width, height), 0));
        // Lines sharing category and group ids merge into one value.
        let key = (line.category.clone(), line.group_id, line.sub_group_id);
        let anchor = *first_line.entry(key).or_insert(li);
        let span = spans.entry((anchor, line.group_id, line.sub_group_id)).or_default();
        let text = w.text.trim().to_string();
        if w.is_key == 0 {
            span.text.push(text.clone());
        }
        span.all.push(text);
        span.ids.push(id);
    }

    let mut menus: BTreeMap<(&str, i64), Record> = BTreeMap::new();
    let mut subs: BTreeMap<(i64, i64), Record> = BTreeMap::new();
    let mut singles: BTreeMap<&str, Record> = BTreeMap::new();
    for ((li, group_id, sub_group_id), span) in &spans {
        let category = &file.valid_line[*li].category;
        match route(&schema, category) {
            Some(Target::Top(group @ ("menu" | "void_menu"), leaf)) => {
                push_leaf(menus.entry((group, *group_id)).or_default(), &leaf, span.value());
            }
            Some(Target::Top(group, leaf)) => push_leaf(singles.entry(group).or_default(), &leaf, span.value()),
            Some(Target::Sub(leaf)) => push_leaf(subs.entry((*group_id, *sub_group_id)).or_default(), &leaf, span.value()),
            None => warnings.push(format!("{doc_id}: unknown label {category:?} routed to others")),
        }
    }
    for ((group_id, _), rec) in subs {
        let menu = menus.entry(("menu", group_id)).or_default();
        match menu.entry("sub".into()).or_insert_with(|| FieldValue::Group(Vec::new())) {
            FieldValue::Group(recs) => recs.push(rec),
            FieldValue::Leaf(_) => unreachable!("sub is a group"),
        }
    }

    let mut fields = Record::new();
    for ((group, _), rec) in menus {
        match fields.entry(group.to_string()).or_insert_with(|| FieldValue::Group(Vec::new())) {
            FieldValue::Group(recs) => recs.push(rec),
            FieldValue::Leaf(_) => unreachable!("menu groups are groups"),
        }
    }
    for (group, rec) in singles {
        fields.insert(group.to_string(), FieldValue::Group(vec![rec]));
    }

    let doc = Document::from_words(doc_id, words, "cord").map_err(|e| e.to_string())?;
    let (gold, report) = retain_valid(&schema, &DocumentValues::from_record(fields));
    warnings.extend(report.violations.iter().map(|v| format!("{doc_id}: dropped {v}")));
    Ok((CorpusItem::new(doc, gold), warnings))
}

/// Loads `root/<split>/json/*.json` (or `root/<split>/*.json`).
pub fn load_cord(root: &Path, split: Split) -> Result<Corpus, CorpusError> {
    let aliases: &[&str] = match split {
        Split::Train => &["train"],
        Split::Validation => &["dev", "valid", "validation"],
        Split::Test => &["test"],
    };
    let dir = split_dir(root, aliases, &["json", ""], DatasetName::Cord, split)?;
    let files = files_with_ext(&dir, "json")?;
    let parsed: Vec<(CorpusItem, Vec<String>)> = files
        .par_iter()
        .map(|path| {
            let raw = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            cord_document(&id, &raw).map_err(|e| malformed(path, e))
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
        name: DatasetName::Cord,
        split,
        schema: bundled_schema(DatasetName::Cord),
        items,
        warnings,
    })
}
