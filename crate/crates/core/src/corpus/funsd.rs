//! FUNSD form annotations: `form` entities with words, a label and
//! `linking` id pairs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::Deserialize;

use super::{bundled_schema, files_with_ext, io_error, malformed, split_dir, Corpus, CorpusError, CorpusItem, DatasetName, Split};
use crate::evaluation::LinkPair;
use crate::model::{BoundingBox, Document, DocumentValues, FieldValue, LeafValue, Record};

#[derive(Debug, Deserialize)]
struct FunsdWord {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    text: String,
}

#[derive(Debug, Deserialize)]
struct Entity {
    id: i64,
    #[serde(default)]
    label: String,
    #[serde(default)]
    words: Vec<FunsdWord>,
    #[serde(default)]
    linking: Vec<Vec<i64>>,
}

#[derive(Debug, Deserialize)]
struct FunsdFile {
    form: Vec<Entity>,
}

/// Link kind and its (source, target) leaf names for a pair of labels,
/// with `true` when the pair must be flipped into canonical direction.
fn kind_of(a: &str, b: &str) -> (&'static str, [&'static str; 2], bool) {
    match (a, b) {
        ("question", "answer") => ("question_answer", ["question", "answer"], false),
        ("answer", "question") => ("question_answer", ["question", "answer"], true),
        ("header", "question") => ("header_question", ["header", "question"], false),
        ("question", "header") => ("header_question", ["header", "question"], true),
        _ => ("other_link", ["source", "target"], false),
    }
}

/// Parses one annotation file. Tokens follow entity order, then word order.
pub fn funsd_document(doc_id: &str, raw: &str) -> Result<(CorpusItem, Vec<String>), String> {
    let file: FunsdFile = serde_json::from_str(raw).map_err(|e| e.to_string())?;
    let mut warnings = Vec::new();
    let all_words = file.form.iter().flat_map(|e| &e.words);
    let width = all_words.clone().map(|w| w.bbox[2]).fold(0.0, f64::max);
    let height = all_words.map(|w| w.bbox[3]).fold(0.0, f64::max);

    let mut words = Vec::new();
    let mut spans: BTreeMap<i64, (usize, String, BTreeSet<usize>, String)> = BTreeMap::new();
    for (pos, e) in file.form.iter().enumerate() {
        let mut ids = BTreeSet::new();
        let mut text = Vec::new();
        for w in &e.words {
            let t = w.text.trim();
            if t.is_empty() {
                continue;
            }
            let [x0, y0, x1, y1] = w.bbox;
            ids.insert(words.len());
            text.push(t.to_string());
            words.push((t.to_string(), BoundingBox::from_pixels(x0, y0, x1, y1, width, height), 0));
        }
        if spans.insert(e.id, (pos, e.label.to_lowercase(), ids, text.join(" "))).is_some() {
            warnings.push(format!("{doc_id}: duplicate entity id {}", e.id));
        }
    }

    let mut pairs = BTreeSet::new();
    for e in &file.form {
        for l in &e.linking {
            let [a, b] = l.as_slice() else {
                warnings.push(format!("{doc_id}: entity {} has a malformed link {l:?}", e.id));
                continue;
            };
            if !(spans.contains_key(a) && spans.contains_key(b)) {
                warnings.push(format!("{doc_id}: dropped dangling link {a}->{b}"));
                continue;
            }
            pairs.insert((*a, *b));
        }
    }

    let mut links = Vec::new();
    let mut groups: BTreeMap<&str, Vec<(usize, Record)>> = BTreeMap::new();
    for (a, b) in pairs {
        let (sa, sb) = (&spans[&a], &spans[&b]);
        let (kind, leaves, flip) = kind_of(&sa.1, &sb.1);
        let (src, tgt) = if flip { (sb, sa) } else { (sa, sb) };
        let Some(pair) = LinkPair::new(&src.3, &tgt.3, kind) else { continue };
        links.push(pair);
        let mut rec = Record::new();
        rec.insert(leaves[0].into(), FieldValue::Leaf(vec![LeafValue::supported(&src.3, src.2.iter().copied())]));
        rec.insert(leaves[1].into(), FieldValue::Leaf(vec![LeafValue::supported(&tgt.3, tgt.2.iter().copied())]));
        groups.entry(kind).or_default().push((src.0.min(tgt.0), rec));
    }
    let mut fields = Record::new();
    for (kind, mut recs) in groups {
        recs.sort_by_key(|(pos, _)| *pos);
        fields.insert(kind.to_string(), FieldValue::Group(recs.into_iter().map(|(_, r)| r).collect()));
    }

    let doc = Document::from_words(doc_id, words, "funsd").map_err(|e| e.to_string())?;
    let mut item = CorpusItem::new(doc, DocumentValues::from_record(fields));
    item.links = links;
    Ok((item, warnings))
}

/// Loads `root/{training_data,testing_data}/annotations/*.json`.
pub fn load_funsd(root: &Path, split: Split) -> Result<Corpus, CorpusError> {
    let aliases: &[&str] = match split {
        Split::Train => &["training_data", "train"],
        Split::Validation => &[],
        Split::Test => &["testing_data", "test"],
    };
    let dir = split_dir(root, aliases, &["annotations", ""], DatasetName::Funsd, split)?;
    let files = files_with_ext(&dir, "json")?;
    let parsed: Vec<(CorpusItem, Vec<String>)> = files
        .par_iter()
        .map(|path| {
            let raw = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            funsd_document(&id, &raw).map_err(|e| malformed(path, e))
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
        name: DatasetName::Funsd,
        split,
        schema: bundled_schema(DatasetName::Funsd),
        items,
        warnings,
    })
}
