//! Reference blocks derived from token-grounded gold labels.

use std::collections::{BTreeMap, BTreeSet};

use super::{supported_leaves, BlockSet, SegmentationError, SemanticBlock};
use crate::model::{restrict_values, Document, DocumentSchema, DocumentValues, FieldValue, Record};

fn leaf_names(rec: &Record, prefix: &str, out: &mut Vec<String>) {
    for (k, fv) in rec {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match fv {
            FieldValue::Leaf(_) => {
                if !out.contains(&path) {
                    out.push(path)
                }
            }
            FieldValue::Group(recs) => recs.iter().for_each(|r| leaf_names(r, &path, out)),
        }
    }
}

fn entity_reason(entity: &str, instance: Option<usize>, rec: &Record) -> String {
    let mut leaves = Vec::new();
    leaf_names(rec, "", &mut leaves);
    let which = match instance {
        Some(i) => format!("{entity} entry {}", i + 1),
        None => format!("the {entity} entity"),
    };
    format!(
        "These words carry {which} ({}). Every attribute word and value linked to it sits in this block, so it reads without the rest of the document.",
        leaves.join(", ")
    )
}

const OTHERS_REASON: &str = "None of these words ground a schema entity; they form an others block.";

/// One block per top-level group instance, one per populated top-level leaf,
/// and one "others" block per page for the remaining tokens. A token that
/// supports two entities stays with the first block that claims it.
pub fn oracle_blocks_from_labels(
    doc: &Document,
    gold: &DocumentValues,
    schema: &DocumentSchema,
) -> Result<BlockSet, SegmentationError> {
    if let Some((path, _)) = supported_leaves(gold).into_iter().find(|(_, v)| v.is_inferred()) {
        return Err(SegmentationError::UnsupportedGold(path));
    }
    let mut claimed = BTreeSet::new();
    let mut blocks = Vec::new();
    let mut push = |ids: BTreeSet<usize>, reason: String, claimed: &mut BTreeSet<usize>| -> Result<(), SegmentationError> {
        let fresh: BTreeSet<usize> = ids.difference(claimed).copied().collect();
        if fresh.is_empty() {
            return Ok(());
        }
        claimed.extend(fresh.iter().copied());
        let mut block = SemanticBlock::from_tokens(doc, fresh.iter().copied(), reason);
        block.partial_values = Some(restrict_values(doc, gold, &doc.segment(fresh))?);
        blocks.push(block);
        Ok(())
    };

    // Schema order first, then anything the schema does not know about.
    let mut names: Vec<&String> = schema.roots.iter().map(|n| &n.name).filter(|n| gold.fields.contains_key(*n)).collect();
    names.extend(gold.fields.keys().filter(|k| schema.root(k).is_none()));
    for name in names {
        match &gold.fields[name] {
            FieldValue::Group(recs) => {
                let repeatable = schema.root(name).is_some_and(|n| n.repeatable);
                for (i, rec) in recs.iter().enumerate() {
                    let ids = DocumentValues { fields: rec.clone() }.support();
                    let reason = entity_reason(name, repeatable.then_some(i), rec);
                    push(ids, reason, &mut claimed)?;
                }
            }
            FieldValue::Leaf(vals) => {
                let ids: BTreeSet<usize> = vals.iter().flat_map(|v| v.support.iter().flatten().copied()).collect();
                let reason = format!(
                    "These words carry the {name} entity. The value and any label words for it sit together, so the block reads on its own."
                );
                push(ids, reason, &mut claimed)?;
            }
        }
    }

    let mut by_page: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for t in doc.tokens.iter().filter(|t| !claimed.contains(&t.token_id)) {
        by_page.entry(t.page_index).or_default().push(t.token_id);
    }
    for ids in by_page.into_values() {
        let mut block = SemanticBlock::from_tokens(doc, ids, OTHERS_REASON);
        block.others = true;
        block.partial_values = Some(DocumentValues::new());
        blocks.push(block);
    }
    Ok(BlockSet::new(doc.doc_id.clone(), blocks))
}
