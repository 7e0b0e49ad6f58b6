//! Labeled train examples and the two retrieval indices built over them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::align::align_blocks;
use super::{object_blocks, PipelineError};
use crate::corpus::CorpusItem;
use crate::gateway::{CompletionRequest, FixtureKey, Gateway, PromptPassages, PromptTemplate, RequestTag, TemplateKind};
use crate::model::{restrict_values, retain_valid, Document, DocumentSchema, DocumentValues};
use crate::retrieval::{ExampleIndex, ExampleKind, ExampleSource};
use crate::segmentation::{check_block_condition, oracle_blocks_from_labels, OracleAnnotator, SemanticBlock};

/// One block of a labeled train document: the reasoning, the words and the
/// values those words produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBlockExample {
    pub example_id: String,
    pub doc_id: String,
    pub reason: String,
    pub text: String,
    pub partial_values: DocumentValues,
    /// Problems found while checking the example; flagged examples are kept.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl LabeledBlockExample {
    fn parsed_json(&self, schema: &DocumentSchema) -> Value {
        self.partial_values.to_json(Some(schema), false)
    }
}

/// How train documents get their block labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    /// Blocks derived from the gold labels, with templated reasons.
    Oracle,
    /// Blocks returned by the labeling prompt.
    Llm,
}

/// Document-level index over full OCR text for block-creation examples and
/// block-level index over block text for block-parsing examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamplePools {
    pub schema_name: String,
    pub doc_index: ExampleIndex,
    pub block_index: ExampleIndex,
    /// Example ids of each train document, in block order.
    pub documents: BTreeMap<String, Vec<String>>,
    pub examples: BTreeMap<String, LabeledBlockExample>,
}

impl ExamplePools {
    pub fn from_json_str(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("pools serialize")
    }

    pub fn example(&self, id: &str) -> Option<&LabeledBlockExample> {
        self.examples.get(id)
    }

    /// Few-shot passage for the block creator: each retrieved document with
    /// its blocks as an answer.
    pub fn render_document_shots(&self, doc_ids: &[String]) -> String {
        let mut out = String::new();
        for (n, id) in doc_ids.iter().enumerate() {
            let Some(entry) = self.doc_index.get(id) else { continue };
            let mut answer = serde_json::Map::new();
            for (i, ex_id) in self.documents.get(id).into_iter().flatten().enumerate() {
                if let Some(ex) = self.examples.get(ex_id) {
                    answer.insert(
                        format!("block_{}", i + 1),
                        serde_json::json!({"reason": ex.reason, "text": ex.text}),
                    );
                }
            }
            let _ = write!(
                out,
                "Example {}:\nOCR words:\n{}\nAnswer:\n{}\n\n",
                n + 1,
                entry.text,
                serde_json::to_string_pretty(&Value::Object(answer)).expect("json")
            );
        }
        out
    }

    /// Few-shot passage for the block parser.
    pub fn render_block_shots(&self, ids: &[String], schema: &DocumentSchema) -> String {
        let mut out = String::new();
        for (n, id) in ids.iter().enumerate() {
            let Some(ex) = self.examples.get(id) else { continue };
            let _ = write!(
                out,
                "Example {}:\nReason: {}\nBlock: {}\nParsed: {}\n\n",
                n + 1,
                ex.reason,
                ex.text,
                ex.parsed_json(schema)
            );
        }
        out
    }
}

/// Oracle labels for one train document: one example per oracle block.
pub fn oracle_examples(doc: &Document, gold: &DocumentValues, schema: &DocumentSchema) -> Result<Vec<LabeledBlockExample>, PipelineError> {
    let blocks = oracle_blocks_from_labels(doc, gold, schema)?;
    Ok(blocks
        .blocks
        .into_iter()
        .map(|b| LabeledBlockExample {
            example_id: format!("{}#{}", doc.doc_id, b.block_id),
            doc_id: doc.doc_id.clone(),
            reason: b.reason,
            text: b.text,
            partial_values: b.partial_values.unwrap_or_default().without_support(),
            flags: Vec::new(),
        })
        .collect())
}

pub(crate) fn labeling_key(doc: &Document, gold: &DocumentValues, schema: &DocumentSchema) -> FixtureKey {
    let annotation = gold.to_json(Some(schema), false).to_string();
    FixtureKey::compute(TemplateKind::TrainLabeling.as_str(), &schema.name, &doc.text(), &[], &annotation)
}

/// Asks the model to split a labeled train document into blocks, then
/// checks each returned block against the gold labels.
pub fn label_train_document(
    doc: &Document,
    gold: &DocumentValues,
    schema: &DocumentSchema,
    gateway: &Gateway,
) -> Result<Vec<LabeledBlockExample>, PipelineError> {
    let passages = PromptPassages::for_schema(schema);
    let slots: BTreeMap<String, String> = [
        ("text", doc.text()),
        ("annotation", serde_json::to_string_pretty(&gold.to_json(Some(schema), false)).expect("json")),
        ("schema", schema.describe()),
        ("few_shot", String::new()),
        ("entity_rules", passages.entity_rules),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let prompt = PromptTemplate::builtin(TemplateKind::TrainLabeling).render(&slots)?;
    let request = CompletionRequest::new(
        prompt,
        RequestTag::new(TemplateKind::TrainLabeling.as_str(), &doc.doc_id, None),
        labeling_key(doc, gold, schema),
    );
    let outcome = gateway.complete_structured(&request);
    let value = outcome.value.map_err(|e| PipelineError::Stage {
        stage: "train_labeling",
        doc_id: doc.doc_id.clone(),
        reason: e,
    })?;
    let raw_blocks = object_blocks(&value);
    let texts: Vec<String> = raw_blocks.iter().map(|b| b.text.clone()).collect();
    let alignments = align_blocks(doc, &texts);
    let annotator = OracleAnnotator::new(doc, gold, schema);
    let mut out = Vec::new();
    for (i, (raw, al)) in raw_blocks.iter().zip(alignments).enumerate() {
        let mut flags = Vec::new();
        let (parsed, warnings) = DocumentValues::from_json_lenient(raw.parsed.as_ref().unwrap_or(&Value::Null));
        let (partial, report) = retain_valid(schema, &parsed);
        flags.extend(warnings);
        flags.extend(report.violations.iter().map(|v| format!("invalid path {v}")));
        if !al.unmatched.is_empty() {
            flags.push(format!("unmatched words: {}", al.unmatched.join(" ")));
        }
        if !al.token_ids.is_empty() {
            let block = SemanticBlock::from_tokens(doc, al.token_ids.iter().copied(), raw.reason.clone());
            let truth = restrict_values(doc, gold, &block.segment(&doc.doc_id))?;
            if !truth.content_eq(&partial) {
                flags.push("partial values differ from the gold labels".into());
            }
            if !check_block_condition(&block, doc, gold, &annotator)?.is_block {
                flags.push("not a semantic block".into());
            }
        }
        if raw.text.trim().is_empty() {
            continue;
        }
        out.push(LabeledBlockExample {
            example_id: format!("{}#block_{}", doc.doc_id, i + 1),
            doc_id: doc.doc_id.clone(),
            reason: raw.reason.clone(),
            text: raw.text.clone(),
            partial_values: partial,
            flags,
        });
    }
    Ok(out)
}

/// Labels every train document and indexes the examples. Documents whose
/// labeling fails are skipped with a warning.
pub fn build_example_pool(
    items: &[CorpusItem],
    schema: &DocumentSchema,
    gateway: Option<&Gateway>,
    mode: PoolMode,
) -> Result<ExamplePools, PipelineError> {
    let mut documents = BTreeMap::new();
    let mut examples = BTreeMap::new();
    let mut doc_sources = Vec::new();
    let mut block_sources = Vec::new();
    for item in items {
        let labeled = match (mode, gateway) {
            (PoolMode::Oracle, _) => oracle_examples(&item.doc, &item.gold, schema),
            (PoolMode::Llm, Some(g)) => label_train_document(&item.doc, &item.gold, schema, g),
            (PoolMode::Llm, None) => return Err(PipelineError::Config("labeling with a model needs a backend".into())),
        };
        let labeled = match labeled {
            Ok(l) if !l.is_empty() => l,
            Ok(_) => {
                warn!("{}: labeling returned no blocks", item.doc.doc_id);
                continue;
            }
            Err(e) => {
                warn!("{}: skipped from the example pool: {e}", item.doc.doc_id);
                continue;
            }
        };
        doc_sources.push(ExampleSource {
            example_id: item.doc.doc_id.clone(),
            kind: ExampleKind::Document,
            text: item.doc.text(),
            payload_ref: item.doc.doc_id.clone(),
        });
        let mut ids = Vec::new();
        for ex in labeled {
            block_sources.push(ExampleSource {
                example_id: ex.example_id.clone(),
                kind: ExampleKind::Block,
                text: ex.text.clone(),
                payload_ref: ex.doc_id.clone(),
            });
            ids.push(ex.example_id.clone());
            examples.insert(ex.example_id.clone(), ex);
        }
        documents.insert(item.doc.doc_id.clone(), ids);
    }
    if examples.is_empty() {
        return Err(PipelineError::EmptyPool);
    }
    Ok(ExamplePools {
        schema_name: schema.name.clone(),
        doc_index: ExampleIndex::build(doc_sources)?,
        block_index: ExampleIndex::build(block_sources)?,
        documents,
        examples,
    })
}
