//! Block creation, block parsing and block combining over one document,
//! plus corpus runs, example pools and value-absent queries.

mod align;
mod author;
mod infer;
mod pools;
mod run;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use align::{align_blocks, Alignment};
pub use author::GoldBackend;
pub use infer::{infer_absent_value, line_item_count, AbsentQuery, InferredValue, QueryRegistry};
pub use pools::{build_example_pool, label_train_document, oracle_examples, ExamplePools, LabeledBlockExample, PoolMode};
pub use run::RunDir;

use crate::gateway::{
    bbox_lines, CompletionRequest, Exchange, FixtureKey, Gateway, GatewayError, PromptPassages, PromptTemplate,
    RequestTag, TemplateKind,
};
use crate::model::{merge_values, retain_valid, Document, DocumentSchema, DocumentValues, ModelError};
use crate::retrieval::{ExampleKind, RetrievalError, DEFAULT_FEW_SHOT_K};
use crate::segmentation::{group_atoms, BlockSet, GeometryParams, SegmentationError, SemanticBlock};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage} failed for {doc_id}: {reason}")]
    Stage {
        stage: &'static str,
        doc_id: String,
        reason: String,
    },
    #[error("empty example pool")]
    EmptyPool,
    #[error("bad configuration: {0}")]
    Config(String),
    #[error("inference failure: {0}")]
    Inference(String),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// Where completions come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixtureMode {
    /// Straight to the model.
    Live,
    /// Model answers are stored as fixtures; stored ones are reused.
    Record,
    /// Stored fixtures only.
    Replay,
    /// Answers derived from the gold labels; no model involved.
    Oracle,
}

impl std::str::FromStr for FixtureMode {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(Self::Live),
            "record" => Ok(Self::Record),
            "replay" => Ok(Self::Replay),
            "oracle" => Ok(Self::Oracle),
            _ => Err(PipelineError::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema: DocumentSchema,
    pub few_shot_k: usize,
    pub backend_id: String,
    pub mode: FixtureMode,
    pub geometry: GeometryParams,
    /// Documents processed at once.
    pub concurrency: usize,
    pub combiner_enabled: bool,
    pub passages: PromptPassages,
}

impl RunConfig {
    pub fn new(schema: DocumentSchema, mode: FixtureMode) -> Self {
        Self {
            passages: PromptPassages::for_schema(&schema),
            schema,
            few_shot_k: DEFAULT_FEW_SHOT_K,
            backend_id: String::new(),
            mode,
            geometry: GeometryParams::default(),
            concurrency: 1,
            combiner_enabled: true,
        }
    }
}

/// Block as returned by a model: reason, words and (for labeling) values.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct RawBlock {
    pub reason: String,
    pub text: String,
    pub parsed: Option<Value>,
}

pub(crate) fn text_field(v: Option<&Value>) -> String {
    match v {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Array(items)) => items.iter().map(|i| text_field(Some(i))).collect::<Vec<_>>().join(" "),
        Some(Value::Null) | None => String::new(),
        Some(other) => other.to_string(),
    }
}

/// Blocks of a `{block_1: {...}, block_2: {...}}` answer, ordered by their
/// number; keys without a number follow in key order.
pub(crate) fn object_blocks(value: &Value) -> Vec<RawBlock> {
    let Some(obj) = value.as_object() else { return Vec::new() };
    let mut keyed: Vec<(Option<u64>, &String, &Value)> = obj
        .iter()
        .map(|(k, v)| {
            let n = k.strip_prefix("block_").and_then(|d| d.parse().ok());
            (n, k, v)
        })
        .collect();
    keyed.sort_by(|a, b| match (a.0, b.0) {
        (Some(x), Some(y)) => x.cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.1.cmp(b.1),
    });
    keyed
        .into_iter()
        .filter_map(|(_, _, v)| {
            let o = v.as_object()?;
            Some(RawBlock {
                reason: text_field(o.get("reason")),
                text: text_field(o.get("text")),
                parsed: o.get("parsed").cloned(),
            })
        })
        .collect()
}

/// What one stage did for one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exchanges: Vec<Exchange>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub artifact: Value,
}

impl StageTrace {
    fn new(stage: &str) -> Self {
        Self {
            stage: stage.to_string(),
            ok: true,
            exchanges: Vec::new(),
            notes: Vec::new(),
            artifact: Value::Null,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParse {
    pub block_id: String,
    pub values: DocumentValues,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub doc_id: String,
    pub values: DocumentValues,
    pub combiner_reason: Option<String>,
    pub blocks: BlockSet,
    /// One per block, in block order.
    pub parses: Vec<BlockParse>,
    pub traces: Vec<StageTrace>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl ExtractionResult {
    pub fn stages_succeeded(&self) -> usize {
        self.traces.iter().filter(|t| t.ok).count()
    }

    /// Stable serialization used for determinism checks and result files.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }

    pub fn trace(&self, stage: &str) -> Option<&StageTrace> {
        self.traces.iter().find(|t| t.stage == stage)
    }
}

fn render(kind: TemplateKind, slots: Vec<(&str, String)>) -> Result<String, GatewayError> {
    let map: BTreeMap<String, String> = slots.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    PromptTemplate::builtin(kind).render(&map)
}

pub(crate) const FALLBACK_REASON: &str = "One spatially coherent group of words.";
pub(crate) const SWEEP_REASON: &str = "Words that no returned block covered.";

/// Key of the block-creation request for `doc` given the retrieved examples.
pub fn creator_key(doc: &Document, schema: &DocumentSchema, example_ids: &[String]) -> FixtureKey {
    FixtureKey::compute(TemplateKind::BlockCreator.as_str(), &schema.name, &doc.text(), example_ids, "")
}

pub fn parser_key(block: &SemanticBlock, schema: &DocumentSchema, example_ids: &[String]) -> FixtureKey {
    FixtureKey::compute(TemplateKind::BlockParser.as_str(), &schema.name, &block.text, example_ids, &block.reason)
}

/// Splits the document into blocks. Response blocks are aligned to tokens;
/// tokens no block claimed form a trailing others block. An unusable
/// response falls back to one block per semantic atom.
pub fn create_blocks(
    doc: &Document,
    pools: &ExamplePools,
    gateway: &Gateway,
    config: &RunConfig,
) -> (BlockSet, StageTrace) {
    let stage = TemplateKind::BlockCreator.as_str();
    let mut trace = StageTrace::new(stage);
    if doc.is_empty() {
        return (BlockSet::empty(doc.doc_id.clone()), trace);
    }
    let schema = &config.schema;
    let shots: Vec<String> = pools
        .doc_index
        .top_k(&doc.text(), config.few_shot_k, Some(ExampleKind::Document))
        .into_iter()
        .map(|n| n.example_id)
        .collect();
    let all: Vec<usize> = (0..doc.len()).collect();
    let prompt = render(
        TemplateKind::BlockCreator,
        vec![
            ("schema", schema.describe()),
            ("entity_rules", config.passages.entity_rules.clone()),
            ("few_shot", pools.render_document_shots(&shots)),
            ("verification", config.passages.verification.clone()),
            ("words", doc.text()),
            ("bboxes", bbox_lines(doc, all.iter().copied())),
        ],
    );
    let raw = match prompt {
        Ok(prompt) => {
            let request = CompletionRequest::new(prompt, RequestTag::new(stage, &doc.doc_id, None), creator_key(doc, schema, &shots));
            let outcome = gateway.complete_structured(&request);
            trace.exchanges = outcome.exchanges;
            outcome.value.map(|v| object_blocks(&v))
        }
        Err(e) => Err(e.to_string()),
    };
    let raw = match raw {
        Ok(blocks) if !blocks.is_empty() => blocks,
        other => {
            let why = match other {
                Err(e) => e,
                Ok(_) => "no blocks in the answer".to_string(),
            };
            trace.ok = false;
            trace.notes.push(format!("fallback: {why}"));
            let blocks = group_atoms(doc, config.geometry)
                .into_iter()
                .map(|a| {
                    let mut b = SemanticBlock::from_tokens(doc, a.token_ids.iter().copied(), FALLBACK_REASON);
                    b.atom_ids = vec![a.atom_id];
                    b
                })
                .collect();
            let set = BlockSet::new(doc.doc_id.clone(), blocks);
            trace.artifact = serde_json::to_value(&set).expect("json");
            return (set, trace);
        }
    };
    let (set, notes) = materialize_blocks(doc, &raw);
    trace.notes.extend(notes);
    trace.artifact = serde_json::to_value(&set).expect("json");
    (set, trace)
}

/// Aligns response blocks to tokens; unclaimed tokens become one others
/// block. Returns the blocks and notes on words that did not align.
pub(crate) fn materialize_blocks(doc: &Document, raw: &[RawBlock]) -> (BlockSet, Vec<String>) {
    let texts: Vec<String> = raw.iter().map(|b| b.text.clone()).collect();
    let mut notes = Vec::new();
    let mut claimed = vec![false; doc.len()];
    let mut blocks = Vec::new();
    for (i, (rb, al)) in raw.iter().zip(align_blocks(doc, &texts)).enumerate() {
        if !al.unmatched.is_empty() {
            notes.push(format!("block_{} unmatched words: {}", i + 1, al.unmatched.join(" ")));
        }
        for &t in &al.token_ids {
            claimed[t] = true;
        }
        if al.token_ids.is_empty() {
            notes.push(format!("block_{} matched no tokens", i + 1));
            continue;
        }
        blocks.push(SemanticBlock::from_tokens(doc, al.token_ids, rb.reason.clone()));
    }
    let missing: Vec<usize> = (0..doc.len()).filter(|&t| !claimed[t]).collect();
    if !missing.is_empty() {
        notes.push(format!("{} tokens swept into an others block", missing.len()));
        let mut b = SemanticBlock::from_tokens(doc, missing, SWEEP_REASON);
        b.others = true;
        blocks.push(b);
    }
    (BlockSet::new(doc.doc_id.clone(), blocks), notes)
}

/// Parses one block into partial values. Swept others blocks are not sent
/// to the model.
pub fn parse_block(
    doc_id: &str,
    block: &SemanticBlock,
    pools: &ExamplePools,
    gateway: &Gateway,
    config: &RunConfig,
) -> (BlockParse, Vec<Exchange>) {
    let mut parse = BlockParse {
        block_id: block.block_id.clone(),
        values: DocumentValues::new(),
        ok: true,
        notes: Vec::new(),
    };
    if block.others {
        return (parse, Vec::new());
    }
    let schema = &config.schema;
    let shots: Vec<String> = pools
        .block_index
        .top_k(&block.text, config.few_shot_k, Some(ExampleKind::Block))
        .into_iter()
        .map(|n| n.example_id)
        .collect();
    let prompt = render(
        TemplateKind::BlockParser,
        vec![
            ("schema", schema.describe()),
            ("formatting_rules", config.passages.formatting_rules.clone()),
            ("few_shot", pools.render_block_shots(&shots, schema)),
            ("query_reason", block.reason.clone()),
            ("output_spec", config.passages.output_spec.clone()),
            ("verification", config.passages.verification.clone()),
            ("query_block", block.text.clone()),
        ],
    );
    let (value, exchanges) = match prompt {
        Ok(prompt) => {
            let tag = RequestTag::new(TemplateKind::BlockParser.as_str(), doc_id, Some(&block.block_id));
            let outcome = gateway.complete_structured(&CompletionRequest::new(prompt, tag, parser_key(block, schema, &shots)));
            (outcome.value, outcome.exchanges)
        }
        Err(e) => (Err(e.to_string()), Vec::new()),
    };
    match value {
        Ok(v) => {
            let (parsed, warnings) = DocumentValues::from_json_lenient(&v);
            let (kept, report) = retain_valid(schema, &parsed);
            parse.notes.extend(warnings);
            parse.notes.extend(report.violations.iter().map(|v| format!("dropped {v}")));
            parse.values = kept.without_support();
        }
        Err(e) => {
            parse.ok = false;
            parse.notes.push(format!("parse failure: {e}"));
        }
    }
    (parse, exchanges)
}

/// Text listing every block with its reason and parse, as shown to the
/// combiner; also part of its fixture key.
pub fn blocks_and_parses(blocks: &BlockSet, parses: &[BlockParse], schema: &DocumentSchema) -> String {
    blocks
        .blocks
        .iter()
        .zip(parses)
        .map(|(b, p)| {
            format!(
                "{}:\nreason: {}\ntext: {}\nparse: {}",
                b.block_id,
                b.reason,
                b.text,
                p.values.to_json(Some(schema), false)
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn combiner_key(doc: &Document, schema: &DocumentSchema, listing: &str) -> FixtureKey {
    FixtureKey::compute(TemplateKind::BlockCombiner.as_str(), &schema.name, &doc.text(), &[], listing)
}

/// Values, combiner reason, trace and flags of the combine stage.
pub struct Combined {
    pub values: DocumentValues,
    pub reason: Option<String>,
    pub trace: StageTrace,
    pub flags: Vec<String>,
}

/// Judges the block parses in the context of the whole document. Without
/// a usable combiner answer the parses are merged deterministically.
pub fn combine_blocks(
    doc: &Document,
    blocks: &BlockSet,
    parses: &[BlockParse],
    gateway: &Gateway,
    config: &RunConfig,
) -> Combined {
    let stage = TemplateKind::BlockCombiner.as_str();
    let schema = &config.schema;
    let mut trace = StageTrace::new(stage);
    let parts: Vec<DocumentValues> = parses.iter().map(|p| p.values.clone()).collect();
    let merged = || {
        let m = merge_values(&parts, schema);
        let notes: Vec<String> = m
            .conflicts
            .iter()
            .map(|c| format!("conflict at {}: kept {:?}, dropped {:?}", c.path, c.kept, c.dropped))
            .collect();
        (m.values, notes)
    };
    if !config.combiner_enabled {
        let (values, notes) = merged();
        trace.notes = notes;
        trace.notes.push("combiner disabled".into());
        return Combined {
            values,
            reason: None,
            trace,
            flags: Vec::new(),
        };
    }
    if parses.len() <= 1 {
        trace.notes.push("single block".into());
        return Combined {
            values: parts.into_iter().next().unwrap_or_default(),
            reason: None,
            trace,
            flags: Vec::new(),
        };
    }
    let listing = blocks_and_parses(blocks, parses, schema);
    let all: Vec<usize> = (0..doc.len()).collect();
    let prompt = render(
        TemplateKind::BlockCombiner,
        vec![
            ("schema", schema.describe()),
            ("entity_rules", config.passages.entity_rules.clone()),
            ("text", doc.text()),
            ("bboxes", bbox_lines(doc, all.iter().copied())),
            ("blocks_and_parses", listing.clone()),
            ("verification", config.passages.verification.clone()),
        ],
    );
    let value = match prompt {
        Ok(prompt) => {
            let request = CompletionRequest::new(prompt, RequestTag::new(stage, &doc.doc_id, None), combiner_key(doc, schema, &listing));
            let outcome = gateway.complete_structured(&request);
            trace.exchanges = outcome.exchanges;
            outcome.value
        }
        Err(e) => Err(e.to_string()),
    };
    let answer = value.and_then(|v| match v.get("invoice") {
        Some(inv @ Value::Object(_)) => Ok((inv.clone(), v.get("reason").map(|r| text_field(Some(r))))),
        _ => Err("answer has no invoice dictionary".to_string()),
    });
    match answer {
        Ok((invoice, reason)) => {
            let (parsed, warnings) = DocumentValues::from_json_lenient(&invoice);
            let (kept, report) = retain_valid(schema, &parsed);
            trace.notes.extend(warnings);
            trace.notes.extend(report.violations.iter().map(|v| format!("dropped {v}")));
            Combined {
                values: kept.without_support(),
                reason,
                trace,
                flags: Vec::new(),
            }
        }
        Err(e) => {
            let (values, notes) = merged();
            trace.ok = false;
            trace.notes.push(format!("combiner failed: {e}"));
            trace.notes.extend(notes);
            Combined {
                values,
                reason: None,
                trace,
                flags: vec!["deterministic combine".into()],
            }
        }
    }
}

/// Creates, parses and combines blocks for one document. Never fails;
/// problems surface as flags and failed stage traces.
pub fn extract(doc: &Document, pools: &ExamplePools, gateway: &Gateway, config: &RunConfig) -> ExtractionResult {
    let (blocks, create_trace) = create_blocks(doc, pools, gateway, config);
    let mut flags = Vec::new();
    if !create_trace.ok {
        flags.push("fallback".to_string());
    }
    let parsed: Vec<(BlockParse, Vec<Exchange>)> = blocks
        .blocks
        .par_iter()
        .map(|b| parse_block(&doc.doc_id, b, pools, gateway, config))
        .collect();
    let mut parse_trace = StageTrace::new(TemplateKind::BlockParser.as_str());
    let mut parses = Vec::with_capacity(parsed.len());
    for (p, ex) in parsed {
        if !p.ok {
            parse_trace.ok = false;
            flags.push(format!("parse failure: {}", p.block_id));
        }
        parse_trace.exchanges.extend(ex);
        parses.push(p);
    }
    parse_trace.artifact = serde_json::to_value(&parses).expect("json");
    let combined = combine_blocks(doc, &blocks, &parses, gateway, config);
    flags.extend(combined.flags);
    ExtractionResult {
        doc_id: doc.doc_id.clone(),
        values: combined.values,
        combiner_reason: combined.reason,
        blocks,
        parses,
        traces: vec![create_trace, parse_trace, combined.trace],
        flags,
    }
}

/// Extracts every document with up to `config.concurrency` in flight.
/// Results come back in input order.
pub fn run_corpus(docs: &[&Document], pools: &ExamplePools, gateway: &Gateway, config: &RunConfig) -> Vec<ExtractionResult> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.concurrency.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| docs.par_iter().map(|d| extract(d, pools, gateway, config)).collect())
}

#[cfg(test)]
mod tests;
