//! A backend that answers every pipeline prompt from gold labels. Run
//! behind a recording backend it authors fixtures under exactly the keys
//! the pipeline computes.

use std::collections::BTreeMap;

use serde_json::{json, Map, Value};

use super::infer::{QueryRegistry, INFERENCE_STAGE};
use super::{materialize_blocks, RawBlock};
use crate::corpus::CorpusItem;
use crate::gateway::{Backend, CompletionRequest, CompletionResponse, GatewayError, TemplateKind};
use crate::model::{restrict_values, Document, DocumentSchema, DocumentValues};
use crate::segmentation::{oracle_blocks_from_labels, BlockSet};

pub struct GoldBackend {
    schema: DocumentSchema,
    docs: BTreeMap<String, (Document, DocumentValues)>,
    registry: QueryRegistry,
}

impl GoldBackend {
    pub fn new(schema: DocumentSchema, items: &[CorpusItem]) -> Self {
        let docs = items
            .iter()
            .map(|i| (i.doc.doc_id.clone(), (i.doc.clone(), i.gold.clone())))
            .collect();
        Self {
            schema,
            docs,
            registry: QueryRegistry::default(),
        }
    }

    pub fn with_registry(mut self, registry: QueryRegistry) -> Self {
        self.registry = registry;
        self
    }

    fn oracle_blocks(&self, doc: &Document, gold: &DocumentValues) -> Result<BlockSet, GatewayError> {
        oracle_blocks_from_labels(doc, gold, &self.schema).map_err(|e| GatewayError::Unavailable(e.to_string()))
    }

    fn partial(&self, doc: &Document, gold: &DocumentValues, ids: &[usize]) -> Result<Value, GatewayError> {
        let seg = doc.segment(ids.iter().copied());
        let part = restrict_values(doc, gold, &seg).map_err(|e| GatewayError::Unavailable(e.to_string()))?;
        Ok(part.to_json(Some(&self.schema), false))
    }

    fn answer(&self, request: &CompletionRequest) -> Result<Value, GatewayError> {
        let tag = &request.tag;
        let (doc, gold) = self
            .docs
            .get(&tag.doc_id)
            .ok_or_else(|| GatewayError::Unavailable(format!("no gold labels for {}", tag.doc_id)))?;
        let blocks = || self.oracle_blocks(doc, gold);
        let stage = tag.stage.as_str();
        if stage == TemplateKind::TrainLabeling.as_str() || stage == TemplateKind::BlockCreator.as_str() {
            let labeling = stage == TemplateKind::TrainLabeling.as_str();
            let mut out = Map::new();
            for b in blocks()?.blocks {
                let mut entry = json!({"reason": b.reason, "text": b.text});
                if labeling {
                    entry["parsed"] = self.partial(doc, gold, &b.token_ids)?;
                }
                out.insert(b.block_id, entry);
            }
            return Ok(Value::Object(out));
        }
        if stage == TemplateKind::BlockParser.as_str() {
            // Rebuild the blocks the pipeline made from the creator answer.
            let raw: Vec<RawBlock> = blocks()?
                .blocks
                .into_iter()
                .map(|b| RawBlock {
                    reason: b.reason,
                    text: b.text,
                    parsed: None,
                })
                .collect();
            let (made, _) = materialize_blocks(doc, &raw);
            let id = tag.block_id.as_deref().unwrap_or_default();
            let block = made
                .block(id)
                .ok_or_else(|| GatewayError::Unavailable(format!("no block {id} in {}", tag.doc_id)))?;
            return self.partial(doc, gold, &block.token_ids);
        }
        if stage == TemplateKind::BlockCombiner.as_str() {
            return Ok(json!({
                "reason": "Every block parse agrees with the document as a whole, so the parses are combined unchanged.",
                "invoice": gold.to_json(Some(&self.schema), false),
            }));
        }
        if stage == INFERENCE_STAGE {
            let name = tag.block_id.as_deref().unwrap_or_default();
            let answer = self
                .registry
                .get(name)
                .and_then(|q| q.oracle)
                .and_then(|f| f(gold))
                .ok_or_else(|| GatewayError::Unavailable(format!("no oracle for query {name:?}")))?;
            return Ok(json!({"reason": "Worked out from the labeled values.", "answer": answer}));
        }
        Err(GatewayError::Unavailable(format!("unknown stage {stage}")))
    }
}

impl Backend for GoldBackend {
    fn id(&self) -> &str {
        "gold"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        let value = self.answer(request)?;
        Ok(CompletionResponse {
            text: serde_json::to_string_pretty(&value).expect("json"),
            backend_id: self.id().to_string(),
            latency_ms: 0,
            token_usage: None,
            attempts: 1,
        })
    }
}
