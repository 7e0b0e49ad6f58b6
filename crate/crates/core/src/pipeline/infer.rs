//! Values the document never prints but that follow from what it does
//! print, such as the number of items bought.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{text_field, ExtractionResult, PipelineError};
use crate::gateway::{bbox_lines, CompletionRequest, Exchange, FixtureKey, Gateway, RequestTag};
use crate::model::{normalize_text, Document, DocumentSchema, DocumentValues, FieldValue};

pub const INFERENCE_STAGE: &str = "inference";

/// A registered question and, when known, its deterministic answer from
/// gold values.
#[derive(Clone)]
pub struct AbsentQuery {
    pub name: String,
    pub question: String,
    pub oracle: Option<fn(&DocumentValues) -> Option<String>>,
}

impl std::fmt::Debug for AbsentQuery {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AbsentQuery")
            .field("name", &self.name)
            .field("has_oracle", &self.oracle.is_some())
            .finish()
    }
}

#[derive(Debug, Clone)]
pub struct QueryRegistry {
    queries: BTreeMap<String, AbsentQuery>,
}

impl Default for QueryRegistry {
    fn default() -> Self {
        let mut r = Self { queries: BTreeMap::new() };
        r.register(AbsentQuery {
            name: "line_item_count".into(),
            question: "How many items were bought on this receipt? Count each line item by its quantity; a line item without a quantity counts once. Sub-items listed under a line item (add-ons, options, modifiers) are not items of their own and must be left out of the count. Add the quantities step by step.".into(),
            oracle: Some(|v| Some(line_item_count(v).to_string())),
        });
        r
    }
}

impl QueryRegistry {
    pub fn register(&mut self, query: AbsentQuery) {
        self.queries.insert(query.name.clone(), query);
    }

    pub fn get(&self, name: &str) -> Option<&AbsentQuery> {
        self.queries.get(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.queries.keys().map(String::as_str).collect()
    }
}

/// First integer in `text`, ignoring thousands separators.
fn leading_count(text: &str) -> Option<i64> {
    let digits: String = text
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect();
    digits.parse().ok()
}

/// Items bought: the quantity of each top-level menu entry summed, an entry
/// without a readable quantity counting once. Sub-items do not count.
pub fn line_item_count(values: &DocumentValues) -> i64 {
    let Some(FieldValue::Group(menu)) = values.fields.get("menu") else { return 0 };
    menu.iter()
        .map(|item| match item.get("cnt") {
            Some(FieldValue::Leaf(v)) => v.first().and_then(|l| leading_count(&l.text)).unwrap_or(1),
            _ => 1,
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferredValue {
    pub query: String,
    pub value: String,
    pub reason: String,
    pub exchanges: Vec<Exchange>,
}

impl InferredValue {
    pub fn as_count(&self) -> Option<i64> {
        leading_count(&self.value)
    }
}

pub fn inference_key(doc: &Document, schema: &DocumentSchema, query: &str) -> FixtureKey {
    FixtureKey::compute(INFERENCE_STAGE, &schema.name, &doc.text(), &[], query)
}

fn inference_prompt(doc: &Document, result: &ExtractionResult, schema: &DocumentSchema, q: &AbsentQuery) -> String {
    let all: Vec<usize> = (0..doc.len()).collect();
    format!(
        "You are an expert system for parsing receipt documents into structured data. \
Some answers are not written on the document and have to be worked out from what is written.\n\n\
Schema and field descriptions:\n{}\n\n\
All words in the document:\n{}\n\n\
All bounding boxes in the document (per-mille x0,y0,x1,y1):\n{}\n\n\
Values already extracted from the document:\n{}\n\n\
Question: {}\n\n\
Answer with a dictionary with two keys:\n\
1. reason: your step-by-step working.\n\
2. answer: the final answer alone.\n\
Return only that JSON dictionary.\n",
        schema.describe(),
        doc.text(),
        bbox_lines(doc, all),
        result.values.to_json(Some(schema), false),
        q.question
    )
}

/// Asks the model a registered question about an extracted document.
pub fn infer_absent_value(
    doc: &Document,
    result: &ExtractionResult,
    query: &str,
    registry: &QueryRegistry,
    schema: &DocumentSchema,
    gateway: &Gateway,
) -> Result<InferredValue, PipelineError> {
    let q = registry
        .get(query)
        .ok_or_else(|| PipelineError::Config(format!("unknown query {query:?}")))?;
    let request = CompletionRequest::new(
        inference_prompt(doc, result, schema, q),
        RequestTag::new(INFERENCE_STAGE, &doc.doc_id, Some(query)),
        inference_key(doc, schema, query),
    );
    let outcome = gateway.complete_structured(&request);
    let v = outcome.value.map_err(PipelineError::Inference)?;
    let value = match v.get("answer") {
        Some(Value::Null) | None => return Err(PipelineError::Inference("answer has no answer key".into())),
        Some(a) => normalize_text(&text_field(Some(a))),
    };
    Ok(InferredValue {
        query: query.to_string(),
        value,
        reason: text_field(v.get("reason")),
        exchanges: outcome.exchanges,
    })
}
