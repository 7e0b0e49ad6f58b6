//! The four stage prompts and their slot rendering.
//!
//! Bodies use `{{slot}}` placeholders. Rendering is a single left-to-right
//! pass, so slot values are inserted verbatim and never re-expanded.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::GatewayError;
use crate::model::{Document, DocumentSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    TrainLabeling,
    BlockCreator,
    BlockParser,
    BlockCombiner,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 4] = [
        TemplateKind::TrainLabeling,
        TemplateKind::BlockCreator,
        TemplateKind::BlockParser,
        TemplateKind::BlockCombiner,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKind::TrainLabeling => "train_labeling",
            TemplateKind::BlockCreator => "block_creator",
            TemplateKind::BlockParser => "block_parser",
            TemplateKind::BlockCombiner => "block_combiner",
        }
    }

    /// Literal passages every body of this kind must contain.
    pub fn anchors(self) -> &'static [&'static str] {
        match self {
            TemplateKind::TrainLabeling => &["Break the provided text into semantic blocks", "Do not leave out any text"],
            TemplateKind::BlockCreator => &["You are a seasoned text parser", "Do not leave out any text"],
            TemplateKind::BlockParser => &[
                "parsing receipt text blocks into structured data",
                "where the block-creator had this reason",
            ],
            TemplateKind::BlockCombiner => &["parsing receipt documents into structured data"],
        }
    }

    fn default_body(self) -> &'static str {
        match self {
            TemplateKind::TrainLabeling => TRAIN_LABELING,
            TemplateKind::BlockCreator => BLOCK_CREATOR,
            TemplateKind::BlockParser => BLOCK_PARSER,
            TemplateKind::BlockCombiner => BLOCK_COMBINER,
        }
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

const TRAIN_LABELING: &str = "\
Here is the text of a document:
{{text}}

Its full annotation under the schema below is:
{{annotation}}

Schema:
{{schema}}

{{few_shot}}Break the provided text into semantic blocks named block_1, block_2 and so on, keeping related text together in the same block.
Rules:
1/ Answer with a dictionary whose keys are block_1, block_2, ...
2/ Every block is itself a dictionary with the keys reason, text and parsed.
   - reason: reason step by step about why this text forms one block.
   - text: the words of the block, copied from the document.
   - parsed: the part of the annotation that these words produce.
3/ Text is related when it belongs to the same linked or hierarchical schema entity, or to others.
{{entity_rules}}
4/ Do not leave out any text.
5/ Do not add any word that is not in the document.
";

const BLOCK_CREATOR: &str = "\
You are a seasoned text parser. You split OCR text into blocks of related text and give a step-by-step reason for each block.

Schema:
{{schema}}

{{entity_rules}}

{{few_shot}}Rules:
1/ Answer with a dictionary whose keys are block_1, block_2, ...
2/ Every block is itself a dictionary with the keys reason and text.
   a. reason: reason step by step about why this text forms one block, using the rules and examples above.
   b. text: the words of the block, copied from the OCR text.
3/ Text is related when it belongs to the same linked or hierarchical schema entity, or to others.
4/ Do not leave out any text.
5/ Do not add any word that is not in the OCR text.

{{verification}}

Answer for the following text and write nothing else.
OCR words:
{{words}}
Bounding boxes (per-mille x0,y0,x1,y1):
{{bboxes}}
Answer:
";

const BLOCK_PARSER: &str = "\
You are an expert system for parsing receipt text blocks into structured data. You read one block of receipt text and turn it into a dictionary that follows the schema.

Schema and field descriptions:
{{schema}}

{{formatting_rules}}

{{few_shot}}Treat the examples as guidance only; where they disagree with the rules, follow the rules.

Current task:
This is a block created previously where the block-creator had this reason \"{{query_reason}}\"

Produce one valid JSON dictionary, following the schema, that holds every entity present in this block and nothing else.

{{output_spec}}

{{verification}}

Block to parse:
{{query_block}}
";

const BLOCK_COMBINER: &str = "\
You are an expert system for parsing receipt documents into structured data. You receive a whole document together with blocks of it that were parsed separately, and you build the final dictionary for the document.

Schema and field descriptions:
{{schema}}

{{entity_rules}}

All words in the document:
{{text}}

All bounding boxes in the document (per-mille x0,y0,x1,y1):
{{bboxes}}

Parsed blocks, each with its reason and partial parse:
{{blocks_and_parses}}

Instructions:
1. Read the whole document text for context.
2. Build the final dictionary from the partial parses; a block parse may lack context the whole document has.
3. Place every value under the schema entity it belongs to.
4. Keep numbers exactly as written in the document.

{{verification}}

Answer with a dictionary with two keys:
1. reason: a step-by-step justification of the chosen values, reusing the block reasons.
2. invoice: the final dictionary.
Return only that JSON dictionary.
";

/// A prompt body with its placeholders, checked for its anchors on load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub body: String,
}

fn placeholders(body: &str) -> Vec<(usize, usize, &str)> {
    let mut out = Vec::new();
    let mut at = 0;
    while let Some(open) = body[at..].find("{{") {
        let start = at + open;
        let Some(close) = body[start + 2..].find("}}") else { break };
        let end = start + 2 + close + 2;
        let name = &body[start + 2..end - 2];
        if !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            out.push((start, end, name));
            at = end;
        } else {
            at = start + 2;
        }
    }
    out
}

impl PromptTemplate {
    pub fn new(kind: TemplateKind, body: impl Into<String>) -> Result<Self, GatewayError> {
        let body = body.into();
        if let Some(anchor) = kind.anchors().iter().find(|a| !body.contains(**a)) {
            return Err(GatewayError::MissingAnchor {
                kind: kind.to_string(),
                anchor: anchor.to_string(),
            });
        }
        Ok(Self { kind, body })
    }

    pub fn builtin(kind: TemplateKind) -> Self {
        Self::new(kind, kind.default_body()).expect("built-in bodies carry their anchors")
    }

    /// Slot names in order of first appearance.
    pub fn slots(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        placeholders(&self.body)
            .into_iter()
            .map(|(_, _, n)| n)
            .filter(|n| seen.insert(*n))
            .collect()
    }

    pub fn render(&self, slots: &BTreeMap<String, String>) -> Result<String, GatewayError> {
        let mut out = String::with_capacity(self.body.len() * 2);
        let mut at = 0;
        for (start, end, name) in placeholders(&self.body) {
            let value = slots.get(name).ok_or_else(|| GatewayError::MissingSlot(name.to_string()))?;
            out.push_str(&self.body[at..start]);
            out.push_str(value);
            at = end;
        }
        out.push_str(&self.body[at..]);
        Ok(out)
    }
}

/// Passages whose wording is left to the deployment: entity rules,
/// verification steps, formatting rules and output specification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPassages {
    pub entity_rules: String,
    pub verification: String,
    pub formatting_rules: String,
    pub output_spec: String,
}

impl PromptPassages {
    /// Defaults derived from the schema tree.
    pub fn for_schema(schema: &DocumentSchema) -> Self {
        let mut groups = Vec::new();
        let mut leaves = Vec::new();
        for r in &schema.roots {
            if r.is_leaf() {
                leaves.push(r.name.as_str());
            } else if r.repeatable {
                groups.push(format!("each {} entry", r.name));
            } else {
                groups.push(format!("the {} group", r.name));
            }
        }
        let mut entity_rules = String::from("Linked and hierarchical entity rules:\n");
        if !groups.is_empty() {
            entity_rules.push_str(&format!(
                "- Keep all words of {} together, including nested entries and the labels of its values.\n",
                groups.join(", ")
            ));
        }
        if !leaves.is_empty() {
            entity_rules.push_str(&format!(
                "- A label and its value belong together for: {}.\n",
                leaves.join(", ")
            ));
        }
        entity_rules.push_str("- Words that belong to no entity go to others blocks.");
        Self {
            entity_rules,
            verification: "Verification: before answering, check that every word of the input appears exactly once in the answer, that no word was invented, and that every value sits under the right schema entity.".into(),
            formatting_rules: "Formatting rules:\n- Every leaf holds a list of strings copied exactly from the text.\n- Repeated groups are lists of dictionaries; single groups are dictionaries.\n- Leave out entities that are not present.".into(),
            output_spec: "Output: one JSON dictionary using only schema keys, with no text before or after it.".into(),
        }
    }
}

/// One line per token: `text [x0,y0,x1,y1]` in per-mille coordinates.
pub fn bbox_lines<I: IntoIterator<Item = usize>>(doc: &Document, ids: I) -> String {
    ids.into_iter()
        .filter_map(|i| doc.token(i))
        .map(|t| {
            let [a, b, c, d] = t.bbox.per_mille();
            format!("{} [{a},{b},{c},{d}]", t.text)
        })
        .collect::<Vec<_>>()
        .join("\n")
}
