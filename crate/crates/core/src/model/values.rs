//! Schema instantiations and the restriction / merge algebra over them.
//!
//! Values are stored schema-independently so that malformed model output can
//! be represented and reported by [`validate_values`] instead of failing to
//! parse. Leaf values optionally carry the token ids that ground them; values
//! without support are treated as inferred.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use super::{normalize_text, Document, DocumentSchema, ModelError, SchemaNode, Segment};

pub type Record = BTreeMap<String, FieldValue>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafValue {
    pub text: String,
    /// Grounding tokens, including key words such as "SUB TOTAL". `None`
    /// marks an inferred value with no source tokens.
    pub support: Option<BTreeSet<usize>>,
}

impl LeafValue {
    pub fn inferred(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            support: None,
        }
    }

    pub fn supported<I: IntoIterator<Item = usize>>(text: impl Into<String>, ids: I) -> Self {
        let ids: BTreeSet<usize> = ids.into_iter().collect();
        Self {
            text: text.into(),
            support: if ids.is_empty() { None } else { Some(ids) },
        }
    }

    pub fn is_inferred(&self) -> bool {
        self.support.as_ref().is_none_or(BTreeSet::is_empty)
    }

    fn same_as(&self, other: &LeafValue) -> bool {
        self.support == other.support && normalize_text(&self.text) == normalize_text(&other.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldValue {
    Leaf(Vec<LeafValue>),
    Group(Vec<Record>),
}

impl FieldValue {
    fn is_empty(&self) -> bool {
        match self {
            FieldValue::Leaf(v) => v.is_empty(),
            FieldValue::Group(v) => v.is_empty(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DocumentValues {
    pub fields: Record,
}

fn prune_record(rec: &mut Record) {
    for fv in rec.values_mut() {
        match fv {
            FieldValue::Leaf(vals) => vals.retain(|v| !v.text.trim().is_empty()),
            FieldValue::Group(recs) => {
                recs.iter_mut().for_each(prune_record);
                recs.retain(|r| !r.is_empty());
            }
        }
    }
    rec.retain(|_, fv| !fv.is_empty());
}

fn record_support(rec: &Record, out: &mut BTreeSet<usize>) {
    for fv in rec.values() {
        match fv {
            FieldValue::Leaf(vals) => {
                for v in vals {
                    if let Some(s) = &v.support {
                        out.extend(s.iter().copied());
                    }
                }
            }
            FieldValue::Group(recs) => recs.iter().for_each(|r| record_support(r, out)),
        }
    }
}

/// Text normalized; support kept or dropped.
fn canonical_record(rec: &Record, keep_support: bool) -> Record {
    let mut out = Record::new();
    for (k, fv) in rec {
        let v = match fv {
            FieldValue::Leaf(vals) => FieldValue::Leaf(
                vals.iter()
                    .map(|l| LeafValue {
                        text: normalize_text(&l.text),
                        support: if keep_support { l.support.clone() } else { None },
                    })
                    .collect(),
            ),
            FieldValue::Group(recs) => {
                FieldValue::Group(recs.iter().map(|r| canonical_record(r, keep_support)).collect())
            }
        };
        out.insert(k.clone(), v);
    }
    prune_record(&mut out);
    out
}

impl DocumentValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_record(mut fields: Record) -> Self {
        prune_record(&mut fields);
        Self { fields }
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// Every token id supporting any value.
    pub fn support(&self) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        record_support(&self.fields, &mut out);
        out
    }

    /// Copy with normalized text and no token support; two values are equal
    /// in content iff their `normalized()` forms are equal.
    pub fn normalized(&self) -> DocumentValues {
        DocumentValues {
            fields: canonical_record(&self.fields, false),
        }
    }

    pub fn content_eq(&self, other: &DocumentValues) -> bool {
        self.normalized() == other.normalized()
    }

    /// Drops token support from every leaf.
    pub fn without_support(&self) -> DocumentValues {
        fn strip(rec: &Record) -> Record {
            rec.iter()
                .map(|(k, fv)| {
                    let v = match fv {
                        FieldValue::Leaf(vals) => FieldValue::Leaf(
                            vals.iter().map(|l| LeafValue::inferred(l.text.clone())).collect(),
                        ),
                        FieldValue::Group(recs) => FieldValue::Group(recs.iter().map(strip).collect()),
                    };
                    (k.clone(), v)
                })
                .collect()
        }
        DocumentValues {
            fields: strip(&self.fields),
        }
    }

    pub fn from_json(value: &Value) -> Result<Self, ModelError> {
        let mut warnings = Vec::new();
        let obj = value.as_object().ok_or_else(|| ModelError::MalformedValues {
            path: "<root>".into(),
            reason: "expected an object".into(),
        })?;
        let fields = parse_record(obj, "", false, &mut warnings)?;
        Ok(Self::from_record(fields))
    }

    /// Best-effort parse of model output: malformed entries are skipped and
    /// reported instead of failing the whole value.
    pub fn from_json_lenient(value: &Value) -> (Self, Vec<String>) {
        let mut warnings = Vec::new();
        let Some(obj) = value.as_object() else {
            warnings.push("values are not an object".to_string());
            return (Self::new(), warnings);
        };
        let fields = parse_record(obj, "", true, &mut warnings).unwrap_or_default();
        (Self::from_record(fields), warnings)
    }

    /// JSON form. With a schema, non-repeatable groups render as objects;
    /// without one every group renders as a list of objects.
    pub fn to_json(&self, schema: Option<&DocumentSchema>, with_support: bool) -> Value {
        record_to_json(&self.fields, schema.map(|s| s.roots.as_slice()), with_support)
    }
}

impl fmt::Display for DocumentValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_json(None, false))
    }
}

impl Serialize for DocumentValues {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_json(None, true).serialize(s)
    }
}

impl<'de> Deserialize<'de> for DocumentValues {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        DocumentValues::from_json(&v).map_err(serde::de::Error::custom)
    }
}

fn join_path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn is_leaf_item(o: &Map<String, Value>) -> bool {
    matches!(o.get("value"), Some(Value::String(_)) | Some(Value::Number(_)))
        && o.keys().all(|k| k == "value" || k == "support")
}

fn scalar_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn parse_leaf_item(o: &Map<String, Value>, path: &str) -> Result<LeafValue, ModelError> {
    let text = scalar_text(&o["value"]).unwrap_or_default();
    let support = match o.get("support") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(ids)) => ids
            .iter()
            .map(|id| {
                id.as_u64().map(|n| n as usize).ok_or_else(|| ModelError::MalformedValues {
                    path: path.to_string(),
                    reason: format!("support id {id} is not a non-negative integer"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?,
        Some(other) => {
            return Err(ModelError::MalformedValues {
                path: path.to_string(),
                reason: format!("support must be a list, got {other}"),
            })
        }
    };
    Ok(LeafValue::supported(text, support))
}

enum Item {
    Leaf(LeafValue),
    Record(Record),
}

fn parse_item(v: &Value, path: &str, lenient: bool, warnings: &mut Vec<String>) -> Result<Option<Item>, ModelError> {
    match v {
        Value::Null => Ok(None),
        Value::Object(o) if is_leaf_item(o) => Ok(Some(Item::Leaf(parse_leaf_item(o, path)?))),
        Value::Object(o) => Ok(Some(Item::Record(parse_record(o, path, lenient, warnings)?))),
        Value::Array(_) => {
            let reason = "nested lists are not allowed".to_string();
            if lenient {
                warnings.push(format!("{path}: {reason}"));
                Ok(None)
            } else {
                Err(ModelError::MalformedValues {
                    path: path.to_string(),
                    reason,
                })
            }
        }
        scalar => Ok(scalar_text(scalar).map(|t| Item::Leaf(LeafValue::inferred(t)))),
    }
}

fn parse_field(
    v: &Value,
    path: &str,
    lenient: bool,
    warnings: &mut Vec<String>,
) -> Result<Option<FieldValue>, ModelError> {
    let elements: Vec<&Value> = match v {
        Value::Array(a) => a.iter().collect(),
        other => vec![other],
    };
    let mut leaves = Vec::new();
    let mut records = Vec::new();
    for (i, e) in elements.into_iter().enumerate() {
        match parse_item(e, &format!("{path}[{i}]"), lenient, warnings)? {
            Some(Item::Leaf(l)) => leaves.push(l),
            Some(Item::Record(r)) => records.push(r),
            None => {}
        }
    }
    match (leaves.is_empty(), records.is_empty()) {
        (true, true) => Ok(None),
        (false, true) => Ok(Some(FieldValue::Leaf(leaves))),
        (true, false) => Ok(Some(FieldValue::Group(records))),
        (false, false) => {
            let reason = "mixes strings and objects".to_string();
            if lenient {
                warnings.push(format!("{path}: {reason}; keeping the objects"));
                Ok(Some(FieldValue::Group(records)))
            } else {
                Err(ModelError::MalformedValues {
                    path: path.to_string(),
                    reason,
                })
            }
        }
    }
}

fn parse_record(
    obj: &Map<String, Value>,
    prefix: &str,
    lenient: bool,
    warnings: &mut Vec<String>,
) -> Result<Record, ModelError> {
    let mut rec = Record::new();
    for (k, v) in obj {
        let path = join_path(prefix, k);
        if let Some(fv) = parse_field(v, &path, lenient, warnings)? {
            rec.insert(k.clone(), fv);
        }
    }
    Ok(rec)
}

fn record_to_json(rec: &Record, nodes: Option<&[SchemaNode]>, with_support: bool) -> Value {
    let mut obj = Map::new();
    for (k, fv) in rec {
        let node = nodes.and_then(|ns| ns.iter().find(|n| &n.name == k));
        let v = match fv {
            FieldValue::Leaf(vals) => Value::Array(
                vals.iter()
                    .map(|l| match (&l.support, with_support) {
                        (Some(s), true) if !s.is_empty() => {
                            serde_json::json!({"value": l.text, "support": s})
                        }
                        _ => Value::String(l.text.clone()),
                    })
                    .collect(),
            ),
            FieldValue::Group(recs) => {
                let children = node.map(|n| n.children.as_slice());
                let items: Vec<Value> =
                    recs.iter().map(|r| record_to_json(r, children, with_support)).collect();
                match node {
                    Some(n) if !n.repeatable && items.len() == 1 => items.into_iter().next().unwrap(),
                    _ => Value::Array(items),
                }
            }
        };
        obj.insert(k.clone(), v);
    }
    Value::Object(obj)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    UnknownPath,
    MultipleInstances,
    ExpectedLeaf,
    ExpectedGroup,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::UnknownPath => "unknown path",
            ViolationKind::MultipleInstances => "non-repeatable group with more than one instance",
            ViolationKind::ExpectedLeaf => "group given where the schema has a leaf",
            ViolationKind::ExpectedGroup => "strings given where the schema has a group",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.kind)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Walks `rec` against `nodes`, recording violations and returning the
/// subset of `rec` that conforms.
fn check_record(rec: &Record, nodes: &[SchemaNode], prefix: &str, out: &mut Vec<Violation>) -> Record {
    let mut kept = Record::new();
    for (name, fv) in rec {
        let path = join_path(prefix, name);
        let Some(node) = nodes.iter().find(|n| &n.name == name) else {
            out.push(Violation {
                path,
                kind: ViolationKind::UnknownPath,
            });
            continue;
        };
        match (node.is_leaf(), fv) {
            (true, FieldValue::Leaf(_)) => {
                kept.insert(name.clone(), fv.clone());
            }
            (true, FieldValue::Group(_)) => out.push(Violation {
                path,
                kind: ViolationKind::ExpectedLeaf,
            }),
            (false, FieldValue::Leaf(_)) => out.push(Violation {
                path,
                kind: ViolationKind::ExpectedGroup,
            }),
            (false, FieldValue::Group(recs)) => {
                let mut instances: &[Record] = recs;
                if !node.repeatable && recs.len() > 1 {
                    out.push(Violation {
                        path: path.clone(),
                        kind: ViolationKind::MultipleInstances,
                    });
                    instances = &recs[..1];
                }
                let children: Vec<Record> = instances
                    .iter()
                    .enumerate()
                    .map(|(i, r)| {
                        let at = if node.repeatable { format!("{path}[{i}]") } else { path.clone() };
                        check_record(r, &node.children, &at, out)
                    })
                    .collect();
                kept.insert(name.clone(), FieldValue::Group(children));
            }
        }
    }
    kept
}

pub fn validate_values(schema: &DocumentSchema, values: &DocumentValues) -> ValidationReport {
    let mut violations = Vec::new();
    check_record(&values.fields, &schema.roots, "", &mut violations);
    ValidationReport { violations }
}

/// Drops every violating path (keeping the first instance of an over-full
/// non-repeatable group) and reports what was dropped.
pub fn retain_valid(schema: &DocumentSchema, values: &DocumentValues) -> (DocumentValues, ValidationReport) {
    let mut violations = Vec::new();
    let kept = check_record(&values.fields, &schema.roots, "", &mut violations);
    (DocumentValues::from_record(kept), ValidationReport { violations })
}

fn restrict_record(rec: &Record, segment: &Segment, whole: bool) -> Record {
    let mut out = Record::new();
    for (k, fv) in rec {
        let v = match fv {
            FieldValue::Leaf(vals) => FieldValue::Leaf(
                vals.iter()
                    .filter(|l| match &l.support {
                        Some(s) if !s.is_empty() => segment.contains_all(s),
                        _ => whole,
                    })
                    .cloned()
                    .collect(),
            ),
            FieldValue::Group(recs) => {
                FieldValue::Group(recs.iter().map(|r| restrict_record(r, segment, whole)).collect())
            }
        };
        out.insert(k.clone(), v);
    }
    prune_record(&mut out);
    out
}

/// Values grounded entirely inside `segment`; everything else is blank.
/// Inferred values survive only a whole-document segment.
pub fn restrict_values(
    doc: &Document,
    values: &DocumentValues,
    segment: &Segment,
) -> Result<DocumentValues, ModelError> {
    doc.check_segment(segment)?;
    Ok(DocumentValues {
        fields: restrict_record(&values.fields, segment, doc.is_whole(segment)),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeConflict {
    pub path: String,
    pub kept: Vec<String>,
    pub dropped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MergeOutcome {
    pub values: DocumentValues,
    pub conflicts: Vec<MergeConflict>,
}

fn merge_into(acc: &mut Record, part: &Record, nodes: &[SchemaNode], prefix: &str, conflicts: &mut Vec<MergeConflict>) {
    for node in nodes {
        let Some(fv) = part.get(&node.name) else { continue };
        let path = join_path(prefix, &node.name);
        match (node.is_leaf(), fv) {
            (true, FieldValue::Leaf(vals)) if !vals.is_empty() => {
                let slot = acc
                    .entry(node.name.clone())
                    .or_insert_with(|| FieldValue::Leaf(Vec::new()));
                let FieldValue::Leaf(kept) = slot else { continue };
                if node.repeatable {
                    for v in vals {
                        if !kept.iter().any(|k| k.same_as(v)) {
                            kept.push(v.clone());
                        }
                    }
                } else if kept.is_empty() {
                    kept.extend(vals.iter().cloned());
                } else {
                    let texts = |vs: &[LeafValue]| vs.iter().map(|v| normalize_text(&v.text)).collect::<Vec<_>>();
                    let (k, d) = (texts(kept), texts(vals));
                    if k != d {
                        conflicts.push(MergeConflict {
                            path,
                            kept: k,
                            dropped: d,
                        });
                    }
                }
            }
            (false, FieldValue::Group(recs)) if !recs.is_empty() => {
                let slot = acc
                    .entry(node.name.clone())
                    .or_insert_with(|| FieldValue::Group(Vec::new()));
                let FieldValue::Group(kept) = slot else { continue };
                if node.repeatable {
                    for r in recs {
                        let canon = canonical_record(r, true);
                        if !kept.iter().any(|k| canonical_record(k, true) == canon) {
                            kept.push(r.clone());
                        }
                    }
                } else {
                    if kept.is_empty() {
                        kept.push(Record::new());
                    }
                    for r in recs {
                        merge_into(&mut kept[0], r, &node.children, &path, conflicts);
                    }
                }
            }
            _ => {}
        }
    }
}

/// Deterministic union of partial values in part order. Non-repeatable
/// leaves are first-wins, with differing later values reported as conflicts.
pub fn merge_values(parts: &[DocumentValues], schema: &DocumentSchema) -> MergeOutcome {
    let mut acc = Record::new();
    let mut conflicts = Vec::new();
    for p in parts {
        merge_into(&mut acc, &p.fields, &schema.roots, "", &mut conflicts);
    }
    MergeOutcome {
        values: DocumentValues::from_record(acc),
        conflicts,
    }
}

fn diff_record(a: &Record, b: &Record, prefix: &str) -> Option<String> {
    let keys: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    for k in keys {
        let path = join_path(prefix, k);
        match (a.get(k), b.get(k)) {
            (Some(FieldValue::Leaf(x)), Some(FieldValue::Leaf(y))) => {
                if x != y {
                    return Some(path);
                }
            }
            (Some(FieldValue::Group(x)), Some(FieldValue::Group(y))) => {
                if x.len() != y.len() {
                    return Some(path);
                }
                for (i, (rx, ry)) in x.iter().zip(y).enumerate() {
                    if let Some(p) = diff_record(rx, ry, &format!("{path}[{i}]")) {
                        return Some(p);
                    }
                }
            }
            _ => return Some(path),
        }
    }
    None
}

/// First path at which two values differ in normalized content.
pub fn first_difference(a: &DocumentValues, b: &DocumentValues) -> Option<String> {
    diff_record(&a.normalized().fields, &b.normalized().fields, "")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoundingBox, SchemaNode};
    use serde_json::json;

    pub(crate) fn cord_like() -> DocumentSchema {
        DocumentSchema::new(
            "cord-mini",
            "",
            vec![
                SchemaNode::group(
                    "menu",
                    true,
                    "",
                    vec![
                        SchemaNode::leaf("nm", ""),
                        SchemaNode::leaf("price", ""),
                        SchemaNode::group("sub", true, "", vec![SchemaNode::leaf("nm", ""), SchemaNode::leaf("price", "")]),
                    ],
                ),
                SchemaNode::group("subtotal", false, "", vec![SchemaNode::leaf("subtotal_price", "")]),
                SchemaNode::group("total", false, "", vec![SchemaNode::leaf("total_price", "")]),
                SchemaNode {
                    repeatable: true,
                    ..SchemaNode::leaf("a", "")
                },
                SchemaNode::leaf("b", ""),
            ],
        )
        .unwrap()
    }

    fn v(j: Value) -> DocumentValues {
        DocumentValues::from_json(&j).unwrap()
    }

    fn doc(words: &[&str]) -> Document {
        let b = BoundingBox::new(0.0, 0.0, 0.1, 0.1).unwrap();
        Document::from_words("d", words.iter().map(|w| (w.to_string(), b, 0)), "synthetic").unwrap()
    }

    #[test]
    fn validation_accepts_values_and_reports_unknown_paths() {
        let s = cord_like();
        assert!(validate_values(&s, &v(json!({"total": {"total_price": ["28.000"]}}))).is_valid());
        assert!(validate_values(&s, &DocumentValues::new()).is_valid());
        let r = validate_values(&s, &v(json!({"foo": ["x"]})));
        assert_eq!(r.violations, vec![Violation { path: "foo".into(), kind: ViolationKind::UnknownPath }]);
        assert_eq!(r.violations[0].kind.to_string(), "unknown path");
        let r = validate_values(&s, &v(json!({"total": [{"total_price": ["1"]}, {"total_price": ["2"]}]})));
        assert_eq!(r.violations[0].kind, ViolationKind::MultipleInstances);
        let r = validate_values(&s, &v(json!({"menu": ["x"], "b": {"c": ["1"]}})));
        let kinds: Vec<_> = r.violations.iter().map(|x| x.kind).collect();
        assert_eq!(kinds, [ViolationKind::ExpectedLeaf, ViolationKind::ExpectedGroup]);
    }

    #[test]
    fn retain_valid_drops_only_violations() {
        let s = cord_like();
        let (kept, report) = retain_valid(
            &s,
            &v(json!({"foo": ["x"], "menu": [{"nm": ["A"], "bogus": ["q"]}], "total": [{"total_price": ["1"]}, {"total_price": ["2"]}]})),
        );
        assert_eq!(report.violations.len(), 3);
        assert_eq!(kept, v(json!({"menu": [{"nm": ["A"]}], "total": {"total_price": ["1"]}})));
    }

    #[test]
    fn json_round_trip_keeps_support_and_schema_shape() {
        let s = cord_like();
        let src = json!({
            "menu": [{"nm": [{"value": "JASMINE MT (L)", "support": [1, 2, 3]}], "price": ["24.000"]}],
            "total": {"total_price": [{"value": "28.000", "support": [9]}]}
        });
        let vals = v(src.clone());
        assert_eq!(vals.to_json(Some(&s), true), src);
        let plain = serde_json::to_string(&vals).unwrap();
        assert_eq!(serde_json::from_str::<DocumentValues>(&plain).unwrap(), vals);
        assert_eq!(
            vals.to_json(Some(&s), false),
            json!({"menu": [{"nm": ["JASMINE MT (L)"], "price": ["24.000"]}], "total": {"total_price": ["28.000"]}})
        );
    }

    #[test]
    fn parsing_prunes_blanks_and_accepts_scalars() {
        let vals = v(json!({"a": [], "b": "x", "menu": [{"nm": [""]}], "total": {"total_price": 28}}));
        assert_eq!(vals, v(json!({"b": ["x"], "total": [{"total_price": ["28"]}]})));
        assert!(DocumentValues::from_json(&json!({"a": ["x", {"nm": ["y"]}]})).is_err());
        let (lenient, warnings) = DocumentValues::from_json_lenient(&json!({"a": ["x", {"nm": ["y"]}], "b": [["z"]]}));
        assert_eq!(warnings.len(), 2);
        assert_eq!(lenient, v(json!({"a": [{"nm": ["y"]}]})));
    }

    #[test]
    fn restriction_keeps_only_grounded_values() {
        let d = doc(&["SUB", "TOTAL", "28.000", "TOTAL", "SALE", "28.000"]);
        let full = v(json!({
            "subtotal": {"subtotal_price": [{"value": "28.000", "support": [0, 1, 2]}]},
            "total": {"total_price": [{"value": "28.000", "support": [3, 4, 5]}]},
            "b": ["inferred"]
        }));
        let b1 = restrict_values(&d, &full, &d.segment([0, 1, 2])).unwrap();
        assert!(b1.content_eq(&v(json!({"subtotal": {"subtotal_price": ["28.000"]}}))));
        assert_eq!(restrict_values(&d, &full, &d.whole_segment()).unwrap(), full);
        assert!(restrict_values(&d, &full, &d.segment([1])).unwrap().is_empty());
        assert!(matches!(
            restrict_values(&d, &full, &d.segment([6])),
            Err(ModelError::ForeignSegment(_))
        ));
    }

    #[test]
    fn merge_unions_parts_and_flags_conflicts() {
        let s = cord_like();
        let sub = v(json!({"subtotal": {"subtotal_price": ["28.000"]}}));
        let tot = v(json!({"total": {"total_price": ["28.000"]}}));
        let m = merge_values(&[sub.clone(), tot.clone()], &s);
        assert_eq!(m.values, v(json!({"subtotal": {"subtotal_price": ["28.000"]}, "total": {"total_price": ["28.000"]}})));
        assert_eq!(merge_values(&[sub.clone(), DocumentValues::new()], &s).values, sub);

        let a = v(json!({"a": ["1"]}));
        assert_eq!(merge_values(&[a.clone(), a.clone()], &s).values, a);

        let m = merge_values(&[v(json!({"b": ["x"]})), v(json!({"b": ["y"]}))], &s);
        assert_eq!(m.values, v(json!({"b": ["x"]})));
        assert_eq!(m.conflicts, vec![MergeConflict { path: "b".into(), kept: vec!["x".into()], dropped: vec!["y".into()] }]);

        let item = json!({"nm": ["A"], "price": ["1"]});
        let m = merge_values(&[v(json!({"menu": [item.clone()]})), v(json!({"menu": [item.clone(), {"nm": ["B"]}]}))], &s);
        assert_eq!(m.values, v(json!({"menu": [item, {"nm": ["B"]}]})));
    }

    #[test]
    fn merge_matches_brute_force_dedup_on_small_cases() {
        // Every sequence of up to three parts drawn from a small value pool:
        // the merged repeatable leaf must equal order-preserving dedup of the
        // concatenation.
        let s = cord_like();
        let pool = [vec![], vec!["1"], vec!["2"], vec!["1", "2"], vec!["2", "1"], vec!["1", " 1 "]];
        for a in &pool {
            for b in &pool {
                for c in &pool {
                    let parts: Vec<DocumentValues> =
                        [a, b, c].iter().map(|p| v(json!({ "a": p }))).collect();
                    let mut expected: Vec<String> = Vec::new();
                    for p in [a, b, c] {
                        for x in p.iter() {
                            let n = normalize_text(x);
                            if !expected.contains(&n) {
                                expected.push(n);
                            }
                        }
                    }
                    let got = merge_values(&parts, &s).values.normalized();
                    assert_eq!(got, v(json!({ "a": expected })).normalized(), "{a:?} {b:?} {c:?}");
                }
            }
        }
    }

    #[test]
    fn first_difference_names_the_path() {
        let a = v(json!({"menu": [{"nm": ["A"]}, {"nm": ["B"]}]}));
        let b = v(json!({"menu": [{"nm": ["A"]}, {"nm": ["C"]}]}));
        assert_eq!(first_difference(&a, &b).as_deref(), Some("menu[1].nm"));
        assert_eq!(first_difference(&a, &a), None);
        let ws = v(json!({"menu": [{"nm": ["A "]}, {"nm": ["  B"]}]}));
        assert_eq!(first_difference(&a, &ws), None);
    }
}
