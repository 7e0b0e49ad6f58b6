//! Recovery of a JSON object from free-form model output.

use serde_json::Value;

use super::GatewayError;

/// Byte span of the balanced `{...}` starting at `start`, skipping braces
/// inside string literals.
fn balanced_end(s: &str, start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in s[start..].char_indices() {
        if in_str {
            match (escaped, c) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Drops commas that directly precede `}` or `]` outside strings.
fn strip_trailing_commas(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    let mut in_str = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_str {
            out.push(c);
            match (escaped, c) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_str = false,
                _ => {}
            }
            continue;
        }
        if c == '"' {
            in_str = true;
        }
        if c == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

fn first_object(s: &str) -> Option<Value> {
    let mut from = 0;
    while let Some(off) = s[from..].find('{') {
        let start = from + off;
        if let Some(end) = balanced_end(s, start) {
            let candidate = &s[start..end];
            let parsed = serde_json::from_str::<Value>(candidate)
                .or_else(|_| serde_json::from_str::<Value>(&strip_trailing_commas(candidate)));
            if let Ok(v @ Value::Object(_)) = parsed {
                return Some(v);
            }
        }
        from = start + 1;
    }
    None
}

/// Contents of fenced code blocks, in order.
fn fenced(raw: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = raw;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let body_start = after.find('\n').map_or(0, |i| i + 1);
        let Some(close) = after[body_start..].find("```") else { break };
        out.push(&after[body_start..body_start + close]);
        rest = &after[body_start + close + 3..];
    }
    out
}

/// The first balanced, parseable top-level object in `raw`, looking inside
/// code fences first.
pub fn extract_structured(raw: &str) -> Result<Value, GatewayError> {
    fenced(raw)
        .into_iter()
        .chain(std::iter::once(raw))
        .find_map(first_object)
        .ok_or_else(|| GatewayError::Unstructured(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    #[test]
    fn strips_fences_and_prose() {
        let raw = "Here you go:\n```json\n{\"block_1\": {\"reason\": \"r\", \"text\": \"SUB TOTAL 28.000\"}}\n```\nDone.";
        assert_eq!(
            extract_structured(raw).unwrap(),
            json!({"block_1": {"reason": "r", "text": "SUB TOTAL 28.000"}})
        );
    }

    #[test]
    fn repairs_trailing_commas() {
        let raw = "Sure! {\"a\": 1,}";
        let v = extract_structured(raw).unwrap();
        // The repaired text must satisfy a strict parser on its own.
        let repaired = strip_trailing_commas("{\"a\": 1,}");
        assert_eq!(repaired, "{\"a\": 1}");
        assert_eq!(serde_json::from_str::<Value>(&repaired).unwrap(), v);
        assert_eq!(v, json!({"a": 1}));
        assert_eq!(extract_structured("{\"a\": [1, 2, ], \"b\": \"x,}\",}").unwrap(), json!({"a": [1, 2], "b": "x,}"}));
    }

    #[test]
    fn braces_inside_strings_do_not_confuse_balancing() {
        let raw = "{\"t\": \"a } b { c\", \"n\": {\"x\": \"\\\"}\"}} trailing }";
        assert_eq!(extract_structured(raw).unwrap(), json!({"t": "a } b { c", "n": {"x": "\"}"}}));
    }

    #[test]
    fn skips_unparseable_candidates() {
        assert_eq!(extract_structured("{not json} then {\"ok\": true}").unwrap(), json!({"ok": true}));
    }

    #[test]
    fn no_object_is_unstructured() {
        let err = extract_structured("no object here").unwrap_err();
        assert!(err.to_string().starts_with("unstructured response"));
        assert!(matches!(err, GatewayError::Unstructured(raw) if raw == "no object here"));
        assert!(extract_structured("[1, 2]").is_err());
    }

    fn json_value() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            Just(Value::Null),
            any::<bool>().prop_map(Value::Bool),
            any::<i32>().prop_map(|n| json!(n)),
            "[a-z{}\\[\\],\" ]{0,8}".prop_map(Value::String),
        ];
        leaf.prop_recursive(3, 24, 4, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
                prop::collection::btree_map("[a-z]{1,4}", inner, 0..4)
                    .prop_map(|m| Value::Object(m.into_iter().collect())),
            ]
        })
    }

    proptest! {
        #[test]
        fn serialized_output_is_a_fixpoint(m in prop::collection::btree_map("[a-z]{1,4}", json_value(), 0..4)) {
            let v = Value::Object(m.into_iter().collect());
            let once = extract_structured(&v.to_string()).unwrap();
            prop_assert_eq!(&once, &v);
            prop_assert_eq!(extract_structured(&once.to_string()).unwrap(), once);
        }
    }
}
