//! Published summary schemas and a validator for the JSON Schema subset they use:
//! `type`, `enum`, `const`, `minimum`, `properties`, `required`, `additionalProperties`,
//! `items` and `anyOf`.

use serde_json::Value;

use crate::pipeline::Command;

pub fn schema_text(cmd: Command) -> &'static str {
    match cmd {
        Command::Generate => include_str!("../schemas/generate.schema.json"),
        Command::Capture => include_str!("../schemas/capture.schema.json"),
        Command::Train => include_str!("../schemas/train.schema.json"),
        Command::Eval => include_str!("../schemas/eval.schema.json"),
        Command::Heads => include_str!("../schemas/heads.schema.json"),
        Command::Knockout => include_str!("../schemas/knockout.schema.json"),
        Command::Export => include_str!("../schemas/export.schema.json"),
    }
}

pub fn schema(cmd: Command) -> Value {
    serde_json::from_str(schema_text(cmd)).expect("bundled schema is valid JSON")
}

fn type_matches(t: &str, v: &Value) -> bool {
    match t {
        "null" => v.is_null(),
        "boolean" => v.is_boolean(),
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "number" => v.is_number(),
        "integer" => v.is_u64() || v.is_i64() || v.as_f64().is_some_and(|f| f.fract() == 0.0),
        _ => false,
    }
}

/// Every violation found, as `path: message`.
pub fn validate(schema: &Value, value: &Value) -> Vec<String> {
    let mut errors = Vec::new();
    check(schema, value, "$", &mut errors);
    errors
}

fn check(schema: &Value, v: &Value, path: &str, errors: &mut Vec<String>) {
    let Some(s) = schema.as_object() else { return };
    if let Some(t) = s.get("type") {
        let ok = match t {
            Value::String(t) => type_matches(t, v),
            Value::Array(ts) => ts.iter().filter_map(Value::as_str).any(|t| type_matches(t, v)),
            _ => true,
        };
        if !ok {
            errors.push(format!("{path}: expected type {t}, found {v}"));
            return;
        }
    }
    if let Some(Value::Array(options)) = s.get("enum") {
        if !options.contains(v) {
            errors.push(format!("{path}: {v} not in {options:?}"));
        }
    }
    if let Some(c) = s.get("const") {
        if c != v {
            errors.push(format!("{path}: expected {c}, found {v}"));
        }
    }
    if let (Some(min), Some(x)) = (s.get("minimum").and_then(Value::as_f64), v.as_f64()) {
        if x < min {
            errors.push(format!("{path}: {x} below minimum {min}"));
        }
    }
    if let Some(Value::Array(options)) = s.get("anyOf") {
        if !options.iter().any(|o| validate(o, v).is_empty()) {
            errors.push(format!("{path}: matches no alternative"));
        }
    }
    if let Some(obj) = v.as_object() {
        let props = s.get("properties").and_then(Value::as_object);
        if let Some(Value::Array(req)) = s.get("required") {
            for r in req.iter().filter_map(Value::as_str) {
                if !obj.contains_key(r) {
                    errors.push(format!("{path}: missing required property '{r}'"));
                }
            }
        }
        for (k, val) in obj {
            let sub = format!("{path}.{k}");
            match props.and_then(|p| p.get(k)) {
                Some(ps) => check(ps, val, &sub, errors),
                None => match s.get("additionalProperties") {
                    Some(Value::Bool(false)) => errors.push(format!("{path}: unexpected property '{k}'")),
                    Some(extra @ Value::Object(_)) => check(extra, val, &sub, errors),
                    _ => {}
                },
            }
        }
    }
    if let (Some(items), Some(arr)) = (s.get("items"), v.as_array()) {
        for (i, item) in arr.iter().enumerate() {
            check(items, item, &format!("{path}[{i}]"), errors);
        }
    }
}
