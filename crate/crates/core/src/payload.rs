//! Locating JSON payloads inside free-form model replies.

use serde_json::{Map, Value};

fn first_value_where(raw: &str, open: char, accept: impl Fn(&Value) -> bool) -> Option<Value> {
    for (pos, _) in raw.match_indices(open) {
        let mut stream = serde_json::Deserializer::from_str(&raw[pos..]).into_iter::<Value>();
        if let Some(Ok(value)) = stream.next() {
            if accept(&value) {
                return Some(value);
            }
        }
    }
    None
}

/// First JSON array in `raw` whose elements are all objects or strings.
/// Surrounding prose and code fences are skipped.
pub fn first_array(raw: &str) -> Option<Vec<Value>> {
    first_value_where(raw, '[', |v| {
        v.as_array()
            .is_some_and(|items| items.iter().all(|i| i.is_object() || i.is_string()))
    })
    .and_then(|v| match v {
        Value::Array(items) => Some(items),
        _ => None,
    })
}

/// First JSON object in `raw` that has every key in `keys`.
pub fn first_object_with(raw: &str, keys: &[&str]) -> Option<Map<String, Value>> {
    first_value_where(raw, '{', |v| {
        v.as_object().is_some_and(|o| keys.iter().all(|k| o.contains_key(*k)))
    })
    .and_then(|v| match v {
        Value::Object(map) => Some(map),
        _ => None,
    })
}
