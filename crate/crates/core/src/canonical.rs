//! Canonical text form: UTF-8 JSON with lexicographically sorted object keys
//! and no insignificant whitespace. Every persisted document and every digest
//! over structured data goes through here.

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::digest::sha256_hex;
use crate::error::Result;

/// Writes `value` in canonical form.
pub fn canonical_string(value: &Value) -> String {
    let mut out = String::new();
    write_value(value, &mut out);
    out
}

fn write_value(value: &Value, out: &mut String) {
    match value {
        Value::Null | Value::Bool(_) | Value::Number(_) | Value::String(_) => {
            // Scalars have exactly one compact rendering in serde_json.
            out.push_str(&value.to_string());
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut entries: Vec<(&String, &Value)> = map.iter().collect();
            entries.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
            out.push('{');
            for (i, (key, item)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(key.clone()).to_string());
                out.push(':');
                write_value(item, out);
            }
            out.push('}');
        }
    }
}

/// Serializes any value to canonical bytes.
pub fn to_canonical_vec<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let v = serde_json::to_value(value)?;
    Ok(canonical_string(&v).into_bytes())
}

/// Parses arbitrary JSON bytes and re-emits them canonically.
pub fn canonicalize_bytes(bytes: &[u8]) -> Result<Vec<u8>> {
    let v: Value = serde_json::from_slice(bytes)?;
    Ok(canonical_string(&v).into_bytes())
}

/// SHA-256 over the canonical form of `value`.
/// Deserializes an `Option` field that must be present (possibly `null`).
/// Canonical documents always carry every key.
pub(crate) fn present<'de, D, T>(deserializer: D) -> std::result::Result<Option<T>, D::Error>
where
    D: Deserializer<'de>,
    T: Deserialize<'de>,
{
    Option::<T>::deserialize(deserializer)
}

pub fn canonical_digest<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    Ok(sha256_hex(&to_canonical_vec(value)?))
}
