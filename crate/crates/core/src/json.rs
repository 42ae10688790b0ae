//! JSON output helpers. Every JSON file the crate writes has sorted keys.

use serde::Serialize;

use crate::error::Result;

/// Pretty JSON with object keys sorted, terminated by a newline.
pub fn to_pretty_sorted<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's Map is a BTreeMap without the preserve_order feature, so a
    // round-trip through Value sorts every object.
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}
