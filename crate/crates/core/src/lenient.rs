//! Recovery of JSON objects from free-form model output.
//!
//! Model replies wrap JSON in code fences, prose, bullet markers and
//! trailing commas, and sometimes break one object across lines. These
//! helpers recover what they can, line by line, and never panic.

use serde_json::Value;

/// Maximum number of continuation lines joined while completing an object
/// that was broken across lines.
const MAX_CONTINUATION: usize = 8;

/// Lines of `raw` with code-fence markers removed.
pub fn unfenced_lines(raw: &str) -> Vec<&str> {
    raw.lines().filter(|l| !l.trim_start().starts_with("```")).collect()
}

fn candidate(line: &str) -> Option<&str> {
    let start = line.find(['{', '['])?;
    let c = line[start..].trim_end();
    Some(c.trim_end_matches(',').trim_end())
}

fn push_objects(v: Value, out: &mut Vec<Value>) {
    match v {
        Value::Object(_) => out.push(v),
        Value::Array(items) => out.extend(items.into_iter().filter(Value::is_object)),
        _ => {}
    }
}

/// Every JSON object found line by line, in encounter order. A line holding
/// a JSON array contributes its object elements.
pub fn json_objects(raw: &str) -> Vec<Value> {
    let lines = unfenced_lines(raw);
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let Some(first) = candidate(lines[i]) else {
            i += 1;
            continue;
        };
        if let Ok(v) = serde_json::from_str::<Value>(first) {
            push_objects(v, &mut out);
            i += 1;
            continue;
        }
        // Try to complete an object broken across lines.
        let mut buf = first.to_string();
        let mut consumed = 1;
        let mut found = None;
        while consumed <= MAX_CONTINUATION && i + consumed < lines.len() {
            let next = lines[i + consumed];
            let t = next.trim_start();
            if t.starts_with('{') {
                break;
            }
            buf.push('\n');
            buf.push_str(next.trim_end());
            consumed += 1;
            let attempt = buf.trim_end().trim_end_matches(',');
            if let Ok(v) = serde_json::from_str::<Value>(attempt) {
                found = Some(v);
                break;
            }
        }
        match found {
            Some(v) => {
                push_objects(v, &mut out);
                i += consumed;
            }
            None => i += 1,
        }
    }
    out
}

/// The first JSON array in `raw`: the whole (unfenced) text if it parses,
/// otherwise the span between the first `[` and the last `]`. An object
/// with an array-valued `"questions"` key is accepted too.
pub fn json_array(raw: &str) -> Option<Vec<Value>> {
    let text = unfenced_lines(raw).join("\n");
    let trimmed = text.trim();
    let parsed = serde_json::from_str::<Value>(trimmed).ok().or_else(|| {
        let start = trimmed.find('[')?;
        let end = trimmed.rfind(']')?;
        if end <= start {
            return None;
        }
        serde_json::from_str::<Value>(&trimmed[start..=end]).ok()
    });
    match parsed? {
        Value::Array(items) => Some(items),
        Value::Object(mut map) => match map.remove("questions") {
            Some(Value::Array(items)) => Some(items),
            _ => None,
        },
        _ => None,
    }
}
