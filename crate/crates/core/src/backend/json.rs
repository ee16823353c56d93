//! Recovery of a JSON value from free-form model text.

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JsonError {
    #[error("no JSON object or array found")]
    NoJsonFound,
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
}

/// Extracts the first JSON object or array from `text`.
///
/// A fenced code block, when present, is searched first. Otherwise the text
/// is scanned for the first balanced `{...}` or `[...]` span that parses;
/// surrounding prose is ignored. Bare scalars are never returned.
pub fn extract_json(text: &str) -> Result<Value, JsonError> {
    if let Some(fenced) = fenced_block(text) {
        if let Ok(v) = scan(fenced) {
            return Ok(v);
        }
    }
    scan(text)
}

/// Body of the first ``` fence, without its info-string line.
fn fenced_block(text: &str) -> Option<&str> {
    let open = text.find("```")?;
    let after = &text[open + 3..];
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
    let body = &after[body_start..];
    let close = body.find("```").unwrap_or(body.len());
    Some(&body[..close])
}

fn scan(text: &str) -> Result<Value, JsonError> {
    let mut last_err = None;
    let mut saw_open = false;
    for (start, ch) in text.char_indices() {
        if ch != '{' && ch != '[' {
            continue;
        }
        saw_open = true;
        let Some(end) = balanced_end(&text[start..]) else {
            continue;
        };
        let span = &text[start..start + end];
        match serde_json::from_str::<Value>(span) {
            Ok(v) => return Ok(v),
            Err(e) => last_err = Some(e.to_string()),
        }
    }
    if !saw_open {
        return Err(JsonError::NoJsonFound);
    }
    Err(JsonError::MalformedJson(
        last_err.unwrap_or_else(|| "unbalanced brackets".to_string()),
    ))
}

/// Byte length of the balanced span starting at `s[0]`, string-aware.
fn balanced_end(s: &str) -> Option<usize> {
    let mut stack = Vec::new();
    let mut in_str = false;
    let mut escaped = false;
    for (i, ch) in s.char_indices() {
        if in_str {
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '"' => in_str = true,
            '{' => stack.push('}'),
            '[' => stack.push(']'),
            '}' | ']' => {
                if stack.pop() != Some(ch) {
                    return None;
                }
                if stack.is_empty() {
                    return Some(i + ch.len_utf8());
                }
            }
            _ => {}
        }
    }
    None
}
