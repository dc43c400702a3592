//! Trace records: one agent execution as an ordered event list plus
//! flattened scalar metadata.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tokens::approximate_tokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventRole {
    System,
    User,
    Assistant,
    Tool,
    Environment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Message,
    Reasoning,
    ToolCall,
    ToolResult,
    Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub index: usize,
    pub role: EventRole,
    pub kind: EventKind,
    pub content: String,
}

/// Scalar metadata cell. Nested input values are flattened (one level,
/// "." joins) or stringified before they land here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl Scalar {
    pub fn is_null(&self) -> bool {
        matches!(self, Scalar::Null)
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Scalar::Int(v) => Some(*v as f64),
            Scalar::Float(v) => Some(*v),
            _ => None,
        }
    }

    /// Stable display form, used as the category key in value counts.
    pub fn display_key(&self) -> String {
        match self {
            Scalar::Null => "null".to_string(),
            Scalar::Bool(v) => v.to_string(),
            Scalar::Int(v) => v.to_string(),
            Scalar::Float(v) => format!("{v}"),
            Scalar::Str(v) => v.clone(),
        }
    }

    pub fn from_json(value: &serde_json::Value) -> Option<Scalar> {
        match value {
            serde_json::Value::Null => Some(Scalar::Null),
            serde_json::Value::Bool(b) => Some(Scalar::Bool(*b)),
            serde_json::Value::Number(n) => {
                if let Some(i) = n.as_i64() {
                    Some(Scalar::Int(i))
                } else {
                    n.as_f64().map(Scalar::Float)
                }
            }
            serde_json::Value::String(s) => Some(Scalar::Str(s.clone())),
            _ => None,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Scalar::Null => serde_json::Value::Null,
            Scalar::Bool(b) => serde_json::Value::Bool(*b),
            Scalar::Int(i) => serde_json::json!(i),
            Scalar::Float(f) => serde_json::json!(f),
            Scalar::Str(s) => serde_json::Value::String(s.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub original_id: String,
    pub short_id: String,
    pub events: Vec<TraceEvent>,
    pub metadata: BTreeMap<String, Scalar>,
    pub token_count: usize,
}

impl TraceRecord {
    /// Full rendered content: event contents joined with a newline.
    /// Chunking operates on this rendering, so concatenating all chunks
    /// of an oversized trace reproduces it byte-for-byte.
    pub fn full_text(&self) -> String {
        let mut out = String::new();
        for (i, ev) in self.events.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&ev.content);
        }
        out
    }

    pub fn compute_token_count(&self) -> usize {
        approximate_tokens(&self.full_text())
    }

    /// Rendered char spans per event. Each span except the last includes
    /// its trailing separator, so the spans partition the full text.
    pub fn event_char_spans(&self) -> Vec<(usize, usize)> {
        let mut spans = Vec::with_capacity(self.events.len());
        let mut pos = 0usize;
        let last = self.events.len().saturating_sub(1);
        for (i, ev) in self.events.iter().enumerate() {
            let mut len = ev.content.chars().count();
            if i < last {
                len += 1; // separator belongs to the preceding event
            }
            spans.push((pos, pos + len));
            pos += len;
        }
        spans
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(contents: &[&str]) -> TraceRecord {
        TraceRecord {
            original_id: "run-1".into(),
            short_id: "t1".into(),
            events: contents
                .iter()
                .enumerate()
                .map(|(i, c)| TraceEvent {
                    index: i,
                    role: EventRole::Assistant,
                    kind: EventKind::Message,
                    content: (*c).to_string(),
                })
                .collect(),
            metadata: BTreeMap::new(),
            token_count: 1,
        }
    }

    #[test]
    fn full_text_joins_with_newline() {
        assert_eq!(trace(&["a", "b", "c"]).full_text(), "a\nb\nc");
    }

    #[test]
    fn event_spans_partition_full_text() {
        let t = trace(&["hello", "", "worlds"]);
        let text = t.full_text();
        let total_chars = text.chars().count();
        let spans = t.event_char_spans();
        assert_eq!(spans.first().unwrap().0, 0);
        assert_eq!(spans.last().unwrap().1, total_chars);
        for w in spans.windows(2) {
            assert_eq!(w[0].1, w[1].0);
        }
    }

    #[test]
    fn scalar_json_round_trip() {
        for v in [
            Scalar::Null,
            Scalar::Bool(true),
            Scalar::Int(-3),
            Scalar::Float(0.5),
            Scalar::Str("x".into()),
        ] {
            assert_eq!(Scalar::from_json(&v.to_json()), Some(v));
        }
    }
}
