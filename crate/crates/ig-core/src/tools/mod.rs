//! The analysis tool surface exposed to agents: trace inspection, LLM-
//! driven analysis, and data management, with per-role availability.
//!
//! Agents invoke tools through a structured protocol — one JSON object
//! per turn naming the tool and its arguments (see protocol.md at the
//! repo root). Session state carries named result slots so an agent can
//! save a result ("save_as": "$r1") and reference it in a later call.

pub mod compare;
pub mod extract;
pub mod summarize;

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::RunConfig;
use crate::gateway::{Gateway, GatewayError};
use crate::search::{Embedder, SearchError, SearchIndex, SearchMode};
use crate::store::{StoreError, TraceStore};
use crate::tokens::approximate_tokens;
use crate::trace::Scalar;

pub use compare::{CompareRequest, SegmentComparison, SegmentDifference};
pub use extract::{ExtractOutcome, ExtractionSpec};
pub use summarize::SummaryCache;

#[derive(Debug, Error)]
pub enum ToolError {
    #[error("unknown tool '{0}'")]
    UnknownTool(String),
    #[error("tool '{tool}' is not available to {role}")]
    Forbidden { tool: String, role: AgentRole },
    #[error("bad arguments for '{tool}': {message}")]
    BadArgs { tool: String, message: String },
    #[error("unknown result slot '{0}'")]
    UnknownSlot(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{0}")]
    Handler(String),
}

/// Agent roles gated by the availability matrix. Generic subagents (the
/// untyped-ablation role) get the investigator column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Orchestrator,
    Scout,
    Investigator,
    Generic,
}

impl AgentRole {
    fn availability_column(self) -> AgentRole {
        match self {
            AgentRole::Generic => AgentRole::Investigator,
            other => other,
        }
    }
}

impl std::fmt::Display for AgentRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AgentRole::Orchestrator => "orchestrator",
            AgentRole::Scout => "scout",
            AgentRole::Investigator => "investigator",
            AgentRole::Generic => "generic",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Availability {
    pub orchestrator: bool,
    pub scout: bool,
    pub investigator: bool,
}

impl Availability {
    const ALL: Availability = Availability {
        orchestrator: true,
        scout: true,
        investigator: true,
    };

    fn allows(&self, role: AgentRole) -> bool {
        match role.availability_column() {
            AgentRole::Orchestrator => self.orchestrator,
            AgentRole::Scout => self.scout,
            AgentRole::Investigator => self.investigator,
            AgentRole::Generic => unreachable!("generic maps to investigator"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ToolEntry {
    pub name: &'static str,
    pub description: &'static str,
    /// JSON sketch of the expected arguments.
    pub param_schema: &'static str,
    pub availability: Availability,
}

/// The 14 analysis primitives with their per-role availability grid.
pub const TOOL_TABLE: [ToolEntry; 14] = [
    ToolEntry {
        name: "load_traces",
        description: "Load the corpus + extractions as a column-oriented table",
        param_schema: r#"{"limit": "int?", "columns": ["string"]}"#,
        availability: Availability::ALL,
    },
    ToolEntry {
        name: "get_trace",
        description: "Return full content of one trace; chunk-list outline if oversized",
        param_schema: r#"{"short_id": "string"}"#,
        availability: Availability::ALL,
    },
    ToolEntry {
        name: "get_trace_chunk",
        description: "Retrieve a specific chunk of a long trace",
        param_schema: r#"{"short_id": "string", "chunk_index": "int"}"#,
        availability: Availability::ALL,
    },
    ToolEntry {
        name: "get_schema",
        description: "Per-column metadata: types, null rates, distributions, correlations",
        param_schema: r#"{}"#,
        availability: Availability::ALL,
    },
    ToolEntry {
        name: "search_traces",
        description: "Hybrid semantic-keyword retrieval over trace content",
        param_schema: r#"{"query": "string", "top_k": "int?", "mode": "hybrid|lexical|semantic?"}"#,
        availability: Availability::ALL,
    },
    ToolEntry {
        name: "get_extractions",
        description: "List previously persisted extraction columns and their field definitions",
        param_schema: r#"{}"#,
        availability: Availability::ALL,
    },
    ToolEntry {
        name: "extract",
        description: "Structured feature extraction across traces with chunking, batching, and checkpointing",
        param_schema: r#"{"table_name": "string", "fields": [{"name": "string", "semantic_type": "bool|int|float|category|text", "description": "string"}], "target_short_ids": ["string"]}"#,
        availability: Availability {
            orchestrator: false,
            scout: true,
            investigator: true,
        },
    },
    ToolEntry {
        name: "summarize_trace",
        description: "Per-trace LLM summary with caching and progressive summarization for long traces",
        param_schema: r#"{"short_id": "string"}"#,
        availability: Availability::ALL,
    },
    ToolEntry {
        name: "summarize_group",
        description: "Single LLM summary characterizing a group of traces",
        param_schema: r#"{"short_ids": ["string"]}"#,
        availability: Availability::ALL,
    },
    ToolEntry {
        name: "compare_segments",
        description: "Deep A/B comparison between two cohorts with token budgeting",
        param_schema: r#"{"cohort_a": ["string"] | "label", "cohort_b": ["string"] | "label", "question": "string", "token_budget": "int?"}"#,
        availability: Availability {
            orchestrator: false,
            scout: false,
            investigator: true,
        },
    },
    ToolEntry {
        name: "save_column",
        description: "Persist a computed column as an extraction side-table",
        param_schema: r#"{"name": "string", "values": {"<short_id>": "scalar"}}"#,
        availability: Availability::ALL,
    },
    ToolEntry {
        name: "save_affected_traces",
        description: "Persist a trace-id list as the cohort supporting a finding",
        param_schema: r#"{"label": "string", "short_ids": ["string"]}"#,
        availability: Availability {
            orchestrator: false,
            scout: false,
            investigator: true,
        },
    },
    ToolEntry {
        name: "reload_data",
        description: "Refresh the cached table view after new extractions land",
        param_schema: r#"{}"#,
        availability: Availability::ALL,
    },
    ToolEntry {
        name: "consolidate",
        description: "Merge extraction side-tables into the base store and refresh the schema cache",
        param_schema: r#"{}"#,
        availability: Availability::ALL,
    },
];

pub fn tool_entry(name: &str) -> Option<&'static ToolEntry> {
    TOOL_TABLE.iter().find(|t| t.name == name)
}

/// Everything tool handlers need, shared across one analysis run.
pub struct ToolContext<'a> {
    pub store: &'a TraceStore,
    pub index: &'a SearchIndex,
    pub gateway: &'a Gateway,
    pub config: &'a RunConfig,
    pub embedder: &'a dyn Embedder,
    pub summaries: &'a SummaryCache,
}

/// Per-agent session: named result slots and cohort bookkeeping.
#[derive(Debug, Default)]
pub struct Session {
    pub id: String,
    slots: Mutex<BTreeMap<String, Value>>,
    saved_cohorts: Mutex<Vec<String>>,
}

impl Session {
    pub fn new(id: impl Into<String>) -> Session {
        Session {
            id: id.into(),
            ..Session::default()
        }
    }

    pub fn saved_cohort_labels(&self) -> Vec<String> {
        self.saved_cohorts.lock().expect("session poisoned").clone()
    }

    /// Mark a cohort label as persisted within this session (used when the
    /// engine saves a cohort on the agent's behalf).
    pub fn note_cohort(&self, label: &str) {
        self.record_cohort(label);
    }

    fn record_cohort(&self, label: &str) {
        self.saved_cohorts
            .lock()
            .expect("session poisoned")
            .push(label.to_string());
    }

    fn save_slot(&self, name: &str, value: Value) {
        self.slots
            .lock()
            .expect("session poisoned")
            .insert(name.to_string(), value);
    }

    fn resolve_slots(&self, args: Value) -> Result<Value, ToolError> {
        let slots = self.slots.lock().expect("session poisoned");
        fn walk(value: Value, slots: &BTreeMap<String, Value>) -> Result<Value, ToolError> {
            match value {
                Value::String(s) if s.starts_with('$') => slots
                    .get(&s)
                    .cloned()
                    .ok_or(ToolError::UnknownSlot(s)),
                Value::Array(items) => items
                    .into_iter()
                    .map(|v| walk(v, slots))
                    .collect::<Result<Vec<_>, _>>()
                    .map(Value::Array),
                Value::Object(map) => map
                    .into_iter()
                    .map(|(k, v)| walk(v, slots).map(|v| (k, v)))
                    .collect::<Result<serde_json::Map<_, _>, _>>()
                    .map(Value::Object),
                other => Ok(other),
            }
        }
        walk(args, &slots)
    }
}

/// One parsed tool call from agent output.
#[derive(Debug, Clone, Deserialize)]
pub struct ToolCall {
    pub tool: String,
    #[serde(default)]
    pub args: Value,
    /// Optional slot name ("$r1") the result is stored under.
    #[serde(default)]
    pub save_as: Option<String>,
}

/// Dispatch one tool call for `role`, enforcing the availability matrix.
pub fn invoke_tool(
    ctx: &ToolContext,
    session: &Session,
    role: AgentRole,
    call: &ToolCall,
) -> Result<Value, ToolError> {
    let entry = tool_entry(&call.tool).ok_or_else(|| ToolError::UnknownTool(call.tool.clone()))?;
    if !entry.availability.allows(role) {
        return Err(ToolError::Forbidden {
            tool: call.tool.clone(),
            role,
        });
    }
    let args = session.resolve_slots(call.args.clone())?;
    let result = dispatch(ctx, session, &call.tool, &args)?;
    if let Some(slot) = &call.save_as {
        session.save_slot(slot, result.clone());
    }
    Ok(result)
}

/// Serialize a tool result for context injection, truncating oversized
/// payloads with an explicit marker.
pub fn render_result(value: &Value, cap_tokens: usize) -> String {
    let text = serde_json::to_string_pretty(value).unwrap_or_else(|_| value.to_string());
    let tokens = approximate_tokens(&text);
    if tokens <= cap_tokens {
        return text;
    }
    let keep_chars = cap_tokens * 4;
    let cut = text
        .char_indices()
        .nth(keep_chars)
        .map(|(i, _)| i)
        .unwrap_or(text.len());
    format!(
        "{}\n…[truncated: {} of {} tokens omitted]",
        &text[..cut],
        tokens - cap_tokens,
        tokens
    )
}

fn arg_str(args: &Value, key: &str, tool: &str) -> Result<String, ToolError> {
    args.get(key)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| ToolError::BadArgs {
            tool: tool.to_string(),
            message: format!("missing string field '{key}'"),
        })
}

fn arg_id_list(args: &Value, key: &str, tool: &str) -> Result<Vec<String>, ToolError> {
    args.get(key)
        .and_then(Value::as_array)
        .map(|items| {
            items
                .iter()
                .filter_map(Value::as_str)
                .map(str::to_string)
                .collect::<Vec<_>>()
        })
        .ok_or_else(|| ToolError::BadArgs {
            tool: tool.to_string(),
            message: format!("missing list field '{key}'"),
        })
}

fn dispatch(
    ctx: &ToolContext,
    session: &Session,
    tool: &str,
    args: &Value,
) -> Result<Value, ToolError> {
    match tool {
        "load_traces" => {
            let snap = ctx.store.snapshot();
            let limit = args
                .get("limit")
                .and_then(Value::as_u64)
                .map(|v| v as usize)
                .unwrap_or(100)
                .min(1000);
            let requested: Option<Vec<String>> = args
                .get("columns")
                .and_then(Value::as_array)
                .map(|a| a.iter().filter_map(Value::as_str).map(str::to_string).collect());
            let columns = requested.unwrap_or_else(|| snap.view_column_names());
            let col_values: BTreeMap<String, Vec<Scalar>> = columns
                .iter()
                .map(|c| (c.clone(), snap.column(c)))
                .collect();
            let rows: Vec<Value> = snap
                .traces
                .iter()
                .take(limit)
                .enumerate()
                .map(|(i, t)| {
                    let mut row = serde_json::Map::new();
                    row.insert("short_id".into(), json!(t.short_id));
                    for c in &columns {
                        row.insert(c.clone(), col_values[c][i].to_json());
                    }
                    Value::Object(row)
                })
                .collect();
            Ok(json!({
                "n_rows": snap.len(),
                "returned_rows": rows.len(),
                "columns": columns,
                "rows": rows,
            }))
        }
        "get_trace" => {
            let short_id = arg_str(args, "short_id", tool)?;
            let content = ctx.store.get_trace(&short_id)?;
            Ok(serde_json::to_value(content).expect("serializable"))
        }
        "get_trace_chunk" => {
            let short_id = arg_str(args, "short_id", tool)?;
            let idx = args
                .get("chunk_index")
                .and_then(Value::as_u64)
                .ok_or_else(|| ToolError::BadArgs {
                    tool: tool.to_string(),
                    message: "missing int field 'chunk_index'".to_string(),
                })? as usize;
            let text = ctx.store.get_trace_chunk(&short_id, idx)?;
            Ok(json!({"short_id": short_id, "chunk_index": idx, "text": text}))
        }
        "get_schema" => {
            let schema = ctx.store.schema()?;
            Ok(serde_json::to_value(&*schema).expect("serializable"))
        }
        "search_traces" => {
            let query = arg_str(args, "query", tool)?;
            let top_k = args
                .get("top_k")
                .and_then(Value::as_u64)
                .map(|v| v as usize)
                .unwrap_or(ctx.config.top_k);
            let mode = match args.get("mode").and_then(Value::as_str) {
                None | Some("hybrid") => SearchMode::Hybrid,
                Some("lexical") => SearchMode::Lexical,
                Some("semantic") => SearchMode::Semantic,
                Some(other) => {
                    return Err(ToolError::BadArgs {
                        tool: tool.to_string(),
                        message: format!("unknown mode '{other}'"),
                    })
                }
            };
            let hits = ctx.index.search(&query, top_k, mode, ctx.embedder)?;
            Ok(json!({"hits": hits}))
        }
        "get_extractions" => Ok(serde_json::to_value(ctx.store.get_extractions())
            .expect("serializable")),
        "extract" => {
            let spec = ExtractionSpec::from_args(args)?;
            let outcome = extract::extract(ctx, &spec)?;
            Ok(serde_json::to_value(outcome).expect("serializable"))
        }
        "summarize_trace" => {
            let short_id = arg_str(args, "short_id", tool)?;
            let summary = summarize::summarize_trace(ctx, &short_id)?;
            Ok(json!({"short_id": short_id, "summary": summary}))
        }
        "summarize_group" => {
            let ids = arg_id_list(args, "short_ids", tool)?;
            let summary = summarize::summarize_group(ctx, &ids)?;
            Ok(json!({"short_ids": ids, "summary": summary}))
        }
        "compare_segments" => {
            let request = CompareRequest::from_args(ctx, args)?;
            let result = compare::compare_segments(ctx, &request)?;
            Ok(serde_json::to_value(result).expect("serializable"))
        }
        "save_column" => {
            let name = arg_str(args, "name", tool)?;
            let values_obj =
                args.get("values")
                    .and_then(Value::as_object)
                    .ok_or_else(|| ToolError::BadArgs {
                        tool: tool.to_string(),
                        message: "missing object field 'values'".to_string(),
                    })?;
            let mut values = BTreeMap::new();
            for (k, v) in values_obj {
                let scalar = Scalar::from_json(v).ok_or_else(|| ToolError::BadArgs {
                    tool: tool.to_string(),
                    message: format!("value for '{k}' is not a scalar"),
                })?;
                values.insert(k.clone(), scalar);
            }
            let summary = ctx.store.save_column(&name, values)?;
            Ok(serde_json::to_value(summary).expect("serializable"))
        }
        "save_affected_traces" => {
            let label = arg_str(args, "label", tool)?;
            let ids = arg_id_list(args, "short_ids", tool)?;
            let source = args
                .get("source_finding")
                .and_then(Value::as_str)
                .map(str::to_string);
            let cohort = ctx.store.save_affected_traces(&label, &ids, source)?;
            session.record_cohort(&label);
            Ok(serde_json::to_value(cohort).expect("serializable"))
        }
        "reload_data" => {
            ctx.store.reload_data();
            Ok(json!({"reloaded": true, "visible_columns": ctx.store.snapshot().view_column_names()}))
        }
        "consolidate" => {
            let version = ctx.store.consolidate()?;
            Ok(json!({"consolidated": true, "version": version}))
        }
        other => Err(ToolError::UnknownTool(other.to_string())),
    }
}
