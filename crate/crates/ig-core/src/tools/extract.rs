//! Structured feature extraction across traces: one model call per
//! (trace, chunk), chunk results merged per trace, rows flushed to the
//! side table every 250 completed traces with a durability checkpoint
//! every 5,000. Re-running with the same table name resumes from the
//! checkpointed rows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::gateway::{ExpectedFormat, Role};
use crate::store::{FieldDef, SemanticType, TraceContent};
use crate::trace::Scalar;

use super::{ToolContext, ToolError};

/// Auto-save flush threshold, in completed traces.
pub const AUTO_SAVE_THRESHOLD: usize = 250;
/// Durability checkpoint interval, in completed traces.
pub const CHECKPOINT_INTERVAL: usize = 5_000;
const MAX_FIELDS: usize = 12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractionSpec {
    pub table_name: String,
    pub fields: Vec<FieldDef>,
    pub target_short_ids: Vec<String>,
}

impl ExtractionSpec {
    pub fn from_args(args: &Value) -> Result<ExtractionSpec, ToolError> {
        let bad = |message: String| ToolError::BadArgs {
            tool: "extract".to_string(),
            message,
        };
        let table_name = args
            .get("table_name")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("missing 'table_name'".to_string()))?
            .to_string();
        let fields_raw = args
            .get("fields")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("missing 'fields' list".to_string()))?;
        let mut fields = Vec::with_capacity(fields_raw.len());
        for f in fields_raw {
            let name = f
                .get("name")
                .and_then(Value::as_str)
                .ok_or_else(|| bad("field missing 'name'".to_string()))?;
            let semantic_type: SemanticType =
                serde_json::from_value(f.get("semantic_type").cloned().unwrap_or_default())
                    .map_err(|e| bad(format!("field '{name}': bad semantic_type ({e})")))?;
            fields.push(FieldDef {
                field: name.to_string(),
                semantic_type,
                description: f
                    .get("description")
                    .and_then(Value::as_str)
                    .unwrap_or_default()
                    .to_string(),
            });
        }
        let target_short_ids: Vec<String> = args
            .get("target_short_ids")
            .and_then(Value::as_array)
            .map(|a| {
                a.iter()
                    .filter_map(Value::as_str)
                    .map(str::to_string)
                    .collect()
            })
            .ok_or_else(|| bad("missing 'target_short_ids'".to_string()))?;
        let spec = ExtractionSpec {
            table_name,
            fields,
            target_short_ids,
        };
        spec.validate().map_err(|m| bad(m))?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.fields.is_empty() || self.fields.len() > MAX_FIELDS {
            return Err(format!(
                "field count must be 1..={MAX_FIELDS} (got {})",
                self.fields.len()
            ));
        }
        if self.target_short_ids.is_empty() {
            return Err("target_short_ids must not be empty".to_string());
        }
        Ok(())
    }

    fn error_field(&self) -> String {
        format!("{}_error", self.table_name)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractOutcome {
    pub table: String,
    pub requested: usize,
    pub completed: usize,
    pub failed: usize,
    pub skipped_resume: usize,
    pub autosave_flushes: usize,
    pub checkpoints: usize,
    /// (short_id, error) pairs for traces whose extraction failed.
    pub failures: Vec<(String, String)>,
}

/// Run the extraction. Fan-out goes through the gateway's bounded batch;
/// per-trace failures are isolated and recorded as null rows with the
/// error-marker field set.
pub fn extract(ctx: &ToolContext, spec: &ExtractionSpec) -> Result<ExtractOutcome, ToolError> {
    spec.validate().map_err(|message| ToolError::BadArgs {
        tool: "extract".to_string(),
        message,
    })?;
    let mut field_defs = spec.fields.clone();
    field_defs.push(FieldDef {
        field: spec.error_field(),
        semantic_type: SemanticType::Text,
        description: "extraction failure marker".to_string(),
    });
    ctx.store
        .create_extraction_table(&spec.table_name, field_defs)?;

    // resume: skip targets that already have a successful row
    let existing = ctx.store.extraction_row_ids(&spec.table_name);
    let snap = ctx.store.snapshot();
    let error_field = spec.error_field();
    let succeeded: std::collections::BTreeSet<String> = {
        let table = snap
            .extraction_tables
            .iter()
            .find(|t| t.name == spec.table_name)
            .expect("table just created");
        existing
            .into_iter()
            .filter(|id| {
                table
                    .rows
                    .get(id)
                    .map(|row| row.get(&error_field).map_or(true, Scalar::is_null))
                    .unwrap_or(false)
            })
            .collect()
    };
    let targets: Vec<String> = spec
        .target_short_ids
        .iter()
        .filter(|id| !succeeded.contains(*id))
        .cloned()
        .collect();
    let skipped_resume = spec.target_short_ids.len() - targets.len();

    let schema_block = field_schema_block(&spec.fields);
    let mut outcome = ExtractOutcome {
        table: spec.table_name.clone(),
        requested: spec.target_short_ids.len(),
        completed: 0,
        failed: 0,
        skipped_resume,
        autosave_flushes: 0,
        checkpoints: 0,
        failures: Vec::new(),
    };

    let mut since_checkpoint = 0usize;
    for group in targets.chunks(AUTO_SAVE_THRESHOLD) {
        // build (prompt, short_id) pairs, one per trace chunk
        let mut prompts: Vec<String> = Vec::new();
        let mut owners: Vec<String> = Vec::new();
        for short_id in group {
            match ctx.store.get_trace(short_id) {
                Ok(TraceContent::Full { text, .. }) => {
                    prompts.push(extraction_prompt(&schema_block, short_id, 0, 1, &text));
                    owners.push(short_id.clone());
                }
                Ok(TraceContent::Outline(outline)) => {
                    let plan = snap
                        .chunk_plan(short_id)?
                        .expect("outline implies chunk plan");
                    for i in 0..outline.chunk_count {
                        prompts.push(extraction_prompt(
                            &schema_block,
                            short_id,
                            i,
                            outline.chunk_count,
                            plan.chunk_text(i).unwrap_or_default(),
                        ));
                        owners.push(short_id.clone());
                    }
                }
                Err(e) => {
                    outcome.failed += 1;
                    outcome.failures.push((short_id.clone(), e.to_string()));
                    continue;
                }
            }
        }
        let results = ctx.gateway.complete_batch(
            Role::Extraction,
            &prompts,
            ExpectedFormat::Json,
            ctx.config.extraction_concurrency,
        )?;

        // merge per-trace chunk results: last chunk wins per field, bools OR
        let mut merged: BTreeMap<String, Result<BTreeMap<String, Scalar>, String>> =
            BTreeMap::new();
        for (owner, result) in owners.iter().zip(results) {
            match result {
                Ok(completion) => {
                    let values = completion
                        .parsed_json
                        .as_ref()
                        .map(|v| coerce_fields(&spec.fields, v))
                        .unwrap_or_default();
                    let entry = merged
                        .entry(owner.clone())
                        .or_insert_with(|| Ok(BTreeMap::new()));
                    if let Ok(row) = entry {
                        merge_chunk(&spec.fields, row, values);
                    }
                }
                Err(e) => {
                    merged.insert(owner.clone(), Err(e.to_string()));
                }
            }
        }

        let mut rows: BTreeMap<String, BTreeMap<String, Scalar>> = BTreeMap::new();
        for (short_id, result) in merged {
            match result {
                Ok(mut row) => {
                    for def in &spec.fields {
                        row.entry(def.field.clone()).or_insert(Scalar::Null);
                    }
                    row.insert(error_field.clone(), Scalar::Null);
                    rows.insert(short_id, row);
                    outcome.completed += 1;
                }
                Err(message) => {
                    let mut row: BTreeMap<String, Scalar> = spec
                        .fields
                        .iter()
                        .map(|d| (d.field.clone(), Scalar::Null))
                        .collect();
                    row.insert(error_field.clone(), Scalar::Str(message.clone()));
                    rows.insert(short_id.clone(), row);
                    outcome.failed += 1;
                    outcome.failures.push((short_id, message));
                }
            }
        }
        let group_size = group.len();
        if !rows.is_empty() {
            ctx.store.append_extraction_rows(&spec.table_name, rows)?;
            outcome.autosave_flushes += 1;
        }
        since_checkpoint += group_size;
        if since_checkpoint >= CHECKPOINT_INTERVAL {
            outcome.checkpoints += 1;
            since_checkpoint = 0;
        }
    }

    if outcome.completed == 0 && outcome.failed > 0 && skipped_resume == 0 {
        return Err(ToolError::Handler(format!(
            "extraction '{}' failed for all {} targets",
            spec.table_name, outcome.failed
        )));
    }
    Ok(outcome)
}

fn field_schema_block(fields: &[FieldDef]) -> String {
    let mut out = String::new();
    for def in fields {
        out.push_str(&format!(
            "- {} ({}): {}\n",
            def.field, def.semantic_type, def.description
        ));
    }
    out
}

fn extraction_prompt(
    schema_block: &str,
    short_id: &str,
    chunk: usize,
    chunk_count: usize,
    text: &str,
) -> String {
    format!(
        "Extract the following fields from the agent execution trace below.\n\
         Fields:\n{schema_block}\
         Respond with VALID JSON mapping each field name to its value \
         (null when not determinable from this text). No prose.\n\n\
         Trace {short_id} (chunk {chunk} of {chunk_count}):\n{text}"
    )
}

fn coerce_fields(fields: &[FieldDef], value: &Value) -> BTreeMap<String, Scalar> {
    let mut out = BTreeMap::new();
    if let Some(obj) = value.as_object() {
        for def in fields {
            if let Some(v) = obj.get(&def.field) {
                if let Some(scalar) = coerce(def.semantic_type, v) {
                    out.insert(def.field.clone(), scalar);
                }
            }
        }
    }
    out
}

fn coerce(ty: SemanticType, v: &Value) -> Option<Scalar> {
    if v.is_null() {
        return Some(Scalar::Null);
    }
    match ty {
        SemanticType::Bool => v.as_bool().map(Scalar::Bool),
        SemanticType::Int => v.as_i64().map(Scalar::Int),
        SemanticType::Float => v.as_f64().map(Scalar::Float),
        SemanticType::Category | SemanticType::Text => match v {
            Value::String(s) => Some(Scalar::Str(s.clone())),
            Value::Bool(b) => Some(Scalar::Str(b.to_string())),
            Value::Number(n) => Some(Scalar::Str(n.to_string())),
            _ => None,
        },
    }
}

fn merge_chunk(
    fields: &[FieldDef],
    row: &mut BTreeMap<String, Scalar>,
    incoming: BTreeMap<String, Scalar>,
) {
    for (k, v) in incoming {
        if v.is_null() {
            continue;
        }
        let is_bool = fields
            .iter()
            .any(|d| d.field == k && d.semantic_type == SemanticType::Bool);
        if is_bool {
            // boolean fields encode "pattern present anywhere in the trace"
            let prev = matches!(row.get(&k), Some(Scalar::Bool(true)));
            let now = matches!(v, Scalar::Bool(true));
            row.insert(k, Scalar::Bool(prev || now));
        } else {
            row.insert(k, v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::gateway::mock::{MockBackend, MockRule, MockScript, SimulatedFailure};
    use crate::gateway::{default_routes, Gateway, GatewayConfig};
    use crate::search::{build_index, HashingEmbedder, SearchIndex};
    use crate::store::{RawTrace, TraceStore};
    use crate::tools::SummaryCache;

    struct Fixture {
        store: TraceStore,
        gateway: Gateway,
        config: RunConfig,
        embedder: HashingEmbedder,
        summaries: SummaryCache,
        index: SearchIndex,
    }

    impl Fixture {
        fn ctx(&self) -> ToolContext<'_> {
            ToolContext {
                store: &self.store,
                index: &self.index,
                gateway: &self.gateway,
                config: &self.config,
                embedder: &self.embedder,
                summaries: &self.summaries,
            }
        }
    }

    fn fixture(n: usize, script: MockScript) -> Fixture {
        let raws: Vec<RawTrace> = (0..n)
            .map(|i| RawTrace {
                id: format!("run-{i}"),
                events: None,
                content: Some(format!("trace body {i}")),
                metadata: None,
            })
            .collect();
        let store = TraceStore::ingest(raws, 50_000).unwrap();
        let embedder = HashingEmbedder::default();
        let index = build_index(&store.snapshot(), &embedder).unwrap();
        Fixture {
            store,
            gateway: Gateway::new(
                Box::new(MockBackend::new(script)),
                default_routes(),
                GatewayConfig {
                    retry_base_ms: 1,
                    ..GatewayConfig::default()
                },
            ),
            config: RunConfig::default(),
            embedder,
            summaries: SummaryCache::default(),
            index,
        }
    }

    fn spec(n: usize, store: &TraceStore) -> ExtractionSpec {
        let snap = store.snapshot();
        ExtractionSpec {
            table_name: "features".to_string(),
            fields: vec![FieldDef {
                field: "uses_python".to_string(),
                semantic_type: SemanticType::Bool,
                description: "python used anywhere".to_string(),
            }],
            target_short_ids: snap.traces.iter().take(n).map(|t| t.short_id.clone()).collect(),
        }
    }

    #[test]
    fn scripted_extraction_fills_table() {
        let f = fixture(10, MockScript::new(vec![], r#"{"uses_python": true}"#));
        let out = extract(&f.ctx(), &spec(10, &f.store)).unwrap();
        assert_eq!(out.completed, 10);
        assert_eq!(out.failed, 0);
        let ext = f.store.get_extractions();
        assert_eq!(ext[0].row_count, 10);
    }

    #[test]
    fn six_hundred_targets_flush_at_least_twice() {
        let f = fixture(600, MockScript::new(vec![], r#"{"uses_python": false}"#));
        let out = extract(&f.ctx(), &spec(600, &f.store)).unwrap();
        assert!(out.autosave_flushes >= 2, "flushes {}", out.autosave_flushes);
        assert_eq!(out.completed, 600);
    }

    #[test]
    fn one_timeout_means_nine_rows_plus_flagged_null() {
        let f = fixture(
            10,
            MockScript::new(
                vec![
                    MockRule::failure(None, "Trace t03", SimulatedFailure::Timeout),
                    MockRule::response(None, "", r#"{"uses_python": true}"#),
                ],
                "{}",
            ),
        );
        let out = extract(&f.ctx(), &spec(10, &f.store)).unwrap();
        assert_eq!(out.completed, 9);
        assert_eq!(out.failed, 1);
        assert_eq!(out.failures[0].0, "t03");
        let snap = f.store.snapshot();
        let table = &snap.extraction_tables[0];
        let row = table.rows.get("t03").unwrap();
        assert!(row.get("uses_python").unwrap().is_null());
        assert!(!row.get("features_error").unwrap().is_null());
    }

    #[test]
    fn all_failed_is_an_error() {
        let f = fixture(
            4,
            MockScript::new(
                vec![MockRule::failure(None, "", SimulatedFailure::Timeout)],
                "{}",
            ),
        );
        assert!(extract(&f.ctx(), &spec(4, &f.store)).is_err());
    }

    #[test]
    fn rerun_resumes_from_checkpointed_rows() {
        let f = fixture(10, MockScript::new(vec![], r#"{"uses_python": true}"#));
        let s = spec(10, &f.store);
        extract(&f.ctx(), &s).unwrap();
        let calls_first = f.gateway.records().len();
        let out = extract(&f.ctx(), &s).unwrap();
        assert_eq!(out.skipped_resume, 10);
        assert_eq!(out.completed, 0);
        assert_eq!(f.gateway.records().len(), calls_first, "no new calls on resume");
    }

    #[test]
    fn field_count_limits_enforced() {
        let f = fixture(2, MockScript::new(vec![], "{}"));
        let mut s = spec(2, &f.store);
        s.fields = (0..13)
            .map(|i| FieldDef {
                field: format!("f{i}"),
                semantic_type: SemanticType::Bool,
                description: String::new(),
            })
            .collect();
        assert!(extract(&f.ctx(), &s).is_err());
        s.fields.clear();
        assert!(extract(&f.ctx(), &s).is_err());
    }

    #[test]
    fn bool_fields_or_across_chunks() {
        let mut row = BTreeMap::new();
        let fields = vec![FieldDef {
            field: "flag".to_string(),
            semantic_type: SemanticType::Bool,
            description: String::new(),
        }];
        merge_chunk(
            &fields,
            &mut row,
            BTreeMap::from([("flag".to_string(), Scalar::Bool(true))]),
        );
        merge_chunk(
            &fields,
            &mut row,
            BTreeMap::from([("flag".to_string(), Scalar::Bool(false))]),
        );
        assert_eq!(row.get("flag"), Some(&Scalar::Bool(true)));
    }
}
