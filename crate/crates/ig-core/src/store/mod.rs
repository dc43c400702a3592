//! Processed trace store: ingestion with short-ID assignment, the base
//! column view, extraction side-tables, cohorts, chunked access to long
//! traces, and the schema cache.
//!
//! Readers operate on an immutable snapshot (`Arc<CorpusState>`); writers
//! swap in a new snapshot under a write lock, so in-flight readers finish
//! on the version they started with.

pub mod schema;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokens::approximate_tokens;
use crate::trace::{EventKind, EventRole, Scalar, TraceEvent, TraceRecord};

pub use schema::{ColumnStats, Correlation, CorrelationMeasure, Distribution, SchemaCache};

/// Default long-trace chunk threshold, in tokens.
pub const DEFAULT_CHUNK_THRESHOLD_TOKENS: usize = 50_000;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("duplicate original_id '{0}'")]
    DuplicateOriginalId(String),
    #[error("record {index} has no events and no content")]
    EmptyRecord { index: usize },
    #[error("record {index}: {message}")]
    MalformedRecord { index: usize, message: String },
    #[error("unknown trace id '{0}'")]
    UnknownTraceId(String),
    #[error("unknown trace ids: {}", .0.join(", "))]
    UnknownTraceIds(Vec<String>),
    #[error("unknown extraction table '{0}'")]
    UnknownTable(String),
    #[error("column or table name '{0}' already in use")]
    NameCollision(String),
    #[error("extraction table '{name}' exists with different field definitions")]
    FieldDefMismatch { name: String },
    #[error("trace '{short_id}' is not chunked; use get_trace")]
    NotChunked { short_id: String },
    #[error("chunk index {index} out of range for '{short_id}' (valid: 0..{count})")]
    ChunkIndexOutOfRange {
        short_id: String,
        index: usize,
        count: usize,
    },
    #[error("cohort must not be empty")]
    EmptyCohort,
    #[error("unknown cohort '{0}'")]
    UnknownCohort(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("value for '{short_id}' in column '{column}' does not match type {expected}")]
    TypeMismatch {
        short_id: String,
        column: String,
        expected: String,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Semantic type of an extraction field or inferred column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticType {
    Bool,
    Int,
    Float,
    Category,
    Text,
}

impl SemanticType {
    pub fn accepts(&self, value: &Scalar) -> bool {
        match (self, value) {
            (_, Scalar::Null) => true,
            (SemanticType::Bool, Scalar::Bool(_)) => true,
            (SemanticType::Int, Scalar::Int(_)) => true,
            (SemanticType::Float, Scalar::Float(_) | Scalar::Int(_)) => true,
            (SemanticType::Category | SemanticType::Text, Scalar::Str(_)) => true,
            _ => false,
        }
    }

    pub fn infer(value: &Scalar) -> SemanticType {
        match value {
            Scalar::Bool(_) => SemanticType::Bool,
            Scalar::Int(_) => SemanticType::Int,
            Scalar::Float(_) => SemanticType::Float,
            _ => SemanticType::Category,
        }
    }
}

impl std::fmt::Display for SemanticType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SemanticType::Bool => "bool",
            SemanticType::Int => "int",
            SemanticType::Float => "float",
            SemanticType::Category => "category",
            SemanticType::Text => "text",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDef {
    pub field: String,
    pub semantic_type: SemanticType,
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    LlmExtraction,
    ComputedColumn,
}

/// A persisted side-table of per-trace values, keyed by short id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractionTable {
    pub name: String,
    pub field_defs: Vec<FieldDef>,
    pub rows: BTreeMap<String, BTreeMap<String, Scalar>>,
    pub provenance: Provenance,
    pub created_at: String,
}

impl ExtractionTable {
    fn type_check(
        &self,
        short_id: &str,
        values: &BTreeMap<String, Scalar>,
    ) -> Result<(), StoreError> {
        for def in &self.field_defs {
            if let Some(v) = values.get(&def.field) {
                if !def.semantic_type.accepts(v) {
                    return Err(StoreError::TypeMismatch {
                        short_id: short_id.to_string(),
                        column: def.field.clone(),
                        expected: def.semantic_type.to_string(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Metadata-only view of an extraction table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractionSummary {
    pub name: String,
    pub field_defs: Vec<FieldDef>,
    pub row_count: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cohort {
    pub label: String,
    pub short_ids: Vec<String>,
    pub source_finding: Option<String>,
}

/// Bijection short_id <-> original_id.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IdMap {
    short_to_original: BTreeMap<String, String>,
    original_to_short: BTreeMap<String, String>,
}

impl IdMap {
    pub fn len(&self) -> usize {
        self.short_to_original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.short_to_original.is_empty()
    }

    pub fn original_of(&self, short_id: &str) -> Option<&str> {
        self.short_to_original.get(short_id).map(|s| s.as_str())
    }

    pub fn short_of(&self, original_id: &str) -> Option<&str> {
        self.original_to_short.get(original_id).map(|s| s.as_str())
    }

    fn insert(&mut self, short: String, original: String) {
        self.short_to_original
            .insert(short.clone(), original.clone());
        self.original_to_short.insert(original, short);
    }
}

/// Immutable corpus snapshot. All read paths work off one of these.
#[derive(Debug, Clone)]
pub struct CorpusState {
    pub traces: Vec<TraceRecord>,
    pub id_map: IdMap,
    pub extraction_tables: Vec<ExtractionTable>,
    /// Number of extraction tables visible in the cached view
    /// (advanced by `reload_data` and `consolidate`).
    pub visible_tables: usize,
    /// Number of extraction tables merged into the base view.
    pub consolidated_tables: usize,
    pub cohorts: BTreeMap<String, Cohort>,
    pub version: u64,
    pub chunk_threshold_tokens: usize,
    by_short: BTreeMap<String, usize>,
    pub schema: Option<Arc<SchemaCache>>,
}

impl CorpusState {
    fn reindex(&mut self) {
        self.by_short = self
            .traces
            .iter()
            .enumerate()
            .map(|(i, t)| (t.short_id.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn trace(&self, short_id: &str) -> Result<&TraceRecord, StoreError> {
        self.by_short
            .get(short_id)
            .map(|&i| &self.traces[i])
            .ok_or_else(|| StoreError::UnknownTraceId(short_id.to_string()))
    }

    pub fn contains(&self, short_id: &str) -> bool {
        self.by_short.contains_key(short_id)
    }

    /// Base column names: flattened metadata keys plus derived columns,
    /// plus any consolidated extraction fields.
    pub fn base_column_names(&self) -> Vec<String> {
        let mut names: BTreeSet<String> = BTreeSet::new();
        for t in &self.traces {
            names.extend(t.metadata.keys().cloned());
        }
        names.insert("token_count".to_string());
        names.insert("event_count".to_string());
        let mut merged: Vec<String> = names.into_iter().collect();
        for table in self.extraction_tables.iter().take(self.consolidated_tables) {
            for def in &table.field_defs {
                if !merged.contains(&def.field) {
                    merged.push(def.field.clone());
                }
            }
        }
        merged
    }

    /// All column names in the cached view (base + visible extractions).
    pub fn view_column_names(&self) -> Vec<String> {
        let mut names = self.base_column_names();
        for table in self
            .extraction_tables
            .iter()
            .take(self.visible_tables)
            .skip(self.consolidated_tables)
        {
            for def in &table.field_defs {
                if !names.contains(&def.field) {
                    names.push(def.field.clone());
                }
            }
        }
        names
    }

    /// Column values in trace order. Missing cells are `Scalar::Null`.
    pub fn column(&self, name: &str) -> Vec<Scalar> {
        match name {
            "token_count" => {
                return self
                    .traces
                    .iter()
                    .map(|t| Scalar::Int(t.token_count as i64))
                    .collect()
            }
            "event_count" => {
                return self
                    .traces
                    .iter()
                    .map(|t| Scalar::Int(t.events.len() as i64))
                    .collect()
            }
            _ => {}
        }
        // later tables win on field-name conflicts (unreachable via the
        // public API, which rejects collisions at creation)
        let mut from_table: Option<&ExtractionTable> = None;
        for table in self.extraction_tables.iter().take(self.visible_tables) {
            if table.field_defs.iter().any(|d| d.field == name) {
                from_table = Some(table);
            }
        }
        if let Some(table) = from_table {
            return self
                .traces
                .iter()
                .map(|t| {
                    table
                        .rows
                        .get(&t.short_id)
                        .and_then(|row| row.get(name))
                        .cloned()
                        .unwrap_or(Scalar::Null)
                })
                .collect();
        }
        self.traces
            .iter()
            .map(|t| t.metadata.get(name).cloned().unwrap_or(Scalar::Null))
            .collect()
    }

    fn all_column_names_in_use(&self) -> BTreeSet<String> {
        let mut names: BTreeSet<String> = self.base_column_names().into_iter().collect();
        for table in &self.extraction_tables {
            names.insert(table.name.clone());
            names.extend(table.field_defs.iter().map(|d| d.field.clone()));
        }
        names
    }

    pub fn chunk_plan(&self, short_id: &str) -> Result<Option<ChunkPlan>, StoreError> {
        let trace = self.trace(short_id)?;
        if trace.token_count <= self.chunk_threshold_tokens {
            return Ok(None);
        }
        Ok(Some(ChunkPlan::build(trace, self.chunk_threshold_tokens)))
    }
}

/// Byte-exact partition of an oversized trace's rendered text.
#[derive(Debug, Clone)]
pub struct ChunkPlan {
    pub full_text: String,
    /// Byte ranges into `full_text`, one per chunk.
    pub chunks: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChunkOutline {
    pub short_id: String,
    pub total_tokens: usize,
    pub chunk_count: usize,
    pub chunks: Vec<ChunkInfo>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChunkInfo {
    pub index: usize,
    pub tokens: usize,
    pub preview: String,
}

/// Result of `get_trace`: full content below the threshold, chunk outline
/// above it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceContent {
    Full { short_id: String, text: String },
    Outline(ChunkOutline),
}

impl ChunkPlan {
    /// Greedy split at event boundaries, at most `threshold` tokens per
    /// chunk; an event exceeding the threshold on its own is split at the
    /// threshold.
    fn build(trace: &TraceRecord, threshold_tokens: usize) -> ChunkPlan {
        let full_text = trace.full_text();
        let max_chars = threshold_tokens * 4;
        // piece list in char lengths: events, with oversized events split
        let mut piece_char_lens: Vec<usize> = Vec::new();
        for (start, end) in trace.event_char_spans() {
            let mut remaining = end - start;
            if remaining == 0 {
                continue;
            }
            while remaining > max_chars {
                piece_char_lens.push(max_chars);
                remaining -= max_chars;
            }
            piece_char_lens.push(remaining);
        }
        // greedy packing by char budget (chars <= threshold*4 <=> tokens <= threshold)
        let mut chunk_char_lens: Vec<usize> = Vec::new();
        let mut current = 0usize;
        for len in piece_char_lens {
            if current > 0 && current + len > max_chars {
                chunk_char_lens.push(current);
                current = 0;
            }
            current += len;
        }
        if current > 0 {
            chunk_char_lens.push(current);
        }
        // map chunk boundaries (char offsets) to byte offsets in one pass
        let mut boundary_chars: Vec<usize> = Vec::with_capacity(chunk_char_lens.len() + 1);
        let mut acc = 0usize;
        boundary_chars.push(0);
        for len in &chunk_char_lens {
            acc += len;
            boundary_chars.push(acc);
        }
        let wanted: BTreeSet<usize> = boundary_chars.iter().copied().collect();
        let mut char_to_byte: BTreeMap<usize, usize> = BTreeMap::new();
        for (ci, (b, _)) in full_text.char_indices().enumerate() {
            if wanted.contains(&ci) {
                char_to_byte.insert(ci, b);
            }
        }
        char_to_byte.insert(full_text.chars().count(), full_text.len());
        let chunks = boundary_chars
            .windows(2)
            .map(|w| (char_to_byte[&w[0]], char_to_byte[&w[1]]))
            .collect();
        ChunkPlan { full_text, chunks }
    }

    pub fn chunk_count(&self) -> usize {
        self.chunks.len()
    }

    pub fn chunk_text(&self, index: usize) -> Option<&str> {
        self.chunks.get(index).map(|&(a, b)| &self.full_text[a..b])
    }

    pub fn outline(&self, short_id: &str, total_tokens: usize) -> ChunkOutline {
        let chunks = self
            .chunks
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| {
                let text = &self.full_text[a..b];
                let preview: String =
                    text.lines().next().unwrap_or("").chars().take(120).collect();
                ChunkInfo {
                    index: i,
                    tokens: approximate_tokens(text),
                    preview,
                }
            })
            .collect::<Vec<_>>();
        ChunkOutline {
            short_id: short_id.to_string(),
            total_tokens,
            chunk_count: chunks.len(),
            chunks,
        }
    }
}

/// Raw ingest record: either explicit events or a bare content string.
#[derive(Debug, Clone, Deserialize)]
pub struct RawTrace {
    pub id: String,
    #[serde(default)]
    pub events: Option<Vec<RawEvent>>,
    #[serde(default)]
    pub content: Option<String>,
    #[serde(default)]
    pub metadata: Option<serde_json::Map<String, serde_json::Value>>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct RawEvent {
    pub role: EventRole,
    pub kind: EventKind,
    pub content: String,
}

/// Flatten metadata one level with "." joins; deeper nesting is stringified.
fn flatten_metadata(
    meta: &serde_json::Map<String, serde_json::Value>,
) -> BTreeMap<String, Scalar> {
    let mut out = BTreeMap::new();
    for (key, value) in meta {
        match value {
            serde_json::Value::Object(inner) => {
                for (k2, v2) in inner {
                    let name = format!("{key}.{k2}");
                    let scalar =
                        Scalar::from_json(v2).unwrap_or_else(|| Scalar::Str(v2.to_string()));
                    out.insert(name, scalar);
                }
            }
            other => {
                let scalar =
                    Scalar::from_json(other).unwrap_or_else(|| Scalar::Str(other.to_string()));
                out.insert(key.clone(), scalar);
            }
        }
    }
    out
}

fn short_id_width(n: usize) -> usize {
    n.max(1).to_string().len()
}

pub fn make_short_id(ordinal_one_based: usize, corpus_size: usize) -> String {
    format!(
        "t{:0width$}",
        ordinal_one_based,
        width = short_id_width(corpus_size)
    )
}

/// The store handle. Reads clone the current snapshot; writers install a
/// new one.
#[derive(Debug)]
pub struct TraceStore {
    state: RwLock<Arc<CorpusState>>,
    dir: Option<PathBuf>,
}

impl TraceStore {
    /// Ingest raw records into a fresh in-memory corpus. Short ids are
    /// assigned in ingestion order: "t1", "t2", ... zero-padded to the
    /// corpus-size width.
    pub fn ingest<I>(records: I, chunk_threshold_tokens: usize) -> Result<TraceStore, StoreError>
    where
        I: IntoIterator<Item = RawTrace>,
    {
        let raw: Vec<RawTrace> = records.into_iter().collect();
        let n = raw.len();
        let mut traces = Vec::with_capacity(n);
        let mut id_map = IdMap::default();
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for (i, rec) in raw.into_iter().enumerate() {
            if !seen.insert(rec.id.clone()) {
                return Err(StoreError::DuplicateOriginalId(rec.id));
            }
            let events: Vec<TraceEvent> = match (&rec.events, &rec.content) {
                (Some(evs), _) if !evs.is_empty() => evs
                    .iter()
                    .enumerate()
                    .map(|(j, e)| TraceEvent {
                        index: j,
                        role: e.role,
                        kind: e.kind,
                        content: e.content.clone(),
                    })
                    .collect(),
                (_, Some(content)) if !content.is_empty() => vec![TraceEvent {
                    index: 0,
                    role: EventRole::Assistant,
                    kind: EventKind::Output,
                    content: content.clone(),
                }],
                _ => return Err(StoreError::EmptyRecord { index: i }),
            };
            let metadata = rec
                .metadata
                .as_ref()
                .map(flatten_metadata)
                .unwrap_or_default();
            let short_id = make_short_id(i + 1, n);
            id_map.insert(short_id.clone(), rec.id.clone());
            let mut trace = TraceRecord {
                original_id: rec.id,
                short_id,
                events,
                metadata,
                token_count: 0,
            };
            trace.token_count = trace.compute_token_count();
            traces.push(trace);
        }
        let mut state = CorpusState {
            traces,
            id_map,
            extraction_tables: Vec::new(),
            visible_tables: 0,
            consolidated_tables: 0,
            cohorts: BTreeMap::new(),
            version: 1,
            chunk_threshold_tokens,
            by_short: BTreeMap::new(),
            schema: None,
        };
        state.reindex();
        Ok(TraceStore {
            state: RwLock::new(Arc::new(state)),
            dir: None,
        })
    }

    /// Ingest from a JSONL reader (one trace object per line).
    pub fn ingest_jsonl<R: BufRead>(
        reader: R,
        chunk_threshold_tokens: usize,
    ) -> Result<TraceStore, StoreError> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawTrace =
                serde_json::from_str(&line).map_err(|e| StoreError::MalformedRecord {
                    index: i,
                    message: e.to_string(),
                })?;
            records.push(raw);
        }
        TraceStore::ingest(records, chunk_threshold_tokens)
    }

    /// Attach a directory and write the current contents to it. Subsequent
    /// writes (columns, cohorts, consolidation) also land on disk.
    pub fn persist_to(&mut self, dir: &Path) -> Result<(), StoreError> {
        fs::create_dir_all(dir.join("extractions"))?;
        fs::create_dir_all(dir.join("cohorts"))?;
        self.dir = Some(dir.to_path_buf());
        let snap = self.snapshot();
        let mut corpus = Vec::new();
        for t in snap.traces.iter() {
            serde_json::to_writer(&mut corpus, t)?;
            corpus.push(b'\n');
        }
        atomic_write(&dir.join("corpus.jsonl"), &corpus)?;
        write_meta(dir, &snap)?;
        for table in snap.extraction_tables.iter() {
            write_extraction_file(dir, table)?;
        }
        for cohort in snap.cohorts.values() {
            write_cohort_file(dir, cohort)?;
        }
        Ok(())
    }

    /// Load a previously persisted store.
    pub fn open(dir: &Path, chunk_threshold_tokens: usize) -> Result<TraceStore, StoreError> {
        let corpus_path = dir.join("corpus.jsonl");
        let file = fs::File::open(&corpus_path)?;
        let mut traces: Vec<TraceRecord> = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            traces.push(serde_json::from_str(&line)?);
        }
        let meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        let version = meta["version"].as_u64().unwrap_or(1);
        let table_order: Vec<String> = meta["table_order"]
            .as_array()
            .map(|a| {
                a.iter()
                    .filter_map(|v| v.as_str().map(str::to_string))
                    .collect()
            })
            .unwrap_or_default();
        let consolidated = meta["consolidated_tables"].as_u64().unwrap_or(0) as usize;
        let mut id_map = IdMap::default();
        for t in &traces {
            id_map.insert(t.short_id.clone(), t.original_id.clone());
        }
        let mut tables_by_name: BTreeMap<String, ExtractionTable> = BTreeMap::new();
        let ext_dir = dir.join("extractions");
        if ext_dir.is_dir() {
            for entry in fs::read_dir(&ext_dir)? {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e == "jsonl") {
                    let table = read_extraction_file(&path)?;
                    tables_by_name.insert(table.name.clone(), table);
                }
            }
        }
        let mut extraction_tables: Vec<ExtractionTable> = Vec::new();
        for name in &table_order {
            if let Some(t) = tables_by_name.remove(name) {
                extraction_tables.push(t);
            }
        }
        // tables missing from the order list (manual drops into the dir)
        extraction_tables.extend(tables_by_name.into_values());
        let mut cohorts = BTreeMap::new();
        let coh_dir = dir.join("cohorts");
        if coh_dir.is_dir() {
            for entry in fs::read_dir(&coh_dir)? {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e == "json") {
                    let cohort: Cohort = serde_json::from_str(&fs::read_to_string(&path)?)?;
                    cohorts.insert(cohort.label.clone(), cohort);
                }
            }
        }
        let visible = extraction_tables.len();
        let mut state = CorpusState {
            traces,
            id_map,
            extraction_tables,
            visible_tables: visible,
            consolidated_tables: consolidated.min(visible),
            cohorts,
            version,
            chunk_threshold_tokens,
            by_short: BTreeMap::new(),
            schema: None,
        };
        state.reindex();
        Ok(TraceStore {
            state: RwLock::new(Arc::new(state)),
            dir: Some(dir.to_path_buf()),
        })
    }

    /// Current immutable snapshot.
    pub fn snapshot(&self) -> Arc<CorpusState> {
        self.state.read().expect("store lock poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.snapshot().len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshot().is_empty()
    }

    pub fn version(&self) -> u64 {
        self.snapshot().version
    }

    /// Full content below the chunk threshold; chunk outline above it.
    pub fn get_trace(&self, short_id: &str) -> Result<TraceContent, StoreError> {
        let snap = self.snapshot();
        let trace = snap.trace(short_id)?;
        match snap.chunk_plan(short_id)? {
            None => Ok(TraceContent::Full {
                short_id: short_id.to_string(),
                text: trace.full_text(),
            }),
            Some(plan) => Ok(TraceContent::Outline(
                plan.outline(short_id, trace.token_count),
            )),
        }
    }

    pub fn get_trace_chunk(
        &self,
        short_id: &str,
        chunk_index: usize,
    ) -> Result<String, StoreError> {
        let snap = self.snapshot();
        let plan = snap
            .chunk_plan(short_id)?
            .ok_or_else(|| StoreError::NotChunked {
                short_id: short_id.to_string(),
            })?;
        plan.chunk_text(chunk_index)
            .map(str::to_string)
            .ok_or_else(|| StoreError::ChunkIndexOutOfRange {
                short_id: short_id.to_string(),
                index: chunk_index,
                count: plan.chunk_count(),
            })
    }

    pub fn build_schema_cache(&self) -> Result<SchemaCache, StoreError> {
        let snap = self.snapshot();
        if snap.is_empty() {
            return Err(StoreError::EmptyCorpus);
        }
        Ok(schema::build(&snap, schema::DEFAULT_NOTABLE_THRESHOLD))
    }

    /// Cached schema, building it on first use.
    pub fn schema(&self) -> Result<Arc<SchemaCache>, StoreError> {
        {
            let snap = self.snapshot();
            if let Some(s) = &snap.schema {
                return Ok(s.clone());
            }
        }
        let built = Arc::new(self.build_schema_cache()?);
        let mut guard = self.state.write().expect("store lock poisoned");
        let mut state = (**guard).clone();
        state.schema = Some(built.clone());
        *guard = Arc::new(state);
        Ok(built)
    }

    /// Persist a computed column as a single-field extraction table. The
    /// column is not visible in the cached view until `reload_data`.
    pub fn save_column(
        &self,
        name: &str,
        values: BTreeMap<String, Scalar>,
    ) -> Result<ExtractionSummary, StoreError> {
        let mut guard = self.state.write().expect("store lock poisoned");
        let mut state = (**guard).clone();
        if state.all_column_names_in_use().contains(name) {
            return Err(StoreError::NameCollision(name.to_string()));
        }
        let unknown: Vec<String> = values
            .keys()
            .filter(|k| !state.contains(k))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(StoreError::UnknownTraceIds(unknown));
        }
        let semantic_type = values
            .values()
            .find(|v| !v.is_null())
            .map(SemanticType::infer)
            .unwrap_or(SemanticType::Category);
        let table = ExtractionTable {
            name: name.to_string(),
            field_defs: vec![FieldDef {
                field: name.to_string(),
                semantic_type,
                description: "computed column".to_string(),
            }],
            rows: values
                .into_iter()
                .map(|(k, v)| (k, BTreeMap::from([(name.to_string(), v)])))
                .collect(),
            provenance: Provenance::ComputedColumn,
            created_at: now_rfc3339(),
        };
        for (sid, row) in &table.rows {
            table.type_check(sid, row)?;
        }
        let summary = ExtractionSummary {
            name: table.name.clone(),
            field_defs: table.field_defs.clone(),
            row_count: table.rows.len(),
            provenance: table.provenance,
        };
        if let Some(dir) = &self.dir {
            write_extraction_file(dir, &table)?;
        }
        state.extraction_tables.push(table);
        state.schema = None;
        if let Some(dir) = &self.dir {
            write_meta(dir, &state)?;
        }
        *guard = Arc::new(state);
        Ok(summary)
    }

    /// Create an empty LLM-extraction table, or accept the existing one for
    /// resume when the field definitions match exactly.
    pub fn create_extraction_table(
        &self,
        name: &str,
        field_defs: Vec<FieldDef>,
    ) -> Result<(), StoreError> {
        let mut guard = self.state.write().expect("store lock poisoned");
        let mut state = (**guard).clone();
        if let Some(existing) = state.extraction_tables.iter().find(|t| t.name == name) {
            if existing.provenance == Provenance::LlmExtraction
                && existing.field_defs == field_defs
            {
                return Ok(()); // resume from checkpoint
            }
            return Err(if existing.field_defs != field_defs {
                StoreError::FieldDefMismatch {
                    name: name.to_string(),
                }
            } else {
                StoreError::NameCollision(name.to_string())
            });
        }
        let in_use = state.all_column_names_in_use();
        if in_use.contains(name) {
            return Err(StoreError::NameCollision(name.to_string()));
        }
        for def in &field_defs {
            if in_use.contains(&def.field) {
                return Err(StoreError::NameCollision(def.field.clone()));
            }
        }
        let table = ExtractionTable {
            name: name.to_string(),
            field_defs,
            rows: BTreeMap::new(),
            provenance: Provenance::LlmExtraction,
            created_at: now_rfc3339(),
        };
        if let Some(dir) = &self.dir {
            write_extraction_file(dir, &table)?;
        }
        state.extraction_tables.push(table);
        state.schema = None;
        if let Some(dir) = &self.dir {
            write_meta(dir, &state)?;
        }
        *guard = Arc::new(state);
        Ok(())
    }

    /// Append rows to an existing extraction table (the extract tool's
    /// auto-save flush). Re-sent rows replace their previous values.
    pub fn append_extraction_rows(
        &self,
        name: &str,
        rows: BTreeMap<String, BTreeMap<String, Scalar>>,
    ) -> Result<(), StoreError> {
        let mut guard = self.state.write().expect("store lock poisoned");
        let mut state = (**guard).clone();
        let unknown: Vec<String> = rows
            .keys()
            .filter(|k| !state.contains(k))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(StoreError::UnknownTraceIds(unknown));
        }
        let table = state
            .extraction_tables
            .iter_mut()
            .find(|t| t.name == name)
            .ok_or_else(|| StoreError::UnknownTable(name.to_string()))?;
        for (sid, row) in &rows {
            table.type_check(sid, row)?;
        }
        table.rows.extend(rows);
        let table_copy = table.clone();
        if let Some(dir) = &self.dir {
            write_extraction_file(dir, &table_copy)?;
        }
        state.schema = None;
        *guard = Arc::new(state);
        Ok(())
    }

    /// Short ids already present in an extraction table (for resume).
    pub fn extraction_row_ids(&self, name: &str) -> Vec<String> {
        let snap = self.snapshot();
        snap.extraction_tables
            .iter()
            .find(|t| t.name == name)
            .map(|t| t.rows.keys().cloned().collect())
            .unwrap_or_default()
    }

    /// Persist a deduplicated trace-id cohort supporting a finding.
    pub fn save_affected_traces(
        &self,
        label: &str,
        short_ids: &[String],
        source_finding: Option<String>,
    ) -> Result<Cohort, StoreError> {
        if short_ids.is_empty() {
            return Err(StoreError::EmptyCohort);
        }
        let mut guard = self.state.write().expect("store lock poisoned");
        let mut state = (**guard).clone();
        let unknown: Vec<String> = short_ids
            .iter()
            .filter(|id| !state.contains(id))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(StoreError::UnknownTraceIds(unknown));
        }
        let dedup: BTreeSet<String> = short_ids.iter().cloned().collect();
        let cohort = Cohort {
            label: label.to_string(),
            short_ids: dedup.into_iter().collect(),
            source_finding,
        };
        if let Some(dir) = &self.dir {
            write_cohort_file(dir, &cohort)?;
        }
        state.cohorts.insert(label.to_string(), cohort.clone());
        *guard = Arc::new(state);
        Ok(cohort)
    }

    pub fn get_cohort(&self, label: &str) -> Result<Cohort, StoreError> {
        self.snapshot()
            .cohorts
            .get(label)
            .cloned()
            .ok_or_else(|| StoreError::UnknownCohort(label.to_string()))
    }

    /// Make extraction tables created since the last reload visible in the
    /// cached view. Idempotent.
    pub fn reload_data(&self) {
        let mut guard = self.state.write().expect("store lock poisoned");
        if guard.visible_tables == guard.extraction_tables.len() {
            return;
        }
        let mut state = (**guard).clone();
        state.visible_tables = state.extraction_tables.len();
        state.schema = None;
        *guard = Arc::new(state);
    }

    /// Merge all extraction tables into the base view, rebuild the schema
    /// cache, and bump the version.
    pub fn consolidate(&self) -> Result<u64, StoreError> {
        let mut guard = self.state.write().expect("store lock poisoned");
        let mut state = (**guard).clone();
        state.visible_tables = state.extraction_tables.len();
        state.consolidated_tables = state.extraction_tables.len();
        state.version += 1;
        state.schema = if state.is_empty() {
            None
        } else {
            Some(Arc::new(schema::build(
                &state,
                schema::DEFAULT_NOTABLE_THRESHOLD,
            )))
        };
        let version = state.version;
        if let Some(dir) = &self.dir {
            write_meta(dir, &state)?;
        }
        *guard = Arc::new(state);
        Ok(version)
    }

    /// Metadata-only listing of extraction tables.
    pub fn get_extractions(&self) -> Vec<ExtractionSummary> {
        self.snapshot()
            .extraction_tables
            .iter()
            .map(|t| ExtractionSummary {
                name: t.name.clone(),
                field_defs: t.field_defs.clone(),
                row_count: t.rows.len(),
                provenance: t.provenance,
            })
            .collect()
    }
}

/// Replace short ids with original ids. Types containing trace ids
/// implement this; remapping fails loudly on any unmapped id.
pub trait RemapIds {
    fn remap_ids(&mut self, id_map: &IdMap) -> Result<(), StoreError>;
}

pub fn remap_id(id: &str, id_map: &IdMap) -> Result<String, StoreError> {
    id_map
        .original_of(id)
        .map(str::to_string)
        .ok_or_else(|| StoreError::UnknownTraceId(id.to_string()))
}

pub fn remap_id_list(ids: &mut [String], id_map: &IdMap) -> Result<(), StoreError> {
    let mut missing = Vec::new();
    for id in ids.iter_mut() {
        match id_map.original_of(id) {
            Some(orig) => *id = orig.to_string(),
            None => missing.push(id.clone()),
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(StoreError::UnknownTraceIds(missing))
    }
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Write via temp file + rename so readers never see a torn file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn write_meta(dir: &Path, state: &CorpusState) -> Result<(), StoreError> {
    let meta = serde_json::json!({
        "version": state.version,
        "chunk_threshold_tokens": state.chunk_threshold_tokens,
        "consolidated_tables": state.consolidated_tables,
        "table_order": state.extraction_tables.iter().map(|t| t.name.clone()).collect::<Vec<_>>(),
    });
    atomic_write(
        &dir.join("meta.json"),
        serde_json::to_string_pretty(&meta)?.as_bytes(),
    )?;
    Ok(())
}

fn write_extraction_file(dir: &Path, table: &ExtractionTable) -> Result<(), StoreError> {
    let mut buf = Vec::new();
    let meta = serde_json::json!({
        "table": table.name,
        "field_defs": table.field_defs,
        "provenance": table.provenance,
        "created_at": table.created_at,
    });
    serde_json::to_writer(&mut buf, &meta)?;
    buf.push(b'\n');
    for (sid, row) in &table.rows {
        let line = serde_json::json!({"short_id": sid, "values": row});
        serde_json::to_writer(&mut buf, &line)?;
        buf.push(b'\n');
    }
    atomic_write(
        &dir.join("extractions").join(format!("{}.jsonl", table.name)),
        &buf,
    )?;
    Ok(())
}

fn read_extraction_file(path: &Path) -> Result<ExtractionTable, StoreError> {
    let content = fs::read_to_string(path)?;
    let mut lines = content.lines().filter(|l| !l.trim().is_empty());
    let meta: serde_json::Value = serde_json::from_str(lines.next().unwrap_or("{}"))?;
    let name = meta["table"].as_str().unwrap_or_default().to_string();
    let field_defs: Vec<FieldDef> = serde_json::from_value(meta["field_defs"].clone())?;
    let provenance: Provenance = serde_json::from_value(meta["provenance"].clone())?;
    let created_at = meta["created_at"].as_str().unwrap_or_default().to_string();
    let mut rows = BTreeMap::new();
    for line in lines {
        let v: serde_json::Value = serde_json::from_str(line)?;
        let sid = v["short_id"].as_str().unwrap_or_default().to_string();
        let row: BTreeMap<String, Scalar> = serde_json::from_value(v["values"].clone())?;
        rows.insert(sid, row);
    }
    Ok(ExtractionTable {
        name,
        field_defs,
        rows,
        provenance,
        created_at,
    })
}

fn write_cohort_file(dir: &Path, cohort: &Cohort) -> Result<(), StoreError> {
    atomic_write(
        &dir
            .join("cohorts")
            .join(format!("{}.json", sanitize_label(&cohort.label))),
        serde_json::to_string_pretty(cohort)?.as_bytes(),
    )?;
    Ok(())
}

fn sanitize_label(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}
