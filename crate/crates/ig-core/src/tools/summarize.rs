//! Per-trace and group summaries with caching and progressive
//! summarization for oversized traces.
//!
//! Cache key is (short_id, corpus version): consolidation bumps the
//! version, which invalidates every cached summary.

use std::collections::HashMap;
use std::sync::Mutex;

use crate::gateway::{ExpectedFormat, Role};
use crate::store::TraceContent;

use super::{ToolContext, ToolError};

#[derive(Debug, Default)]
pub struct SummaryCache {
    entries: Mutex<HashMap<(String, u64), String>>,
}

impl SummaryCache {
    pub fn get(&self, short_id: &str, version: u64) -> Option<String> {
        self.entries
            .lock()
            .expect("summary cache poisoned")
            .get(&(short_id.to_string(), version))
            .cloned()
    }

    pub fn put(&self, short_id: &str, version: u64, summary: String) {
        self.entries
            .lock()
            .expect("summary cache poisoned")
            .insert((short_id.to_string(), version), summary);
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("summary cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Summarize one trace. Short traces take a single call; oversized traces
/// get one call per chunk plus a synthesis call over the chunk summaries.
pub fn summarize_trace(ctx: &ToolContext, short_id: &str) -> Result<String, ToolError> {
    let version = ctx.store.version();
    if let Some(cached) = ctx.summaries.get(short_id, version) {
        return Ok(cached);
    }
    let summary = match ctx.store.get_trace(short_id)? {
        TraceContent::Full { text, .. } => {
            let prompt = format!(
                "Summarize this agent execution trace in 3-6 sentences. Note the task, \
                 the key actions taken, any errors or failures, and the outcome.\n\n\
                 Trace {short_id}:\n{text}"
            );
            ctx.gateway
                .complete(Role::Summarization, &prompt, ExpectedFormat::FreeText)?
                .text
        }
        TraceContent::Outline(outline) => {
            let snap = ctx.store.snapshot();
            let plan = snap
                .chunk_plan(short_id)?
                .expect("outline implies chunk plan");
            let prompts: Vec<String> = (0..plan.chunk_count())
                .map(|i| {
                    format!(
                        "Summarize part {} of {} of an agent execution trace in 2-4 \
                         sentences.\n\nTrace {short_id} chunk {i}:\n{}",
                        i + 1,
                        outline.chunk_count,
                        plan.chunk_text(i).unwrap_or_default()
                    )
                })
                .collect();
            let results = ctx.gateway.complete_batch(
                Role::Summarization,
                &prompts,
                ExpectedFormat::FreeText,
                ctx.config.extraction_concurrency,
            )?;
            let mut chunk_summaries = Vec::with_capacity(results.len());
            for (i, r) in results.into_iter().enumerate() {
                match r {
                    Ok(c) => chunk_summaries.push(format!("[chunk {i}] {}", c.text)),
                    Err(e) => return Err(e.into()),
                }
            }
            let synthesis_prompt = format!(
                "These are per-chunk summaries of one long agent execution trace. \
                 Synthesize them into a single 3-6 sentence summary of the whole \
                 trace.\n\nTrace {short_id}:\n{}",
                chunk_summaries.join("\n")
            );
            ctx.gateway
                .complete(Role::Summarization, &synthesis_prompt, ExpectedFormat::FreeText)?
                .text
        }
    };
    ctx.summaries.put(short_id, version, summary.clone());
    Ok(summary)
}

/// One synthesis call over the (cached) per-trace summaries of a group.
pub fn summarize_group(ctx: &ToolContext, short_ids: &[String]) -> Result<String, ToolError> {
    if short_ids.is_empty() {
        return Err(ToolError::BadArgs {
            tool: "summarize_group".to_string(),
            message: "short_ids must not be empty".to_string(),
        });
    }
    let mut parts = Vec::with_capacity(short_ids.len());
    for id in short_ids {
        parts.push(format!("{id}: {}", summarize_trace(ctx, id)?));
    }
    let prompt = format!(
        "These are summaries of {} agent execution traces forming one group. \
         Characterize the group as a whole in 4-8 sentences: shared behaviors, \
         notable differences, and recurring failure or success patterns.\n\n{}",
        short_ids.len(),
        parts.join("\n")
    );
    Ok(ctx
        .gateway
        .complete(Role::Summarization, &prompt, ExpectedFormat::FreeText)?
        .text)
}
