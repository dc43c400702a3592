//! Deep A/B comparison between two trace cohorts under a token budget:
//! seeded sampling fills each side until the next summary would exceed
//! half the budget, then one model call contrasts the two sides.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::gateway::{ExpectedFormat, Role};
use crate::tokens::approximate_tokens;

use super::{summarize, ToolContext, ToolError};

#[derive(Debug, Clone)]
pub struct CompareRequest {
    pub cohort_a_ids: Vec<String>,
    pub cohort_b_ids: Vec<String>,
    pub question: String,
    pub token_budget: usize,
    pub seed: u64,
}

impl CompareRequest {
    pub fn from_args(ctx: &ToolContext, args: &Value) -> Result<CompareRequest, ToolError> {
        let bad = |message: String| ToolError::BadArgs {
            tool: "compare_segments".to_string(),
            message,
        };
        let resolve = |key: &str| -> Result<Vec<String>, ToolError> {
            match args.get(key) {
                Some(Value::Array(items)) => Ok(items
                    .iter()
                    .filter_map(Value::as_str)
                    .map(str::to_string)
                    .collect()),
                Some(Value::String(label)) => {
                    Ok(ctx.store.get_cohort(label)?.short_ids)
                }
                _ => Err(bad(format!("missing cohort field '{key}' (id list or cohort label)"))),
            }
        };
        let cohort_a_ids = resolve("cohort_a")?;
        let cohort_b_ids = resolve("cohort_b")?;
        if cohort_a_ids.is_empty() || cohort_b_ids.is_empty() {
            return Err(bad("both cohorts must be nonempty".to_string()));
        }
        Ok(CompareRequest {
            cohort_a_ids,
            cohort_b_ids,
            question: args
                .get("question")
                .and_then(Value::as_str)
                .unwrap_or("How do these two cohorts differ?")
                .to_string(),
            token_budget: args
                .get("token_budget")
                .and_then(Value::as_u64)
                .map(|v| v as usize)
                .unwrap_or(ctx.config.compare_token_budget),
            seed: ctx.config.seed,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentDifference {
    pub dimension: String,
    pub a_value: String,
    pub b_value: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentComparison {
    pub question: String,
    pub narrative: String,
    pub differences: Vec<SegmentDifference>,
    pub sampled_ids_a: Vec<String>,
    pub sampled_ids_b: Vec<String>,
    /// Ids present in both cohorts (overlap is allowed, but flagged).
    pub overlap: Vec<String>,
}

/// Sample each side (seeded) until the next trace summary would exceed
/// half the budget, then run one comparison call.
pub fn compare_segments(
    ctx: &ToolContext,
    request: &CompareRequest,
) -> Result<SegmentComparison, ToolError> {
    let per_side = request.token_budget / 2;
    let sampled_a = fill_side(ctx, &request.cohort_a_ids, per_side, request.seed)?;
    let sampled_b = fill_side(ctx, &request.cohort_b_ids, per_side, request.seed ^ 1)?;
    if sampled_a.is_empty() || sampled_b.is_empty() {
        return Err(ToolError::Handler(format!(
            "token budget {} cannot fit even one trace summary per side",
            request.token_budget
        )));
    }
    let overlap: Vec<String> = request
        .cohort_a_ids
        .iter()
        .filter(|id| request.cohort_b_ids.contains(id))
        .cloned()
        .collect();

    let side_block = |ids: &[(String, String)], label: &str| {
        let mut block = format!("Cohort {label} ({} sampled traces):\n", ids.len());
        for (id, summary) in ids {
            block.push_str(&format!("{id}: {summary}\n"));
        }
        block
    };
    let prompt = format!(
        "Compare two cohorts of agent execution traces.\nQuestion: {}\n\n{}\n{}\n\
         Respond with VALID JSON: {{\"narrative\": \"...\", \"differences\": \
         [{{\"dimension\": \"...\", \"a_value\": \"...\", \"b_value\": \"...\"}}]}}",
        request.question,
        side_block(&sampled_a, "A"),
        side_block(&sampled_b, "B"),
    );
    let completion = ctx
        .gateway
        .complete(Role::CohortCompare, &prompt, ExpectedFormat::Json)?;
    let parsed = completion.parsed_json.unwrap_or(Value::Null);
    let narrative = parsed
        .get("narrative")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let differences: Vec<SegmentDifference> = parsed
        .get("differences")
        .cloned()
        .map(|v| serde_json::from_value(v).unwrap_or_default())
        .unwrap_or_default();
    Ok(SegmentComparison {
        question: request.question.clone(),
        narrative,
        differences,
        sampled_ids_a: sampled_a.into_iter().map(|(id, _)| id).collect(),
        sampled_ids_b: sampled_b.into_iter().map(|(id, _)| id).collect(),
        overlap,
    })
}

fn fill_side(
    ctx: &ToolContext,
    cohort: &[String],
    budget_tokens: usize,
    seed: u64,
) -> Result<Vec<(String, String)>, ToolError> {
    let mut ids = cohort.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut used = 0usize;
    let mut out = Vec::new();
    for id in ids {
        let summary = summarize::summarize_trace(ctx, &id)?;
        let cost = approximate_tokens(&summary);
        if used + cost > budget_tokens {
            break;
        }
        used += cost;
        out.push((id, summary));
    }
    Ok(out)
}
