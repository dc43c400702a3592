//! Subagent session loops. A subagent runs tool calls turn by turn until
//! it submits, hits its turn limit, or exhausts its one repair round.

use serde_json::Value;

use crate::config::prompts;
use crate::gateway::{ExpectedFormat, Role};
use crate::store::SchemaCache;
use crate::tools::{invoke_tool, render_result, AgentRole, Session, ToolCall, ToolContext};

use super::{
    finding_rejections, verify_evidence, Confidence, EvidenceItem, Finding, FindingStatus,
    Hypothesis, Prevalence,
};

/// What a finished subagent hands back to the engine.
#[derive(Debug, Default)]
pub struct SubagentOutcome {
    pub hypotheses: Vec<Hypothesis>,
    /// Validated findings in submission order (any status).
    pub findings: Vec<Finding>,
    /// Human-readable log of dropped/rejected material.
    pub notes: Vec<String>,
    pub turns_used: usize,
}

pub struct SubagentTask {
    pub session_id: String,
    pub gateway_role: Role,
    pub tool_role: AgentRole,
    pub prompt_asset: &'static str,
    /// Directive (scouts/generic) or serialized hypothesis (investigators).
    pub briefing: String,
    pub sample_ids: Vec<String>,
    pub max_turns: usize,
}

impl SubagentTask {
    fn system_prompt(&self, prompts_dir: Option<&std::path::Path>) -> String {
        prompts::load(self.prompt_asset, prompts_dir)
    }
}

pub fn render_schema_summary(schema: &SchemaCache) -> String {
    let mut out = String::new();
    for col in &schema.columns {
        out.push_str(&format!(
            "- {} ({}): null_rate {:.2}, distinct {}\n",
            col.name, col.inferred_type, col.null_rate, col.distinct_count
        ));
    }
    if !schema.correlations.is_empty() {
        out.push_str("notable correlations:\n");
        for c in &schema.correlations {
            out.push_str(&format!(
                "- {} ~ {} ({:?} {:.2})\n",
                c.col_a, c.col_b, c.measure, c.value
            ));
        }
    }
    out
}

/// Run one subagent session to completion.
pub fn run_subagent(ctx: &ToolContext, task: &SubagentTask) -> SubagentOutcome {
    let session = Session::new(task.session_id.clone());
    let mut outcome = SubagentOutcome::default();
    let schema_summary = ctx
        .store
        .schema()
        .map(|s| render_schema_summary(&s))
        .unwrap_or_default();
    let system = task.system_prompt(ctx.config.prompts_dir.as_deref());
    let mut last_result = String::new();
    let mut repair_used = false;

    for turn in 1..=task.max_turns {
        outcome.turns_used = turn;
        let prompt = format!(
            "{system}\n\n## Session {id} — Turn {turn} of {max}\n\n## Briefing\n{briefing}\n\n\
             ## Schema\n{schema}\n## Sample trace ids\n{sample}\n\n## Last result\n{last}",
            id = task.session_id,
            max = task.max_turns,
            briefing = task.briefing,
            schema = schema_summary,
            sample = task.sample_ids.join(", "),
            last = if last_result.is_empty() {
                "(none yet)"
            } else {
                &last_result
            },
        );
        let completion = match ctx
            .gateway
            .complete(task.gateway_role, &prompt, ExpectedFormat::Json)
        {
            Ok(c) => c,
            Err(e) => {
                outcome
                    .notes
                    .push(format!("session {}: gateway error: {e}", task.session_id));
                return outcome;
            }
        };
        let action = completion.parsed_json.unwrap_or(Value::Null);

        if action.get("tool").is_some() {
            match serde_json::from_value::<ToolCall>(action.clone()) {
                Ok(call) => {
                    last_result = match invoke_tool(ctx, &session, task.tool_role, &call) {
                        Ok(result) => render_result(&result, ctx.config.inject_cap_tokens),
                        Err(e) => format!("{{\"tool_error\": \"{e}\"}}"),
                    };
                }
                Err(e) => {
                    last_result = format!("{{\"tool_error\": \"malformed tool call: {e}\"}}");
                }
            }
            continue;
        }

        if let Some(submission) = action.get("submit") {
            let (done, feedback) = handle_submission(ctx, &session, submission, &mut outcome);
            if done {
                return outcome;
            }
            if repair_used {
                outcome.notes.push(format!(
                    "session {}: submission rejected twice; discarded",
                    task.session_id
                ));
                return outcome;
            }
            repair_used = true;
            last_result = format!(
                "{{\"submission_rejected\": {}}}\nFix the problems and submit again.",
                serde_json::to_string(&feedback).unwrap_or_default()
            );
            continue;
        }

        last_result = "{\"error\": \"response must be a tool call or a submit action\"}"
            .to_string();
    }
    outcome
        .notes
        .push(format!("session {}: turn limit reached without submission", task.session_id));
    outcome
}

/// Validate a submission in place. Returns (accepted, rejection feedback).
fn handle_submission(
    ctx: &ToolContext,
    session: &Session,
    submission: &Value,
    outcome: &mut SubagentOutcome,
) -> (bool, Vec<String>) {
    let snap = ctx.store.snapshot();
    let mut feedback = Vec::new();

    let mut hypotheses = Vec::new();
    if let Some(list) = submission.get("hypotheses").and_then(Value::as_array) {
        for raw in list {
            match serde_json::from_value::<Hypothesis>(raw.clone()) {
                Ok(mut hypothesis) => {
                    let dropped = verify_evidence(&snap, &mut hypothesis.evidence);
                    for (item, why) in dropped {
                        outcome.notes.push(format!(
                            "hypothesis '{}': dropped evidence ({}: {why})",
                            hypothesis.name, item.trace_id
                        ));
                    }
                    if hypothesis.evidence.is_empty() {
                        outcome.notes.push(format!(
                            "hypothesis '{}' dropped: no evidence survived verification",
                            hypothesis.name
                        ));
                        continue;
                    }
                    hypothesis.suggestions.truncate(3);
                    hypothesis.source = session.id.clone();
                    hypotheses.push(hypothesis);
                }
                Err(e) => feedback.push(format!("malformed hypothesis: {e}")),
            }
        }
    }

    let mut findings = Vec::new();
    let raw_findings: Vec<Value> = match submission.get("finding") {
        Some(one) => vec![one.clone()],
        None => submission
            .get("findings")
            .and_then(Value::as_array)
            .cloned()
            .unwrap_or_default(),
    };
    for raw in &raw_findings {
        match parse_finding(ctx, session, &snap, raw) {
            Ok(finding) => findings.push(finding),
            Err(problems) => feedback.extend(problems),
        }
    }

    if feedback.is_empty() {
        outcome.hypotheses.extend(hypotheses);
        outcome.findings.extend(findings);
        (true, feedback)
    } else {
        (false, feedback)
    }
}

/// Validate and construct a finding from raw submission JSON, enforcing
/// quote verification, the confirmed-evidence floor, and the saved-cohort
/// requirement.
pub(crate) fn parse_finding_value(
    ctx: &ToolContext,
    session: &Session,
    raw: &Value,
) -> Result<Finding, Vec<String>> {
    let snap = ctx.store.snapshot();
    parse_finding(ctx, session, &snap, raw)
}

fn parse_finding(
    ctx: &ToolContext,
    session: &Session,
    snap: &crate::store::CorpusState,
    raw: &Value,
) -> Result<Finding, Vec<String>> {
    let mut evidence: Vec<EvidenceItem> = raw
        .get("evidence")
        .and_then(Value::as_array)
        .map(|items| {
            items
                .iter()
                .filter_map(|v| serde_json::from_value(v.clone()).ok())
                .collect()
        })
        .unwrap_or_default();
    let dropped = verify_evidence(snap, &mut evidence);
    let cohort_label = raw
        .get("cohort_label")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let cohort_saved = !cohort_label.is_empty()
        && session.saved_cohort_labels().contains(&cohort_label)
        && ctx.store.get_cohort(&cohort_label).is_ok();
    let problems = finding_rejections(snap, raw, evidence.len(), &dropped, cohort_saved);
    if !problems.is_empty() {
        return Err(problems);
    }
    let status: FindingStatus = serde_json::from_value(
        raw.get("status").cloned().unwrap_or(Value::Null),
    )
    .map_err(|e| vec![format!("bad status: {e}")])?;
    let cohort = ctx
        .store
        .get_cohort(&cohort_label)
        .map_err(|e| vec![e.to_string()])?;
    let (num, den) = match raw.get("prevalence") {
        Some(p) => (
            p.get("numerator").and_then(Value::as_u64).unwrap_or(0),
            p.get("denominator").and_then(Value::as_u64).unwrap_or(0),
        ),
        None => (cohort.short_ids.len() as u64, snap.len() as u64),
    };
    Ok(Finding {
        name: raw
            .get("name")
            .and_then(Value::as_str)
            .unwrap_or(&cohort_label)
            .to_string(),
        hypothesis: raw
            .get("hypothesis")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string(),
        status,
        summary: raw
            .get("summary")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string(),
        prevalence: Prevalence::new(num, den),
        evidence,
        affected_trace_ids: cohort.short_ids,
        suggested_action: raw
            .get("suggested_action")
            .and_then(Value::as_str)
            .map(str::to_string),
        confidence: Confidence::from_comparison_base(den),
        additional_observations: raw
            .get("additional_observations")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string(),
        cohort_label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::gateway::mock::{MockBackend, MockRule, MockScript};
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

    fn fixture(script: MockScript) -> Fixture {
        let raws: Vec<RawTrace> = (0..12)
            .map(|i| RawTrace {
                id: format!("run-{i}"),
                events: None,
                content: Some(format!("trace {i}: the marker pattern appears here")),
                metadata: None,
            })
            .collect();
        let store = TraceStore::ingest(raws, 50_000).unwrap();
        store.schema().unwrap();
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

    fn scout_task(max_turns: usize) -> SubagentTask {
        SubagentTask {
            session_id: "scout-1".to_string(),
            gateway_role: Role::Scout,
            tool_role: AgentRole::Scout,
            prompt_asset: "scout",
            briefing: "look for markers".to_string(),
            sample_ids: vec!["t01".to_string()],
            max_turns,
        }
    }

    #[test]
    fn scout_submits_validated_hypotheses() {
        let submit = serde_json::json!({"submit": {"hypotheses": [
            {"name": "marker", "description": "d",
             "evidence": [
                {"trace_id": "t01", "quote": "marker pattern appears", "explanation": "ok"},
                {"trace_id": "t01", "quote": "FABRICATED", "explanation": "bad"}
             ],
             "estimated_prevalence": 0.5}
        ]}});
        let f = fixture(MockScript::new(vec![], &submit.to_string()));
        let out = run_subagent(&f.ctx(), &scout_task(5));
        assert_eq!(out.hypotheses.len(), 1);
        assert_eq!(out.hypotheses[0].evidence.len(), 1);
        assert_eq!(out.hypotheses[0].source, "scout-1");
        assert!(out.notes.iter().any(|n| n.contains("dropped evidence")));
    }

    #[test]
    fn hypothesis_with_no_surviving_evidence_is_dropped() {
        let submit = serde_json::json!({"submit": {"hypotheses": [
            {"name": "ghost", "description": "d",
             "evidence": [{"trace_id": "t01", "quote": "NOT PRESENT", "explanation": "x"}]}
        ]}});
        let f = fixture(MockScript::new(vec![], &submit.to_string()));
        let out = run_subagent(&f.ctx(), &scout_task(5));
        assert!(out.hypotheses.is_empty());
    }

    #[test]
    fn scout_can_use_tools_then_submit() {
        let tool = serde_json::json!({"tool": "get_trace", "args": {"short_id": "t01"}});
        let submit = serde_json::json!({"submit": {"hypotheses": [
            {"name": "h", "description": "d",
             "evidence": [{"trace_id": "t02", "quote": "marker pattern", "explanation": "e"}]}
        ]}});
        let f = fixture(MockScript::new(
            vec![
                MockRule::response(None, "Turn 1 of", &tool.to_string()),
                MockRule::response(None, "Turn 2 of", &submit.to_string()),
            ],
            "{}",
        ));
        let out = run_subagent(&f.ctx(), &scout_task(5));
        assert_eq!(out.turns_used, 2);
        assert_eq!(out.hypotheses.len(), 1);
    }

    #[test]
    fn investigator_rejected_once_then_repaired() {
        // first submission: confirmed with too little evidence and no cohort
        let bad = serde_json::json!({"submit": {"finding": {
            "name": "f", "status": "confirmed", "summary": "s",
            "prevalence": {"numerator": 6, "denominator": 12},
            "evidence": [{"trace_id": "t01", "quote": "marker pattern", "explanation": "e"}],
            "cohort_label": "c1"
        }}});
        let save = serde_json::json!({"tool": "save_affected_traces",
            "args": {"label": "c1", "short_ids": ["t01","t02","t03","t04","t05","t06"]}});
        let evidence: Vec<serde_json::Value> = (1..=8)
            .map(|i| {
                serde_json::json!({"trace_id": format!("t{:02}", i),
                    "quote": "marker pattern appears", "explanation": "e"})
            })
            .collect();
        let good = serde_json::json!({"submit": {"finding": {
            "name": "f", "status": "confirmed", "summary": "s",
            "prevalence": {"numerator": 6, "denominator": 12},
            "evidence": evidence,
            "cohort_label": "c1"
        }}});
        let f = fixture(MockScript::new(
            vec![
                MockRule::response(None, "Turn 1 of", &save.to_string()),
                MockRule::response(None, "Turn 2 of", &bad.to_string()),
                MockRule::response(None, "submission_rejected", &good.to_string()),
            ],
            "{}",
        ));
        let task = SubagentTask {
            session_id: "inv-1".to_string(),
            gateway_role: Role::Investigator,
            tool_role: AgentRole::Investigator,
            prompt_asset: "investigator",
            briefing: "validate marker".to_string(),
            sample_ids: vec![],
            max_turns: 6,
        };
        let out = run_subagent(&f.ctx(), &task);
        assert_eq!(out.findings.len(), 1);
        let finding = &out.findings[0];
        assert_eq!(finding.status, FindingStatus::Confirmed);
        assert_eq!(finding.evidence.len(), 8);
        assert_eq!(finding.affected_trace_ids.len(), 6);
        assert_eq!(finding.confidence, Confidence::Low);
    }

    #[test]
    fn second_rejection_discards_submission() {
        let bad = serde_json::json!({"submit": {"finding": {
            "name": "f", "status": "confirmed", "summary": "s",
            "evidence": [], "cohort_label": ""
        }}});
        let f = fixture(MockScript::new(vec![], &bad.to_string()));
        let task = SubagentTask {
            session_id: "inv-2".to_string(),
            gateway_role: Role::Investigator,
            tool_role: AgentRole::Investigator,
            prompt_asset: "investigator",
            briefing: "b".to_string(),
            sample_ids: vec![],
            max_turns: 6,
        };
        let out = run_subagent(&f.ctx(), &task);
        assert!(out.findings.is_empty());
        assert!(out.notes.iter().any(|n| n.contains("rejected twice")));
    }

    #[test]
    fn turn_limit_without_submission_contributes_nothing() {
        let tool = serde_json::json!({"tool": "get_schema", "args": {}});
        let f = fixture(MockScript::new(vec![], &tool.to_string()));
        let out = run_subagent(&f.ctx(), &scout_task(3));
        assert_eq!(out.turns_used, 3);
        assert!(out.hypotheses.is_empty());
        assert!(out.notes.iter().any(|n| n.contains("turn limit")));
    }

    #[test]
    fn inconclusive_finding_accepted_with_cohort() {
        let save = serde_json::json!({"tool": "save_affected_traces",
            "args": {"label": "cx", "short_ids": ["t01", "t02"]}});
        let submit = serde_json::json!({"submit": {"finding": {
            "name": "maybe", "status": "inconclusive", "summary": "unclear",
            "prevalence": {"numerator": 2, "denominator": 12},
            "evidence": [{"trace_id": "t01", "quote": "marker pattern", "explanation": "e"}],
            "cohort_label": "cx"
        }}});
        let f = fixture(MockScript::new(
            vec![
                MockRule::response(None, "Turn 1 of", &save.to_string()),
                MockRule::response(None, "Turn 2 of", &submit.to_string()),
            ],
            "{}",
        ));
        let task = SubagentTask {
            session_id: "inv-3".to_string(),
            gateway_role: Role::Investigator,
            tool_role: AgentRole::Investigator,
            prompt_asset: "investigator",
            briefing: "b".to_string(),
            sample_ids: vec![],
            max_turns: 4,
        };
        let out = run_subagent(&f.ctx(), &task);
        assert_eq!(out.findings.len(), 1);
        assert_eq!(out.findings[0].status, FindingStatus::Inconclusive);
    }
}
