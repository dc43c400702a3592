//! The orchestrator-driven analysis loop. Each turn the orchestrator
//! picks one action — dispatch scouts, dispatch investigators, a light
//! tool call, or submit — until it submits or the turn limit forces
//! synthesis from whatever has been confirmed.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;

use crate::config::{prompts, AnalysisMode};
use crate::gateway::{ExpectedFormat, Role};
use crate::tools::{invoke_tool, render_result, AgentRole, Session, ToolCall, ToolContext};

use super::report::{synthesize_report, InsightReport, RunStats};
use super::subagent::{render_schema_summary, run_subagent, SubagentOutcome, SubagentTask};
use super::{AgentError, AnalysisRequest, Finding, FindingStatus, Hypothesis};

#[derive(Debug, Clone, Serialize)]
pub struct AuditEntry {
    pub agent: String,
    pub subject: String,
    pub disposition: String,
}

/// Everything a finished analysis hands back; the report is the
/// deliverable, the audit trail is for inspection and tests.
#[derive(Debug)]
pub struct AnalysisRun {
    pub report: InsightReport,
    pub audit: Vec<AuditEntry>,
}

enum Action {
    DispatchScouts(Vec<String>),
    DispatchInvestigators(Vec<String>),
    SubmitReport { notes: String, findings: Vec<Value> },
    Tool(ToolCall),
    Unparseable(String),
}

fn parse_action(value: &Value) -> Action {
    if value.get("tool").is_some() {
        return match serde_json::from_value::<ToolCall>(value.clone()) {
            Ok(call) => Action::Tool(call),
            Err(e) => Action::Unparseable(format!("malformed tool call: {e}")),
        };
    }
    match value.get("action").and_then(Value::as_str) {
        Some("dispatch_scouts") => Action::DispatchScouts(
            value
                .get("directives")
                .and_then(Value::as_array)
                .map(|a| {
                    a.iter()
                        .filter_map(Value::as_str)
                        .map(str::to_string)
                        .collect()
                })
                .unwrap_or_default(),
        ),
        Some("dispatch_investigators") => Action::DispatchInvestigators(
            value
                .get("hypotheses")
                .and_then(Value::as_array)
                .map(|a| {
                    a.iter()
                        .filter_map(Value::as_str)
                        .map(str::to_string)
                        .collect()
                })
                .unwrap_or_default(),
        ),
        Some("submit_report") => Action::SubmitReport {
            notes: value
                .get("notes")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string(),
            findings: value
                .get("findings")
                .and_then(Value::as_array)
                .cloned()
                .unwrap_or_default(),
        },
        Some(other) => Action::Unparseable(format!("unknown action '{other}'")),
        None => Action::Unparseable("response had neither 'action' nor 'tool'".to_string()),
    }
}

struct LoopState {
    hypotheses: Vec<Hypothesis>,
    investigated: BTreeSet<String>,
    confirmed: Vec<Finding>,
    non_confirmed: Vec<Finding>,
    audit: Vec<AuditEntry>,
    scouts_dispatched: u64,
    investigators_dispatched: u64,
}

impl LoopState {
    fn accumulate_hypotheses(&mut self, incoming: Vec<Hypothesis>) -> usize {
        let mut added = 0;
        for mut h in incoming {
            let mut name = h.name.clone();
            let mut n = 1;
            while self.hypotheses.iter().any(|existing| existing.name == name) {
                n += 1;
                name = format!("{}_{n}", h.name);
            }
            h.name = name;
            self.hypotheses.push(h);
            added += 1;
        }
        added
    }

    fn accumulate_findings(&mut self, agent: &str, incoming: Vec<Finding>) -> (usize, usize) {
        let mut confirmed = 0;
        let mut other = 0;
        for finding in incoming {
            self.audit.push(AuditEntry {
                agent: agent.to_string(),
                subject: finding.name.clone(),
                disposition: format!("finding accepted with status {}", finding.status),
            });
            if finding.status == FindingStatus::Confirmed {
                self.confirmed.push(finding);
                confirmed += 1;
            } else {
                self.non_confirmed.push(finding);
                other += 1;
            }
        }
        (confirmed, other)
    }

    fn note_subagent(&mut self, outcome: &SubagentOutcome, agent: &str) {
        for note in &outcome.notes {
            self.audit.push(AuditEntry {
                agent: agent.to_string(),
                subject: String::new(),
                disposition: note.clone(),
            });
        }
    }
}

/// Run the full analysis loop and produce the final report, with all
/// trace ids remapped back to original ids.
pub fn run_analysis(ctx: &ToolContext, request: &AnalysisRequest) -> Result<AnalysisRun, AgentError> {
    let schema = ctx.store.schema()?;
    let schema_summary = render_schema_summary(&schema);
    let system = prompts::load("orchestrator", ctx.config.prompts_dir.as_deref());
    let mut state = LoopState {
        hypotheses: Vec::new(),
        investigated: BTreeSet::new(),
        confirmed: Vec::new(),
        non_confirmed: Vec::new(),
        audit: Vec::new(),
        scouts_dispatched: 0,
        investigators_dispatched: 0,
    };
    let session = Session::new("orchestrator");
    let mut last_result = String::new();
    let mut submit_notes = String::new();
    let mut forced = true;
    let mut turns_used = request.limits.max_orchestrator_turns;

    for turn in 1..=request.limits.max_orchestrator_turns {
        let prompt = orchestrator_prompt(
            &system,
            request,
            ctx,
            &schema_summary,
            &state,
            turn,
            &last_result,
        );
        let completion = ctx
            .gateway
            .complete(Role::Orchestrator, &prompt, ExpectedFormat::Json)
            .map_err(|e| AgentError::Aborted(format!("orchestrator turn {turn}: {e}")))?;
        let action = parse_action(&completion.parsed_json.unwrap_or(Value::Null));
        match action {
            Action::DispatchScouts(directives) => {
                if request.mode == AnalysisMode::OrchestratorOnly {
                    last_result = illegal_dispatch_message("dispatch_scouts");
                    continue;
                }
                if directives.is_empty() {
                    last_result = "{\"error\": \"dispatch_scouts requires directives\"}".into();
                    continue;
                }
                let batch: Vec<String> = directives
                    .into_iter()
                    .take(request.limits.scout_batch)
                    .collect();
                let outcomes = dispatch_scouts(ctx, request, &batch, state.scouts_dispatched);
                state.scouts_dispatched += batch.len() as u64;
                let mut new_h = 0;
                let mut new_f = (0, 0);
                for (i, outcome) in outcomes.into_iter().enumerate() {
                    let agent = format!("scout-{}", state.scouts_dispatched as usize - batch.len() + i + 1);
                    state.note_subagent(&outcome, &agent);
                    new_h += state.accumulate_hypotheses(outcome.hypotheses);
                    // generic subagents may validate as they explore
                    let (c, o) = state.accumulate_findings(&agent, outcome.findings);
                    new_f = (new_f.0 + c, new_f.1 + o);
                }
                last_result = format!(
                    "{{\"dispatched_scouts\": {}, \"new_hypotheses\": {new_h}, \
                     \"new_confirmed_findings\": {}}}",
                    batch.len(),
                    new_f.0
                );
            }
            Action::DispatchInvestigators(requested) => {
                if request.mode == AnalysisMode::OrchestratorOnly {
                    last_result = illegal_dispatch_message("dispatch_investigators");
                    continue;
                }
                let selected = prioritize(ctx, &state, &requested, request.limits.investigator_batch);
                if selected.is_empty() {
                    last_result = "{\"info\": \"no uninvestigated hypotheses to dispatch\"}".into();
                    continue;
                }
                let outcomes = dispatch_investigators(
                    ctx,
                    request,
                    &selected,
                    state.investigators_dispatched,
                );
                state.investigators_dispatched += selected.len() as u64;
                for h in &selected {
                    state.investigated.insert(h.name.clone());
                }
                let mut totals = (0usize, 0usize);
                for (i, outcome) in outcomes.into_iter().enumerate() {
                    let agent = format!(
                        "investigator-{}",
                        state.investigators_dispatched as usize - selected.len() + i + 1
                    );
                    state.note_subagent(&outcome, &agent);
                    state.accumulate_hypotheses(outcome.hypotheses);
                    let (c, o) = state.accumulate_findings(&agent, outcome.findings);
                    totals = (totals.0 + c, totals.1 + o);
                }
                // merge new extractions and refresh the schema, per loop contract
                ctx.store.consolidate()?;
                last_result = format!(
                    "{{\"dispatched_investigators\": {}, \"confirmed\": {}, \"other_status\": {}}}",
                    selected.len(),
                    totals.0,
                    totals.1
                );
            }
            Action::SubmitReport { notes, findings } => {
                if request.mode == AnalysisMode::OrchestratorOnly && !findings.is_empty() {
                    let (accepted, problems) = intake_direct_findings(ctx, &findings);
                    for p in &problems {
                        state.audit.push(AuditEntry {
                            agent: "orchestrator".to_string(),
                            subject: String::new(),
                            disposition: format!("direct finding rejected: {p}"),
                        });
                    }
                    state.accumulate_findings("orchestrator", accepted);
                } else if !findings.is_empty() {
                    state.audit.push(AuditEntry {
                        agent: "orchestrator".to_string(),
                        subject: String::new(),
                        disposition:
                            "direct findings ignored outside orchestrator_only mode".to_string(),
                    });
                }
                submit_notes = notes;
                forced = false;
                turns_used = turn;
                break;
            }
            Action::Tool(call) => {
                last_result = match invoke_tool(ctx, &session, AgentRole::Orchestrator, &call) {
                    Ok(result) => render_result(&result, ctx.config.inject_cap_tokens),
                    Err(e) => format!("{{\"tool_error\": \"{e}\"}}"),
                };
            }
            Action::Unparseable(message) => {
                last_result = format!("{{\"error\": \"{message}\"}}");
            }
        }
    }

    if forced {
        state.audit.push(AuditEntry {
            agent: "orchestrator".to_string(),
            subject: String::new(),
            disposition: "turn limit reached; synthesizing from accumulated findings".to_string(),
        });
    }

    let stats = RunStats {
        rounds: turns_used as u64,
        scouts_dispatched: state.scouts_dispatched,
        investigators_dispatched: state.investigators_dispatched,
        cost_usd: 0.0, // filled after synthesis, which itself costs a call
        forced_synthesis: forced,
        synthesis_fallback: false,
    };
    let mut report = synthesize_report(
        ctx,
        &request.query,
        state.confirmed,
        state.non_confirmed,
        &submit_notes,
        stats,
    )?;
    report.run_stats.cost_usd = ctx.gateway.usage_report().total_cost_usd;
    Ok(AnalysisRun {
        report,
        audit: state.audit,
    })
}

fn illegal_dispatch_message(action: &str) -> String {
    format!(
        "{{\"error\": \"action '{action}' is disabled in orchestrator_only mode; \
         proceed without subagents\"}}"
    )
}

fn orchestrator_prompt(
    system: &str,
    request: &AnalysisRequest,
    ctx: &ToolContext,
    schema_summary: &str,
    state: &LoopState,
    turn: usize,
    last_result: &str,
) -> String {
    let mode = match request.mode {
        AnalysisMode::Full => "full",
        AnalysisMode::OrchestratorOnly => "orchestrator_only (subagent dispatch disabled)",
        AnalysisMode::GenericSubagents => "generic_subagents (untyped subagents)",
    };
    let mut hyp_block = String::new();
    for h in &state.hypotheses {
        let investigated = if state.investigated.contains(&h.name) {
            "investigated"
        } else {
            "open"
        };
        hyp_block.push_str(&format!(
            "- [{investigated}] {} (evidence {}, est prevalence {:.2})\n",
            h.name,
            h.evidence.len(),
            h.estimated_prevalence.map(|p| p.as_fraction()).unwrap_or(0.0),
        ));
    }
    if hyp_block.is_empty() {
        hyp_block = "(none yet)\n".to_string();
    }
    let mut finding_block = String::new();
    for f in &state.confirmed {
        finding_block.push_str(&format!(
            "- {} [confirmed] prevalence {}/{}\n",
            f.name, f.prevalence.numerator, f.prevalence.denominator
        ));
    }
    if finding_block.is_empty() {
        finding_block = "(none yet)\n".to_string();
    }
    format!(
        "{system}\n\n## Analysis query\n{query}\n\n## Mode\n{mode}\n\n\
         ## Turn {turn} of {max}\n\n## Corpus\n{n} traces\n\n\
         ## Schema\n{schema_summary}\n## Hypotheses ({hn})\n{hyp_block}\n\
         ## Confirmed findings ({fn_})\n{finding_block}\n## Last result\n{last}",
        query = request.query,
        max = request.limits.max_orchestrator_turns,
        n = ctx.store.len(),
        hn = state.hypotheses.len(),
        fn_ = state.confirmed.len(),
        last = if last_result.is_empty() {
            "(none yet)"
        } else {
            last_result
        },
    )
}

fn subagent_sample(ctx: &ToolContext, request: &AnalysisRequest, agent_ordinal: u64) -> Vec<String> {
    let snap = ctx.store.snapshot();
    let mut ids: Vec<String> = snap.traces.iter().map(|t| t.short_id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(request.seed ^ (0xA5A5 + agent_ordinal));
    ids.shuffle(&mut rng);
    ids.truncate(request.scout_sample_size.min(snap.len()));
    ids.sort();
    ids
}

/// Scouts (or generic agents) run in parallel, one per directive.
fn dispatch_scouts(
    ctx: &ToolContext,
    request: &AnalysisRequest,
    directives: &[String],
    already_dispatched: u64,
) -> Vec<SubagentOutcome> {
    let generic = request.mode == AnalysisMode::GenericSubagents;
    let tasks: Vec<SubagentTask> = directives
        .iter()
        .enumerate()
        .map(|(i, directive)| {
            let ordinal = already_dispatched + i as u64 + 1;
            SubagentTask {
                session_id: if generic {
                    format!("generic-{ordinal}")
                } else {
                    format!("scout-{ordinal}")
                },
                gateway_role: if generic { Role::Generic } else { Role::Scout },
                tool_role: if generic {
                    AgentRole::Generic
                } else {
                    AgentRole::Scout
                },
                prompt_asset: if generic { "generic" } else { "scout" },
                briefing: directive.clone(),
                sample_ids: subagent_sample(ctx, request, ordinal),
                max_turns: request.limits.max_subagent_turns,
            }
        })
        .collect();
    run_parallel(ctx, &tasks)
}

/// One investigator (or generic agent) per selected hypothesis, parallel.
fn dispatch_investigators(
    ctx: &ToolContext,
    request: &AnalysisRequest,
    selected: &[Hypothesis],
    already_dispatched: u64,
) -> Vec<SubagentOutcome> {
    let generic = request.mode == AnalysisMode::GenericSubagents;
    let tasks: Vec<SubagentTask> = selected
        .iter()
        .enumerate()
        .map(|(i, hypothesis)| {
            let ordinal = already_dispatched + i as u64 + 1;
            SubagentTask {
                session_id: if generic {
                    format!("generic-v-{ordinal}")
                } else {
                    format!("investigator-{ordinal}")
                },
                gateway_role: if generic {
                    Role::Generic
                } else {
                    Role::Investigator
                },
                tool_role: if generic {
                    AgentRole::Generic
                } else {
                    AgentRole::Investigator
                },
                prompt_asset: if generic { "generic" } else { "investigator" },
                briefing: serde_json::to_string_pretty(hypothesis).unwrap_or_default(),
                sample_ids: Vec::new(),
                max_turns: request.limits.max_subagent_turns,
            }
        })
        .collect();
    run_parallel(ctx, &tasks)
}

fn run_parallel(ctx: &ToolContext, tasks: &[SubagentTask]) -> Vec<SubagentOutcome> {
    let mut slots: Vec<Option<SubagentOutcome>> = tasks.iter().map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for task in tasks {
            handles.push(scope.spawn(move || run_subagent(ctx, task)));
        }
        for (slot, handle) in slots.iter_mut().zip(handles) {
            *slot = Some(handle.join().expect("subagent thread panicked"));
        }
    });
    slots.into_iter().map(|s| s.expect("joined")).collect()
}

/// Select up to `capacity` uninvestigated hypotheses. Explicit names from
/// the orchestrator win; otherwise the orchestrator model ranks, with a
/// deterministic fallback (evidence count desc, estimated prevalence
/// desc, name asc) on any parse trouble.
fn prioritize(
    ctx: &ToolContext,
    state: &LoopState,
    requested: &[String],
    capacity: usize,
) -> Vec<Hypothesis> {
    let candidates: Vec<&Hypothesis> = state
        .hypotheses
        .iter()
        .filter(|h| !state.investigated.contains(&h.name))
        .collect();
    if candidates.is_empty() || capacity == 0 {
        return Vec::new();
    }
    if !requested.is_empty() {
        let picked: Vec<Hypothesis> = requested
            .iter()
            .filter_map(|name| candidates.iter().find(|h| &h.name == name).map(|h| (*h).clone()))
            .take(capacity)
            .collect();
        if !picked.is_empty() {
            return picked;
        }
    }
    if candidates.len() <= capacity {
        return candidates.into_iter().cloned().collect();
    }
    // ask the orchestrator model to rank
    let listing: String = candidates
        .iter()
        .map(|h| format!("- {} (evidence {}): {}\n", h.name, h.evidence.len(), h.description))
        .collect();
    let prompt = format!(
        "Prioritize these candidate hypotheses for investigation. Return VALID JSON \
         {{\"ranked\": [\"<name>\", ...]}} with the most promising first.\n\n{listing}"
    );
    if let Ok(completion) = ctx
        .gateway
        .complete(Role::Orchestrator, &prompt, ExpectedFormat::Json)
    {
        if let Some(ranked) = completion
            .parsed_json
            .as_ref()
            .and_then(|v| v.get("ranked"))
            .and_then(Value::as_array)
        {
            let picked: Vec<Hypothesis> = ranked
                .iter()
                .filter_map(Value::as_str)
                .filter_map(|name| {
                    candidates.iter().find(|h| h.name == name).map(|h| (*h).clone())
                })
                .take(capacity)
                .collect();
            if !picked.is_empty() {
                return picked;
            }
        }
    }
    // deterministic fallback
    let mut sorted: Vec<Hypothesis> = candidates.into_iter().cloned().collect();
    sorted.sort_by(|a, b| {
        b.evidence
            .len()
            .cmp(&a.evidence.len())
            .then_with(|| {
                let pa = a.estimated_prevalence.map(|p| p.as_fraction()).unwrap_or(0.0);
                let pb = b.estimated_prevalence.map(|p| p.as_fraction()).unwrap_or(0.0);
                pb.partial_cmp(&pa).unwrap_or(std::cmp::Ordering::Equal)
            })
            .then_with(|| a.name.cmp(&b.name))
    });
    sorted.truncate(capacity);
    sorted
}

/// Orchestrator-only mode: findings arrive in the submit action. The
/// engine persists each finding's cohort itself (the orchestrator has no
/// save_affected_traces tool), then applies the normal validation rules.
fn intake_direct_findings(
    ctx: &ToolContext,
    raw_findings: &[Value],
) -> (Vec<Finding>, Vec<String>) {
    let session = Session::new("orchestrator-direct");
    let mut accepted = Vec::new();
    let mut problems = Vec::new();
    for raw in raw_findings {
        let mut raw = raw.clone();
        let name = raw
            .get("name")
            .and_then(Value::as_str)
            .unwrap_or("finding")
            .to_string();
        let label = raw
            .get("cohort_label")
            .and_then(Value::as_str)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .unwrap_or_else(|| format!("cohort_{}", slug(&name)));
        let ids: Vec<String> = raw
            .get("affected_trace_ids")
            .and_then(Value::as_array)
            .map(|a| {
                a.iter()
                    .filter_map(Value::as_str)
                    .map(str::to_string)
                    .collect()
            })
            .unwrap_or_default();
        match ctx.store.save_affected_traces(&label, &ids, Some(name.clone())) {
            Ok(_) => session.note_cohort(&label),
            Err(e) => {
                problems.push(format!("finding '{name}': cohort not persistable: {e}"));
                continue;
            }
        }
        raw["cohort_label"] = Value::String(label);
        match super::subagent::parse_finding_value(ctx, &session, &raw) {
            Ok(finding) => accepted.push(finding),
            Err(list) => problems.extend(
                list.into_iter().map(|p| format!("finding '{name}': {p}")),
            ),
        }
    }
    (accepted, problems)
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect()
}
