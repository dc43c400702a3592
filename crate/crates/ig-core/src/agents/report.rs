//! Final report assembly: one synthesis call for the narrative, engine-
//! executed de-duplication, structural fields assembled programmatically,
//! and trace ids remapped to original ids as the last step. Grounding
//! validation re-checks every quote, id, and prevalence claim.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::gateway::{ExpectedFormat, Role};
use crate::store::{IdMap, RemapIds, StoreError, TraceStore};
use crate::tools::ToolContext;

use super::{AgentError, Finding, Prevalence};

#[cfg(test)]
use super::{EvidenceItem, FindingStatus};

/// Cohort-overlap threshold above which two same-status findings merge.
pub const MERGE_JACCARD: f64 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusDescriptor {
    pub n_traces: usize,
    pub label_columns: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunStats {
    pub rounds: u64,
    pub scouts_dispatched: u64,
    pub investigators_dispatched: u64,
    pub cost_usd: f64,
    pub forced_synthesis: bool,
    pub synthesis_fallback: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InsightReport {
    pub query: String,
    pub corpus: CorpusDescriptor,
    /// Confirmed findings first, then tagged refuted/inconclusive ones.
    pub findings: Vec<Finding>,
    pub synthesis: String,
    pub run_stats: RunStats,
}

impl RemapIds for Finding {
    fn remap_ids(&mut self, id_map: &IdMap) -> Result<(), StoreError> {
        for item in &mut self.evidence {
            item.trace_id = crate::store::remap_id(&item.trace_id, id_map)?;
        }
        crate::store::remap_id_list(&mut self.affected_trace_ids, id_map)
    }
}

impl RemapIds for InsightReport {
    fn remap_ids(&mut self, id_map: &IdMap) -> Result<(), StoreError> {
        for finding in &mut self.findings {
            finding.remap_ids(id_map)?;
        }
        Ok(())
    }
}

/// Build the final report: merge near-duplicates, synthesize the
/// narrative, and remap every id to the original space.
pub fn synthesize_report(
    ctx: &ToolContext,
    query: &str,
    confirmed: Vec<Finding>,
    non_confirmed: Vec<Finding>,
    orchestrator_notes: &str,
    mut stats: RunStats,
) -> Result<InsightReport, AgentError> {
    let snap = ctx.store.snapshot();
    let mut findings = confirmed;

    let synthesis = if findings.is_empty() && non_confirmed.is_empty() {
        stats.synthesis_fallback = false;
        "No confirmed findings. The analysis completed without validating any \
         hypothesis on this corpus."
            .to_string()
    } else {
        let listing: String = findings
            .iter()
            .chain(non_confirmed.iter())
            .map(|f| {
                format!(
                    "- {} [{}] prevalence {}/{}: {}\n",
                    f.name, f.status, f.prevalence.numerator, f.prevalence.denominator, f.summary
                )
            })
            .collect();
        let prompt = format!(
            "Synthesize a final report narrative for this trace analysis.\n\
             Query: {query}\nOrchestrator notes: {orchestrator_notes}\n\
             Findings:\n{listing}\n\
             Respond with VALID JSON: {{\"synthesis\": \"...\", \
             \"merges\": [[\"<finding name>\", \"<finding name>\"], ...]}}. \
             Propose a merge only for findings describing the same underlying pattern."
        );
        match ctx
            .gateway
            .complete(Role::Orchestrator, &prompt, ExpectedFormat::Json)
        {
            Ok(completion) => {
                let parsed = completion.parsed_json.unwrap_or(Value::Null);
                let proposed: Vec<(String, String)> = parsed
                    .get("merges")
                    .and_then(Value::as_array)
                    .map(|pairs| {
                        pairs
                            .iter()
                            .filter_map(|p| {
                                let a = p.get(0).and_then(Value::as_str)?;
                                let b = p.get(1).and_then(Value::as_str)?;
                                Some((a.to_string(), b.to_string()))
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                apply_proposed_merges(&mut findings, &proposed);
                parsed
                    .get("synthesis")
                    .and_then(Value::as_str)
                    .unwrap_or_default()
                    .to_string()
            }
            Err(e) => {
                stats.synthesis_fallback = true;
                format!("[synthesis unavailable: {e}]")
            }
        }
    };
    merge_by_cohort_overlap(&mut findings);

    // tagged non-confirmed findings ride along after the confirmed set
    findings.extend(non_confirmed);

    let label_columns: Vec<String> = {
        let mut cols: BTreeSet<String> = BTreeSet::new();
        for t in &snap.traces {
            cols.extend(t.metadata.keys().cloned());
        }
        cols.into_iter().collect()
    };
    let mut report = InsightReport {
        query: query.to_string(),
        corpus: CorpusDescriptor {
            n_traces: snap.len(),
            label_columns,
        },
        findings,
        synthesis,
        run_stats: stats,
    };
    report.remap_ids(&snap.id_map)?;
    Ok(report)
}

/// Merges proposed by the synthesis model are executed only when both
/// findings exist with the same status.
fn apply_proposed_merges(findings: &mut Vec<Finding>, proposed: &[(String, String)]) {
    for (a, b) in proposed {
        let ia = findings.iter().position(|f| &f.name == a);
        let ib = findings.iter().position(|f| &f.name == b);
        if let (Some(ia), Some(ib)) = (ia, ib) {
            if ia != ib && findings[ia].status == findings[ib].status {
                let (keep, fold) = if ia < ib { (ia, ib) } else { (ib, ia) };
                let folded = findings.remove(fold);
                merge_into(&mut findings[keep], folded);
            }
        }
    }
}

/// Engine-initiated merge: any same-status pair whose cohorts overlap at
/// Jaccard >= 0.5 describes the same pattern.
fn merge_by_cohort_overlap(findings: &mut Vec<Finding>) {
    let mut i = 0;
    while i < findings.len() {
        let mut j = i + 1;
        while j < findings.len() {
            if findings[i].status == findings[j].status
                && jaccard(&findings[i].affected_trace_ids, &findings[j].affected_trace_ids)
                    >= MERGE_JACCARD
            {
                let folded = findings.remove(j);
                merge_into(&mut findings[i], folded);
            } else {
                j += 1;
            }
        }
        i += 1;
    }
}

fn jaccard(a: &[String], b: &[String]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let sa: BTreeSet<&String> = a.iter().collect();
    let sb: BTreeSet<&String> = b.iter().collect();
    let inter = sa.intersection(&sb).count() as f64;
    let union = sa.union(&sb).count() as f64;
    inter / union
}

/// Folding preserves the evidence union and unions the cohorts; the kept
/// finding's name and summary win.
fn merge_into(keep: &mut Finding, folded: Finding) {
    let existing: BTreeSet<(String, String)> = keep
        .evidence
        .iter()
        .map(|e| (e.trace_id.clone(), e.quote.clone()))
        .collect();
    for item in folded.evidence {
        if !existing.contains(&(item.trace_id.clone(), item.quote.clone())) {
            keep.evidence.push(item);
        }
    }
    let mut ids: BTreeSet<String> = keep.affected_trace_ids.iter().cloned().collect();
    ids.extend(folded.affected_trace_ids);
    keep.affected_trace_ids = ids.into_iter().collect();
    let den = keep.prevalence.denominator.max(folded.prevalence.denominator);
    keep.prevalence = Prevalence::new(keep.affected_trace_ids.len() as u64, den);
    keep.confidence = super::Confidence::from_comparison_base(den);
    if !folded.additional_observations.is_empty() {
        if !keep.additional_observations.is_empty() {
            keep.additional_observations.push_str(" | ");
        }
        keep.additional_observations
            .push_str(&folded.additional_observations);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundingViolation {
    pub finding: String,
    pub kind: String,
    pub trace_id: Option<String>,
    pub detail: String,
}

/// Re-validate a finished report against the store: every quote must be a
/// verbatim substring of its cited trace, every id must resolve, and
/// every prevalence must be consistent with the cohort and corpus sizes.
pub fn validate_grounding(report: &InsightReport, store: &TraceStore) -> Vec<GroundingViolation> {
    let snap = store.snapshot();
    let mut violations = Vec::new();
    for finding in &report.findings {
        for item in &finding.evidence {
            match snap.id_map.short_of(&item.trace_id) {
                None => violations.push(GroundingViolation {
                    finding: finding.name.clone(),
                    kind: "unknown_trace_id".to_string(),
                    trace_id: Some(item.trace_id.clone()),
                    detail: "cited id does not resolve in the corpus".to_string(),
                }),
                Some(short) => {
                    let grounded = snap
                        .trace(short)
                        .map(|t| t.full_text().contains(&item.quote))
                        .unwrap_or(false);
                    if !grounded {
                        violations.push(GroundingViolation {
                            finding: finding.name.clone(),
                            kind: "fabricated_quote".to_string(),
                            trace_id: Some(item.trace_id.clone()),
                            detail: format!(
                                "quote is not a substring of the cited trace: {:?}",
                                truncate(&item.quote, 80)
                            ),
                        });
                    }
                }
            }
        }
        for id in &finding.affected_trace_ids {
            if snap.id_map.short_of(id).is_none() {
                violations.push(GroundingViolation {
                    finding: finding.name.clone(),
                    kind: "unknown_affected_id".to_string(),
                    trace_id: Some(id.clone()),
                    detail: "affected trace id does not resolve".to_string(),
                });
            }
        }
        if finding.prevalence.denominator > snap.len() as u64 {
            violations.push(GroundingViolation {
                finding: finding.name.clone(),
                kind: "prevalence_denominator".to_string(),
                trace_id: None,
                detail: format!(
                    "denominator {} exceeds corpus size {}",
                    finding.prevalence.denominator,
                    snap.len()
                ),
            });
        }
        if finding.prevalence.numerator > finding.affected_trace_ids.len() as u64 {
            violations.push(GroundingViolation {
                finding: finding.name.clone(),
                kind: "prevalence_numerator".to_string(),
                trace_id: None,
                detail: format!(
                    "numerator {} exceeds cohort size {}",
                    finding.prevalence.numerator,
                    finding.affected_trace_ids.len()
                ),
            });
        }
    }
    violations
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

/// Deterministic pretty rendering used for report.json.
pub fn render_report(report: &InsightReport) -> String {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    text
}
