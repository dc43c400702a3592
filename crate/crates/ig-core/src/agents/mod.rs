//! Orchestrated analysis loop: typed Scout and Investigator subagents
//! driven by an orchestrator that dispatches batches, accumulates
//! hypotheses and confirmed findings across rounds, and synthesizes the
//! final evidence-grounded report.

mod engine;
mod report;
mod subagent;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::config::{AnalysisMode, Limits};
use crate::store::CorpusState;

pub use engine::{run_analysis, AnalysisRun, AuditEntry};
pub use report::{
    render_report, synthesize_report, validate_grounding, CorpusDescriptor, GroundingViolation,
    InsightReport, RunStats,
};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Gateway(#[from] crate::gateway::GatewayError),
    #[error(transparent)]
    Tool(#[from] crate::tools::ToolError),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error("analysis aborted: {0}")]
    Aborted(String),
}

#[derive(Debug, Clone)]
pub struct AnalysisRequest {
    pub query: String,
    pub mode: AnalysisMode,
    pub seed: u64,
    pub limits: Limits,
    /// Traces sampled per scout (clamped to the corpus size).
    pub scout_sample_size: usize,
}

impl AnalysisRequest {
    pub fn new(query: impl Into<String>) -> AnalysisRequest {
        AnalysisRequest {
            query: query.into(),
            mode: AnalysisMode::Full,
            seed: 0,
            limits: Limits::default(),
            scout_sample_size: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub trace_id: String,
    pub quote: String,
    pub explanation: String,
}

/// Scout estimate of how widespread a pattern is: either a bare fraction
/// or a count with denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PrevalenceEstimate {
    Fraction(f64),
    Count { numerator: u64, denominator: u64 },
}

impl PrevalenceEstimate {
    pub fn as_fraction(&self) -> f64 {
        match self {
            PrevalenceEstimate::Fraction(f) => *f,
            PrevalenceEstimate::Count {
                numerator,
                denominator,
            } => {
                if *denominator == 0 {
                    0.0
                } else {
                    *numerator as f64 / *denominator as f64
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hypothesis {
    pub name: String,
    pub description: String,
    pub evidence: Vec<EvidenceItem>,
    #[serde(default)]
    pub estimated_prevalence: Option<PrevalenceEstimate>,
    #[serde(default)]
    pub suggestions: Vec<String>,
    /// Scout session id that produced it.
    #[serde(default)]
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FindingStatus {
    Confirmed,
    Refuted,
    Inconclusive,
}

impl std::fmt::Display for FindingStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FindingStatus::Confirmed => "confirmed",
            FindingStatus::Refuted => "refuted",
            FindingStatus::Inconclusive => "inconclusive",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    High,
    Medium,
    Low,
}

impl Confidence {
    /// high for comparison bases over 100 traces, medium for 20-100,
    /// low below 20.
    pub fn from_comparison_base(denominator: u64) -> Confidence {
        if denominator > 100 {
            Confidence::High
        } else if denominator >= 20 {
            Confidence::Medium
        } else {
            Confidence::Low
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prevalence {
    #[serde(rename = "num")]
    pub numerator: u64,
    #[serde(rename = "den")]
    pub denominator: u64,
    pub fraction: f64,
}

impl Prevalence {
    pub fn new(numerator: u64, denominator: u64) -> Prevalence {
        Prevalence {
            numerator,
            denominator,
            fraction: if denominator == 0 {
                0.0
            } else {
                numerator as f64 / denominator as f64
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Finding {
    pub name: String,
    /// Name of the hypothesis this finding validates.
    #[serde(default)]
    pub hypothesis: String,
    pub status: FindingStatus,
    pub summary: String,
    pub prevalence: Prevalence,
    pub evidence: Vec<EvidenceItem>,
    pub affected_trace_ids: Vec<String>,
    #[serde(default)]
    pub suggested_action: Option<String>,
    pub confidence: Confidence,
    #[serde(default)]
    pub additional_observations: String,
    #[serde(default)]
    pub cohort_label: String,
}

/// Minimum verified evidence items for a confirmed finding.
pub const MIN_CONFIRMED_EVIDENCE: usize = 8;

/// Keep only evidence whose quote is a verbatim substring of the cited
/// trace's rendered content; returns the dropped items.
pub fn verify_evidence(
    corpus: &CorpusState,
    evidence: &mut Vec<EvidenceItem>,
) -> Vec<(EvidenceItem, String)> {
    let mut dropped = Vec::new();
    evidence.retain(|item| match corpus.trace(&item.trace_id) {
        Ok(trace) => {
            if trace.full_text().contains(&item.quote) {
                true
            } else {
                dropped.push((item.clone(), "quote is not a substring of the trace".to_string()));
                false
            }
        }
        Err(_) => {
            dropped.push((item.clone(), "unknown trace id".to_string()));
            false
        }
    });
    dropped
}

/// Problems that reject an investigator submission (returned once for
/// repair before the submission is discarded).
pub fn finding_rejections(
    corpus: &CorpusState,
    finding: &Value,
    verified_evidence: usize,
    dropped: &[(EvidenceItem, String)],
    cohort_saved: bool,
) -> Vec<String> {
    let mut problems = Vec::new();
    let _ = corpus;
    if !dropped.is_empty() {
        for (item, why) in dropped {
            problems.push(format!(
                "evidence for trace '{}' failed verification: {why}",
                item.trace_id
            ));
        }
    }
    let status = finding.get("status").and_then(Value::as_str).unwrap_or("");
    if status == "confirmed" && verified_evidence < MIN_CONFIRMED_EVIDENCE {
        problems.push(format!(
            "confirmed findings need at least {MIN_CONFIRMED_EVIDENCE} verified evidence items (got {verified_evidence})"
        ));
    }
    if !cohort_saved {
        problems.push(
            "the affected cohort was not persisted with save_affected_traces".to_string(),
        );
    }
    problems
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{RawTrace, TraceStore};

    fn corpus() -> TraceStore {
        TraceStore::ingest(
            vec![
                RawTrace {
                    id: "run-a".into(),
                    events: None,
                    content: Some("the agent retried the tool call three times".into()),
                    metadata: None,
                },
                RawTrace {
                    id: "run-b".into(),
                    events: None,
                    content: Some("fallback produced an empty result".into()),
                    metadata: None,
                },
            ],
            50_000,
        )
        .unwrap()
    }

    #[test]
    fn fabricated_quotes_are_dropped() {
        let store = corpus();
        let snap = store.snapshot();
        let mut evidence = vec![
            EvidenceItem {
                trace_id: "t1".into(),
                quote: "retried the tool call".into(),
                explanation: "real".into(),
            },
            EvidenceItem {
                trace_id: "t1".into(),
                quote: "this text does not exist".into(),
                explanation: "fake".into(),
            },
            EvidenceItem {
                trace_id: "t9".into(),
                quote: "whatever".into(),
                explanation: "bad id".into(),
            },
        ];
        let dropped = verify_evidence(&snap, &mut evidence);
        assert_eq!(evidence.len(), 1);
        assert_eq!(dropped.len(), 2);
    }

    #[test]
    fn confidence_buckets() {
        assert_eq!(Confidence::from_comparison_base(101), Confidence::High);
        assert_eq!(Confidence::from_comparison_base(100), Confidence::Medium);
        assert_eq!(Confidence::from_comparison_base(20), Confidence::Medium);
        assert_eq!(Confidence::from_comparison_base(19), Confidence::Low);
    }

    #[test]
    fn prevalence_estimate_forms() {
        let f: PrevalenceEstimate = serde_json::from_str("0.4").unwrap();
        assert!((f.as_fraction() - 0.4).abs() < 1e-12);
        let c: PrevalenceEstimate =
            serde_json::from_str(r#"{"numerator": 25, "denominator": 60}"#).unwrap();
        assert!((c.as_fraction() - 25.0 / 60.0).abs() < 1e-12);
    }

    #[test]
    fn rejection_reasons_compose() {
        let store = corpus();
        let snap = store.snapshot();
        let finding = serde_json::json!({"status": "confirmed"});
        let problems = finding_rejections(&snap, &finding, 5, &[], false);
        assert_eq!(problems.len(), 2);
        let ok = finding_rejections(&snap, &finding, 9, &[], true);
        assert!(ok.is_empty());
    }
}
