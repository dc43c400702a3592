//! Union-gold clustering: every finding from every system is pooled into
//! one judge call that groups findings describing the same underlying
//! observation; unclustered findings become singleton clusters. Coverage
//! scores a report by the fraction of clusters it cites into.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agents::InsightReport;
use crate::config::prompts;
use crate::gateway::{ExpectedFormat, Gateway, Role};

use super::EvalError;

pub const MAX_CLUSTER_NAME: usize = 80;
pub const MAX_REPRESENTATIVES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MemberRef {
    pub system: String,
    pub fold: u32,
    pub finding_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldCluster {
    pub canonical_name: String,
    pub description: String,
    pub representative_ids: Vec<String>,
    pub member_findings: Vec<MemberRef>,
}

/// One pooled finding with its cited trace ids (evidence + affected).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PooledFinding {
    pub member: MemberRef,
    pub name: String,
    pub summary: String,
    pub cited_ids: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FindingPool {
    pub findings: Vec<PooledFinding>,
}

impl FindingPool {
    pub fn build(reports: &[(String, u32, &InsightReport)]) -> FindingPool {
        let mut findings = Vec::new();
        for (system, fold, report) in reports {
            for (i, f) in report.findings.iter().enumerate() {
                let mut cited: BTreeSet<String> =
                    f.evidence.iter().map(|e| e.trace_id.clone()).collect();
                cited.extend(f.affected_trace_ids.iter().cloned());
                findings.push(PooledFinding {
                    member: MemberRef {
                        system: system.clone(),
                        fold: *fold,
                        finding_index: i,
                    },
                    name: f.name.clone(),
                    summary: f.summary.clone(),
                    cited_ids: cited,
                });
            }
        }
        FindingPool { findings }
    }

    pub fn get(&self, member: &MemberRef) -> Option<&PooledFinding> {
        self.findings.iter().find(|f| &f.member == member)
    }

    /// Trace ids belonging to a cluster: the union of member findings'
    /// cited ids plus the cluster's representative ids.
    pub fn cluster_trace_set(&self, cluster: &GoldCluster) -> BTreeSet<String> {
        let mut set: BTreeSet<String> = cluster.representative_ids.iter().cloned().collect();
        for member in &cluster.member_findings {
            if let Some(f) = self.get(member) {
                set.extend(f.cited_ids.iter().cloned());
            }
        }
        set
    }
}

/// Clusters plus the pool they were built from; coverage and rubric
/// scoring both need the pair, so they serialize together.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldSet {
    pub clusters: Vec<GoldCluster>,
    pub pool: FindingPool,
}

fn cluster_prompt(pool: &FindingPool, prompts_dir: Option<&std::path::Path>) -> String {
    let mut listing = String::new();
    for f in &pool.findings {
        let ids: Vec<&str> = f.cited_ids.iter().map(String::as_str).take(10).collect();
        listing.push_str(&format!(
            "- system={} fold={} finding_index={} name={:?} cited_ids=[{}]\n  summary: {}\n",
            f.member.system,
            f.member.fold,
            f.member.finding_index,
            f.name,
            ids.join(", "),
            f.summary,
        ));
    }
    format!(
        "{}\n\n## Findings from all systems\n{listing}",
        prompts::load("judge_cluster", prompts_dir)
    )
}

fn parse_clusters(value: &Value, pool: &FindingPool) -> Result<Vec<GoldCluster>, Vec<String>> {
    let mut problems = Vec::new();
    let raw = value
        .get("clusters")
        .and_then(Value::as_array)
        .ok_or_else(|| vec!["missing 'clusters' array".to_string()])?;
    let mut clusters = Vec::new();
    for (i, c) in raw.iter().enumerate() {
        let name = c
            .get("canonical_name")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        if name.is_empty() {
            problems.push(format!("cluster {i}: empty canonical_name"));
            continue;
        }
        if name.chars().count() > MAX_CLUSTER_NAME {
            problems.push(format!(
                "cluster {i}: canonical_name exceeds {MAX_CLUSTER_NAME} chars"
            ));
            continue;
        }
        let representative_ids: Vec<String> = c
            .get("representative_trace_ids")
            .and_then(Value::as_array)
            .map(|a| {
                a.iter()
                    .filter_map(Value::as_str)
                    .map(str::to_string)
                    .collect()
            })
            .unwrap_or_default();
        if representative_ids.len() > MAX_REPRESENTATIVES {
            problems.push(format!(
                "cluster {i}: more than {MAX_REPRESENTATIVES} representative ids"
            ));
            continue;
        }
        let mut member_findings = Vec::new();
        for m in c
            .get("members")
            .and_then(Value::as_array)
            .cloned()
            .unwrap_or_default()
        {
            match serde_json::from_value::<MemberRef>(m) {
                Ok(member) => {
                    if pool.get(&member).is_some() {
                        member_findings.push(member);
                    } else {
                        problems.push(format!(
                            "cluster {i}: member ({}, {}, {}) not in pool",
                            member.system, member.fold, member.finding_index
                        ));
                    }
                }
                Err(e) => problems.push(format!("cluster {i}: malformed member: {e}")),
            }
        }
        clusters.push(GoldCluster {
            canonical_name: name,
            description: c
                .get("description")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string(),
            representative_ids,
            member_findings,
        });
    }
    if problems.is_empty() {
        Ok(clusters)
    } else {
        Err(problems)
    }
}

/// Pool every finding from every (system, fold) report and cluster them
/// with a single judge call; judge-output problems get one repair round.
/// Findings the judge left unclustered become singleton clusters.
pub fn pool_and_cluster(
    reports: &[(String, u32, &InsightReport)],
    judge: &Gateway,
    prompts_dir: Option<&std::path::Path>,
) -> Result<GoldSet, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::NotEnough {
            what: "reports",
            need: 1,
            got: 0,
        });
    }
    let pool = FindingPool::build(reports);
    let prompt = cluster_prompt(&pool, prompts_dir);
    let completion = judge.complete(Role::Judge, &prompt, ExpectedFormat::Json)?;
    let first = parse_clusters(&completion.parsed_json.unwrap_or(Value::Null), &pool);
    let mut clusters = match first {
        Ok(c) => c,
        Err(problems) => {
            let repair = format!(
                "{prompt}\n\nYour previous clustering had problems:\n{}\nEmit corrected JSON.",
                problems.join("\n")
            );
            let completion = judge.complete(Role::Judge, &repair, ExpectedFormat::Json)?;
            parse_clusters(&completion.parsed_json.unwrap_or(Value::Null), &pool)
                .map_err(|p| EvalError::JudgeInvalid(p.join("; ")))?
        }
    };
    // unclustered findings become singleton clusters
    let clustered: BTreeSet<MemberRef> = clusters
        .iter()
        .flat_map(|c| c.member_findings.iter().cloned())
        .collect();
    for f in &pool.findings {
        if !clustered.contains(&f.member) {
            clusters.push(GoldCluster {
                canonical_name: f.name.chars().take(MAX_CLUSTER_NAME).collect(),
                description: f.summary.clone(),
                representative_ids: f
                    .cited_ids
                    .iter()
                    .take(MAX_REPRESENTATIVES)
                    .cloned()
                    .collect(),
                member_findings: vec![f.member.clone()],
            });
        }
    }
    Ok(GoldSet { clusters, pool })
}

/// Fraction of clusters for which the report cites at least one trace
/// belonging to the cluster.
pub fn coverage(report: &InsightReport, gold: &GoldSet) -> Result<f64, EvalError> {
    if gold.clusters.is_empty() {
        return Err(EvalError::NotEnough {
            what: "clusters",
            need: 1,
            got: 0,
        });
    }
    let mut cited: BTreeSet<String> = BTreeSet::new();
    for f in &report.findings {
        cited.extend(f.evidence.iter().map(|e| e.trace_id.clone()));
        cited.extend(f.affected_trace_ids.iter().cloned());
    }
    let covered = gold
        .clusters
        .iter()
        .filter(|c| {
            gold.pool
                .cluster_trace_set(c)
                .iter()
                .any(|id| cited.contains(id))
        })
        .count();
    Ok(covered as f64 / gold.clusters.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{
        Confidence, CorpusDescriptor, EvidenceItem, Finding, FindingStatus, InsightReport,
        Prevalence, RunStats,
    };
    use crate::gateway::mock::{MockBackend, MockRule, MockScript};
    use crate::gateway::{default_routes, GatewayConfig};

    fn report(findings: Vec<(&str, Vec<&str>)>) -> InsightReport {
        InsightReport {
            query: "q".to_string(),
            corpus: CorpusDescriptor {
                n_traces: 10,
                label_columns: vec![],
            },
            findings: findings
                .into_iter()
                .map(|(name, ids)| Finding {
                    name: name.to_string(),
                    hypothesis: String::new(),
                    status: FindingStatus::Confirmed,
                    summary: format!("{name} summary"),
                    prevalence: Prevalence::new(ids.len() as u64, 10),
                    evidence: ids
                        .iter()
                        .map(|id| EvidenceItem {
                            trace_id: (*id).to_string(),
                            quote: "q".to_string(),
                            explanation: "e".to_string(),
                        })
                        .collect(),
                    affected_trace_ids: ids.iter().map(|s| s.to_string()).collect(),
                    suggested_action: None,
                    confidence: Confidence::Low,
                    additional_observations: String::new(),
                    cohort_label: String::new(),
                })
                .collect(),
            synthesis: String::new(),
            run_stats: RunStats {
                rounds: 1,
                scouts_dispatched: 0,
                investigators_dispatched: 0,
                cost_usd: 0.0,
                forced_synthesis: false,
                synthesis_fallback: false,
            },
        }
    }

    fn judge(script: MockScript) -> Gateway {
        Gateway::new(
            Box::new(MockBackend::new(script)),
            default_routes(),
            GatewayConfig {
                retry_base_ms: 1,
                ..GatewayConfig::default()
            },
        )
    }

    #[test]
    fn shared_plus_unique_findings_make_three_clusters() {
        // two reports: one shared finding (clustered by the judge), one
        // unique finding each (one clustered, one left for the singleton rule)
        let ra = report(vec![("shared_a", vec!["run-1", "run-2"]), ("only_a", vec!["run-3"])]);
        let rb = report(vec![("shared_b", vec!["run-1", "run-2"]), ("only_b", vec!["run-4"])]);
        let scripted = serde_json::json!({"clusters": [
            {"canonical_name": "shared pattern", "description": "d",
             "representative_trace_ids": ["run-1"],
             "members": [
                {"system": "A", "fold": 0, "finding_index": 0},
                {"system": "B", "fold": 0, "finding_index": 0}
             ]},
            {"canonical_name": "a-only pattern", "description": "d",
             "representative_trace_ids": ["run-3"],
             "members": [{"system": "A", "fold": 0, "finding_index": 1}]}
        ]});
        let gw = judge(MockScript::new(
            vec![MockRule::response(Some(Role::Judge), "union gold", &scripted.to_string())],
            "{}",
        ));
        let reports = vec![
            ("A".to_string(), 0u32, &ra),
            ("B".to_string(), 0u32, &rb),
        ];
        let gold = pool_and_cluster(&reports, &gw, None).unwrap();
        assert_eq!(gold.clusters.len(), 3, "2 judge clusters + 1 singleton");
        assert_eq!(gold.clusters[2].member_findings.len(), 1);
        assert_eq!(gold.clusters[2].canonical_name, "only_b");
    }

    #[test]
    fn overlong_name_triggers_repair() {
        let ra = report(vec![("f", vec!["run-1"])]);
        let long_name = "x".repeat(81);
        let bad = serde_json::json!({"clusters": [
            {"canonical_name": long_name, "description": "d",
             "representative_trace_ids": [],
             "members": [{"system": "A", "fold": 0, "finding_index": 0}]}
        ]});
        let good = serde_json::json!({"clusters": [
            {"canonical_name": "fixed", "description": "d",
             "representative_trace_ids": [],
             "members": [{"system": "A", "fold": 0, "finding_index": 0}]}
        ]});
        let gw = judge(MockScript::new(
            vec![
                MockRule::response(Some(Role::Judge), "had problems", &good.to_string()),
                MockRule::response(Some(Role::Judge), "union gold", &bad.to_string()),
            ],
            "{}",
        ));
        let reports = vec![("A".to_string(), 0u32, &ra)];
        let gold = pool_and_cluster(&reports, &gw, None).unwrap();
        assert_eq!(gold.clusters[0].canonical_name, "fixed");
    }

    #[test]
    fn coverage_counts_cluster_citations() {
        let ra = report(vec![("f1", vec!["run-1"]), ("f2", vec!["run-5"])]);
        let pool = FindingPool::build(&[("A".to_string(), 0, &ra)]);
        let clusters = vec![
            GoldCluster {
                canonical_name: "c1".to_string(),
                description: String::new(),
                representative_ids: vec!["run-1".to_string()],
                member_findings: vec![],
            },
            GoldCluster {
                canonical_name: "c2".to_string(),
                description: String::new(),
                representative_ids: vec!["run-9".to_string()],
                member_findings: vec![],
            },
        ];
        let gold = GoldSet { clusters, pool };
        let c = coverage(&ra, &gold).unwrap();
        assert!((c - 0.5).abs() < 1e-12);

        let empty = report(vec![]);
        assert_eq!(coverage(&empty, &gold).unwrap(), 0.0);
    }

    #[test]
    fn fold_mean_matches_hand_mean() {
        // (0.86, 0.88, 0.87) -> 87%
        let mean = (0.86f64 + 0.88 + 0.87) / 3.0;
        assert!((mean - 0.87).abs() < 1e-12);
    }
}
