//! Per-dimension rubric scoring of a report against each union-gold
//! cluster. The composite averages mechanism, specificity, and
//! actionability; detection feeds coverage-style reporting and evidence
//! is aggregated separately.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agents::InsightReport;
use crate::config::prompts;
use crate::gateway::{ExpectedFormat, Gateway, Role};

use super::cluster::GoldCluster;
use super::EvalError;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RubricScore {
    pub detection: u8,
    pub mechanism: u8,
    pub evidence: u8,
    pub specificity: u8,
    pub actionability: u8,
}

impl RubricScore {
    fn parse(value: &Value) -> Result<RubricScore, String> {
        let dim = |name: &str| -> Result<u8, String> {
            let v = value
                .get(name)
                .and_then(Value::as_u64)
                .ok_or_else(|| format!("missing dimension '{name}'"))?;
            if v > 3 {
                return Err(format!("dimension '{name}' out of range 0-3 (got {v})"));
            }
            Ok(v as u8)
        };
        Ok(RubricScore {
            detection: dim("detection")?,
            mechanism: dim("mechanism")?,
            evidence: dim("evidence")?,
            specificity: dim("specificity")?,
            actionability: dim("actionability")?,
        })
    }
}

fn rubric_prompt(
    report: &InsightReport,
    cluster: &GoldCluster,
    prompts_dir: Option<&std::path::Path>,
) -> String {
    let findings: String = report
        .findings
        .iter()
        .map(|f| {
            format!(
                "- {} [{}] prevalence {}/{}: {}\n",
                f.name, f.status, f.prevalence.numerator, f.prevalence.denominator, f.summary
            )
        })
        .collect();
    format!(
        "{}\n\n## Canonical observation\nname: {}\ndescription: {}\nrepresentative traces: {}\n\n\
         ## Report under evaluation\n{findings}\nsynthesis: {}",
        prompts::load("judge_rubric", prompts_dir),
        cluster.canonical_name,
        cluster.description,
        cluster.representative_ids.join(", "),
        report.synthesis,
    )
}

/// Score one report against one cluster; an out-of-range or missing
/// dimension gets one repair call before failing.
pub fn rubric_score(
    report: &InsightReport,
    cluster: &GoldCluster,
    judge: &Gateway,
    prompts_dir: Option<&std::path::Path>,
) -> Result<RubricScore, EvalError> {
    let prompt = rubric_prompt(report, cluster, prompts_dir);
    let completion = judge.complete(Role::Judge, &prompt, ExpectedFormat::Json)?;
    match RubricScore::parse(&completion.parsed_json.unwrap_or(Value::Null)) {
        Ok(score) => Ok(score),
        Err(problem) => {
            let repair = format!(
                "{prompt}\n\nYour previous scoring was invalid: {problem}. \
                 Every dimension must be an integer 0-3. Emit corrected JSON."
            );
            let completion = judge.complete(Role::Judge, &repair, ExpectedFormat::Json)?;
            RubricScore::parse(&completion.parsed_json.unwrap_or(Value::Null))
                .map_err(EvalError::JudgeInvalid)
        }
    }
}

/// Score a report against every cluster (judge calls fan out through the
/// gateway's bounded batch; invalid items fall back to the repair path).
pub fn rubric_scores(
    report: &InsightReport,
    clusters: &[GoldCluster],
    judge: &Gateway,
    prompts_dir: Option<&std::path::Path>,
) -> Result<Vec<RubricScore>, EvalError> {
    let prompts: Vec<String> = clusters
        .iter()
        .map(|c| rubric_prompt(report, c, prompts_dir))
        .collect();
    let results = judge.complete_batch(Role::Judge, &prompts, ExpectedFormat::Json, 8)?;
    let mut scores = Vec::with_capacity(clusters.len());
    for (cluster, result) in clusters.iter().zip(results) {
        let completion = result?;
        match RubricScore::parse(&completion.parsed_json.unwrap_or(Value::Null)) {
            Ok(score) => scores.push(score),
            Err(_) => scores.push(rubric_score(report, cluster, judge, prompts_dir)?),
        }
    }
    Ok(scores)
}

/// Composite = mean of (mechanism, specificity, actionability) means.
pub fn composite(scores: &[RubricScore]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let n = scores.len() as f64;
    let mech: f64 = scores.iter().map(|s| s.mechanism as f64).sum::<f64>() / n;
    let spec: f64 = scores.iter().map(|s| s.specificity as f64).sum::<f64>() / n;
    let act: f64 = scores.iter().map(|s| s.actionability as f64).sum::<f64>() / n;
    (mech + spec + act) / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{CorpusDescriptor, RunStats};
    use crate::gateway::mock::{MockBackend, MockRule, MockScript};
    use crate::gateway::{default_routes, GatewayConfig};

    fn empty_report() -> InsightReport {
        InsightReport {
            query: "q".to_string(),
            corpus: CorpusDescriptor {
                n_traces: 1,
                label_columns: vec![],
            },
            findings: vec![],
            synthesis: "s".to_string(),
            run_stats: RunStats {
                rounds: 0,
                scouts_dispatched: 0,
                investigators_dispatched: 0,
                cost_usd: 0.0,
                forced_synthesis: false,
                synthesis_fallback: false,
            },
        }
    }

    fn cluster() -> GoldCluster {
        GoldCluster {
            canonical_name: "c".to_string(),
            description: "d".to_string(),
            representative_ids: vec![],
            member_findings: vec![],
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
    fn valid_scores_parse() {
        let gw = judge(MockScript::new(
            vec![],
            r#"{"detection": 2, "mechanism": 1, "evidence": 3, "specificity": 0, "actionability": 2}"#,
        ));
        let s = rubric_score(&empty_report(), &cluster(), &gw, None).unwrap();
        assert_eq!(s.detection, 2);
        assert_eq!(s.evidence, 3);
    }

    #[test]
    fn out_of_range_dimension_repaired_then_rejected() {
        // always returns 4: repair also fails -> error
        let gw = judge(MockScript::new(
            vec![],
            r#"{"detection": 4, "mechanism": 1, "evidence": 1, "specificity": 1, "actionability": 1}"#,
        ));
        let err = rubric_score(&empty_report(), &cluster(), &gw, None).unwrap_err();
        assert!(matches!(err, EvalError::JudgeInvalid(_)));
        // repair path can rescue
        let gw = judge(MockScript::new(
            vec![MockRule::response(
                Some(Role::Judge),
                "previous scoring was invalid",
                r#"{"detection": 3, "mechanism": 3, "evidence": 3, "specificity": 3, "actionability": 3}"#,
            )],
            r#"{"detection": 9, "mechanism": 1, "evidence": 1, "specificity": 1, "actionability": 1}"#,
        ));
        let s = rubric_score(&empty_report(), &cluster(), &gw, None).unwrap();
        assert_eq!(s.detection, 3);
    }

    #[test]
    fn composite_uses_three_dimensions_only() {
        let scores = vec![
            RubricScore {
                detection: 0,
                mechanism: 2,
                evidence: 0,
                specificity: 2,
                actionability: 2,
            },
            RubricScore {
                detection: 3,
                mechanism: 1,
                evidence: 3,
                specificity: 1,
                actionability: 1,
            },
        ];
        // means: mech 1.5, spec 1.5, act 1.5 -> composite 1.5 regardless of
        // detection/evidence
        assert!((composite(&scores) - 1.5).abs() < 1e-12);
        assert_eq!(composite(&[]), 0.0);
    }

    #[test]
    fn all_zero_scores_give_zero_composite() {
        let z = RubricScore {
            detection: 0,
            mechanism: 0,
            evidence: 0,
            specificity: 0,
            actionability: 0,
        };
        assert_eq!(composite(&[z, z, z]), 0.0);
    }
}
