//! Position-swapped pairwise tournament. For every unordered system pair
//! and every fold-by-fold matchup the judge sees both reports twice in
//! opposite positions; win rate is (wins + 0.5 * ties) / rounds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agents::InsightReport;
use crate::config::prompts;
use crate::gateway::{ExpectedFormat, Gateway, Role};

use super::EvalError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundSlot {
    pub system_a: String,
    pub fold_a: u32,
    pub system_b: String,
    pub fold_b: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Winner {
    A,
    B,
    #[serde(rename = "tie")]
    Tie,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairwiseRound {
    #[serde(flatten)]
    pub slot: RoundSlot,
    pub winner: Winner,
    pub confidence: String,
    pub rationale: String,
}

/// Build the full schedule: for each unordered system pair, every
/// (fold_a, fold_b) combination appears exactly twice with positions
/// swapped. With S systems and F folds each system plays (S-1)*F^2*2
/// rounds.
pub fn schedule_tournament(systems: &[(String, usize)]) -> Result<Vec<RoundSlot>, EvalError> {
    if systems.len() < 2 {
        return Err(EvalError::NotEnough {
            what: "systems",
            need: 2,
            got: systems.len(),
        });
    }
    let mut slots = Vec::new();
    for i in 0..systems.len() {
        for j in i + 1..systems.len() {
            let (sa, fa_count) = &systems[i];
            let (sb, fb_count) = &systems[j];
            for fa in 0..*fa_count {
                for fb in 0..*fb_count {
                    slots.push(RoundSlot {
                        system_a: sa.clone(),
                        fold_a: fa as u32,
                        system_b: sb.clone(),
                        fold_b: fb as u32,
                    });
                    slots.push(RoundSlot {
                        system_a: sb.clone(),
                        fold_a: fb as u32,
                        system_b: sa.clone(),
                        fold_b: fa as u32,
                    });
                }
            }
        }
    }
    Ok(slots)
}

fn render_report_for_judging(report: &InsightReport) -> String {
    let mut out = String::new();
    for f in &report.findings {
        out.push_str(&format!(
            "- {} [{}] prevalence {}/{}: {}\n  cited: {}\n",
            f.name,
            f.status,
            f.prevalence.numerator,
            f.prevalence.denominator,
            f.summary,
            f.evidence
                .iter()
                .map(|e| e.trace_id.as_str())
                .collect::<Vec<_>>()
                .join(", "),
        ));
    }
    out.push_str(&format!("synthesis: {}\n", report.synthesis));
    out
}

/// Judge every scheduled round. Per-round judge failures abort (the
/// tournament is meaningless with holes in it).
pub fn judge_rounds(
    slots: &[RoundSlot],
    reports: &BTreeMap<(String, u32), InsightReport>,
    judge: &Gateway,
    prompts_dir: Option<&std::path::Path>,
) -> Result<Vec<PairwiseRound>, EvalError> {
    let system_prompt = prompts::load("judge_pairwise", prompts_dir);
    let prompts: Vec<String> = slots
        .iter()
        .map(|slot| {
            let ra = reports
                .get(&(slot.system_a.clone(), slot.fold_a))
                .map(render_report_for_judging)
                .unwrap_or_else(|| "(missing report)".to_string());
            let rb = reports
                .get(&(slot.system_b.clone(), slot.fold_b))
                .map(render_report_for_judging)
                .unwrap_or_else(|| "(missing report)".to_string());
            format!("{system_prompt}\n\n## Report A\n{ra}\n## Report B\n{rb}")
        })
        .collect();
    let results = judge.complete_batch(Role::Judge, &prompts, ExpectedFormat::Json, 8)?;
    let mut rounds = Vec::with_capacity(slots.len());
    for (slot, result) in slots.iter().zip(results) {
        let completion = result?;
        let parsed = completion.parsed_json.unwrap_or(Value::Null);
        let winner = match parsed.get("winner").and_then(Value::as_str) {
            Some("A") => Winner::A,
            Some("B") => Winner::B,
            Some("tie") | Some("Tie") | Some("TIE") => Winner::Tie,
            other => {
                return Err(EvalError::JudgeInvalid(format!(
                    "winner must be A, B, or tie (got {other:?})"
                )))
            }
        };
        rounds.push(PairwiseRound {
            slot: slot.clone(),
            winner,
            confidence: parsed
                .get("confidence")
                .and_then(Value::as_str)
                .unwrap_or("low")
                .to_string(),
            rationale: parsed
                .get("rationale")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string(),
        });
    }
    Ok(rounds)
}

/// (wins + 0.5 * ties) / n_rounds over every round the system played.
pub fn win_rate(rounds: &[PairwiseRound], system: &str) -> Result<f64, EvalError> {
    let mut played = 0u64;
    let mut credit = 0.0f64;
    for round in rounds {
        let is_a = round.slot.system_a == system;
        let is_b = round.slot.system_b == system;
        if !is_a && !is_b {
            continue;
        }
        played += 1;
        credit += match round.winner {
            Winner::Tie => 0.5,
            Winner::A if is_a => 1.0,
            Winner::B if is_b => 1.0,
            _ => 0.0,
        };
    }
    if played == 0 {
        return Err(EvalError::UnknownSystem(system.to_string()));
    }
    Ok(credit / played as f64)
}

/// Head-to-head win percentage of the row system against the column
/// system, ties carrying half credit. Rows and columns share the sorted
/// system order; the diagonal is NaN.
pub fn head_to_head(rounds: &[PairwiseRound]) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut systems: Vec<String> = rounds
        .iter()
        .flat_map(|r| [r.slot.system_a.clone(), r.slot.system_b.clone()])
        .collect();
    systems.sort();
    systems.dedup();
    let idx: BTreeMap<&str, usize> = systems
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let n = systems.len();
    let mut credit = vec![vec![0.0f64; n]; n];
    let mut played = vec![vec![0u64; n]; n];
    for round in rounds {
        let a = idx[round.slot.system_a.as_str()];
        let b = idx[round.slot.system_b.as_str()];
        played[a][b] += 1;
        played[b][a] += 1;
        let (ca, cb) = match round.winner {
            Winner::A => (1.0, 0.0),
            Winner::B => (0.0, 1.0),
            Winner::Tie => (0.5, 0.5),
        };
        credit[a][b] += ca;
        credit[b][a] += cb;
    }
    let matrix = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j || played[i][j] == 0 {
                        f64::NAN
                    } else {
                        100.0 * credit[i][j] / played[i][j] as f64
                    }
                })
                .collect()
        })
        .collect();
    (systems, matrix)
}
