//! Benchmark-level aggregation of the three evaluation layers and the
//! aligned-text summary table.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::rubric::RubricScore;

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct RubricMeans {
    pub mechanism: f64,
    pub specificity: f64,
    pub actionability: f64,
}

impl RubricMeans {
    pub fn from_scores(scores: &[RubricScore]) -> RubricMeans {
        if scores.is_empty() {
            return RubricMeans::default();
        }
        let n = scores.len() as f64;
        RubricMeans {
            mechanism: scores.iter().map(|s| s.mechanism as f64).sum::<f64>() / n,
            specificity: scores.iter().map(|s| s.specificity as f64).sum::<f64>() / n,
            actionability: scores.iter().map(|s| s.actionability as f64).sum::<f64>() / n,
        }
    }

    pub fn composite(&self) -> f64 {
        (self.mechanism + self.specificity + self.actionability) / 3.0
    }
}

/// One benchmark's fold-collapsed results per system.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub benchmark: String,
    /// Fold-mean coverage per system, as a fraction.
    pub coverage: BTreeMap<String, f64>,
    /// Pairwise win rate per system, as a fraction.
    pub win_rate: BTreeMap<String, f64>,
    /// Per-dimension rubric means per system.
    pub rubric: BTreeMap<String, RubricMeans>,
}

/// Plain mean across per-benchmark values.
pub fn benchmark_average(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn all_systems(benchmarks: &[BenchmarkSummary]) -> Vec<String> {
    let mut systems: Vec<String> = benchmarks
        .iter()
        .flat_map(|b| {
            b.coverage
                .keys()
                .chain(b.win_rate.keys())
                .chain(b.rubric.keys())
                .cloned()
        })
        .collect();
    systems.sort();
    systems.dedup();
    systems
}

/// Render the combined results table: coverage and win rate per benchmark
/// plus their cross-benchmark averages, then the averaged per-dimension
/// quality scores and the composite.
pub fn summary_table(benchmarks: &[BenchmarkSummary]) -> String {
    let systems = all_systems(benchmarks);
    let bench_names: Vec<&str> = benchmarks.iter().map(|b| b.benchmark.as_str()).collect();

    let mut header1 = format!("{:<22}", "");
    let mut header2 = format!("{:<22}", "System");
    let group = |h1: &mut String, h2: &mut String, title: &str, cols: &[String]| {
        let width = cols.iter().map(|c| c.len().max(6) + 2).sum::<usize>();
        h1.push_str(&format!("{:<width$}", title, width = width));
        for c in cols {
            h2.push_str(&format!("{:>w$}", c, w = c.len().max(6) + 2));
        }
    };
    let mut cov_cols: Vec<String> = bench_names.iter().map(|b| b.to_uppercase()).collect();
    cov_cols.push("Avg".to_string());
    let mut wr_cols = cov_cols.clone();
    wr_cols[0] = cov_cols[0].clone();
    group(&mut header1, &mut header2, "Coverage (%)", &cov_cols);
    group(&mut header1, &mut header2, "Pairwise WR (%)", &wr_cols);
    let quality_cols: Vec<String> = ["Mech.", "Spec.", "Act.", "Comp."]
        .iter()
        .map(|s| s.to_string())
        .collect();
    group(&mut header1, &mut header2, "Quality (0-3)", &quality_cols);

    let mut out = String::new();
    out.push_str(header1.trim_end());
    out.push('\n');
    out.push_str(header2.trim_end());
    out.push('\n');

    for system in &systems {
        let mut line = format!("{:<22}", system);
        let mut covs = Vec::new();
        for b in benchmarks {
            let v = b.coverage.get(system).copied().unwrap_or(f64::NAN);
            covs.push(v);
            line.push_str(&format!(
                "{:>w$.1}",
                v * 100.0,
                w = b.benchmark.len().max(6) + 2
            ));
        }
        line.push_str(&format!(
            "{:>8.1}",
            benchmark_average(&covs) * 100.0
        ));
        let mut wrs = Vec::new();
        for b in benchmarks {
            let v = b.win_rate.get(system).copied().unwrap_or(f64::NAN);
            wrs.push(v);
            line.push_str(&format!(
                "{:>w$.1}",
                v * 100.0,
                w = b.benchmark.len().max(6) + 2
            ));
        }
        line.push_str(&format!("{:>8.1}", benchmark_average(&wrs) * 100.0));
        let means: Vec<RubricMeans> = benchmarks
            .iter()
            .filter_map(|b| b.rubric.get(system).copied())
            .collect();
        let avg = RubricMeans {
            mechanism: benchmark_average(&means.iter().map(|m| m.mechanism).collect::<Vec<_>>()),
            specificity: benchmark_average(
                &means.iter().map(|m| m.specificity).collect::<Vec<_>>(),
            ),
            actionability: benchmark_average(
                &means.iter().map(|m| m.actionability).collect::<Vec<_>>(),
            ),
        };
        line.push_str(&format!(
            "{:>7.2}{:>7.2}{:>7.2}{:>7.2}",
            avg.mechanism,
            avg.specificity,
            avg.actionability,
            avg.composite()
        ));
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}
