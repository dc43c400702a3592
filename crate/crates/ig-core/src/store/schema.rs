//! Per-column statistics injected into every agent context: types, null
//! rates, value distributions, and notable correlations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::stats;
use crate::trace::Scalar;

use super::{CorpusState, SemanticType};

/// Cutoff above which a pairwise association is reported.
pub const DEFAULT_NOTABLE_THRESHOLD: f64 = 0.3;

/// Top-k value counts kept for categorical and boolean columns.
pub const TOP_K_VALUES: usize = 20;

// Categorical columns with more distinct values than this are treated as
// identifiers and skipped for association tests.
const MAX_CATEGORICAL_CARDINALITY: usize = 100;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaCache {
    pub columns: Vec<ColumnStats>,
    pub correlations: Vec<Correlation>,
    pub corpus_version: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnStats {
    pub name: String,
    pub inferred_type: SemanticType,
    pub null_rate: f64,
    pub distinct_count: usize,
    pub distribution: Distribution,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Numeric {
        min: f64,
        max: f64,
        mean: f64,
        stddev: f64,
        /// q1, median, q3 (linear interpolation between order statistics).
        quartiles: [f64; 3],
    },
    /// Top-k value counts, descending, ties broken by value.
    Counts { top: Vec<(String, usize)> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMeasure {
    Pearson,
    CramersV,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Correlation {
    pub col_a: String,
    pub col_b: String,
    pub measure: CorrelationMeasure,
    pub value: f64,
}

pub fn build(state: &CorpusState, notable_threshold: f64) -> SchemaCache {
    let names = state.view_column_names();
    let column_values: Vec<(String, Vec<Scalar>)> = names
        .iter()
        .map(|n| (n.clone(), state.column(n)))
        .collect();

    #[cfg(feature = "parallel")]
    let columns: Vec<ColumnStats> = column_values
        .par_iter()
        .map(|(name, values)| column_stats(name, values))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let columns: Vec<ColumnStats> = column_values
        .iter()
        .map(|(name, values)| column_stats(name, values))
        .collect();

    let correlations = correlations(&column_values, &columns, notable_threshold);
    SchemaCache {
        columns,
        correlations,
        corpus_version: state.version,
    }
}

/// Sequential twin of [`build`] for benchmarking the parallel path.
#[doc(hidden)]
pub fn build_seq(state: &CorpusState, notable_threshold: f64) -> SchemaCache {
    let names = state.view_column_names();
    let column_values: Vec<(String, Vec<Scalar>)> = names
        .iter()
        .map(|n| (n.clone(), state.column(n)))
        .collect();
    let columns: Vec<ColumnStats> = column_values
        .iter()
        .map(|(name, values)| column_stats(name, values))
        .collect();
    let correlations = correlations(&column_values, &columns, notable_threshold);
    SchemaCache {
        columns,
        correlations,
        corpus_version: state.version,
    }
}

fn column_stats(name: &str, values: &[Scalar]) -> ColumnStats {
    let total = values.len();
    let non_null: Vec<&Scalar> = values.iter().filter(|v| !v.is_null()).collect();
    let nulls = total - non_null.len();
    let null_rate = if total == 0 {
        0.0
    } else {
        nulls as f64 / total as f64
    };

    let mut distinct: BTreeMap<String, usize> = BTreeMap::new();
    for v in &non_null {
        *distinct.entry(v.display_key()).or_insert(0) += 1;
    }
    let distinct_count = distinct.len();

    let inferred_type = infer_column_type(&non_null, distinct_count);
    let distribution = match inferred_type {
        SemanticType::Int | SemanticType::Float => {
            let nums: Vec<f64> = non_null.iter().filter_map(|v| v.as_f64()).collect();
            numeric_distribution(&nums)
        }
        _ => {
            let mut top: Vec<(String, usize)> =
                distinct.iter().map(|(k, &c)| (k.clone(), c)).collect();
            top.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            top.truncate(TOP_K_VALUES);
            Distribution::Counts { top }
        }
    };
    ColumnStats {
        name: name.to_string(),
        inferred_type,
        null_rate,
        distinct_count,
        distribution,
    }
}

fn infer_column_type(non_null: &[&Scalar], distinct_count: usize) -> SemanticType {
    if non_null.is_empty() {
        return SemanticType::Category;
    }
    let all_bool = non_null.iter().all(|v| matches!(v, Scalar::Bool(_)));
    if all_bool {
        return SemanticType::Bool;
    }
    let all_int = non_null.iter().all(|v| matches!(v, Scalar::Int(_)));
    if all_int {
        return SemanticType::Int;
    }
    let all_num = non_null
        .iter()
        .all(|v| matches!(v, Scalar::Int(_) | Scalar::Float(_)));
    if all_num {
        return SemanticType::Float;
    }
    // strings (or mixed): high-cardinality string columns read as free text
    let all_str = non_null.iter().all(|v| matches!(v, Scalar::Str(_)));
    if all_str && distinct_count > MAX_CATEGORICAL_CARDINALITY {
        return SemanticType::Text;
    }
    SemanticType::Category
}

fn numeric_distribution(nums: &[f64]) -> Distribution {
    if nums.is_empty() {
        return Distribution::Numeric {
            min: f64::NAN,
            max: f64::NAN,
            mean: f64::NAN,
            stddev: f64::NAN,
            quartiles: [f64::NAN; 3],
        };
    }
    let n = nums.len() as f64;
    let mean = nums.iter().sum::<f64>() / n;
    let var = nums.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let mut sorted = nums.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    Distribution::Numeric {
        min: sorted[0],
        max: *sorted.last().unwrap(),
        mean,
        stddev: var.sqrt(),
        quartiles: [
            quantile(&sorted, 0.25),
            quantile(&sorted, 0.5),
            quantile(&sorted, 0.75),
        ],
    }
}

// linear interpolation between closest ranks (the common "type 7" rule)
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn correlations(
    column_values: &[(String, Vec<Scalar>)],
    columns: &[ColumnStats],
    threshold: f64,
) -> Vec<Correlation> {
    let eligible: Vec<usize> = columns
        .iter()
        .enumerate()
        .filter(|(_, c)| c.distinct_count >= 2)
        .map(|(i, _)| i)
        .collect();
    let pairs: Vec<(usize, usize)> = eligible
        .iter()
        .enumerate()
        .flat_map(|(pi, &i)| eligible[pi + 1..].iter().map(move |&j| (i, j)))
        .collect();

    #[cfg(feature = "parallel")]
    let found: Vec<Option<Correlation>> = pairs
        .par_iter()
        .map(|&(i, j)| pair_correlation(column_values, columns, i, j, threshold))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let found: Vec<Option<Correlation>> = pairs
        .iter()
        .map(|&(i, j)| pair_correlation(column_values, columns, i, j, threshold))
        .collect();

    found.into_iter().flatten().collect()
}

fn pair_correlation(
    column_values: &[(String, Vec<Scalar>)],
    columns: &[ColumnStats],
    i: usize,
    j: usize,
    threshold: f64,
) -> Option<Correlation> {
    let (name_a, vals_a) = &column_values[i];
    let (name_b, vals_b) = &column_values[j];
    let ta = columns[i].inferred_type;
    let tb = columns[j].inferred_type;
    let numeric = |t: SemanticType| matches!(t, SemanticType::Int | SemanticType::Float);
    let categorical = |t: SemanticType| matches!(t, SemanticType::Bool | SemanticType::Category);

    if numeric(ta) && numeric(tb) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (a, b) in vals_a.iter().zip(vals_b) {
            if let (Some(x), Some(y)) = (a.as_f64(), b.as_f64()) {
                xs.push(x);
                ys.push(y);
            }
        }
        let r = stats::pearson(&xs, &ys)?;
        if r.abs() >= threshold {
            return Some(Correlation {
                col_a: name_a.clone(),
                col_b: name_b.clone(),
                measure: CorrelationMeasure::Pearson,
                value: r,
            });
        }
        return None;
    }

    if categorical(ta) && categorical(tb) {
        if columns[i].distinct_count > MAX_CATEGORICAL_CARDINALITY
            || columns[j].distinct_count > MAX_CATEGORICAL_CARDINALITY
        {
            return None;
        }
        let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (a, b) in vals_a.iter().zip(vals_b) {
            if !a.is_null() && !b.is_null() {
                *counts
                    .entry((a.display_key(), b.display_key()))
                    .or_insert(0) += 1;
            }
        }
        let rows: Vec<String> = {
            let mut r: Vec<String> = counts.keys().map(|(a, _)| a.clone()).collect();
            r.sort();
            r.dedup();
            r
        };
        let cols: Vec<String> = {
            let mut c: Vec<String> = counts.keys().map(|(_, b)| b.clone()).collect();
            c.sort();
            c.dedup();
            c
        };
        if rows.len() < 2 || cols.len() < 2 {
            return None;
        }
        let matrix: Vec<Vec<u64>> = rows
            .iter()
            .map(|r| {
                cols.iter()
                    .map(|c| *counts.get(&(r.clone(), c.clone())).unwrap_or(&0))
                    .collect()
            })
            .collect();
        let table = stats::ContingencyTable::new(matrix).ok()?;
        let v = stats::cramers_v(&table).ok()?;
        if v >= threshold {
            return Some(Correlation {
                col_a: name_a.clone(),
                col_b: name_b.clone(),
                measure: CorrelationMeasure::CramersV,
                value: v,
            });
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::store::{RawTrace, TraceStore, DEFAULT_CHUNK_THRESHOLD_TOKENS};

    fn store_with_meta(rows: Vec<serde_json::Value>) -> TraceStore {
        let raws: Vec<RawTrace> = rows
            .into_iter()
            .enumerate()
            .map(|(i, meta)| RawTrace {
                id: format!("run-{i}"),
                events: None,
                content: Some(format!("content {i}")),
                metadata: meta.as_object().cloned(),
            })
            .collect();
        TraceStore::ingest(raws, DEFAULT_CHUNK_THRESHOLD_TOKENS).unwrap()
    }

    #[test]
    fn null_rate_and_mean() {
        let store = store_with_meta(vec![
            serde_json::json!({"x": 1}),
            serde_json::json!({"x": 2}),
            serde_json::json!({"x": null}),
            serde_json::json!({"x": 4}),
        ]);
        let schema = store.build_schema_cache().unwrap();
        let col = schema.columns.iter().find(|c| c.name == "x").unwrap();
        assert!((col.null_rate - 0.25).abs() < 1e-12);
        match &col.distribution {
            Distribution::Numeric { mean, .. } => {
                assert!((mean - 7.0 / 3.0).abs() < 1e-12)
            }
            _ => panic!("expected numeric distribution"),
        }
    }

    #[test]
    fn identical_bool_columns_report_perfect_association() {
        let rows = (0..10)
            .map(|i| serde_json::json!({"a": i % 2 == 0, "b": i % 2 == 0}))
            .collect();
        let store = store_with_meta(rows);
        let schema = store.build_schema_cache().unwrap();
        let corr = schema
            .correlations
            .iter()
            .find(|c| c.col_a == "a" && c.col_b == "b")
            .expect("a-b association missing");
        assert_eq!(corr.measure, CorrelationMeasure::CramersV);
        assert!((corr.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_column_excluded_from_correlations() {
        let rows = (0..6)
            .map(|i| serde_json::json!({"c": "same", "x": i, "y": i * 2}))
            .collect();
        let store = store_with_meta(rows);
        let schema = store.build_schema_cache().unwrap();
        let col = schema.columns.iter().find(|c| c.name == "c").unwrap();
        assert_eq!(col.distinct_count, 1);
        assert!(schema
            .correlations
            .iter()
            .all(|c| c.col_a != "c" && c.col_b != "c"));
        // x and y are perfectly correlated and must be reported
        assert!(schema
            .correlations
            .iter()
            .any(|c| c.measure == CorrelationMeasure::Pearson && (c.value - 1.0).abs() < 1e-9));
    }

    #[test]
    fn value_counts_plus_nulls_total_corpus_size() {
        let rows = vec![
            serde_json::json!({"cat": "a"}),
            serde_json::json!({"cat": "b"}),
            serde_json::json!({"cat": "a"}),
            serde_json::json!({}),
        ];
        let store = store_with_meta(rows);
        let schema = store.build_schema_cache().unwrap();
        let col = schema.columns.iter().find(|c| c.name == "cat").unwrap();
        let counted: usize = match &col.distribution {
            Distribution::Counts { top } => top.iter().map(|(_, c)| c).sum(),
            _ => panic!("expected counts"),
        };
        let nulls = (col.null_rate * store.len() as f64).round() as usize;
        assert_eq!(counted + nulls, store.len());
    }

    #[test]
    fn empty_corpus_errors() {
        let store = TraceStore::ingest(Vec::<RawTrace>::new(), DEFAULT_CHUNK_THRESHOLD_TOKENS);
        // empty ingest is fine; schema build on it is not
        let store = store.unwrap();
        assert!(store.build_schema_cache().is_err());
    }

    #[test]
    fn quartiles_linear_interpolation() {
        let sorted = [1.0, 2.0, 3.0, 4.0];
        assert!((quantile(&sorted, 0.5) - 2.5).abs() < 1e-12);
        assert!((quantile(&sorted, 0.25) - 1.75).abs() < 1e-12);
    }

    #[test]
    fn derived_columns_present() {
        let store = store_with_meta(vec![serde_json::json!({})]);
        let schema = store.build_schema_cache().unwrap();
        let names: Vec<&str> = schema.columns.iter().map(|c| c.name.as_str()).collect();
        assert!(names.contains(&"token_count"));
        assert!(names.contains(&"event_count"));
    }

    #[test]
    fn seq_build_matches_default_build() {
        let rows = (0..20)
            .map(|i| serde_json::json!({"a": i % 2 == 0, "b": i % 3, "c": format!("v{}", i % 4)}))
            .collect();
        let store = store_with_meta(rows);
        let snap = store.snapshot();
        let par = build(&snap, DEFAULT_NOTABLE_THRESHOLD);
        let seq = build_seq(&snap, DEFAULT_NOTABLE_THRESHOLD);
        assert_eq!(
            serde_json::to_string(&par).unwrap(),
            serde_json::to_string(&seq).unwrap()
        );
    }

    #[test]
    fn save_column_values_appear_after_reload() {
        let store = store_with_meta(vec![serde_json::json!({}), serde_json::json!({})]);
        store
            .save_column(
                "flagged",
                BTreeMap::from([("t1".to_string(), crate::trace::Scalar::Bool(true))]),
            )
            .unwrap();
        store.reload_data();
        let schema = store.build_schema_cache().unwrap();
        assert!(schema.columns.iter().any(|c| c.name == "flagged"));
    }
}
