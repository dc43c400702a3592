//! Property tests for the pure layers: fusion and sort contracts in
//! search, algebraic symmetries in the stats kit, and tokenizer bounds.

use proptest::prelude::*;

use ig_core::search::{build_index, Embedder, HashingEmbedder, SearchMode};
use ig_core::stats::{
    odds_ratio, permutation_test, t_cdf, welch_t, ContingencyTable, PermutationMode,
};
use ig_core::store::{RawTrace, TraceStore};
use ig_core::tokens::approximate_tokens;

proptest! {
    #[test]
    fn tokens_minimum_one_and_monotone(text in ".{0,300}", suffix in ".{1,40}") {
        let base = approximate_tokens(&text);
        prop_assert!(base >= 1);
        let longer = approximate_tokens(&format!("{text}{suffix}"));
        prop_assert!(longer >= base);
    }

    #[test]
    fn embedder_is_deterministic_and_unit_norm(text in ".{0,200}") {
        let e = HashingEmbedder::default();
        let v1 = e.embed(&text).unwrap();
        let v2 = e.embed(&text).unwrap();
        prop_assert_eq!(&v1, &v2);
        let norm: f64 = v1.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-5, "norm {}", norm);
    }

    #[test]
    fn t_cdf_symmetry(x in -30.0f64..30.0, df in 0.5f64..60.0) {
        let s = t_cdf(x, df).unwrap() + t_cdf(-x, df).unwrap();
        prop_assert!((s - 1.0).abs() < 1e-10, "sum {}", s);
    }

    #[test]
    fn welch_is_antisymmetric(
        mean_a in -50.0f64..50.0,
        mean_b in -50.0f64..50.0,
        sd_a in 0.1f64..20.0,
        sd_b in 0.1f64..20.0,
        n_a in 2u64..40,
        n_b in 2u64..40,
    ) {
        let ab = welch_t(mean_a, sd_a, n_a, mean_b, sd_b, n_b).unwrap();
        let ba = welch_t(mean_b, sd_b, n_b, mean_a, sd_a, n_a).unwrap();
        prop_assert!((ab.t + ba.t).abs() < 1e-9);
        prop_assert!((ab.p_two_sided - ba.p_two_sided).abs() < 1e-9);
        prop_assert!((ab.ci95.0 + ba.ci95.1).abs() < 1e-6);
        prop_assert!((ab.ci95.1 + ba.ci95.0).abs() < 1e-6);
        prop_assert!(ab.df > 0.0);
        prop_assert!((0.0..=1.0).contains(&ab.p_two_sided));
    }

    #[test]
    fn odds_ratio_symmetries(
        a in 0u64..15, b in 0u64..15, c in 0u64..15, d in 0u64..15,
    ) {
        prop_assume!(a + b > 0 && c + d > 0 && a + c > 0 && b + d > 0);
        let t = ContingencyTable::new(vec![vec![a, b], vec![c, d]]).unwrap();
        let transposed = ContingencyTable::new(vec![vec![a, c], vec![b, d]]).unwrap();
        let swapped = ContingencyTable::new(vec![vec![c, d], vec![a, b]]).unwrap();
        let or = odds_ratio(&t).unwrap();
        prop_assert!((odds_ratio(&transposed).unwrap() - or).abs() < 1e-9 * or.max(1.0));
        let inv = odds_ratio(&swapped).unwrap();
        prop_assert!((inv * or - 1.0).abs() < 1e-9, "or {} inv {}", or, inv);
    }

    #[test]
    fn exact_permutation_p_is_rational_and_deterministic(
        a in proptest::collection::vec(-10.0f64..10.0, 1..5),
        b in proptest::collection::vec(-10.0f64..10.0, 1..5),
    ) {
        let r1 = permutation_test(&a, &b, PermutationMode::Exact).unwrap();
        let r2 = permutation_test(&a, &b, PermutationMode::Exact).unwrap();
        prop_assert_eq!(r1.n_as_extreme, r2.n_as_extreme);
        prop_assert_eq!(r1.n_total, r2.n_total);
        // p lies on the k/n_total grid and the observed labeling counts
        prop_assert!(r1.n_as_extreme >= 1);
        let reconstructed = r1.n_as_extreme as f64 / r1.n_total as f64;
        prop_assert!((r1.p_two_sided - reconstructed).abs() < 1e-15);
    }
}

fn tiny_corpus(contents: Vec<String>) -> TraceStore {
    let raws: Vec<RawTrace> = contents
        .into_iter()
        .enumerate()
        .map(|(i, c)| RawTrace {
            id: format!("run-{i}"),
            events: None,
            content: Some(format!("w{c}")),
            metadata: None,
        })
        .collect();
    TraceStore::ingest(raws, 50_000).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // hit lists honor the sort contract and the fused score recomputes
    // from the hit's own ranks
    #[test]
    fn search_hits_sorted_and_rrf_consistent(
        contents in proptest::collection::vec("[a-f ]{1,40}", 2..12),
        query in "[a-f]{1,6}",
        top_k in 1usize..8,
    ) {
        let store = tiny_corpus(contents);
        let embedder = HashingEmbedder::default();
        let index = build_index(&store.snapshot(), &embedder).unwrap();
        let hits = index.search(&query, top_k, SearchMode::Hybrid, &embedder).unwrap();
        prop_assert!(hits.len() <= top_k);
        for w in hits.windows(2) {
            let ordered = w[0].fused_score > w[1].fused_score
                || (w[0].fused_score == w[1].fused_score && w[0].short_id < w[1].short_id);
            prop_assert!(ordered, "sort contract violated: {:?}", w);
        }
        for hit in &hits {
            prop_assert!(hit.lexical_rank.is_some() || hit.semantic_rank.is_some());
            let expected = hit.lexical_rank.map_or(0.0, |r| 1.0 / (60.0 + r as f64))
                + hit.semantic_rank.map_or(0.0, |r| 1.0 / (60.0 + r as f64));
            prop_assert!((hit.fused_score - expected).abs() < 1e-12);
        }
        // RRF monotonicity on the formula itself: a better rank in either
        // list never lowers the fused score
        for lex in 1usize..5 {
            for sem in 1usize..5 {
                let f = |l: usize, s: usize| 1.0 / (60.0 + l as f64) + 1.0 / (60.0 + s as f64);
                prop_assert!(f(lex, sem) <= f(lex, sem.saturating_sub(1).max(1)) + 1e-15);
                prop_assert!(f(lex, sem) <= f(lex.saturating_sub(1).max(1), sem) + 1e-15);
            }
        }
    }
}
