//! Two-sided permutation test on the difference in group means.
//!
//! Exact mode enumerates every relabeling (feasible for C(n, k) up to
//! 10^6); Monte Carlo mode draws seeded random relabelings. The exact
//! enumeration is the data-parallel hot loop: ranks are split into chunks,
//! each chunk unranked once and then walked with the lexicographic
//! successor.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use super::StatsError;

/// Exact-mode feasibility limit on the number of relabelings.
pub const EXACT_LIMIT: u64 = 1_000_000;

const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationMode {
    Exact,
    MonteCarlo { samples: u64, seed: u64 },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PermutationResult {
    pub p_two_sided: f64,
    pub n_as_extreme: u64,
    pub n_total: u64,
}

/// C(n, k) with overflow detection.
pub fn binomial(n: u64, k: u64) -> Option<u64> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)?;
        acc /= (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return None;
        }
    }
    Some(acc as u64)
}

/// Permutation test with the difference-in-means statistic.
pub fn permutation_test(
    a: &[f64],
    b: &[f64],
    mode: PermutationMode,
) -> Result<PermutationResult, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::EmptyGroup);
    }
    let k = a.len();
    let pool: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    let observed = mean(a) - mean(b);
    let threshold = observed.abs() - TIE_EPS;
    match mode {
        PermutationMode::Exact => {
            let n_total = binomial(pool.len() as u64, k as u64)
                .filter(|&t| t <= EXACT_LIMIT)
                .ok_or(StatsError::ExactTooLarge {
                    limit: EXACT_LIMIT,
                })?;
            #[cfg(feature = "parallel")]
            let n_as_extreme = if n_total >= 4096 {
                exact_count_par(&pool, k, threshold)
            } else {
                exact_count_seq(&pool, k, threshold)
            };
            #[cfg(not(feature = "parallel"))]
            let n_as_extreme = exact_count_seq(&pool, k, threshold);
            Ok(PermutationResult {
                p_two_sided: n_as_extreme as f64 / n_total as f64,
                n_as_extreme,
                n_total,
            })
        }
        PermutationMode::MonteCarlo { samples, seed } => {
            if samples == 0 {
                return Err(StatsError::EmptyGroup);
            }
            #[cfg(feature = "parallel")]
            let n_as_extreme = mc_count_par(&pool, k, threshold, samples, seed);
            #[cfg(not(feature = "parallel"))]
            let n_as_extreme = mc_count_seq(&pool, k, threshold, samples, seed);
            Ok(PermutationResult {
                p_two_sided: n_as_extreme as f64 / samples as f64,
                n_as_extreme,
                n_total: samples,
            })
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn relabeled_abs_diff(pool: &[f64], selected: &[usize]) -> f64 {
    let total: f64 = pool.iter().sum();
    let sum_a: f64 = selected.iter().map(|&i| pool[i]).sum();
    let k = selected.len() as f64;
    let m = pool.len() as f64 - k;
    (sum_a / k - (total - sum_a) / m).abs()
}

/// Advance `idx` to the next combination of `n` items in lexicographic
/// order; false when exhausted.
fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] != i + n - k {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Combination at lexicographic `rank` (combinadic unranking).
fn unrank_combination(mut rank: u64, n: usize, k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    let mut start = 0usize;
    let mut remaining = k;
    while remaining > 0 {
        for v in start..n {
            let with_v = binomial((n - v - 1) as u64, (remaining - 1) as u64).unwrap_or(0);
            if rank < with_v {
                out.push(v);
                start = v + 1;
                remaining -= 1;
                break;
            }
            rank -= with_v;
        }
    }
    out
}

/// Sequential exact kernel: relabelings with |mean diff| over `threshold`.
#[doc(hidden)]
pub fn exact_count_seq(pool: &[f64], k: usize, threshold: f64) -> u64 {
    let n = pool.len();
    let mut idx: Vec<usize> = (0..k).collect();
    let mut count = 0u64;
    loop {
        if relabeled_abs_diff(pool, &idx) >= threshold {
            count += 1;
        }
        if !next_combination(&mut idx, n) {
            break;
        }
    }
    count
}

/// Parallel exact kernel: rank space split into chunks, each unranked once
/// and walked with the successor.
#[cfg(feature = "parallel")]
#[doc(hidden)]
pub fn exact_count_par(pool: &[f64], k: usize, threshold: f64) -> u64 {
    let n = pool.len();
    let n_total = binomial(n as u64, k as u64).expect("checked by caller");
    let chunk: u64 = (n_total / (rayon::current_num_threads() as u64 * 8).max(1)).max(1024);
    let starts: Vec<u64> = (0..n_total).step_by(chunk as usize).collect();
    starts
        .par_iter()
        .map(|&start| {
            let end = (start + chunk).min(n_total);
            let mut idx = unrank_combination(start, n, k);
            let mut count = 0u64;
            for _ in start..end {
                if relabeled_abs_diff(pool, &idx) >= threshold {
                    count += 1;
                }
                if !next_combination(&mut idx, n) {
                    break;
                }
            }
            count
        })
        .sum()
}

fn mc_sample_extreme(pool: &[f64], k: usize, threshold: f64, seed: u64, sample: u64) -> bool {
    // one RNG per sample so sequential and parallel runs agree exactly
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ sample.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut indices: Vec<usize> = (0..pool.len()).collect();
    indices.shuffle(&mut rng);
    relabeled_abs_diff(pool, &indices[..k]) >= threshold
}

#[doc(hidden)]
pub fn mc_count_seq(pool: &[f64], k: usize, threshold: f64, samples: u64, seed: u64) -> u64 {
    (0..samples)
        .filter(|&s| mc_sample_extreme(pool, k, threshold, seed, s))
        .count() as u64
}

#[cfg(feature = "parallel")]
#[doc(hidden)]
pub fn mc_count_par(pool: &[f64], k: usize, threshold: f64, samples: u64, seed: u64) -> u64 {
    (0..samples)
        .into_par_iter()
        .filter(|&s| mc_sample_extreme(pool, k, threshold, seed, s))
        .count() as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomial_values() {
        assert_eq!(binomial(12, 6), Some(924));
        assert_eq!(binomial(4, 2), Some(6));
        assert_eq!(binomial(5, 0), Some(1));
        assert_eq!(binomial(3, 5), Some(0));
        assert!(binomial(200, 100).is_none()); // overflows u64
    }

    #[test]
    fn hand_enumerable_two_two_case() {
        // pool {1,2,10,11}: only the original split and its mirror reach |9|
        let r = permutation_test(&[1.0, 2.0], &[10.0, 11.0], PermutationMode::Exact).unwrap();
        assert_eq!(r.n_total, 6);
        assert_eq!(r.n_as_extreme, 2);
        assert!((r.p_two_sided - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn identical_groups_give_p_one() {
        let r = permutation_test(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0], PermutationMode::Exact)
            .unwrap();
        assert_eq!(r.n_as_extreme, r.n_total);
        assert_eq!(r.p_two_sided, 1.0);
    }

    #[test]
    fn twelve_split_six_six_enumerates_924() {
        let a: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..6).map(|i| (i + 4) as f64).collect();
        let r = permutation_test(&a, &b, PermutationMode::Exact).unwrap();
        assert_eq!(r.n_total, 924);
    }

    #[test]
    fn empty_group_errors() {
        assert!(permutation_test(&[], &[1.0], PermutationMode::Exact).is_err());
    }

    #[test]
    fn exact_refuses_oversized_enumeration() {
        let a: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..16).map(|i| i as f64 + 0.5).collect();
        // C(32,16) is about 6.0e8
        assert!(matches!(
            permutation_test(&a, &b, PermutationMode::Exact),
            Err(StatsError::ExactTooLarge { .. })
        ));
    }

    #[test]
    fn unrank_agrees_with_successor_walk() {
        let n = 8;
        let k = 3;
        let mut idx: Vec<usize> = (0..k).collect();
        let mut rank = 0u64;
        loop {
            assert_eq!(unrank_combination(rank, n, k), idx, "rank {rank}");
            rank += 1;
            if !next_combination(&mut idx, n) {
                break;
            }
        }
        assert_eq!(rank, binomial(n as u64, k as u64).unwrap());
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_and_sequential_kernels_agree() {
        let pool: Vec<f64> = (0..14).map(|i| (i * i % 7) as f64).collect();
        for k in [3usize, 7] {
            let seq = exact_count_seq(&pool, k, 0.8);
            let par = exact_count_par(&pool, k, 0.8);
            assert_eq!(seq, par);
        }
        let seq = mc_count_seq(&pool, 7, 0.8, 5000, 42);
        let par = mc_count_par(&pool, 7, 0.8, 5000, 42);
        assert_eq!(seq, par);
    }

    #[test]
    fn monte_carlo_is_seed_deterministic() {
        let a = [1.0, 2.0, 3.0, 4.0, 9.0];
        let b = [5.0, 6.0, 7.0, 8.0, 2.0];
        let mode = PermutationMode::MonteCarlo {
            samples: 2000,
            seed: 7,
        };
        let r1 = permutation_test(&a, &b, mode).unwrap();
        let r2 = permutation_test(&a, &b, mode).unwrap();
        assert_eq!(r1.n_as_extreme, r2.n_as_extreme);
        assert_eq!(r1.n_total, 2000);
    }

    #[test]
    fn exact_p_values_are_multiples_of_one_over_total() {
        let a = [0.5, 1.5, 2.5];
        let b = [3.0, 4.0];
        let r = permutation_test(&a, &b, PermutationMode::Exact).unwrap();
        let k = (r.p_two_sided * r.n_total as f64).round();
        assert!((r.p_two_sided - k / r.n_total as f64).abs() < 1e-15);
    }
}
