//! Pure statistical kit: contingency-table tests used by investigators,
//! Welch's t-test and the exact permutation test used by the study
//! analysis CLI, plus the special functions they rest on.
//!
//! Everything here is a pure function of its inputs; the same arguments
//! give the same bits back on every call and every thread.

pub mod contingency;
pub mod perm;
pub mod special;
pub mod welch;

use thiserror::Error;

pub use contingency::{chi_square, cramers_v, odds_ratio, ChiSquareResult, ContingencyTable};
pub use perm::{binomial, permutation_test, PermutationMode, PermutationResult, EXACT_LIMIT};
pub use special::{
    ln_gamma, reg_inc_beta, reg_inc_gamma_lower, reg_inc_gamma_upper, t_cdf, t_quantile,
    SpecialFnError,
};
pub use welch::{welch_t, WelchResult};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("table must be at least 2x2 and rectangular (got {rows}x{cols})")]
    BadTableShape { rows: usize, cols: usize },
    #[error("table has no observations")]
    EmptyTable,
    #[error("zero marginal row or column total")]
    ZeroMarginal,
    #[error("both groups must be nonempty")]
    EmptyGroup,
    #[error("exact enumeration exceeds the {limit}-relabeling limit; use monte_carlo")]
    ExactTooLarge { limit: u64 },
    #[error("need at least 2 observations per group (got {n_a} and {n_b})")]
    SampleTooSmall { n_a: u64, n_b: u64 },
    #[error("group spreads degenerate (sd_a {sd_a}, sd_b {sd_b})")]
    DegenerateSpread { sd_a: f64, sd_b: f64 },
    #[error(transparent)]
    Special(#[from] SpecialFnError),
}

/// Sample Pearson correlation over paired values; `None` when either side
/// is constant or fewer than two pairs are given.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}
