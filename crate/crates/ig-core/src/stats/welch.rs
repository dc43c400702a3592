//! Welch's two-sample t-test from summary statistics.

use serde::{Deserialize, Serialize};

use super::special::{t_cdf, t_quantile};
use super::StatsError;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WelchResult {
    /// t statistic on the difference `mean_b - mean_a`.
    pub t: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub df: f64,
    pub p_two_sided: f64,
    /// 95% CI on the difference, in input units.
    pub ci95: (f64, f64),
    /// Cohen's d with the pooled-SD denominator sqrt((sd_a^2 + sd_b^2)/2).
    pub cohens_d: f64,
}

/// Welch's t-test for two groups given (mean, sd, n) summaries. The
/// difference is taken as group b minus group a, so swapping the groups
/// negates `t` and mirrors the CI while leaving `p` unchanged.
pub fn welch_t(
    mean_a: f64,
    sd_a: f64,
    n_a: u64,
    mean_b: f64,
    sd_b: f64,
    n_b: u64,
) -> Result<WelchResult, StatsError> {
    if n_a < 2 || n_b < 2 {
        return Err(StatsError::SampleTooSmall { n_a, n_b });
    }
    if sd_a < 0.0 || sd_b < 0.0 || (sd_a == 0.0 && sd_b == 0.0) {
        return Err(StatsError::DegenerateSpread { sd_a, sd_b });
    }
    let va = sd_a * sd_a / n_a as f64;
    let vb = sd_b * sd_b / n_b as f64;
    let se = (va + vb).sqrt();
    let diff = mean_b - mean_a;
    let t = diff / se;
    let df = (va + vb) * (va + vb)
        / (va * va / (n_a as f64 - 1.0) + vb * vb / (n_b as f64 - 1.0));
    let p_two_sided = 2.0 * (1.0 - t_cdf(t.abs(), df)?);
    let t_crit = t_quantile(0.975, df)?;
    let ci95 = (diff - t_crit * se, diff + t_crit * se);
    let cohens_d = diff / ((sd_a * sd_a + sd_b * sd_b) / 2.0).sqrt();
    Ok(WelchResult {
        t,
        df,
        p_two_sided,
        ci95,
        cohens_d,
    })
}
