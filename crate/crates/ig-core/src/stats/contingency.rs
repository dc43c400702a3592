//! Contingency-table statistics: Pearson chi-square, Cramér's V, and the
//! odds ratio with the Haldane–Anscombe zero-cell correction.

use serde::{Deserialize, Serialize};

use super::special::reg_inc_gamma_upper;
use super::StatsError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
}

impl ContingencyTable {
    pub fn new(counts: Vec<Vec<u64>>) -> Result<ContingencyTable, StatsError> {
        let r = counts.len();
        if r < 2 {
            return Err(StatsError::BadTableShape { rows: r, cols: 0 });
        }
        let c = counts[0].len();
        if c < 2 || counts.iter().any(|row| row.len() != c) {
            return Err(StatsError::BadTableShape { rows: r, cols: c });
        }
        let n: u64 = counts.iter().flatten().sum();
        if n == 0 {
            return Err(StatsError::EmptyTable);
        }
        let row_labels = (0..r).map(|i| format!("r{i}")).collect();
        let col_labels = (0..c).map(|j| format!("c{j}")).collect();
        Ok(ContingencyTable {
            counts,
            row_labels,
            col_labels,
        })
    }

    pub fn rows(&self) -> usize {
        self.counts.len()
    }

    pub fn cols(&self) -> usize {
        self.counts[0].len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|row| row.iter().sum()).collect()
    }

    fn col_sums(&self) -> Vec<u64> {
        let mut sums = vec![0u64; self.cols()];
        for row in &self.counts {
            for (j, &v) in row.iter().enumerate() {
                sums[j] += v;
            }
        }
        sums
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub stat: f64,
    pub dof: usize,
    pub p: f64,
}

/// Pearson chi-square test of independence. `p` is the upper regularized
/// incomplete gamma Q(dof/2, stat/2).
pub fn chi_square(table: &ContingencyTable) -> Result<ChiSquareResult, StatsError> {
    let row_sums = table.row_sums();
    let col_sums = table.col_sums();
    if row_sums.iter().any(|&s| s == 0) || col_sums.iter().any(|&s| s == 0) {
        return Err(StatsError::ZeroMarginal);
    }
    let n = table.total() as f64;
    let mut stat = 0.0;
    for (i, row) in table.counts.iter().enumerate() {
        for (j, &obs) in row.iter().enumerate() {
            let expected = row_sums[i] as f64 * col_sums[j] as f64 / n;
            let d = obs as f64 - expected;
            stat += d * d / expected;
        }
    }
    let dof = (table.rows() - 1) * (table.cols() - 1);
    let p = reg_inc_gamma_upper(dof as f64 / 2.0, stat / 2.0)?;
    Ok(ChiSquareResult { stat, dof, p })
}

/// Cramér's V: sqrt(chi2 / (n * (min(r, c) - 1))), in [0, 1].
pub fn cramers_v(table: &ContingencyTable) -> Result<f64, StatsError> {
    let chi = chi_square(table)?;
    let n = table.total() as f64;
    let k = table.rows().min(table.cols()) as f64 - 1.0;
    let v = (chi.stat / (n * k)).sqrt();
    // guard tiny float overshoot on perfect association
    Ok(v.min(1.0))
}

/// Odds ratio (a*d)/(b*c) on a 2x2 table, with the Haldane–Anscombe +0.5
/// correction applied to every cell whenever any cell is zero.
pub fn odds_ratio(table: &ContingencyTable) -> Result<f64, StatsError> {
    if table.rows() != 2 || table.cols() != 2 {
        return Err(StatsError::BadTableShape {
            rows: table.rows(),
            cols: table.cols(),
        });
    }
    let a = table.counts[0][0] as f64;
    let b = table.counts[0][1] as f64;
    let c = table.counts[1][0] as f64;
    let d = table.counts[1][1] as f64;
    let shift = if [a, b, c, d].iter().any(|&v| v == 0.0) {
        0.5
    } else {
        0.0
    };
    Ok(((a + shift) * (d + shift)) / ((b + shift) * (c + shift)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(counts: &[&[u64]]) -> ContingencyTable {
        ContingencyTable::new(counts.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn independent_table_has_zero_stat() {
        let r = chi_square(&table(&[&[5, 5], &[5, 5]])).unwrap();
        assert_eq!(r.stat, 0.0);
        assert_eq!(r.p, 1.0);
        assert_eq!(r.dof, 1);
    }

    #[test]
    fn diagonal_table_hand_expansion() {
        // expected counts all 5; chi2 = 4 * (10-5)^2/5 = 20
        let r = chi_square(&table(&[&[10, 0], &[0, 10]])).unwrap();
        close(r.stat, 20.0, 1e-12);
        assert_eq!(r.dof, 1);
    }

    #[test]
    fn two_by_three_dof() {
        let r = chi_square(&table(&[&[4, 5, 6], &[6, 5, 4]])).unwrap();
        assert_eq!(r.dof, 2);
    }

    #[test]
    fn zero_marginal_errors() {
        let t = ContingencyTable::new(vec![vec![0, 0], vec![5, 5]]).unwrap();
        assert!(matches!(chi_square(&t), Err(StatsError::ZeroMarginal)));
    }

    #[test]
    fn cramers_v_values() {
        close(cramers_v(&table(&[&[10, 0], &[0, 10]])).unwrap(), 1.0, 0.0);
        close(cramers_v(&table(&[&[5, 5], &[5, 5]])).unwrap(), 0.0, 0.0);
        // hand-derived: chi2 = 7.2, n = 20 => sqrt(7.2/20) = 0.6
        close(cramers_v(&table(&[&[8, 2], &[2, 8]])).unwrap(), 0.6, 1e-12);
    }

    #[test]
    fn odds_ratio_values() {
        close(odds_ratio(&table(&[&[10, 5], &[2, 8]])).unwrap(), 8.0, 1e-12);
        // Haldane–Anscombe: (10.5 * 10.5) / (0.5 * 0.5) = 441
        close(odds_ratio(&table(&[&[10, 0], &[0, 10]])).unwrap(), 441.0, 1e-12);
        close(odds_ratio(&table(&[&[5, 5], &[5, 5]])).unwrap(), 1.0, 1e-12);
    }

    #[test]
    fn odds_ratio_requires_2x2() {
        let t = table(&[&[1, 2, 3], &[4, 5, 6]]);
        assert!(odds_ratio(&t).is_err());
    }

    #[test]
    fn odds_ratio_symmetries() {
        let t = table(&[&[10, 5], &[2, 8]]);
        let transposed = table(&[&[10, 2], &[5, 8]]);
        let swapped = table(&[&[2, 8], &[10, 5]]);
        let or = odds_ratio(&t).unwrap();
        close(odds_ratio(&transposed).unwrap(), or, 1e-12);
        close(odds_ratio(&swapped).unwrap(), 1.0 / or, 1e-12);
    }

    #[test]
    fn chi_square_p_matches_reference() {
        // frozen reference values for the survival function
        let r = chi_square(&table(&[&[8, 2], &[2, 8]])).unwrap();
        close(r.p, 0.0072903580915356595, 1e-10);
        let r = chi_square(&table(&[&[10, 0], &[0, 10]])).unwrap();
        close(r.p, 7.744216431044088e-06, 1e-12);
    }
}
