//! Small statistical helpers used by the experiments.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Pearson goodness of fit of `counts` against `probs`. Cells with expected
/// count below 5 are pooled into one. Returns `(statistic, dof, p-value)`.
pub fn chi_square_gof(counts: &[usize], probs: &[f64]) -> (f64, usize, f64) {
    assert_eq!(counts.len(), probs.len());
    let n: usize = counts.iter().sum();
    let nf = n as f64;
    let total_p: f64 = probs.iter().sum();
    let mut cells: Vec<(f64, f64)> = vec![];
    let mut pooled = (0.0, 0.0);
    for (&c, &p) in counts.iter().zip(probs) {
        let e = nf * p / total_p;
        if e < 5.0 {
            pooled.0 += c as f64;
            pooled.1 += e;
        } else {
            cells.push((c as f64, e));
        }
    }
    if pooled.1 > 0.0 {
        cells.push(pooled);
    }
    if cells.len() < 2 {
        return (0.0, 0, 1.0);
    }
    let stat: f64 = cells.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    let dof = cells.len() - 1;
    let p = 1.0 - ChiSquared::new(dof as f64).expect("dof >= 1").cdf(stat);
    (stat, dof, p)
}

/// Median of a non-empty slice.
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gof_examples() {
        let (s, dof, p) = chi_square_gof(&[50, 50], &[0.5, 0.5]);
        assert_eq!((s, dof), (0.0, 1));
        assert!((p - 1.0).abs() < 1e-12);
        // 60/40 against fair: statistic 4, p = P(χ²₁ > 4) ≈ 0.0455
        let (s, _, p) = chi_square_gof(&[60, 40], &[0.5, 0.5]);
        assert!((s - 4.0).abs() < 1e-12);
        assert!((p - 0.04550026).abs() < 1e-6);
        assert_eq!(chi_square_gof(&[10], &[1.0]).2, 1.0);
        let (_, dof, _) = chi_square_gof(&[100, 1, 1, 0], &[0.97, 0.01, 0.01, 0.01]);
        assert_eq!(dof, 1);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
