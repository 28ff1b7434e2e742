//! Small sample-statistics helpers for the Monte Carlo checks.

use nalgebra::{DMatrix, DVector};

use crate::simulation::pairwise_sum;

/// Ordinary least squares fit with homoskedastic standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub coef: DVector<f64>,
    pub std_err: DVector<f64>,
    pub resid_var: f64,
    pub n_obs: usize,
}

/// Regresses `y` on the columns of `x`. Returns `None` when there are no
/// residual degrees of freedom or the design is rank deficient.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<OlsFit> {
    let (n, k) = x.shape();
    if n <= k || y.len() != n {
        return None;
    }
    let svd = x.clone().svd(true, true);
    let s = &svd.singular_values;
    if s.min() <= 1e-12 * s.max() {
        return None;
    }
    let coef = svd.solve(y, 0.0).ok()?;
    let resid = y - x * &coef;
    let sq: Vec<f64> = resid.iter().map(|r| r * r).collect();
    let resid_var = pairwise_sum(&sq) / (n - k) as f64;
    // (X'X)^{-1} = V S^{-2} V'.
    let v_t = svd.v_t.as_ref()?;
    let std_err = DVector::from_fn(k, |c, _| {
        let var: f64 = (0..k).map(|m| (v_t[(m, c)] / s[m]).powi(2)).sum();
        (resid_var * var).sqrt()
    });
    Some(OlsFit {
        coef,
        std_err,
        resid_var,
        n_obs: n,
    })
}

/// Sample covariance matrix of the rows of `data` (observations by rows).
pub fn sample_cov(data: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = data.shape();
    let means: Vec<f64> = (0..k)
        .map(|c| pairwise_sum(data.column(c).as_slice()) / n as f64)
        .collect();
    DMatrix::from_fn(k, k, |a, b| {
        let prods: Vec<f64> = (0..n)
            .map(|r| (data[(r, a)] - means[a]) * (data[(r, b)] - means[b]))
            .collect();
        pairwise_sum(&prods) / (n - 1) as f64
    })
}

/// Standard error of a sample covariance entry under Gaussian data:
/// `sqrt((σ_aa σ_bb + σ_ab²) / n)`.
pub fn cov_entry_se(cov: &DMatrix<f64>, a: usize, b: usize, n: usize) -> f64 {
    ((cov[(a, a)] * cov[(b, b)] + cov[(a, b)] * cov[(a, b)]) / n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ols_recovers_exact_line() {
        let x = DMatrix::from_fn(6, 2, |r, c| if c == 0 { r as f64 } else { 1.0 });
        let y = DVector::from_fn(6, |r, _| 2.0 * r as f64 - 1.0);
        let fit = ols(&x, &y).unwrap();
        assert!((fit.coef[0] - 2.0).abs() < 1e-12);
        assert!((fit.coef[1] + 1.0).abs() < 1e-12);
        assert!(fit.std_err.amax() < 1e-6);
    }

    #[test]
    fn ols_standard_errors_match_textbook_formula() {
        let x = DMatrix::from_row_slice(5, 2, &[1.0, 1.0, 2.0, 1.0, 3.0, 1.0, 4.0, 1.0, 5.0, 1.0]);
        let y = DVector::from_vec(vec![1.1, 1.9, 3.2, 3.9, 5.1]);
        let fit = ols(&x, &y).unwrap();
        let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
        for c in 0..2 {
            assert!((fit.std_err[c] - (fit.resid_var * xtx_inv[(c, c)]).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_deficient_design_is_refused() {
        let x = DMatrix::from_fn(5, 2, |_, _| 1.0);
        assert!(ols(&x, &DVector::zeros(5)).is_none());
    }

    #[test]
    fn sample_cov_of_known_data() {
        let d = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let c = sample_cov(&d);
        assert!((c[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((c[(0, 1)] - 2.0).abs() < 1e-15);
        assert!((c[(1, 1)] - 4.0).abs() < 1e-15);
    }
}
