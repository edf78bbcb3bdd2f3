use nalgebra::{Cholesky, DMatrix, Dyn};

/// Pivots whose square falls below this fraction of the original diagonal
/// entry are treated as zero.
pub(crate) const PIVOT_TOL: f64 = 1e-14;

/// Cholesky factorization of a symmetric PSD matrix; `None` when the matrix is
/// singular to working precision.
pub(crate) fn spd_cholesky(m: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let diag: Vec<f64> = m.diagonal().iter().copied().collect();
    let chol = Cholesky::new(m)?;
    let l = chol.l_dirty();
    for (i, d) in diag.iter().enumerate() {
        let p = l[(i, i)];
        if !(p * p > PIVOT_TOL * d) || !p.is_finite() {
            return None;
        }
    }
    Some(chol)
}

pub(crate) fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// `log det(m)` for symmetric PSD `m`, `-∞` when singular.
pub(crate) fn psd_log_det(m: DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    spd_cholesky(m).map_or(f64::NEG_INFINITY, |c| chol_log_det(&c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_singular() {
        let ones = DMatrix::from_element(2, 2, 1.0);
        assert_eq!(psd_log_det(ones), f64::NEG_INFINITY);
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert!((psd_log_det(m) - 3f64.ln()).abs() < 1e-14);
        assert_eq!(psd_log_det(DMatrix::zeros(0, 0)), 0.0);
    }
}
