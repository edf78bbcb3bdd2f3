//! Probabilities, objectives and gradients of a low-rank DPP.
//!
//! With `L = V Vᵀ`, the restricted determinant is `det(V_A V_Aᵀ)` (an
//! `|A| × |A|` Gram matrix) and the normalizer `det(L + I_M)` equals
//! `det(I_K + VᵀV)`, so nothing here touches an `M × M` matrix.
//!
//! Gradients with respect to `V`:
//!
//! * `∂ log det(V_A V_Aᵀ)` has rows `2 (V_A V_Aᵀ)⁻¹ V_A` on `A`, zero elsewhere;
//! * `∂ log det(I_K + VᵀV) = 2 V (I_K + VᵀV)⁻¹`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{DppError, Result};
use crate::factor::{Basket, KernelFactor};
use crate::linalg::{chol_log_det, psd_log_det, spd_cholesky};

/// Value of a training objective split into its parts.
///
/// `total = positive_term - negative_term - regularizer`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub total: f64,
    pub positive_term: f64,
    pub negative_term: f64,
    pub regularizer: f64,
}

impl ObjectiveValue {
    fn compose(positive_term: f64, negative_term: f64, regularizer: f64) -> Self {
        ObjectiveValue {
            total: positive_term - negative_term - regularizer,
            positive_term,
            negative_term,
            regularizer,
        }
    }
}

fn gram(factor: &KernelFactor, items: &[usize]) -> DMatrix<f64> {
    let rows = factor.rows(items);
    &rows * rows.transpose()
}

/// `log det(L_A)`; `-∞` when the minor is singular (always when `|A| > K`).
pub fn log_det_restricted(factor: &KernelFactor, basket: &Basket) -> Result<f64> {
    basket.check_range(factor.num_items())?;
    if basket.len() > factor.rank() {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(psd_log_det(gram(factor, basket.items())))
}

/// `log det(L + I)`, computed as `log det(I_K + VᵀV)`.
pub fn log_normalizer(factor: &KernelFactor) -> f64 {
    let v = factor.values();
    let k = factor.rank();
    let inner = DMatrix::identity(k, k) + v.transpose() * v;
    // I + VᵀV is positive definite with eigenvalues ≥ 1.
    spd_cholesky(inner)
        .map(|c| chol_log_det(&c))
        .expect("I + VᵀV is positive definite for finite V")
}

pub fn log_prob(factor: &KernelFactor, basket: &Basket) -> Result<f64> {
    log_prob_given_normalizer(factor, basket, log_normalizer(factor))
}

/// [`log_prob`] with a precomputed `log det(L + I)`.
pub fn log_prob_given_normalizer(
    factor: &KernelFactor,
    basket: &Basket,
    log_normalizer: f64,
) -> Result<f64> {
    Ok(log_det_restricted(factor, basket)? - log_normalizer)
}

/// Adds `weight · ∂ log det(L_A)/∂V` into `grad`, touching only rows of `A`.
pub fn add_grad_log_det_restricted(
    factor: &KernelFactor,
    basket: &Basket,
    weight: f64,
    grad: &mut DMatrix<f64>,
) -> Result<()> {
    basket.check_range(factor.num_items())?;
    let items = basket.items();
    let rows = factor.rows(items);
    let g = &rows * rows.transpose();
    let chol = match spd_cholesky(g) {
        Some(c) if items.len() <= factor.rank() => c,
        _ => return Err(DppError::Singular(items.to_vec())),
    };
    let solved = chol.solve(&rows);
    for (r, &item) in items.iter().enumerate() {
        let mut row = grad.row_mut(item);
        row += solved.row(r) * (2.0 * weight);
    }
    Ok(())
}

pub fn grad_log_det_restricted(factor: &KernelFactor, basket: &Basket) -> Result<DMatrix<f64>> {
    let mut grad = DMatrix::zeros(factor.num_items(), factor.rank());
    add_grad_log_det_restricted(factor, basket, 1.0, &mut grad)?;
    Ok(grad)
}

/// `∂ log det(I_K + VᵀV)/∂V = 2 V (I_K + VᵀV)⁻¹`.
pub fn grad_log_normalizer(factor: &KernelFactor) -> DMatrix<f64> {
    let v = factor.values();
    let k = factor.rank();
    let inner = DMatrix::identity(k, k) + v.transpose() * v;
    let chol = spd_cholesky(inner).expect("I + VᵀV is positive definite for finite V");
    // V (I + VᵀV)⁻¹ = ((I + VᵀV)⁻¹ Vᵀ)ᵀ by symmetry.
    chol.solve(&v.transpose()).transpose() * 2.0
}

/// Gradient of [`log_prob`] with respect to every entry of `V`.
pub fn grad_log_prob(factor: &KernelFactor, basket: &Basket) -> Result<DMatrix<f64>> {
    let mut grad = grad_log_normalizer(factor) * -1.0;
    add_grad_log_det_restricted(factor, basket, 1.0, &mut grad)?;
    Ok(grad)
}

/// `R(V) = α Σ_i ‖v_i‖² / μ_i` over items with `μ_i > 0`.
pub fn regularizer(factor: &KernelFactor, occurrence_counts: &[u64], alpha: f64) -> f64 {
    if alpha == 0.0 {
        return 0.0;
    }
    let v = factor.values();
    occurrence_counts
        .iter()
        .enumerate()
        .filter(|(_, &mu)| mu > 0)
        .map(|(i, &mu)| v.row(i).norm_squared() / mu as f64)
        .sum::<f64>()
        * alpha
}

/// `∂R/∂V`: row `i` is `2α v_i / μ_i`, zero for unseen items.
pub fn regularizer_grad(factor: &KernelFactor, occurrence_counts: &[u64], alpha: f64) -> DMatrix<f64> {
    let v = factor.values();
    let mut grad = DMatrix::zeros(v.nrows(), v.ncols());
    if alpha == 0.0 {
        return grad;
    }
    for (i, &mu) in occurrence_counts.iter().enumerate() {
        if mu > 0 {
            grad.row_mut(i).copy_from(&(v.row(i) * (2.0 * alpha / mu as f64)));
        }
    }
    grad
}

fn check_counts(factor: &KernelFactor, occurrence_counts: &[u64]) -> Result<()> {
    if occurrence_counts.len() != factor.num_items() {
        return Err(DppError::InvalidInput(format!(
            "{} occurrence counts for {} items",
            occurrence_counts.len(),
            factor.num_items()
        )));
    }
    Ok(())
}

fn mean_log_prob(factor: &KernelFactor, baskets: &[Basket], log_z: f64) -> Result<f64> {
    let mut sum = 0.0;
    for b in baskets {
        sum += log_prob_given_normalizer(factor, b, log_z)?;
    }
    Ok(sum / baskets.len() as f64)
}

/// Contrastive objective: mean positive log-probability minus mean negative
/// log-probability minus `R(V)`.
///
/// A singular positive minor gives `total = -∞`; otherwise a singular negative
/// minor gives `total = +∞` (the degenerate negative case). With no negatives
/// this is exactly [`mle_objective`].
pub fn ce_objective(
    factor: &KernelFactor,
    positives: &[Basket],
    negatives: &[Basket],
    occurrence_counts: &[u64],
    alpha: f64,
) -> Result<ObjectiveValue> {
    if positives.is_empty() {
        return Err(DppError::InvalidInput("no positive baskets".into()));
    }
    check_counts(factor, occurrence_counts)?;
    let log_z = log_normalizer(factor);
    let positive_term = mean_log_prob(factor, positives, log_z)?;
    let negative_term = if negatives.is_empty() {
        0.0
    } else {
        mean_log_prob(factor, negatives, log_z)?
    };
    let reg = regularizer(factor, occurrence_counts, alpha);
    let mut value = ObjectiveValue::compose(positive_term, negative_term, reg);
    if positive_term == f64::NEG_INFINITY {
        value.total = f64::NEG_INFINITY;
    }
    Ok(value)
}

pub fn mle_objective(
    factor: &KernelFactor,
    positives: &[Basket],
    occurrence_counts: &[u64],
    alpha: f64,
) -> Result<ObjectiveValue> {
    ce_objective(factor, positives, &[], occurrence_counts, alpha)
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x == f64::INFINITY {
        return x;
    }
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Log-odds that `A` came from the data rather than the noise:
/// `log P_L(A) - log(ratio · p_n(A))`.
fn nce_logit(log_prob: f64, noise_log_density: f64, ratio: f64) -> f64 {
    log_prob - ratio.ln() - noise_log_density
}

/// `log P(A ∈ A* | A)` for the class the sample actually belongs to.
pub fn nce_log_posterior(log_prob: f64, noise_log_density: f64, ratio: f64, is_positive: bool) -> f64 {
    let d = nce_logit(log_prob, noise_log_density, ratio);
    if is_positive {
        -softplus(-d)
    } else {
        -softplus(d)
    }
}

/// Scalar multiplying `∇ log P_L(A)` in the NCE gradient:
/// `ε* - (1 + ratio · p_n(A) / P_L(A))⁻¹`.
pub fn nce_scale(log_prob: f64, noise_log_density: f64, ratio: f64, is_positive: bool) -> f64 {
    let d = nce_logit(log_prob, noise_log_density, ratio);
    // σ(d) and σ(-d) computed from whichever side avoids overflow.
    let (sig, sig_neg) = if d >= 0.0 {
        let e = (-d).exp();
        (1.0 / (1.0 + e), e / (1.0 + e))
    } else {
        let e = d.exp();
        (e / (1.0 + e), 1.0 / (1.0 + e))
    };
    if is_positive {
        sig_neg
    } else {
        -sig
    }
}

/// Gradient of `log P(A ∈ A* | A)` for a single sample.
///
/// A negative sample with a singular minor has zero gradient (its scale
/// vanishes). A positive sample with a singular minor has an unbounded
/// gradient and is reported as [`DppError::Singular`].
pub fn nce_gradient(
    factor: &KernelFactor,
    basket: &Basket,
    is_positive: bool,
    noise_log_density: f64,
    ratio: f64,
) -> Result<DMatrix<f64>> {
    if !(ratio > 0.0) {
        return Err(DppError::InvalidInput(format!("noise ratio must be positive, got {ratio}")));
    }
    if noise_log_density.is_nan() || noise_log_density == f64::INFINITY {
        return Err(DppError::InvalidInput("noise log-density must be finite or -inf".into()));
    }
    let lp = log_prob(factor, basket)?;
    let scale = nce_scale(lp, noise_log_density, ratio, is_positive);
    if lp == f64::NEG_INFINITY {
        return if is_positive {
            Err(DppError::Singular(basket.items().to_vec()))
        } else {
            Ok(DMatrix::zeros(factor.num_items(), factor.rank()))
        };
    }
    if scale == 0.0 {
        return Ok(DMatrix::zeros(factor.num_items(), factor.rank()));
    }
    Ok(grad_log_prob(factor, basket)? * scale)
}

/// NCE objective scaled by `1/|A⁺|`, with `R(V)` subtracted.
///
/// Each sample carries its log-density under the noise distribution.
/// `positive_term` holds the positive-class log-posteriors, `negative_term` the
/// negated negative-class ones, so `total` keeps the usual decomposition.
pub fn nce_objective(
    factor: &KernelFactor,
    positives: &[(Basket, f64)],
    negatives: &[(Basket, f64)],
    ratio: f64,
    occurrence_counts: &[u64],
    alpha: f64,
) -> Result<ObjectiveValue> {
    if positives.is_empty() {
        return Err(DppError::InvalidInput("no positive baskets".into()));
    }
    check_counts(factor, occurrence_counts)?;
    let log_z = log_normalizer(factor);
    let n = positives.len() as f64;
    let mut pos = 0.0;
    for (b, noise) in positives {
        let lp = log_prob_given_normalizer(factor, b, log_z)?;
        pos += nce_log_posterior(lp, *noise, ratio, true);
    }
    let mut neg = 0.0;
    for (b, noise) in negatives {
        let lp = log_prob_given_normalizer(factor, b, log_z)?;
        neg += nce_log_posterior(lp, *noise, ratio, false);
    }
    Ok(ObjectiveValue::compose(
        pos / n,
        -neg / n,
        regularizer(factor, occurrence_counts, alpha),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;

    fn basket(items: &[usize]) -> Basket {
        Basket::new(items.to_vec()).unwrap()
    }

    #[test]
    fn identity_factor_values() {
        let f = KernelFactor::new(DMatrix::identity(2, 2)).unwrap();
        assert_eq!(log_det_restricted(&f, &basket(&[0])).unwrap(), 0.0);
        assert_abs_diff_eq!(log_normalizer(&f), 2.0 * 2f64.ln(), epsilon = 1e-14);
        assert_abs_diff_eq!(log_prob(&f, &basket(&[0])).unwrap(), 0.25f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn rank_deficient_minor_is_neg_infinity() {
        let f = KernelFactor::new(DMatrix::from_element(3, 1, 1.0)).unwrap();
        assert_eq!(log_det_restricted(&f, &basket(&[0, 1])).unwrap(), f64::NEG_INFINITY);
        assert!(grad_log_prob(&f, &basket(&[0, 1])).is_err());
    }

    #[test]
    fn zero_factor() {
        let f = KernelFactor::new(DMatrix::zeros(3, 2)).unwrap();
        assert_eq!(log_normalizer(&f), 0.0);
        assert_eq!(log_prob(&f, &basket(&[1])).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn out_of_range_is_input_error() {
        let f = KernelFactor::new(DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(
            log_det_restricted(&f, &basket(&[2])),
            Err(DppError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn regularizer_arithmetic() {
        let f = KernelFactor::from_row_slice(2, 2, &[3.0, 4.0, 1.0, 1.0]).unwrap();
        assert_eq!(regularizer(&f, &[5, 0], 1.0), 5.0);
        assert_eq!(regularizer(&f, &[5, 0], 0.0), 0.0);
        assert_eq!(regularizer(&f, &[0, 0], 1.0), 0.0);
        let g = regularizer_grad(&f, &[5, 0], 1.0);
        assert_eq!(g[(1, 0)], 0.0);
        assert_abs_diff_eq!(g[(0, 0)], 1.2, epsilon = 1e-15);
        assert_abs_diff_eq!(g[(0, 1)], 1.6, epsilon = 1e-15);
    }

    #[test]
    fn restricted_grad_is_zero_off_basket() {
        let f = KernelFactor::random(6, 3, &mut seeded(3)).unwrap();
        let g = grad_log_det_restricted(&f, &basket(&[1, 4])).unwrap();
        for i in [0, 2, 3, 5] {
            assert!(g.row(i).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn ce_cancellation_and_reduction() {
        let f = KernelFactor::random(6, 3, &mut seeded(5)).unwrap();
        let pos = vec![basket(&[0, 1]), basket(&[2, 3, 4])];
        let counts = vec![1, 1, 1, 1, 1, 0];
        let v = ce_objective(&f, &pos, &pos, &counts, 1.0).unwrap();
        assert_eq!(v.positive_term, v.negative_term);
        assert_eq!(v.total, -v.regularizer);
        let mle = mle_objective(&f, &pos, &counts, 1.0).unwrap();
        assert_eq!(mle.negative_term, 0.0);
        assert!(ce_objective(&f, &[], &pos, &counts, 1.0).is_err());
    }

    #[test]
    fn ce_singular_cases() {
        let f = KernelFactor::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let counts = vec![1, 1, 1];
        let good = basket(&[0, 2]);
        let bad = basket(&[0, 1]);
        let v = ce_objective(&f, std::slice::from_ref(&good), std::slice::from_ref(&bad), &counts, 0.0).unwrap();
        assert_eq!(v.total, f64::INFINITY);
        let v = ce_objective(&f, &[bad], &[good], &counts, 0.0).unwrap();
        assert_eq!(v.total, f64::NEG_INFINITY);
    }

    #[test]
    fn nce_scale_limits() {
        // p_n / P → ∞
        assert_abs_diff_eq!(nce_scale(-800.0, 0.0, 1.0, true), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(nce_scale(-800.0, 0.0, 1.0, false), 0.0, epsilon = 1e-12);
        // p_n / P → 0
        assert_abs_diff_eq!(nce_scale(0.0, -800.0, 1.0, false), -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(nce_scale(0.0, -800.0, 1.0, true), 0.0, epsilon = 1e-12);
        // balanced odds
        assert_abs_diff_eq!(nce_scale(-2.0, -2.0, 1.0, true), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(nce_scale(-2.0, f64::NEG_INFINITY, 0.5, false), -1.0);
    }

    #[test]
    fn nce_gradient_edge_cases() {
        let f = KernelFactor::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let singular = basket(&[0, 1]);
        let g = nce_gradient(&f, &singular, false, -1.0, 0.5).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        assert!(nce_gradient(&f, &singular, true, -1.0, 0.5).is_err());
        assert!(nce_gradient(&f, &basket(&[0]), true, -1.0, 0.0).is_err());

        // Positive sample whose noise density dwarfs the model: full MLE gradient.
        let b = basket(&[0, 2]);
        let g = nce_gradient(&f, &b, true, 700.0, 1.0).unwrap();
        let full = grad_log_prob(&f, &b).unwrap();
        assert_abs_diff_eq!(g, full, epsilon = 1e-12);
        // Negative sample the noise cannot explain: scale −1.
        let g = nce_gradient(&f, &b, false, -700.0, 1.0).unwrap();
        assert_abs_diff_eq!(g, -full, epsilon = 1e-12);
    }
}
