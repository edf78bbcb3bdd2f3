//! Conditioning a low-rank DPP on an observed set through its dual kernel.
//!
//! With `B = Vᵀ` (`K × M`) and dual kernel `C = B Bᵀ = VᵀV` (`K × K`), the DPP
//! conditioned on `A ⊆ Y` has features `B^A = Z^A B`, where
//! `Z^A = I - B_A (B_Aᵀ B_A)⁻¹ B_Aᵀ` projects out the span of the observed
//! items. Its dual kernel is `C^A = Z^A C Z^A`, and the inclusion marginal of
//! item `i ∉ A` is `Σ_n (b_iᴬ · v̂_n)² / (λ_n + 1)` over the eigenpairs of `C^A`.
//! Everything past the `O(K² M)` projection of the features is independent
//! of `M`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{DppError, Result};
use crate::factor::{check_items, KernelFactor};
use crate::linalg::{chol_log_det, spd_cholesky};

/// Eigenvalues at or below this are null directions and carry no mass.
pub const NULL_EIGENVALUE: f64 = 1e-12;

/// The `K × K` dual kernel `C = VᵀV`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualKernel {
    matrix: DMatrix<f64>,
}

impl DualKernel {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

pub fn dual_kernel(factor: &KernelFactor) -> DualKernel {
    let v = factor.values();
    DualKernel {
        matrix: v.transpose() * v,
    }
}

/// A DPP conditioned on the event that every item of `conditioned_set` is
/// selected.
#[derive(Debug, Clone)]
pub struct ConditionedState {
    conditioned_dual: DMatrix<f64>,
    conditioned_features: DMatrix<f64>,
    projection: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    conditioned_set: Vec<usize>,
}

/// Projector onto the orthogonal complement of the columns of `features`
/// indexed by `observed`, plus `log det(B_Aᵀ B_A)`.
fn complement_projector(features: &DMatrix<f64>, observed: &[usize]) -> Result<(DMatrix<f64>, f64)> {
    let k = features.nrows();
    let mut z = DMatrix::identity(k, k);
    if observed.is_empty() {
        return Ok((z, 0.0));
    }
    if observed.len() > k {
        return Err(DppError::Conditioning(observed.to_vec()));
    }
    let b_a = features.select_columns(observed);
    let gram = b_a.transpose() * &b_a;
    let chol = spd_cholesky(gram).ok_or_else(|| DppError::Conditioning(observed.to_vec()))?;
    let log_det = chol_log_det(&chol);
    // Z = I - B_A G⁻¹ B_Aᵀ
    let solved = chol.solve(&b_a.transpose());
    z -= &b_a * solved;
    // Symmetrize away roundoff.
    let z = (&z + z.transpose()) * 0.5;
    Ok((z, log_det))
}

/// Conditions the DPP with features `features` (`K × M`). When the dual kernel
/// of those features is known, `C^A = Z C Z` is formed in `K × K`; otherwise
/// it is `B^A (B^A)ᵀ`.
fn condition_features(
    features: &DMatrix<f64>,
    dual: Option<&DMatrix<f64>>,
    observed: Vec<usize>,
) -> Result<ConditionedState> {
    let (z, _) = complement_projector(features, &observed)?;
    let conditioned_features = &z * features;
    let c = match dual {
        Some(c) => &z * c * &z,
        None => &conditioned_features * conditioned_features.transpose(),
    };
    let conditioned_dual = (&c + c.transpose()) * 0.5;
    let eigen = SymmetricEigen::new(conditioned_dual.clone());
    Ok(ConditionedState {
        conditioned_dual,
        conditioned_features,
        projection: z,
        eigenvalues: eigen.eigenvalues,
        eigenvectors: eigen.eigenvectors,
        conditioned_set: observed,
    })
}

/// Conditions on `observed` (strictly increasing item indices, possibly empty).
///
/// Fails when the observed set has zero probability, i.e. the Gram matrix of
/// its feature vectors is singular.
pub fn condition(dual: &DualKernel, factor: &KernelFactor, observed: &[usize]) -> Result<ConditionedState> {
    check_items(observed, factor.num_items())?;
    if dual.matrix.nrows() != factor.rank() {
        return Err(DppError::InvalidInput("dual kernel does not match factor rank".into()));
    }
    let features = factor.values().transpose();
    condition_features(&features, Some(&dual.matrix), observed.to_vec())
}

impl ConditionedState {
    pub fn conditioned_dual(&self) -> &DMatrix<f64> {
        &self.conditioned_dual
    }

    /// `B^A`, `K × M`; columns of conditioned items are (numerically) zero.
    pub fn conditioned_features(&self) -> &DMatrix<f64> {
        &self.conditioned_features
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn conditioned_set(&self) -> &[usize] {
        &self.conditioned_set
    }

    pub fn num_items(&self) -> usize {
        self.conditioned_features.ncols()
    }

    /// Items not conditioned on, ascending.
    pub fn complement(&self) -> Vec<usize> {
        complement(&self.conditioned_set, self.num_items())
    }

    /// Conditions further on `more`, which must be disjoint from the current
    /// set. Equivalent to conditioning once on the union.
    pub fn condition_further(&self, more: &[usize]) -> Result<ConditionedState> {
        check_items(more, self.num_items())?;
        if more.iter().any(|i| self.conditioned_set.binary_search(i).is_ok()) {
            return Err(DppError::InvalidInput("items already conditioned on".into()));
        }
        let mut state = condition_features(
            &self.conditioned_features,
            Some(&self.conditioned_dual),
            more.to_vec(),
        )?;
        let mut union = self.conditioned_set.clone();
        union.extend_from_slice(more);
        union.sort_unstable();
        state.conditioned_set = union;
        state.projection = &state.projection * &self.projection;
        Ok(state)
    }
}

pub(crate) fn complement(set: &[usize], num_items: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(num_items.saturating_sub(set.len()));
    let mut next = set.iter().peekable();
    for i in 0..num_items {
        if next.peek() == Some(&&i) {
            next.next();
        } else {
            out.push(i);
        }
    }
    out
}

/// Per-item values over the complement of a conditioned set.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemValues {
    pub items: Vec<usize>,
    pub values: Vec<f64>,
}

impl ItemValues {
    pub fn get(&self, item: usize) -> Option<f64> {
        self.items.binary_search(&item).ok().map(|p| self.values[p])
    }

    /// Dense length-`num_items` vector with `fill` at items not covered.
    pub fn to_dense(&self, num_items: usize, fill: f64) -> Vec<f64> {
        let mut out = vec![fill; num_items];
        for (&i, &v) in self.items.iter().zip(&self.values) {
            out[i] = v;
        }
        out
    }
}

/// Inclusion marginals `Pr(i ∈ Y | A ⊆ Y)` for every `i ∉ A`, before clamping.
pub fn conditional_marginals_unclamped(state: &ConditionedState) -> ItemValues {
    let items = state.complement();
    let kept: Vec<usize> = (0..state.eigenvalues.len())
        .filter(|&n| state.eigenvalues[n] > NULL_EIGENVALUE)
        .collect();
    let basis = state.eigenvectors.select_columns(&kept);
    let weights: Vec<f64> = kept.iter().map(|&n| 1.0 / (state.eigenvalues[n] + 1.0)).collect();
    // Column i holds the coordinates of b_i^A in the eigenbasis.
    let coords = basis.transpose() * &state.conditioned_features;
    let values = items
        .iter()
        .map(|&c| {
            coords
                .column(c)
                .iter()
                .zip(&weights)
                .map(|(x, w)| x * x * w)
                .sum::<f64>()
        })
        .collect();
    ItemValues { items, values }
}

/// Inclusion marginals clamped to `[0, 1]`.
pub fn conditional_marginals(state: &ConditionedState) -> ItemValues {
    let mut m = conditional_marginals_unclamped(state);
    for v in &mut m.values {
        *v = v.clamp(0.0, 1.0);
    }
    m
}

/// Unnormalized next-item scores `det(L_{A∪{j}}) / det(L_A)` for `j ∉ A`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtensionScores {
    /// Schur complements `L_jj - L_jA L_A⁻¹ L_Aj`, one per complement item.
    pub scores: ItemValues,
    /// `log det(L_A)`.
    pub log_det_base: f64,
}

impl ExtensionScores {
    /// `Σ_j det(L_{A∪{j}}) / det(L_A)`.
    pub fn total(&self) -> f64 {
        self.scores.values.iter().sum()
    }

    /// Scores divided by their total; `None` when every score is zero.
    pub fn normalized(&self) -> Option<ItemValues> {
        let total = self.total();
        if !(total > 0.0) {
            return None;
        }
        Some(ItemValues {
            items: self.scores.items.clone(),
            values: self.scores.values.iter().map(|s| s / total).collect(),
        })
    }

    /// `log det(L_{A∪{j}})`.
    pub fn log_det_extended(&self, item: usize) -> Option<f64> {
        self.scores.get(item).map(|s| self.log_det_base + s.ln())
    }
}

/// Next-item scores for every item outside `base`, in `O(K² M + K|A|² + |A|³)`.
///
/// `s_j = ‖Z^A v_j‖²`, the squared distance from `v_j` to the span of the
/// base's feature vectors.
pub fn extension_scores(factor: &KernelFactor, base: &[usize]) -> Result<ExtensionScores> {
    check_items(base, factor.num_items())?;
    let v = factor.values();
    let features = v.transpose();
    let (z, log_det_base) = complement_projector(&features, base).map_err(|e| match e {
        DppError::Conditioning(items) => DppError::Singular(items),
        other => other,
    })?;
    let items = complement(base, factor.num_items());
    let projected = v.select_rows(&items) * z;
    let values = (0..items.len()).map(|r| projected.row(r).norm_squared()).collect();
    Ok(ExtensionScores {
        scores: ItemValues { items, values },
        log_det_base,
    })
}

/// The direct route: materialize the conditioned kernel over the complement.
///
/// Costs `O(K |Ā|² + |A|³)`. Kept as the reference baseline that the dual
/// route is benchmarked against.
pub mod primal {
    use super::*;

    /// `L^A = L_Ā - L_ĀA L_A⁻¹ L_AĀ`, indexed by the returned complement items.
    pub fn conditioned_kernel(factor: &KernelFactor, observed: &[usize]) -> Result<(Vec<usize>, DMatrix<f64>)> {
        check_items(observed, factor.num_items())?;
        let items = complement(observed, factor.num_items());
        let v_rest = factor.rows(&items);
        let l_rest = &v_rest * v_rest.transpose();
        if observed.is_empty() {
            return Ok((items, l_rest));
        }
        let v_obs = factor.rows(observed);
        let l_obs = &v_obs * v_obs.transpose();
        let cross = &v_rest * v_obs.transpose();
        let chol = spd_cholesky(l_obs).ok_or_else(|| DppError::Singular(observed.to_vec()))?;
        let correction = &cross * chol.solve(&cross.transpose());
        Ok((items, l_rest - correction))
    }

    /// Diagonal of [`conditioned_kernel`]: the same values as
    /// [`super::extension_scores`].
    pub fn extension_scores(factor: &KernelFactor, observed: &[usize]) -> Result<ItemValues> {
        let (items, kernel) = conditioned_kernel(factor, observed)?;
        let values = kernel.diagonal().iter().copied().collect();
        Ok(ItemValues { items, values })
    }
}
