#![allow(dead_code)]

use std::collections::HashMap;

use cedpp::rng::seeded;
use cedpp::{Basket, KernelFactor};
use nalgebra::DMatrix;
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub fn basket(items: &[usize]) -> Basket {
    Basket::new(items.to_vec()).unwrap()
}

pub fn random_factor(m: usize, k: usize, seed: u64) -> KernelFactor {
    KernelFactor::random(m, k, &mut seeded(seed)).unwrap()
}

/// Every subset of `0..m` as a sorted item list, the empty set first.
pub fn all_subsets(m: usize) -> Vec<Vec<usize>> {
    (0u32..1 << m)
        .map(|mask| (0..m).filter(|&i| mask >> i & 1 == 1).collect())
        .collect()
}

/// `det(L_A)` straight from the full kernel.
pub fn det_minor(l: &DMatrix<f64>, items: &[usize]) -> f64 {
    if items.is_empty() {
        return 1.0;
    }
    l.select_rows(items).select_columns(items).determinant()
}

/// `Pr(Y = A)` for every subset, keyed by item list.
pub fn enumerate_probs(factor: &KernelFactor) -> HashMap<Vec<usize>, f64> {
    let l = factor.full_kernel();
    let subsets = all_subsets(factor.num_items());
    let dets: Vec<f64> = subsets.iter().map(|s| det_minor(&l, s).max(0.0)).collect();
    let z: f64 = dets.iter().sum();
    subsets.into_iter().zip(dets).map(|(s, d)| (s, d / z)).collect()
}

/// `Pr(i ∈ Y | A ⊆ Y)` by summing over supersets.
pub fn enumerated_conditional(probs: &HashMap<Vec<usize>, f64>, observed: &[usize], i: usize) -> f64 {
    let mut with_a = 0.0;
    let mut with_both = 0.0;
    for (s, p) in probs {
        if observed.iter().all(|x| s.contains(x)) {
            with_a += p;
            if s.contains(&i) {
                with_both += p;
            }
        }
    }
    with_both / with_a
}

/// Central finite differences of `f` at `v`.
pub fn finite_difference(v: &DMatrix<f64>, h: f64, f: impl Fn(&DMatrix<f64>) -> f64) -> DMatrix<f64> {
    let mut grad = DMatrix::zeros(v.nrows(), v.ncols());
    for r in 0..v.nrows() {
        for c in 0..v.ncols() {
            let mut plus = v.clone();
            plus[(r, c)] += h;
            let mut minus = v.clone();
            minus[(r, c)] -= h;
            grad[(r, c)] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
    }
    grad
}

/// `‖a - b‖ / max(‖b‖, floor)`.
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}

/// Pearson chi-square p-value of `observed` counts against `expected`
/// probabilities, pooling cells with expected count below 5.
pub fn chi_square_p(observed: &HashMap<Vec<usize>, u64>, expected: &HashMap<Vec<usize>, f64>, draws: u64) -> f64 {
    for key in observed.keys() {
        assert!(
            expected.get(key).copied().unwrap_or(0.0) > 0.0,
            "sampled {key:?} which has zero probability"
        );
    }
    let mut cells: Vec<(f64, f64)> = expected
        .iter()
        .map(|(k, &p)| (observed.get(k).copied().unwrap_or(0) as f64, p * draws as f64))
        .collect();
    cells.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut pooled: Vec<(f64, f64)> = Vec::new();
    let mut acc = (0.0, 0.0);
    for (o, e) in cells {
        acc.0 += o;
        acc.1 += e;
        if acc.1 >= 5.0 {
            pooled.push(acc);
            acc = (0.0, 0.0);
        }
    }
    if acc.1 > 0.0 {
        match pooled.last_mut() {
            Some(last) => {
                last.0 += acc.0;
                last.1 += acc.1;
            }
            None => pooled.push(acc),
        }
    }
    if pooled.len() < 2 {
        return 1.0;
    }
    let stat: f64 = pooled.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let dist = ChiSquared::new((pooled.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}
