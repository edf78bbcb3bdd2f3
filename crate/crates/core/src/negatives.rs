//! Negative baskets: dynamic (model-driven swaps), approximate explicit
//! (swaps toward rarely co-occurring items) and product-distribution draws.

use std::collections::HashMap;

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{complement, extension_scores};
use crate::error::{DppError, Result};
use crate::factor::{Basket, KernelFactor};
use crate::par;
use crate::rng::{fork_seed, stream, DppRng};

/// Attempts per negative before it is skipped.
pub const MAX_ATTEMPTS: usize = 10;

/// Singleton, pair and occurrence statistics of a set of training baskets.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalStats {
    singleton_prob: Vec<f64>,
    pair_prob: HashMap<(usize, usize), f64>,
    occurrence_counts: Vec<u64>,
    basket_count: usize,
}

fn pair_key(i: usize, k: usize) -> (usize, usize) {
    if i < k {
        (i, k)
    } else {
        (k, i)
    }
}

impl EmpiricalStats {
    pub fn from_baskets(baskets: &[Basket], num_items: usize) -> Result<Self> {
        if baskets.is_empty() {
            return Err(DppError::InvalidInput("no baskets to build statistics from".into()));
        }
        let mut counts = vec![0u64; num_items];
        let mut pairs: HashMap<(usize, usize), u64> = HashMap::new();
        for b in baskets {
            b.check_range(num_items)?;
            let items = b.items();
            for (p, &i) in items.iter().enumerate() {
                counts[i] += 1;
                for &k in &items[p + 1..] {
                    *pairs.entry((i, k)).or_default() += 1;
                }
            }
        }
        let n = baskets.len() as f64;
        Ok(EmpiricalStats {
            singleton_prob: counts.iter().map(|&c| c as f64 / n).collect(),
            pair_prob: pairs.into_iter().map(|(key, c)| (key, c as f64 / n)).collect(),
            occurrence_counts: counts,
            basket_count: baskets.len(),
        })
    }

    pub fn num_items(&self) -> usize {
        self.singleton_prob.len()
    }

    /// `p̂(i)`: fraction of baskets containing `i`.
    pub fn singleton_prob(&self) -> &[f64] {
        &self.singleton_prob
    }

    /// `P̂({i, k})`: fraction of baskets containing both; 0 when never seen.
    pub fn pair_prob(&self, i: usize, k: usize) -> f64 {
        self.pair_prob.get(&pair_key(i, k)).copied().unwrap_or(0.0)
    }

    /// Number of distinct pairs seen together at least once.
    pub fn num_pairs(&self) -> usize {
        self.pair_prob.len()
    }

    /// `μ_i`: occurrences of `i`. Equal to baskets containing `i`, since
    /// baskets are sets.
    pub fn occurrence_counts(&self) -> &[u64] {
        &self.occurrence_counts
    }

    pub fn basket_count(&self) -> usize {
        self.basket_count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Dynamic,
    Explicit,
    Product,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Dynamic => "dynamic",
            Regime::Explicit => "explicit",
            Regime::Product => "product",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeBatch {
    pub baskets: Vec<Basket>,
    pub regime: Regime,
    pub source_epoch: usize,
    /// Index into the positives of the basket each negative was derived from.
    pub sources: Vec<usize>,
    /// Negatives abandoned after [`MAX_ATTEMPTS`] failures.
    pub skipped: usize,
}

/// Weights `p̂(i)` over `items`, uniform if they are all zero.
fn popularity_weights(stats: &EmpiricalStats, items: &[usize]) -> Vec<f64> {
    let w: Vec<f64> = items.iter().map(|&i| stats.singleton_prob[i]).collect();
    if w.iter().all(|&x| x <= 0.0) {
        vec![1.0; items.len()]
    } else {
        w
    }
}

fn sample_weighted(weights: &[f64], rng: &mut DppRng) -> Option<usize> {
    WeightedIndex::new(weights).ok().map(|d| d.sample(rng))
}

/// Swaps one item of `positive` for a replacement the current model finds
/// likely.
///
/// The removed item `i` is drawn with probability proportional to `p̂(i)`
/// within the basket; the replacement `j ∉ A⁺` with probability proportional
/// to `P_L(A⁺ \ {i} ∪ {j})`. If the remaining base has a singular minor, or no
/// replacement has positive probability, another `i` is tried.
pub fn dynamic_negative(
    factor: &KernelFactor,
    positive: &Basket,
    stats: &EmpiricalStats,
    rng: &mut DppRng,
) -> Result<Basket> {
    if positive.len() < 2 {
        return Err(DppError::InvalidInput("dynamic negatives need baskets of size ≥ 2".into()));
    }
    positive.check_range(factor.num_items())?;
    let mut candidates = positive.items().to_vec();
    let mut weights = popularity_weights(stats, &candidates);
    while !candidates.is_empty() {
        let pick = sample_weighted(&weights, rng).expect("non-empty positive weights");
        let removed = candidates[pick];
        let base = positive.without(removed).expect("basket has ≥ 2 items");
        if let Some(j) = sample_extension(factor, &base, positive, rng)? {
            return base.with(j);
        }
        candidates.remove(pick);
        weights.remove(pick);
        if weights.iter().all(|&w| w <= 0.0) {
            weights.iter_mut().for_each(|w| *w = 1.0);
        }
    }
    Err(DppError::Generation(format!(
        "every removal from {:?} leaves a zero-probability base",
        positive.items()
    )))
}

/// Samples `j ∉ exclude` proportionally to `det(L_{base ∪ {j}})`; `None` if
/// the base is singular or every candidate has zero score.
fn sample_extension(
    factor: &KernelFactor,
    base: &Basket,
    exclude: &Basket,
    rng: &mut DppRng,
) -> Result<Option<usize>> {
    let ext = match extension_scores(factor, base.items()) {
        Ok(ext) => ext,
        Err(DppError::Singular(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let weights: Vec<f64> = ext
        .scores
        .items
        .iter()
        .zip(&ext.scores.values)
        .map(|(&j, &s)| if exclude.contains(j) || !(s > 0.0) { 0.0 } else { s })
        .collect();
    Ok(sample_weighted(&weights, rng).map(|p| ext.scores.items[p]))
}

/// Approximate explicit negative: `(A⁺ \ {j}) ∪ {k}`.
///
/// Draws `i ≠ j` from the basket proportionally to `p̂`, then `k ∉ A⁺` with
/// probability proportional to `1 - P̂({i, k})`. When every such weight is zero
/// `k` is drawn uniformly.
pub fn explicit_negative(positive: &Basket, stats: &EmpiricalStats, rng: &mut DppRng) -> Result<Basket> {
    if positive.len() < 2 {
        return Err(DppError::InvalidInput("explicit negatives need baskets of size ≥ 2".into()));
    }
    positive.check_range(stats.num_items())?;
    let outside = complement(positive.items(), stats.num_items());
    if outside.is_empty() {
        return Err(DppError::Generation("basket covers the whole catalog".into()));
    }
    let items = positive.items();
    let first = sample_weighted(&popularity_weights(stats, items), rng).expect("non-empty basket");
    let i = items[first];
    let rest: Vec<usize> = items.iter().copied().filter(|&x| x != i).collect();
    let j = rest[sample_weighted(&popularity_weights(stats, &rest), rng).expect("≥ 1 remaining item")];
    let weights: Vec<f64> = outside.iter().map(|&k| (1.0 - stats.pair_prob(i, k)).max(0.0)).collect();
    let k = match sample_weighted(&weights, rng) {
        Some(p) => outside[p],
        None => {
            warn!("item {i} co-occurs with every candidate; drawing replacement uniformly");
            outside[rng.random_range(0..outside.len())]
        }
    };
    positive.without(j).expect("basket has ≥ 2 items").with(k)
}

/// Draw from the product distribution `ν(A) = Π_{i∈A} p̂(i) Π_{i∉A} (1 - p̂(i))`,
/// rejecting the empty set.
pub fn product_negative(stats: &EmpiricalStats, num_items: usize, rng: &mut DppRng) -> Result<Basket> {
    if num_items != stats.num_items() {
        return Err(DppError::InvalidInput("statistics do not match catalog size".into()));
    }
    let probs = stats.singleton_prob();
    if probs.iter().all(|&p| p <= 0.0) {
        return Err(DppError::InvalidInput("product distribution has no support".into()));
    }
    loop {
        let items: Vec<usize> = (0..num_items)
            .filter(|&i| probs[i] > 0.0 && rng.random::<f64>() < probs[i])
            .collect();
        if !items.is_empty() {
            return Basket::new(items);
        }
    }
}

/// `log ν(A)` under the product distribution; `items` may be empty.
pub fn product_log_density(stats: &EmpiricalStats, items: &[usize], num_items: usize) -> f64 {
    let probs = stats.singleton_prob();
    debug_assert_eq!(probs.len(), num_items);
    let mut inside = items.iter().peekable();
    let mut total = 0.0;
    for (i, &p) in probs.iter().enumerate().take(num_items) {
        if inside.peek() == Some(&&i) {
            inside.next();
            total += p.ln();
        } else {
            total += (1.0 - p).ln();
        }
        if total == f64::NEG_INFINITY {
            break;
        }
    }
    total
}

/// Number of negatives for `positives` baskets at `ratio`: `⌈ratio · n⌉`.
pub fn batch_size(ratio: f64, positives: usize) -> usize {
    let exact = ratio * positives as f64;
    // Absorb representation error such as 0.1 · 30 = 3.0000000000000004.
    (exact - exact.abs() * 1e-12).ceil().max(0.0) as usize
}

/// Generates `⌈ratio · |A⁺|⌉` negatives, cycling through a seeded shuffle of
/// the positives so each positive is reused before any is used again.
///
/// Every negative draws from its own stream forked from `rng`, so the batch is
/// the same whether or not it is built in parallel.
pub fn generate_batch(
    regime: Regime,
    factor: &KernelFactor,
    positives: &[Basket],
    stats: &EmpiricalStats,
    ratio: f64,
    source_epoch: usize,
    rng: &mut DppRng,
) -> Result<NegativeBatch> {
    if !(ratio > 0.0) {
        return Err(DppError::InvalidInput(format!("negative ratio must be positive, got {ratio}")));
    }
    if positives.is_empty() {
        return Err(DppError::InvalidInput("no positives to derive negatives from".into()));
    }
    let count = batch_size(ratio, positives.len());
    let mut order: Vec<usize> = (0..positives.len()).collect();
    order.shuffle(rng);
    let base_seed = fork_seed(rng);
    let num_items = factor.num_items();

    let drawn = par::map_range(count, |t| {
        let source = order[t % order.len()];
        let positive = &positives[source];
        let mut sub = stream(base_seed, t as u64);
        let mut last_err = None;
        for _ in 0..MAX_ATTEMPTS {
            let result = match regime {
                Regime::Dynamic => dynamic_negative(factor, positive, stats, &mut sub),
                Regime::Explicit => explicit_negative(positive, stats, &mut sub),
                Regime::Product => product_negative(stats, num_items, &mut sub),
            };
            match result {
                Ok(b) => return Ok((source, b)),
                Err(e @ DppError::InvalidInput(_)) => return Err(e),
                Err(e) => last_err = Some(e),
            }
        }
        if let Some(e) = last_err {
            warn!("skipping {regime} negative for positive {source}: {e}");
        }
        Err(DppError::Generation(String::new()))
    });

    let mut batch = NegativeBatch {
        baskets: Vec::with_capacity(count),
        regime,
        source_epoch,
        sources: Vec::with_capacity(count),
        skipped: 0,
    };
    for d in drawn {
        match d {
            Ok((source, b)) => {
                batch.sources.push(source);
                batch.baskets.push(b);
            }
            Err(DppError::Generation(_)) => batch.skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpp::log_prob;
    use crate::rng::seeded;
    use nalgebra::DMatrix;

    fn basket(items: &[usize]) -> Basket {
        Basket::new(items.to_vec()).unwrap()
    }

    fn toy_stats() -> EmpiricalStats {
        let mut baskets = vec![basket(&[0, 1]); 50];
        baskets.extend(vec![basket(&[2, 3]); 50]);
        EmpiricalStats::from_baskets(&baskets, 4).unwrap()
    }

    #[test]
    fn stats_of_single_basket() {
        let s = EmpiricalStats::from_baskets(&[basket(&[0, 1])], 3).unwrap();
        assert_eq!(s.singleton_prob(), &[1.0, 1.0, 0.0]);
        assert_eq!(s.pair_prob(1, 0), 1.0);
        assert_eq!(s.pair_prob(0, 2), 0.0);
        assert_eq!(s.occurrence_counts(), &[1, 1, 0]);
    }

    #[test]
    fn explicit_never_returns_input_and_keeps_size() {
        let stats = toy_stats();
        let mut rng = seeded(4);
        for _ in 0..500 {
            let neg = explicit_negative(&basket(&[0, 1]), &stats, &mut rng).unwrap();
            assert_eq!(neg.len(), 2);
            assert_ne!(neg, basket(&[0, 1]));
            assert!(neg.contains(0) ^ neg.contains(1));
        }
    }

    #[test]
    fn explicit_skips_always_co_occurring_item() {
        // Items 0 and 2 always appear together; 0 never with 3 or 4.
        let mut baskets = vec![basket(&[0, 1, 2]); 10];
        baskets.push(basket(&[3, 4]));
        let stats = EmpiricalStats::from_baskets(&baskets, 5).unwrap();
        assert_eq!(stats.pair_prob(0, 2), 10.0 / 11.0);
        let only = EmpiricalStats {
            pair_prob: [((0, 3), 1.0)].into_iter().collect(),
            ..EmpiricalStats::from_baskets(&[basket(&[0, 1])], 5).unwrap()
        };
        let mut rng = seeded(8);
        for _ in 0..300 {
            // i must be 0 or 1; when i = 0, k = 3 has weight zero.
            let neg = explicit_negative(&basket(&[0, 1]), &only, &mut rng).unwrap();
            if neg.contains(0) {
                // j = 1 was removed, so i = 0: replacement cannot be 3.
                assert!(!neg.contains(3));
            }
        }
    }

    #[test]
    fn explicit_falls_back_to_uniform() {
        let stats = EmpiricalStats::from_baskets(&[basket(&[0, 1, 2])], 3).unwrap();
        // Catalog of 3 fully covered by positive {0, 1} ∪ {2}: only 2 outside.
        let neg = explicit_negative(&basket(&[0, 1]), &stats, &mut seeded(1)).unwrap();
        assert!(neg.contains(2));
    }

    #[test]
    fn product_point_mass() {
        let mut baskets = vec![basket(&[3]); 4];
        baskets[0] = basket(&[3]);
        let stats = EmpiricalStats::from_baskets(&baskets, 5).unwrap();
        let mut rng = seeded(2);
        for _ in 0..100 {
            assert_eq!(product_negative(&stats, 5, &mut rng).unwrap(), basket(&[3]));
        }
    }

    #[test]
    fn product_density_definition() {
        let stats = toy_stats();
        let p = stats.singleton_prob().to_vec();
        let direct = p[1].ln() + (1.0 - p[0]).ln() + (1.0 - p[2]).ln() + (1.0 - p[3]).ln();
        assert_eq!(product_log_density(&stats, &[1], 4), direct);
        let empty: f64 = p.iter().map(|x| (1.0 - x).ln()).sum();
        assert_eq!(product_log_density(&stats, &[], 4), empty);
        let point = EmpiricalStats::from_baskets(&[basket(&[1])], 3).unwrap();
        assert_eq!(product_log_density(&point, &[0], 3), f64::NEG_INFINITY);
        assert_eq!(product_log_density(&point, &[2], 3), f64::NEG_INFINITY);
        assert_eq!(product_log_density(&point, &[1], 3), 0.0);
    }

    #[test]
    fn dynamic_respects_repulsion() {
        // Rows 1 and 2 duplicate each other; removing 0 from {0, 1} leaves {1},
        // and 2 then has zero score. Only item 3 can replace 0.
        let f = KernelFactor::from_row_slice(4, 2, &[1.0, 0.0, 0.3, 1.0, 0.3, 1.0, 1.0, 0.2]).unwrap();
        let stats = EmpiricalStats::from_baskets(&[basket(&[0]), basket(&[1]), basket(&[1])], 4).unwrap();
        let mut rng = seeded(11);
        for _ in 0..300 {
            let neg = dynamic_negative(&f, &basket(&[0, 1]), &stats, &mut rng).unwrap();
            assert_ne!(neg, basket(&[1, 2]));
            assert!(log_prob(&f, &neg).unwrap().is_finite());
        }
    }

    #[test]
    fn dynamic_keeps_cardinality() {
        let f = KernelFactor::random(10, 4, &mut seeded(3)).unwrap();
        let stats = EmpiricalStats::from_baskets(&[basket(&[0, 1, 2]), basket(&[3, 4])], 10).unwrap();
        let mut rng = seeded(5);
        let pos = basket(&[0, 1, 2]);
        for _ in 0..1000 {
            let neg = dynamic_negative(&f, &pos, &stats, &mut rng).unwrap();
            assert_eq!(neg.len(), 3);
            let shared = neg.items().iter().filter(|&&i| pos.contains(i)).count();
            assert_eq!(shared, 2);
        }
    }

    #[test]
    fn dynamic_fails_when_every_base_is_singular() {
        let f = KernelFactor::new(DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 1.0])).unwrap();
        let stats = EmpiricalStats::from_baskets(&[basket(&[0, 1])], 3).unwrap();
        assert!(matches!(
            dynamic_negative(&f, &basket(&[0, 1]), &stats, &mut seeded(0)),
            Err(DppError::Generation(_))
        ));
    }

    #[test]
    fn batch_counts_and_cycling() {
        let stats = toy_stats();
        let f = KernelFactor::random(4, 2, &mut seeded(0)).unwrap();
        let positives: Vec<Basket> = (0..100).map(|i| if i % 2 == 0 { basket(&[0, 1]) } else { basket(&[2, 3]) }).collect();
        let b = generate_batch(Regime::Explicit, &f, &positives, &stats, 0.5, 0, &mut seeded(1)).unwrap();
        assert_eq!(b.baskets.len(), 50);
        let three = &positives[..3];
        let b = generate_batch(Regime::Explicit, &f, three, &stats, 2.0, 3, &mut seeded(1)).unwrap();
        assert_eq!(b.baskets.len(), 6);
        assert_eq!(b.source_epoch, 3);
        for s in 0..3 {
            assert_eq!(b.sources.iter().filter(|&&x| x == s).count(), 2);
        }
        assert!(generate_batch(Regime::Explicit, &f, three, &stats, 0.0, 0, &mut seeded(1)).is_err());
        assert_eq!(batch_size(0.1, 30), 3);
    }

    #[test]
    fn batch_is_deterministic() {
        let stats = toy_stats();
        let f = KernelFactor::random(4, 2, &mut seeded(0)).unwrap();
        let positives = vec![basket(&[0, 1]), basket(&[2, 3])];
        let a = generate_batch(Regime::Dynamic, &f, &positives, &stats, 3.0, 0, &mut seeded(9)).unwrap();
        let b = generate_batch(Regime::Dynamic, &f, &positives, &stats, 3.0, 0, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
        for neg in &a.baskets {
            assert!(log_prob(&f, neg).unwrap().is_finite());
        }
    }
}
