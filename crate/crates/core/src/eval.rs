//! Ranking and discrimination metrics, and the toy-experiment diagnostics.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::warn;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{complement, condition, conditional_marginals, dual_kernel, extension_scores, DualKernel, ItemValues};
use crate::data::Corpus;
use crate::dpp::{log_normalizer, log_prob_given_normalizer};
use crate::error::{DppError, Result};
use crate::factor::{Basket, KernelFactor};
use crate::par;
use crate::rng::{fork_seed, stream, DppRng};

/// Cutoffs reported for precision@k.
pub const PRECISION_CUTOFFS: [usize; 4] = [1, 5, 10, 20];

/// Score used to rank candidate next items.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingMode {
    /// `det(L_{A∪{j}}) / det(L_A)`.
    #[default]
    DeterminantRatio,
    /// `Pr(j ∈ Y | A ⊆ Y)`.
    Marginal,
}

/// Anything that scores the items outside an observed set.
pub trait ItemScorer: Sync {
    fn num_items(&self) -> usize;

    /// Scores for every item not in `observed` (sorted), ascending by item.
    /// `case_seed` is unique per evaluation case.
    fn scores(&self, observed: &[usize], case_seed: u64) -> Result<ItemValues>;
}

/// Ranks by a DPP's conditionals.
pub struct DppScorer<'a> {
    factor: &'a KernelFactor,
    mode: RankingMode,
    dual: Option<DualKernel>,
}

impl<'a> DppScorer<'a> {
    pub fn new(factor: &'a KernelFactor, mode: RankingMode) -> Self {
        let dual = (mode == RankingMode::Marginal).then(|| dual_kernel(factor));
        DppScorer { factor, mode, dual }
    }
}

impl ItemScorer for DppScorer<'_> {
    fn num_items(&self) -> usize {
        self.factor.num_items()
    }

    fn scores(&self, observed: &[usize], _case_seed: u64) -> Result<ItemValues> {
        match (&self.mode, &self.dual) {
            (RankingMode::Marginal, Some(dual)) => Ok(conditional_marginals(&condition(dual, self.factor, observed)?)),
            _ => Ok(extension_scores(self.factor, observed)?.scores),
        }
    }
}

/// I.i.d. uniform scores, seeded by the case.
#[derive(Debug, Clone, Copy)]
pub struct RandomScorer {
    pub num_items: usize,
}

impl ItemScorer for RandomScorer {
    fn num_items(&self) -> usize {
        self.num_items
    }

    fn scores(&self, observed: &[usize], case_seed: u64) -> Result<ItemValues> {
        let mut rng = stream(case_seed, 0);
        let items = complement(observed, self.num_items);
        let values = items.iter().map(|_| rng.random::<f64>()).collect();
        Ok(ItemValues { items, values })
    }
}

/// `100 · |{j ∉ A : s_i ≥ s_j}| / |Y \ A|`, with `held_out` among the candidates.
pub fn percentile_from_scores(scores: &ItemValues, held_out: usize) -> Result<f64> {
    let target = scores
        .get(held_out)
        .ok_or_else(|| DppError::InvalidInput(format!("item {held_out} is not a candidate")))?;
    let below = scores.values.iter().filter(|&&s| target >= s).count();
    Ok(100.0 * below as f64 / scores.values.len() as f64)
}

/// 1-based rank of `held_out`; tied items do not push it down.
pub fn rank_from_scores(scores: &ItemValues, held_out: usize) -> Result<usize> {
    let target = scores
        .get(held_out)
        .ok_or_else(|| DppError::InvalidInput(format!("item {held_out} is not a candidate")))?;
    Ok(1 + scores.values.iter().filter(|&&s| s > target).count())
}

fn check_held_out(observed: &Basket, held_out: usize, num_items: usize) -> Result<()> {
    observed.check_range(num_items)?;
    if held_out >= num_items {
        return Err(DppError::IndexOutOfRange { index: held_out, num_items });
    }
    if observed.contains(held_out) {
        return Err(DppError::InvalidInput(format!("held-out item {held_out} is in the observed set")));
    }
    Ok(())
}

/// Percentile rank of `held_out` given the rest of its basket.
pub fn percentile_rank(factor: &KernelFactor, basket_minus_i: &Basket, held_out: usize, mode: RankingMode) -> Result<f64> {
    percentile_rank_with(&DppScorer::new(factor, mode), basket_minus_i, held_out, 0)
}

pub fn percentile_rank_with<S: ItemScorer + ?Sized>(
    scorer: &S,
    basket_minus_i: &Basket,
    held_out: usize,
    case_seed: u64,
) -> Result<f64> {
    check_held_out(basket_minus_i, held_out, scorer.num_items())?;
    percentile_from_scores(&scorer.scores(basket_minus_i.items(), case_seed)?, held_out)
}

/// Mean of a metric over the cases that could be evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

fn case_error_is_skip(e: &DppError) -> bool {
    matches!(e, DppError::Singular(_) | DppError::Conditioning(_))
}

fn require_pairs(baskets: &[Basket]) -> Result<()> {
    if baskets.is_empty() {
        return Err(DppError::InvalidInput("no test baskets".into()));
    }
    if let Some(b) = baskets.iter().find(|b| b.len() < 2) {
        return Err(DppError::InvalidInput(format!("test basket {:?} has fewer than 2 items", b.items())));
    }
    Ok(())
}

/// Mean percentile rank, holding out one random item per basket.
pub fn mpr(factor: &KernelFactor, baskets: &[Basket], mode: RankingMode, rng: &mut DppRng) -> Result<MetricValue> {
    mpr_with(&DppScorer::new(factor, mode), baskets, rng)
}

pub fn mpr_with<S: ItemScorer + ?Sized>(scorer: &S, baskets: &[Basket], rng: &mut DppRng) -> Result<MetricValue> {
    require_pairs(baskets)?;
    let base = fork_seed(rng);
    let ranks = par::map_indexed(baskets, |b, basket| {
        let mut case_rng = stream(base, b as u64);
        let held_out = basket.items()[case_rng.random_range(0..basket.len())];
        let rest = basket.without(held_out).expect("basket has ≥ 2 items");
        percentile_rank_with(scorer, &rest, held_out, fork_seed(&mut case_rng))
    });
    let mut sum = 0.0;
    let mut evaluated = 0;
    let mut skipped = 0;
    for r in ranks {
        match r {
            Ok(pr) => {
                sum += pr;
                evaluated += 1;
            }
            Err(e) if case_error_is_skip(&e) => {
                warn!("skipping test case: {e}");
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(MetricValue {
        value: if evaluated > 0 { sum / evaluated as f64 } else { f64::NAN },
        evaluated,
        skipped,
    })
}

/// Precision@k for each cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionAtK {
    pub values: BTreeMap<usize, f64>,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Per basket, the fraction of its items ranked within the top `k` when held
/// out in turn; averaged over baskets.
pub fn precision_at_k(factor: &KernelFactor, baskets: &[Basket], k: usize, mode: RankingMode) -> Result<f64> {
    Ok(precision_at_ks(&DppScorer::new(factor, mode), baskets, &[k])?.values[&k])
}

pub fn precision_at_ks<S: ItemScorer + ?Sized>(scorer: &S, baskets: &[Basket], ks: &[usize]) -> Result<PrecisionAtK> {
    require_pairs(baskets)?;
    if ks.contains(&0) {
        return Err(DppError::InvalidInput("k must be ≥ 1".into()));
    }
    let per_basket = par::map_indexed(baskets, |b, basket| -> Result<(Vec<usize>, usize)> {
        let mut ranks = Vec::with_capacity(basket.len());
        let mut skipped = 0;
        for (pos, &held_out) in basket.items().iter().enumerate() {
            let rest = basket.without(held_out).expect("basket has ≥ 2 items");
            let seed = ((b as u64) << 16) | pos as u64;
            match scorer.scores(rest.items(), seed) {
                Ok(scores) => ranks.push(rank_from_scores(&scores, held_out)?),
                Err(e) if case_error_is_skip(&e) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        Ok((ranks, skipped))
    });
    let mut sums = vec![0.0; ks.len()];
    let mut evaluated = 0;
    let mut skipped = 0;
    for r in per_basket {
        let (ranks, s) = r?;
        skipped += s;
        if ranks.is_empty() {
            continue;
        }
        evaluated += 1;
        for (sum, &k) in sums.iter_mut().zip(ks) {
            *sum += ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64;
        }
    }
    if skipped > 0 {
        warn!("precision@k skipped {skipped} held-out cases");
    }
    let values = ks
        .iter()
        .zip(sums)
        .map(|(&k, s)| (k, if evaluated > 0 { s / evaluated as f64 } else { f64::NAN }))
        .collect();
    Ok(PrecisionAtK { values, evaluated, skipped })
}

/// Probability that a random positive outscores a random negative, ties
/// counted ½, via midranks.
pub fn auc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(DppError::InvalidInput("AUC needs both positive and negative scores".into()));
    }
    if positive.iter().chain(negative).any(|s| s.is_nan()) {
        return Err(DppError::InvalidInput("NaN score".into()));
    }
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&s| (s, true))
        .chain(negative.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < all.len() {
        let mut end = start;
        while end + 1 < all.len() && all[end + 1].0 == all[start].0 {
            end += 1;
        }
        let midrank = (start + end) as f64 / 2.0 + 1.0;
        rank_sum += midrank * all[start..=end].iter().filter(|x| x.1).count() as f64;
        start = end + 1;
    }
    let (np, nn) = (positive.len() as f64, negative.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// AUC of test baskets against equal-size uniform random subsets, both scored
/// by log-probability.
pub fn auc_discrimination(factor: &KernelFactor, baskets: &[Basket], rng: &mut DppRng) -> Result<f64> {
    if baskets.is_empty() {
        return Err(DppError::InvalidInput("no test baskets".into()));
    }
    let m = factor.num_items();
    let base = fork_seed(rng);
    let log_z = log_normalizer(factor);
    let pairs = par::map_indexed(baskets, |b, basket| -> Result<(f64, f64)> {
        let pos = log_prob_given_normalizer(factor, basket, log_z)?;
        let mut case_rng = stream(base, b as u64);
        let negative = Basket::new(index::sample(&mut case_rng, m, basket.len()).into_vec())?;
        let neg = log_prob_given_normalizer(factor, &negative, log_z)?;
        Ok((pos, neg))
    });
    let (pos, neg): (Vec<f64>, Vec<f64>) = pairs.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    auc(&pos, &neg)
}

/// `Σ_{j ∈ S} p_j ln(p_j/q_j) + q_j ln(q_j/p_j)` over the shared support `S`;
/// `None` when `S` is empty.
pub fn symmetric_kl_shared(p: &[f64], q: &[f64]) -> Option<f64> {
    let mut any = false;
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 && b > 0.0 {
            any = true;
            total += (a - b) * (a / b).ln();
        }
    }
    any.then_some(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutDiagnostic {
    /// Basket in catalog ids.
    pub basket: Vec<u64>,
    pub held_out: u64,
    pub correct_prediction_prob: f64,
    pub symmetric_kl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasketDiagnostic {
    pub basket: Vec<u64>,
    /// Mean over the basket's held-out items.
    pub correct_prediction_prob: f64,
    /// Mean over the basket's held-out items with shared support.
    pub symmetric_kl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDiagnostics {
    pub held_out: Vec<HeldOutDiagnostic>,
    pub baskets: Vec<BasketDiagnostic>,
    /// Mean over all held-out cases.
    pub correct_prediction_prob: f64,
    /// Sum of per-basket values; `None` if any basket has no shared support.
    pub net_symmetric_kl: Option<f64>,
}

/// For every unique training basket and each of its items: the predictive
/// next-item distribution given the other items (normalized determinant
/// ratios), the probability it gives the held-out item, and its symmetric KL
/// to the empirical next-item distribution of the training split.
pub fn toy_diagnostics(factor: &KernelFactor, corpus: &Corpus) -> Result<ToyDiagnostics> {
    let m = corpus.num_items();
    if factor.num_items() != m {
        return Err(DppError::InvalidInput(format!(
            "factor has {} items, corpus {m}",
            factor.num_items()
        )));
    }
    let train = corpus.train();
    let unique: BTreeSet<&Basket> = train.iter().collect();
    // Empirical counts of the completing item given the rest.
    let mut completions: HashMap<Vec<usize>, Vec<f64>> = HashMap::new();
    for b in &train {
        for &i in b.items() {
            let rest = b.without(i).map(|r| r.items().to_vec()).unwrap_or_default();
            completions.entry(rest).or_insert_with(|| vec![0.0; m])[i] += 1.0;
        }
    }
    let ids = |items: &[usize]| items.iter().map(|&i| corpus.catalog.id_of(i)).collect::<Vec<u64>>();

    let mut held_out = Vec::new();
    let mut baskets = Vec::new();
    for basket in unique {
        let mut probs = Vec::new();
        let mut kls = Vec::new();
        for &i in basket.items() {
            let rest: Vec<usize> = basket.items().iter().copied().filter(|&j| j != i).collect();
            let predictive = match extension_scores(factor, &rest) {
                Ok(s) => s.normalized().map(|n| n.to_dense(m, 0.0)),
                Err(DppError::Singular(_)) => None,
                Err(e) => return Err(e),
            };
            let mut empirical = completions[&rest].clone();
            let total: f64 = empirical.iter().sum();
            empirical.iter_mut().for_each(|p| *p /= total);
            let (correct, kl) = match &predictive {
                Some(q) => (q[i], symmetric_kl_shared(&empirical, q)),
                None => (0.0, None),
            };
            probs.push(correct);
            if let Some(kl) = kl {
                kls.push(kl);
            }
            held_out.push(HeldOutDiagnostic {
                basket: ids(basket.items()),
                held_out: corpus.catalog.id_of(i),
                correct_prediction_prob: correct,
                symmetric_kl: kl,
            });
        }
        baskets.push(BasketDiagnostic {
            basket: ids(basket.items()),
            correct_prediction_prob: mean(&probs),
            symmetric_kl: (!kls.is_empty()).then(|| mean(&kls)),
        });
    }
    let correct = mean(&held_out.iter().map(|h| h.correct_prediction_prob).collect::<Vec<_>>());
    let net = baskets.iter().map(|b| b.symmetric_kl).sum::<Option<f64>>();
    Ok(ToyDiagnostics {
        held_out,
        baskets,
        correct_prediction_prob: correct,
        net_symmetric_kl: net,
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mu = mean(xs);
    (xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub trials: usize,
    pub seed: u64,
    pub mode: RankingMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            trials: 1,
            seed: 0,
            mode: RankingMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: RankingMode,
    pub trials: usize,
    pub test_baskets: usize,
    pub mpr: f64,
    pub mpr_std: f64,
    pub mpr_evaluated: usize,
    pub mpr_skipped: usize,
    pub precision_at: BTreeMap<usize, f64>,
    pub precision_skipped: usize,
    pub auc: f64,
    pub auc_std: f64,
    pub toy: Option<ToyDiagnostics>,
}

/// MPR and AUC averaged over seeded trials, plus precision@k (which has no
/// randomness).
pub fn evaluate(factor: &KernelFactor, test: &[Basket], config: &EvalConfig) -> Result<EvalReport> {
    if config.trials == 0 {
        return Err(DppError::InvalidInput("trials must be ≥ 1".into()));
    }
    let scorer = DppScorer::new(factor, config.mode);
    let mut mprs = Vec::with_capacity(config.trials);
    let mut aucs = Vec::with_capacity(config.trials);
    let mut evaluated = 0;
    let mut skipped = 0;
    for trial in 0..config.trials {
        let mut rng = stream(config.seed, trial as u64);
        let m = mpr_with(&scorer, test, &mut rng)?;
        mprs.push(m.value);
        evaluated += m.evaluated;
        skipped += m.skipped;
        aucs.push(auc_discrimination(factor, test, &mut rng)?);
    }
    let precision = precision_at_ks(&scorer, test, &PRECISION_CUTOFFS)?;
    Ok(EvalReport {
        mode: config.mode,
        trials: config.trials,
        test_baskets: test.len(),
        mpr: mean(&mprs),
        mpr_std: std_dev(&mprs),
        mpr_evaluated: evaluated,
        mpr_skipped: skipped,
        precision_at: precision.values,
        precision_skipped: precision.skipped,
        auc: mean(&aucs),
        auc_std: std_dev(&aucs),
        toy: None,
    })
}
