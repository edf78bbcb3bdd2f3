//! Stochastic gradient ascent for maximum likelihood, contrastive estimation
//! (dynamic, explicit and product negatives) and noise contrastive estimation.

use std::time::Instant;

use log::{debug, warn};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{infer_rank, Corpus};
use crate::dpp::{
    grad_log_normalizer, log_det_restricted, log_normalizer, log_prob_given_normalizer, nce_log_posterior,
    nce_scale, regularizer, regularizer_grad, ObjectiveValue,
};
use crate::error::{DppError, Result};
use crate::factor::{Basket, KernelFactor};
use crate::linalg::spd_cholesky;
use crate::negatives::{generate_batch, product_log_density, product_negative, batch_size, EmpiricalStats, Regime};
use crate::par;
use crate::rng::{fork_seed, stream, DppRng};

/// Negatives whose log-probability falls below this are logged as degenerate.
pub const PATHOLOGICAL_LOG_PROB: f64 = -700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mle,
    CeDynamic,
    CeExplicit,
    CeProduct,
    Nce,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Mle,
        Method::CeDynamic,
        Method::CeExplicit,
        Method::CeProduct,
        Method::Nce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mle => "mle",
            Method::CeDynamic => "ce_dynamic",
            Method::CeExplicit => "ce_explicit",
            Method::CeProduct => "ce_product",
            Method::Nce => "nce",
        }
    }

    pub fn regime(self) -> Option<Regime> {
        match self {
            Method::Mle => None,
            Method::CeDynamic => Some(Regime::Dynamic),
            Method::CeExplicit => Some(Regime::Explicit),
            Method::CeProduct | Method::Nce => Some(Regime::Product),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    Constant,
    /// `η_t = η₀ / (1 + t / T₀)`.
    InverseT,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    /// `None` uses the largest basket size in the corpus.
    pub rank: Option<usize>,
    pub alpha: f64,
    /// `|A⁻| / |A⁺|`.
    pub negative_ratio: f64,
    pub step_size_initial: f64,
    pub step_schedule: StepSchedule,
    /// `T₀` of the inverse-t schedule, in steps.
    pub schedule_t0: f64,
    /// Relative change in validation log-likelihood below which training stops.
    pub epsilon: f64,
    /// Maximum number of epochs; each epoch ends with a validation check.
    pub max_iters: usize,
    pub seed: u64,
    /// Validation share of the non-test baskets, applied when loading data.
    pub validation_fraction: f64,
    pub batch_size: usize,
    /// `None` runs `⌈|train| / batch_size⌉` steps per epoch.
    pub steps_per_epoch: Option<usize>,
    /// Dynamic negatives are regenerated every this many steps.
    pub refresh_every: usize,
    /// Optional bound on row norms, applied after every step.
    pub max_row_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Mle,
            rank: None,
            alpha: 1.0,
            negative_ratio: 0.5,
            step_size_initial: 0.05,
            step_schedule: StepSchedule::InverseT,
            schedule_t0: 2000.0,
            epsilon: 1e-4,
            max_iters: 100,
            seed: 0,
            validation_fraction: 0.1,
            batch_size: 32,
            steps_per_epoch: None,
            refresh_every: 1,
            max_row_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DppError::InvalidInput(msg));
        if !(self.alpha >= 0.0) {
            return bad(format!("alpha must be ≥ 0, got {}", self.alpha));
        }
        if !(self.negative_ratio >= 0.0) || !self.negative_ratio.is_finite() {
            return bad(format!("negative ratio must be ≥ 0, got {}", self.negative_ratio));
        }
        if self.method == Method::Nce && self.negative_ratio <= 0.0 {
            return bad("nce needs a positive negative ratio".into());
        }
        if !(self.step_size_initial > 0.0) {
            return bad(format!("step size must be > 0, got {}", self.step_size_initial));
        }
        if !(self.schedule_t0 > 0.0) {
            return bad("schedule_t0 must be > 0".into());
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!("validation fraction must be in (0, 1), got {}", self.validation_fraction));
        }
        if self.batch_size == 0 || self.refresh_every == 0 || self.max_iters == 0 {
            return bad("batch size, refresh cadence and max_iters must be ≥ 1".into());
        }
        if let Some(r) = self.max_row_norm {
            if !(r > 0.0) {
                return bad("max row norm must be > 0".into());
            }
        }
        Ok(())
    }
}

/// Step size at step `t`.
pub fn step_schedule(t: usize, config: &TrainConfig) -> f64 {
    match config.step_schedule {
        StepSchedule::Constant => config.step_size_initial,
        StepSchedule::InverseT => config.step_size_initial / (1.0 + t as f64 / config.schedule_t0),
    }
}

/// True when the last relative change in `history` is below `epsilon`.
/// Compares the absolute change when the previous value is zero.
pub fn check_convergence(history: &[f64], epsilon: f64) -> bool {
    let [.., prev, last] = history else {
        return false;
    };
    let change = (last - prev).abs();
    if *prev == 0.0 {
        change < epsilon
    } else {
        change / prev.abs() < epsilon
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Mean minibatch objective over the epoch's steps.
    pub train_objective: f64,
    pub validation_log_likelihood: f64,
    pub regime: Option<Regime>,
    pub negatives: usize,
    pub skipped_samples: usize,
    pub pathological_negatives: usize,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub rank: usize,
    pub config: TrainConfig,
    pub initial_validation_log_likelihood: f64,
    pub epochs: Vec<EpochRecord>,
    pub iterations: usize,
    pub stop_reason: StopReason,
    /// Where the final factor was saved, if it was.
    pub checkpoint: Option<String>,
}

impl TrainReport {
    /// Validation log-likelihoods including the one before training.
    pub fn validation_history(&self) -> Vec<f64> {
        std::iter::once(self.initial_validation_log_likelihood)
            .chain(self.epochs.iter().map(|e| e.validation_log_likelihood))
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Dpp(#[from] DppError),

    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged {
        epoch: usize,
        message: String,
        last_good: Box<KernelFactor>,
        report: Box<TrainReport>,
    },
}

/// Result of one gradient step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub factor: KernelFactor,
    /// Objective at the factor before the step.
    pub objective: ObjectiveValue,
    /// Samples dropped for singular minors.
    pub skipped: usize,
    pub pathological_negatives: usize,
}

/// Per-sample output: rows `(V_A V_Aᵀ)⁻¹ V_A` and `log det(L_A)`.
struct SampleTerm {
    log_det: f64,
    solved: Option<DMatrix<f64>>,
}

fn sample_terms(factor: &KernelFactor, baskets: &[Basket]) -> Vec<SampleTerm> {
    par::map(baskets, |b| {
        let log_det = log_det_restricted(factor, b).unwrap_or(f64::NEG_INFINITY);
        if !log_det.is_finite() {
            return SampleTerm { log_det, solved: None };
        }
        let rows = factor.rows(b.items());
        let solved = spd_cholesky(&rows * rows.transpose()).map(|c| c.solve(&rows));
        SampleTerm { log_det, solved }
    })
}

fn scatter(grad: &mut DMatrix<f64>, basket: &Basket, solved: &DMatrix<f64>, weight: f64) {
    for (r, &item) in basket.items().iter().enumerate() {
        let mut row = grad.row_mut(item);
        row += solved.row(r) * (2.0 * weight);
    }
}

/// One ascent step `V ← V + η (∇φ̂ - ∇R)` on a minibatch.
///
/// For contrastive methods `φ̂` is the minibatch contrastive objective (the
/// normalizer cancels when negatives are present); for [`Method::Mle`] the
/// negatives are ignored; for [`Method::Nce`] it is the NCE objective scaled by
/// `1/|A⁺|` with product-distribution noise. Samples with singular minors are
/// skipped and counted.
pub fn sga_step(
    factor: &KernelFactor,
    positives: &[Basket],
    negatives: &[Basket],
    stats: &EmpiricalStats,
    config: &TrainConfig,
    step_size: f64,
) -> Result<StepOutcome> {
    if !(step_size > 0.0) {
        return Err(DppError::InvalidInput(format!("step size must be > 0, got {step_size}")));
    }
    if positives.is_empty() {
        return Err(DppError::InvalidInput("empty positive batch".into()));
    }
    let negatives = if config.method == Method::Mle { &[][..] } else { negatives };
    let counts = stats.occurrence_counts();
    let log_z = log_normalizer(factor);
    let mut grad = regularizer_grad(factor, counts, config.alpha) * -1.0;
    let reg = regularizer(factor, counts, config.alpha);
    let pos_terms = sample_terms(factor, positives);
    let neg_terms = sample_terms(factor, negatives);

    let mut skipped = 0;
    let mut pathological = 0;
    for (b, t) in negatives.iter().zip(&neg_terms) {
        if t.log_det - log_z < PATHOLOGICAL_LOG_PROB {
            pathological += 1;
            warn!("pathological negative {:?}: log-probability {}", b.items(), t.log_det - log_z);
        }
    }

    let normalizer_weight;
    let objective;
    if config.method == Method::Nce {
        let ratio = config.negative_ratio;
        let n = positives.len() as f64;
        let num_items = factor.num_items();
        let mut weight_sum = 0.0;
        let mut pos_term = 0.0;
        let mut neg_term = 0.0;
        let samples = positives
            .iter()
            .zip(&pos_terms)
            .map(|(b, t)| (b, t, true))
            .chain(negatives.iter().zip(&neg_terms).map(|(b, t)| (b, t, false)));
        for (b, t, is_positive) in samples {
            let noise = product_log_density(stats, b.items(), num_items);
            let lp = t.log_det - log_z;
            let post = nce_log_posterior(lp, noise, ratio, is_positive);
            if is_positive {
                pos_term += post;
            } else {
                neg_term -= post;
            }
            let scale = nce_scale(lp, noise, ratio, is_positive);
            if scale == 0.0 {
                continue;
            }
            match &t.solved {
                Some(solved) => {
                    scatter(&mut grad, b, solved, scale / n);
                    weight_sum += scale / n;
                }
                None if is_positive => skipped += 1,
                None => {}
            }
        }
        normalizer_weight = weight_sum;
        objective = ObjectiveValue {
            total: pos_term / n - neg_term / n - reg,
            positive_term: pos_term / n,
            negative_term: neg_term / n,
            regularizer: reg,
        };
    } else {
        let mut mean_pos = 0.0;
        let used_pos = pos_terms.iter().filter(|t| t.solved.is_some()).count();
        for (b, t) in positives.iter().zip(&pos_terms) {
            mean_pos += t.log_det - log_z;
            if let Some(solved) = &t.solved {
                scatter(&mut grad, b, solved, 1.0 / used_pos as f64);
            }
        }
        skipped += positives.len() - used_pos;
        mean_pos /= positives.len() as f64;

        let used_neg = neg_terms.iter().filter(|t| t.solved.is_some()).count();
        let mut mean_neg = 0.0;
        for (b, t) in negatives.iter().zip(&neg_terms) {
            mean_neg += t.log_det - log_z;
            if let Some(solved) = &t.solved {
                scatter(&mut grad, b, solved, -1.0 / used_neg as f64);
            }
        }
        skipped += negatives.len() - used_neg;
        if !negatives.is_empty() {
            mean_neg /= negatives.len() as f64;
        }
        normalizer_weight = if used_pos > 0 { 1.0 } else { 0.0 } - if used_neg > 0 { 1.0 } else { 0.0 };
        objective = ObjectiveValue {
            total: if mean_pos == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                mean_pos - mean_neg - reg
            },
            positive_term: mean_pos,
            negative_term: mean_neg,
            regularizer: reg,
        };
    }
    if skipped > 0 {
        debug!("skipped {skipped} samples with singular minors");
    }
    if normalizer_weight != 0.0 {
        grad -= grad_log_normalizer(factor) * normalizer_weight;
    }

    let mut values = factor.values() + grad * step_size;
    if let Some(max_norm) = config.max_row_norm {
        for mut row in values.row_iter_mut() {
            let norm = row.norm();
            if norm > max_norm {
                row *= max_norm / norm;
            }
        }
    }
    let factor = KernelFactor::new(values)?;
    Ok(StepOutcome {
        factor,
        objective,
        skipped,
        pathological_negatives: pathological,
    })
}

/// Mean log-probability of `baskets`, evaluated in parallel and reduced in
/// order.
pub fn mean_log_likelihood(factor: &KernelFactor, baskets: &[Basket]) -> Result<f64> {
    if baskets.is_empty() {
        return Err(DppError::InvalidInput("no baskets to evaluate".into()));
    }
    let log_z = log_normalizer(factor);
    let values = par::map(baskets, |b| log_prob_given_normalizer(factor, b, log_z));
    let mut sum = 0.0;
    for v in values {
        sum += v?;
    }
    Ok(sum / baskets.len() as f64)
}

fn draw_negatives(
    method: Method,
    factor: &KernelFactor,
    positives: &[Basket],
    stats: &EmpiricalStats,
    ratio: f64,
    epoch: usize,
    rng: &mut DppRng,
) -> Result<(Vec<Basket>, usize)> {
    let Some(regime) = method.regime() else {
        return Ok((Vec::new(), 0));
    };
    if ratio <= 0.0 {
        return Ok((Vec::new(), 0));
    }
    if method == Method::Nce {
        // Noise samples are independent of the positives.
        let count = batch_size(ratio, positives.len());
        let seed = fork_seed(rng);
        let drawn = par::map_range(count, |t| product_negative(stats, factor.num_items(), &mut stream(seed, t as u64)));
        return Ok((drawn.into_iter().collect::<Result<_>>()?, 0));
    }
    let batch = generate_batch(regime, factor, positives, stats, ratio, epoch, rng)?;
    Ok((batch.baskets, batch.skipped))
}

/// Fits a factor to the corpus' training split.
///
/// The factor starts from i.i.d. uniform entries scaled by `1/√K`. Each epoch
/// runs minibatch ascent steps and then measures the validation
/// log-likelihood; training stops once its relative change drops below
/// `epsilon` or after `max_iters` epochs. Random streams for initialization,
/// minibatching and negatives are independent, so contrastive runs without
/// negatives retrace the maximum-likelihood run exactly.
pub fn train(corpus: &Corpus, config: &TrainConfig) -> std::result::Result<(KernelFactor, TrainReport), TrainError> {
    config.validate()?;
    let train_set = corpus.train();
    if train_set.len() < 2 {
        return Err(DppError::InvalidInput("need at least 2 training baskets".into()).into());
    }
    let rank = config.rank.unwrap_or_else(|| infer_rank(corpus));
    let max_size = train_set.iter().map(Basket::len).max().unwrap_or(0);
    if rank < max_size {
        return Err(DppError::InvalidInput(format!("rank {rank} below largest training basket ({max_size})")).into());
    }
    let mut validation = corpus.validation();
    if validation.is_empty() {
        warn!("no validation split; monitoring convergence on the training split");
        validation = train_set.clone();
    }
    let num_items = corpus.num_items();
    let stats = &corpus.stats;

    let mut init_rng = stream(config.seed, 0);
    let mut batch_rng = stream(config.seed, 1);
    let mut neg_rng = stream(config.seed, 2);

    let mut factor = KernelFactor::random(num_items, rank, &mut init_rng)?;
    let initial_ll = mean_log_likelihood(&factor, &validation)?;
    let mut report = TrainReport {
        method: config.method,
        rank,
        config: config.clone(),
        initial_validation_log_likelihood: initial_ll,
        epochs: Vec::new(),
        iterations: 0,
        stop_reason: StopReason::MaxIters,
        checkpoint: None,
    };
    let mut history = vec![initial_ll];
    let steps_per_epoch = config
        .steps_per_epoch
        .unwrap_or_else(|| train_set.len().div_ceil(config.batch_size));
    let batch_len = config.batch_size.min(train_set.len());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let mut cached_negatives: Vec<Basket> = Vec::new();
    let mut step = 0usize;

    for epoch in 1..=config.max_iters {
        let started = Instant::now();
        let mut objective_sum = 0.0;
        let mut negatives_seen = 0;
        let mut skipped = 0;
        let mut pathological = 0;
        for _ in 0..steps_per_epoch {
            let mut batch = Vec::with_capacity(batch_len);
            while batch.len() < batch_len {
                if cursor == order.len() {
                    order.shuffle(&mut batch_rng);
                    cursor = 0;
                }
                batch.push(train_set[order[cursor]].clone());
                cursor += 1;
            }
            let refresh = config.method != Method::CeDynamic || step.is_multiple_of(config.refresh_every);
            if refresh {
                let (negs, gen_skipped) = draw_negatives(
                    config.method,
                    &factor,
                    &batch,
                    stats,
                    config.negative_ratio,
                    epoch,
                    &mut neg_rng,
                )?;
                cached_negatives = negs;
                skipped += gen_skipped;
            }
            let eta = step_schedule(step, config);
            let outcome = sga_step(&factor, &batch, &cached_negatives, stats, config, eta)?;
            let pos_term = outcome.objective.positive_term;
            if !pos_term.is_finite() {
                return Err(diverged(epoch, format!("positive term {pos_term}"), factor, report));
            }
            objective_sum += outcome.objective.total;
            negatives_seen += cached_negatives.len();
            skipped += outcome.skipped;
            pathological += outcome.pathological_negatives;
            factor = outcome.factor;
            step += 1;
        }
        let ll = mean_log_likelihood(&factor, &validation)?;
        if !ll.is_finite() {
            return Err(diverged(epoch, format!("validation log-likelihood {ll}"), factor, report));
        }
        // PSD check: I + VᵀV must factor.
        let v = factor.values();
        if spd_cholesky(DMatrix::identity(rank, rank) + v.transpose() * v).is_none() {
            return Err(diverged(epoch, "I + VᵀV lost positive definiteness".into(), factor, report));
        }
        report.epochs.push(EpochRecord {
            epoch,
            steps: steps_per_epoch,
            train_objective: objective_sum / steps_per_epoch as f64,
            validation_log_likelihood: ll,
            regime: config.method.regime().filter(|_| config.negative_ratio > 0.0),
            negatives: negatives_seen,
            skipped_samples: skipped,
            pathological_negatives: pathological,
            wall_time_secs: started.elapsed().as_secs_f64(),
        });
        report.iterations = epoch;
        history.push(ll);
        debug!("epoch {epoch}: validation log-likelihood {ll:.6}");
        if check_convergence(&history, config.epsilon) {
            report.stop_reason = StopReason::Converged;
            break;
        }
    }
    Ok((factor, report))
}

fn diverged(epoch: usize, message: String, last_good: KernelFactor, report: TrainReport) -> TrainError {
    TrainError::Diverged {
        epoch,
        message,
        last_good: Box::new(last_good),
        report: Box::new(report),
    }
}
