mod common;

use cedpp::data::toy_corpus;
use cedpp::dpp::mle_objective;
use cedpp::eval::{mpr, toy_diagnostics, RankingMode};
use cedpp::rng::{seeded, stream};
use cedpp::training::*;
use cedpp::KernelFactor;

fn numbers(r: &TrainReport) -> Vec<(f64, f64, usize)> {
    r.epochs
        .iter()
        .map(|e| (e.train_objective, e.validation_log_likelihood, e.negatives))
        .collect()
}

#[test]
fn identical_seeds_reproduce_reports() {
    let corpus = toy_corpus(&mut seeded(2)).unwrap();
    for method in Method::ALL {
        let config = TrainConfig {
            method,
            seed: 5,
            max_iters: 4,
            ..TrainConfig::default()
        };
        let (fa, ra) = train(&corpus, &config).unwrap();
        let (fb, rb) = train(&corpus, &config).unwrap();
        assert_eq!(fa, fb, "{method:?}");
        assert_eq!(numbers(&ra), numbers(&rb));
        assert_eq!(ra.initial_validation_log_likelihood, rb.initial_validation_log_likelihood);
    }
}

#[test]
fn contrastive_without_negatives_retraces_mle() {
    let corpus = toy_corpus(&mut seeded(3)).unwrap();
    let mle = TrainConfig {
        seed: 8,
        max_iters: 6,
        ..TrainConfig::default()
    };
    let (f_mle, r_mle) = train(&corpus, &mle).unwrap();
    for method in [Method::CeDynamic, Method::CeExplicit, Method::CeProduct] {
        let config = TrainConfig {
            method,
            negative_ratio: 0.0,
            ..mle.clone()
        };
        let (f, r) = train(&corpus, &config).unwrap();
        assert_eq!(f, f_mle, "{method:?}");
        assert_eq!(numbers(&r), numbers(&r_mle));
    }
}

#[test]
fn full_batch_mle_ascends() {
    let corpus = toy_corpus(&mut seeded(4)).unwrap();
    let train_set = corpus.train();
    let counts = corpus.stats.occurrence_counts();
    let config = TrainConfig {
        step_schedule: StepSchedule::Constant,
        step_size_initial: 0.01,
        ..TrainConfig::default()
    };
    let mut f = KernelFactor::random(4, 2, &mut stream(1, 0)).unwrap();
    let mut previous = mle_objective(&f, &train_set, counts, 1.0).unwrap().total;
    let mut increases = 0;
    let steps = 200;
    for _ in 0..steps {
        f = sga_step(&f, &train_set, &[], &corpus.stats, &config, 0.01).unwrap().factor;
        let current = mle_objective(&f, &train_set, counts, 1.0).unwrap().total;
        if current > previous {
            increases += 1;
        }
        previous = current;
    }
    assert!(increases as f64 >= 0.95 * steps as f64, "{increases}/{steps}");
}

#[test]
fn validation_history_starts_before_training() {
    let corpus = toy_corpus(&mut seeded(5)).unwrap();
    let (_, r) = train(&corpus, &TrainConfig { max_iters: 3, epsilon: 1e-12, ..TrainConfig::default() }).unwrap();
    let history = r.validation_history();
    assert_eq!(history.len(), r.epochs.len() + 1);
    assert_eq!(r.stop_reason, StopReason::MaxIters);
    assert_eq!(r.iterations, 3);
}

#[test]
fn no_run_diverges_through_its_negatives() {
    let corpus = toy_corpus(&mut seeded(6)).unwrap();
    for method in [Method::CeDynamic, Method::CeExplicit, Method::CeProduct, Method::Nce] {
        let config = TrainConfig {
            method,
            max_iters: 30,
            ..TrainConfig::default()
        };
        let (_, r) = train(&corpus, &config).unwrap();
        assert!(r.epochs.iter().all(|e| e.validation_log_likelihood.is_finite()));
    }
}

#[test]
fn mle_splits_toy_mass_evenly() {
    for seed in 0..3 {
        let corpus = toy_corpus(&mut seeded(seed)).unwrap();
        let (f, _) = train(&corpus, &TrainConfig { seed, ..TrainConfig::default() }).unwrap();
        let d = toy_diagnostics(&f, &corpus).unwrap();
        assert!((d.correct_prediction_prob - 0.5).abs() <= 0.07, "{}", d.correct_prediction_prob);
    }
}

fn paired_toy_runs(trials: u64) -> Vec<(f64, f64, f64)> {
    (0..trials)
        .map(|seed| {
            let corpus = toy_corpus(&mut seeded(seed)).unwrap();
            let run = |method| {
                let (f, _) = train(&corpus, &TrainConfig { method, seed, ..TrainConfig::default() }).unwrap();
                let d = toy_diagnostics(&f, &corpus).unwrap();
                let m = mpr(&f, &corpus.test(), RankingMode::DeterminantRatio, &mut seeded(seed)).unwrap();
                (d.net_symmetric_kl.unwrap_or(f64::INFINITY), d.correct_prediction_prob, m.value)
            };
            let (kl_mle, p_mle, mpr_mle) = run(Method::Mle);
            let (kl_ce, p_ce, mpr_ce) = run(Method::CeExplicit);
            (kl_ce - kl_mle, p_ce - p_mle, mpr_ce - mpr_mle)
        })
        .collect()
}

#[test]
#[ignore = "not reproduced: both baskets are exchangeable, so no method exceeds 0.5 expected correct completion"]
fn explicit_ce_beats_mle_on_toy() {
    let runs = paired_toy_runs(10);
    let wins = runs.iter().filter(|r| r.0 < 0.0 && r.1 > 0.0).count();
    assert!(wins >= 8, "explicit CE beat MLE on {wins}/10 seeds");
}

#[test]
#[ignore = "not reproduced: MLE already ranks the true completion first on the toy corpus"]
fn explicit_ce_improves_toy_mpr() {
    let runs = paired_toy_runs(10);
    assert!(runs.iter().all(|r| r.2 > 0.0), "{runs:?}");
}
