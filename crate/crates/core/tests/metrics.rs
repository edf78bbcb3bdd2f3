mod common;

use cedpp::conditioning::extension_scores;
use cedpp::dpp::log_prob;
use cedpp::eval::*;
use cedpp::rng::seeded;
use cedpp::{Basket, KernelFactor};
use common::*;
use rand::seq::index;

/// Ranks by a fixed per-item score, ignoring the observed set.
struct FixedScorer(Vec<f64>);

impl ItemScorer for FixedScorer {
    fn num_items(&self) -> usize {
        self.0.len()
    }

    fn scores(&self, observed: &[usize], _: u64) -> cedpp::Result<cedpp::conditioning::ItemValues> {
        let items: Vec<usize> = (0..self.0.len()).filter(|i| !observed.contains(i)).collect();
        let values = items.iter().map(|&i| self.0[i]).collect();
        Ok(cedpp::conditioning::ItemValues { items, values })
    }
}

fn sort_oracle_rank(f: &KernelFactor, rest: &[usize], held_out: usize) -> (f64, usize) {
    let l = f.full_kernel();
    let base = det_minor(&l, rest);
    let mut scored: Vec<(usize, f64)> = (0..f.num_items())
        .filter(|i| !rest.contains(i))
        .map(|j| {
            let mut with = rest.to_vec();
            with.push(j);
            with.sort();
            (j, det_minor(&l, &with) / base)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    let position = scored.iter().position(|x| x.0 == held_out).unwrap();
    let pr = 100.0 * (scored.len() - position) as f64 / scored.len() as f64;
    (pr, position + 1)
}

#[test]
fn percentile_rank_matches_sort_oracle() {
    let f = random_factor(6, 3, 12);
    for rest in [vec![0], vec![1, 4], vec![2, 3]] {
        for held_out in (0..6).filter(|i| !rest.contains(i)) {
            let pr = percentile_rank(&f, &basket(&rest), held_out, RankingMode::DeterminantRatio).unwrap();
            let (expected, _) = sort_oracle_rank(&f, &rest, held_out);
            assert!((pr - expected).abs() < 1e-9);
        }
    }
}

#[test]
fn precision_matches_sort_oracle() {
    let f = random_factor(6, 3, 31);
    let test = vec![basket(&[0, 1]), basket(&[2, 3, 5]), basket(&[1, 4])];
    for k in 1..=6 {
        let expected: f64 = test
            .iter()
            .map(|b| {
                let hits = b
                    .items()
                    .iter()
                    .filter(|&&i| sort_oracle_rank(&f, b.without(i).unwrap().items(), i).1 <= k)
                    .count();
                hits as f64 / b.len() as f64
            })
            .sum::<f64>()
            / test.len() as f64;
        let p = precision_at_k(&f, &test, k, RankingMode::DeterminantRatio).unwrap();
        assert!((p - expected).abs() < 1e-12, "k = {k}");
    }
}

#[test]
fn perfect_ranker_scores_full_marks() {
    // Items 0 and 1 always co-occur and outrank everything else.
    let scorer = FixedScorer(vec![10.0, 10.0, 1.0, 2.0, 3.0]);
    let test = vec![basket(&[0, 1]); 20];
    let m = mpr_with(&scorer, &test, &mut seeded(0)).unwrap();
    assert_eq!(m.value, 100.0);
    let p = precision_at_ks(&scorer, &test, &[1]).unwrap();
    assert_eq!(p.values[&1], 1.0);
}

#[test]
fn random_ranker_mpr_is_fifty() {
    let scorer = RandomScorer { num_items: 500 };
    let mut rng = seeded(7);
    let test: Vec<Basket> = (0..2500)
        .map(|_| Basket::new(index::sample(&mut rng, 500, 3).into_vec()).unwrap())
        .collect();
    let m = mpr_with(&scorer, &test, &mut seeded(1)).unwrap();
    assert!((m.value - 50.0).abs() < 2.0, "{}", m.value);
}

#[test]
fn auc_of_same_distribution_is_half() {
    let f = random_factor(40, 5, 3);
    let mut rng = seeded(11);
    let draw = |rng: &mut _| Basket::new(index::sample(rng, 40, 3).into_vec()).unwrap();
    let pos: Vec<f64> = (0..3000).map(|_| log_prob(&f, &draw(&mut rng)).unwrap()).collect();
    let neg: Vec<f64> = (0..3000).map(|_| log_prob(&f, &draw(&mut rng)).unwrap()).collect();
    let a = auc(&pos, &neg).unwrap();
    assert!((a - 0.5).abs() < 0.03, "{a}");
}

#[test]
fn metrics_are_deterministic_and_in_range() {
    let f = random_factor(15, 4, 5);
    let mut rng = seeded(2);
    let test: Vec<Basket> = (0..60)
        .map(|_| Basket::new(index::sample(&mut rng, 15, 3).into_vec()).unwrap())
        .collect();
    let config = EvalConfig {
        trials: 3,
        seed: 9,
        mode: RankingMode::Marginal,
    };
    let a = evaluate(&f, &test, &config).unwrap();
    let b = evaluate(&f, &test, &config).unwrap();
    assert_eq!(a, b);
    assert!(a.mpr > 0.0 && a.mpr <= 100.0);
    assert!((0.0..=1.0).contains(&a.auc));
    let p: Vec<f64> = a.precision_at.values().copied().collect();
    assert!(p.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(a.precision_at[&20], 1.0);
}

#[test]
fn toy_diagnostics_on_an_exact_model() {
    // Paired items share a dominant direction.
    let corpus = cedpp::data::toy_corpus(&mut seeded(0)).unwrap();
    let s = 0.3f64;
    let f = KernelFactor::from_row_slice(4, 2, &[1.0, s, 1.0, -s, s, 1.0, -s, 1.0]).unwrap();
    let d = toy_diagnostics(&f, &corpus).unwrap();
    assert_eq!(d.held_out.len(), 4);
    assert_eq!(d.baskets.len(), 2);
    for h in &d.held_out {
        let rest: Vec<usize> = corpus
            .catalog
            .ids()
            .iter()
            .position(|&id| id == h.held_out)
            .map(|i| if i % 2 == 0 { vec![i + 1] } else { vec![i - 1] })
            .unwrap();
        let held = corpus.catalog.index_of(h.held_out).unwrap();
        let q = extension_scores(&f, &rest).unwrap().normalized().unwrap();
        let p = q.get(held).unwrap();
        assert!((h.correct_prediction_prob - p).abs() < 1e-12);
        assert!((h.symmetric_kl.unwrap() - (1.0 - p) * (1.0 / p).ln()).abs() < 1e-12);
    }
    let net: f64 = d.baskets.iter().map(|b| b.symmetric_kl.unwrap()).sum();
    assert_eq!(d.net_symmetric_kl, Some(net));
}
