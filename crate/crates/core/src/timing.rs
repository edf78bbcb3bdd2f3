//! Wall-clock measurement of the dual and primal conditioning routes.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::conditioning::{condition, conditional_marginals, dual_kernel, primal};
use crate::error::Result;
use crate::factor::KernelFactor;
use crate::rng::{stream, DppRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningRoute {
    /// Dual kernel, conditioned state and marginals.
    Dual,
    /// Materialized Schur complement over the complement set.
    Primal,
}

impl ConditioningRoute {
    pub fn name(self) -> &'static str {
        match self {
            ConditioningRoute::Dual => "dual",
            ConditioningRoute::Primal => "primal",
        }
    }
}

/// Fastest of `repeats` runs of one route on a random factor, in seconds.
pub fn time_conditioning(
    num_items: usize,
    rank: usize,
    set_size: usize,
    route: ConditioningRoute,
    repeats: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng: DppRng = stream(seed, num_items as u64);
    let factor = KernelFactor::random(num_items, rank, &mut rng)?;
    let observed: Vec<usize> = (0..set_size).map(|i| i * (num_items / set_size.max(1))).collect();
    let mut times = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        match route {
            ConditioningRoute::Dual => {
                let state = condition(&dual_kernel(&factor), &factor, &observed)?;
                std::hint::black_box(conditional_marginals(&state));
            }
            ConditioningRoute::Primal => {
                std::hint::black_box(primal::conditioned_kernel(&factor, &observed)?);
            }
        }
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(times.into_iter().fold(f64::INFINITY, f64::min))
}
