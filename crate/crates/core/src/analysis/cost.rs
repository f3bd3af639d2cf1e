//! Closed-form cost predictions for both search algorithms.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::{Algorithm, PruneRule, Schedule};
use crate::search::{branch_factor, pruning_sizes};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ComplexityClass {
    #[serde(rename = "O(TN)")]
    TimesN,
    #[serde(rename = "O(N+T)")]
    PlusN,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelCost {
    pub t: usize,
    pub branch: usize,
    pub k_prev: usize,
    /// `k_{t-1} * b_t` node generations.
    pub generated: usize,
    /// `b_t * log2(k_{t-1} * b_t)`; sort cost, not counted as generation.
    pub sort_term: f64,
    pub k_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostPrediction {
    pub algorithm: Algorithm,
    pub schedule: Schedule,
    pub levels: Vec<LevelCost>,
    pub root_calls: usize,
    /// Root plus per-level generations: the number of extend calls.
    pub total_nodes: usize,
    pub sort_cost: f64,
    pub nfe: u64,
    pub class: ComplexityClass,
}

/// Predicted generation cost of running `algorithm` on `schedule`.
pub fn predict_cost(schedule: &Schedule, algorithm: Algorithm) -> CostPrediction {
    let n = schedule.roots;
    let levels: Vec<LevelCost> = match algorithm {
        Algorithm::Linear => (1..schedule.depth)
            .map(|t| LevelCost {
                t,
                branch: 1,
                k_prev: n,
                generated: n,
                sort_term: 0.0,
                k_out: n,
            })
            .collect(),
        Algorithm::Tof | Algorithm::Oracle => {
            let ks = pruning_sizes(schedule);
            (1..schedule.depth)
                .map(|t| {
                    let b = branch_factor(t, schedule);
                    let generated = ks[t - 1] * b;
                    LevelCost {
                        t,
                        branch: b,
                        k_prev: ks[t - 1],
                        generated,
                        sort_term: b as f64 * (generated.max(1) as f64).log2(),
                        k_out: ks[t],
                    }
                })
                .collect()
        }
    };
    let total_nodes = n + levels.iter().map(|l| l.generated).sum::<usize>();
    let per_call = u64::from(schedule.denoise_steps_per_frame) * u64::from(schedule.latent_temporal_length);
    CostPrediction {
        algorithm,
        schedule: schedule.clone(),
        sort_cost: levels.iter().map(|l| l.sort_term).sum(),
        levels,
        root_calls: n,
        total_nodes,
        nfe: total_nodes as u64 * per_call,
        class: classify(schedule, algorithm),
    }
}

/// Stage-limited branching with halving pruning is additive in `N` and `T`;
/// everything else is treated as the multiplicative worst case.
fn classify(schedule: &Schedule, algorithm: Algorithm) -> ComplexityClass {
    if algorithm == Algorithm::Linear || schedule.prune_rule != PruneRule::Halve {
        return ComplexityClass::TimesN;
    }
    let branching_levels = (1..schedule.depth).filter(|&t| branch_factor(t, schedule) > 1).count();
    if schedule.branch_limit > 1 && branching_levels + 1 >= schedule.depth {
        ComplexityClass::TimesN
    } else {
        ComplexityClass::PlusN
    }
}

/// Least-squares coefficients `[intercept, N, T, N*T]` for observed counts.
pub fn regress_counts(samples: &[(usize, usize, f64)]) -> [f64; 4] {
    let rows = samples.len();
    let x = DMatrix::from_fn(rows, 4, |i, j| {
        let (n, t, _) = samples[i];
        match j {
            0 => 1.0,
            1 => n as f64,
            2 => t as f64,
            _ => (n * t) as f64,
        }
    });
    let y = DVector::from_iterator(rows, samples.iter().map(|s| s.2));
    let beta = x
        .svd(true, true)
        .solve(&y, 1e-12)
        .expect("SVD with both factors computed");
    [beta[0], beta[1], beta[2], beta[3]]
}
