//! Fixtures shared by the criterion benchmarks.

use frametree::{Algorithm, RunConfig, Schedule};

/// Default tree schedule for `n` roots and `t` frames, seeded by `seed`.
pub fn config(algorithm: Algorithm, n: usize, t: usize, seed: u64) -> RunConfig {
    RunConfig::synthetic(algorithm, Schedule::tof_default(n, t), seed)
}
