//! Exhaustive enumeration of every root-to-leaf path of an unpruned tree.
//!
//! Two independent walks are provided: an odometer over branch ordinals
//! that rebuilds each path from its seed chain, and a depth-first recursion
//! that extends features incrementally. They must agree exactly.

use serde::Serialize;
use thiserror::Error;

use crate::generator::SyntheticLandscape;
use crate::model::{stage_of_frame, validate_schedule, ConfigReport, Schedule, Stage};
use crate::search::branch_factor;
use crate::seed::{child_seed, root_seed};

/// Largest tree the oracle will enumerate.
pub const PATH_LIMIT: u128 = 1_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("{paths} paths exceed the oracle limit of {limit}")]
    TooManyPaths { paths: u128, limit: u128 },
    #[error(transparent)]
    Config(#[from] ConfigReport),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleResult {
    pub best_score: f64,
    pub best_seeds: Vec<u64>,
    pub root_index: usize,
    /// Branch ordinal chosen at each frame `1..T`.
    pub ordinals: Vec<usize>,
    pub paths_enumerated: u64,
}

/// `N * prod_t b_t`, saturating.
pub fn path_count(schedule: &Schedule) -> u128 {
    (1..schedule.depth).fold(schedule.roots as u128, |acc, t| {
        acc.saturating_mul(branch_factor(t, schedule) as u128)
    })
}

fn stages(schedule: &Schedule) -> Vec<Stage> {
    (0..schedule.depth)
        .map(|t| stage_of_frame(t, schedule).expect("t < depth"))
        .collect()
}

fn check(schedule: &Schedule) -> Result<(), OracleError> {
    validate_schedule(schedule)?;
    let paths = path_count(schedule);
    if paths > PATH_LIMIT {
        return Err(OracleError::TooManyPaths {
            paths,
            limit: PATH_LIMIT,
        });
    }
    Ok(())
}

/// Higher score wins; exact ties go to the smaller leaf seed.
fn better(score: f64, leaf: u64, best: &Option<OracleResult>) -> bool {
    match best {
        None => true,
        Some(b) => score > b.best_score || (score == b.best_score && leaf < *b.best_seeds.last().expect("non-empty")),
    }
}

/// Odometer enumeration; every path is rebuilt from its seed chain.
pub fn brute_force_oracle(
    landscape: &SyntheticLandscape,
    schedule: &Schedule,
    master_seed: u64,
) -> Result<OracleResult, OracleError> {
    check(schedule)?;
    let depth = schedule.depth;
    let stages = stages(schedule);
    let radix: Vec<usize> = (1..depth).map(|t| branch_factor(t, schedule)).collect();
    let mut best: Option<OracleResult> = None;
    let mut count = 0u64;
    for root in 0..schedule.roots {
        let mut ordinals = vec![0usize; depth - 1];
        loop {
            let mut seeds = Vec::with_capacity(depth);
            seeds.push(root_seed(master_seed, root));
            for t in 1..depth {
                seeds.push(child_seed(seeds[t - 1], ordinals[t - 1], t));
            }
            let score = landscape.chain_quality(&seeds, &stages);
            count += 1;
            if better(score, seeds[depth - 1], &best) {
                best = Some(OracleResult {
                    best_score: score,
                    best_seeds: seeds,
                    root_index: root,
                    ordinals: ordinals.clone(),
                    paths_enumerated: 0,
                });
            }
            // advance, last frame fastest
            let mut pos = depth - 1;
            loop {
                if pos == 0 {
                    break;
                }
                ordinals[pos - 1] += 1;
                if ordinals[pos - 1] < radix[pos - 1] {
                    break;
                }
                ordinals[pos - 1] = 0;
                pos -= 1;
            }
            if pos == 0 {
                break;
            }
        }
    }
    let mut best = best.expect("at least one root");
    best.paths_enumerated = count;
    Ok(best)
}

struct Walk<'a> {
    landscape: &'a SyntheticLandscape,
    schedule: &'a Schedule,
    stages: Vec<Stage>,
    seeds: Vec<u64>,
    ordinals: Vec<usize>,
    root: usize,
    best: Option<OracleResult>,
    count: u64,
}

impl Walk<'_> {
    fn descend(&mut self, feature: &[f64], running: f64) {
        let t = self.seeds.len();
        if t == self.schedule.depth {
            self.count += 1;
            let score = running / t as f64;
            if better(score, self.seeds[t - 1], &self.best) {
                self.best = Some(OracleResult {
                    best_score: score,
                    best_seeds: self.seeds.clone(),
                    root_index: self.root,
                    ordinals: self.ordinals.clone(),
                    paths_enumerated: 0,
                });
            }
            return;
        }
        let parent_seed = self.seeds[t - 1];
        let stage = self.stages[t];
        for m in 0..branch_factor(t, self.schedule) {
            let seed = child_seed(parent_seed, m, t);
            let child = self.landscape.child_feature(feature, seed, stage);
            let q = self.landscape.frame_quality(&child, Some(feature), stage);
            self.seeds.push(seed);
            self.ordinals.push(m);
            self.descend(&child, running + q);
            self.seeds.pop();
            self.ordinals.pop();
        }
    }
}

/// Depth-first enumeration with incremental features.
pub fn recursive_oracle(
    landscape: &SyntheticLandscape,
    schedule: &Schedule,
    master_seed: u64,
) -> Result<OracleResult, OracleError> {
    check(schedule)?;
    let mut walk = Walk {
        landscape,
        schedule,
        stages: stages(schedule),
        seeds: Vec::with_capacity(schedule.depth),
        ordinals: Vec::with_capacity(schedule.depth),
        root: 0,
        best: None,
        count: 0,
    };
    for root in 0..schedule.roots {
        let seed = root_seed(master_seed, root);
        let feature = landscape.root_feature(seed);
        let q = landscape.frame_quality(&feature, None, walk.stages[0]);
        walk.root = root;
        walk.seeds.push(seed);
        walk.descend(&feature, 0.0 + q);
        walk.seeds.pop();
    }
    let mut best = walk.best.expect("at least one root");
    best.paths_enumerated = walk.count;
    Ok(best)
}
