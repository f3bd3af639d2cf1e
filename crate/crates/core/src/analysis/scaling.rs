//! Score-vs-compute curves and matched-budget comparisons.

use serde::{Deserialize, Serialize};

use super::cost::predict_cost;
use super::fit::{fit_points, FitError, GeometricFit};
use crate::model::{Algorithm, RunConfig, Schedule};
use crate::search::{run_search, Backends, SearchError, SearchOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: usize,
    pub best_score: f64,
    pub nfe: u64,
    pub extend_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingCurve {
    pub algorithm: Algorithm,
    pub depth: usize,
    pub points: Vec<CurvePoint>,
}

impl ScalingCurve {
    pub fn fit(&self) -> Result<GeometricFit, FitError> {
        let xs: Vec<f64> = self.points.iter().map(|p| p.n as f64).collect();
        let ys: Vec<f64> = self.points.iter().map(|p| p.best_score).collect();
        fit_points(&xs, &ys)
    }
}

/// Runs `algorithm` once per `N` in `grid`, holding everything else in
/// `base` fixed. Root seeds are nested, so the `N` roots of a smaller run
/// are the first `N` roots of every larger one.
pub fn run_scaling_experiment(
    algorithm: Algorithm,
    grid: &[usize],
    base: &RunConfig,
    backends: &Backends,
    opts: &SearchOptions,
) -> Result<ScalingCurve, SearchError> {
    let mut points = Vec::with_capacity(grid.len());
    for &n in grid {
        let config = RunConfig {
            algorithm,
            schedule: base.schedule.with_roots(n),
            ..base.clone()
        };
        let result = run_search(&config, backends, opts)?;
        let totals = result.ledger.totals();
        log::info!("{algorithm:?} N={n}: score {:.6}, nfe {}", result.quality, totals.nfe);
        points.push(CurvePoint {
            n,
            best_score: result.quality,
            nfe: totals.nfe,
            extend_calls: totals.extend_calls,
        });
    }
    Ok(ScalingCurve {
        algorithm,
        depth: base.schedule.depth,
        points,
    })
}

/// Largest root count whose predicted tree-search NFE fits in `budget`.
pub fn roots_within_budget(schedule: &Schedule, budget: u64) -> Option<usize> {
    let mut best = None;
    let mut n = 1;
    while predict_cost(&schedule.with_roots(n), Algorithm::Tof).nfe <= budget {
        best = Some(n);
        n += 1;
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedComparison {
    pub master_seed: u64,
    pub linear_roots: usize,
    pub tof_roots: usize,
    pub linear_score: f64,
    pub tof_score: f64,
    pub linear_nfe: u64,
    pub tof_nfe: u64,
}

impl MatchedComparison {
    pub fn tof_wins(&self) -> bool {
        self.tof_score >= self.linear_score
    }
}

/// Linear search with `linear_roots` samples against tree search given at
/// most the same NFE. `base.schedule` supplies the tree shape.
pub fn matched_budget(
    base: &RunConfig,
    linear_roots: usize,
    backends: &Backends,
    opts: &SearchOptions,
) -> Result<MatchedComparison, SearchError> {
    let linear_cfg = RunConfig {
        algorithm: Algorithm::Linear,
        schedule: base.schedule.with_roots(linear_roots),
        ..base.clone()
    };
    let linear = run_search(&linear_cfg, backends, opts)?;
    let budget = linear.ledger.totals().nfe;
    let tof_roots = roots_within_budget(&base.schedule, budget).unwrap_or(1);
    let tof_cfg = RunConfig {
        algorithm: Algorithm::Tof,
        schedule: base.schedule.with_roots(tof_roots),
        ..base.clone()
    };
    let tof = run_search(&tof_cfg, backends, opts)?;
    Ok(MatchedComparison {
        master_seed: base.master_seed,
        linear_roots,
        tof_roots,
        linear_score: linear.quality,
        tof_score: tof.quality,
        linear_nfe: budget,
        tof_nfe: tof.ledger.totals().nfe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_root_count_is_maximal() {
        let s = Schedule::tof_default(1, 10);
        let budget = predict_cost(&Schedule::tof_default(16, 10), Algorithm::Linear).nfe;
        let n = roots_within_budget(&s, budget).unwrap();
        assert!(predict_cost(&s.with_roots(n), Algorithm::Tof).nfe <= budget);
        assert!(predict_cost(&s.with_roots(n + 1), Algorithm::Tof).nfe > budget);
    }

    #[test]
    fn curve_has_one_point_per_grid_entry() {
        let base = RunConfig::synthetic(Algorithm::Linear, Schedule::tof_default(1, 4), 11);
        let backends = Backends::synthetic(&base).unwrap();
        let curve = run_scaling_experiment(
            Algorithm::Linear,
            &[1, 2, 4],
            &base,
            &backends,
            &SearchOptions::default(),
        )
        .unwrap();
        assert_eq!(curve.points.len(), 3);
        assert_eq!(curve.points[2].extend_calls, 16);
    }
}
