//! Cost accounting, exhaustive oracles and scaling analysis.

pub mod cost;
pub mod fit;
pub mod ledger;
pub mod oracle;
pub mod plot;
pub mod scaling;

pub use cost::{predict_cost, regress_counts, ComplexityClass, CostPrediction, LevelCost};
pub use fit::{fit_points, FitError, GeometricFit};
pub use ledger::{CostCall, CostEvent, CostKind, LedgerTotals, NfeLedger};
pub use oracle::{brute_force_oracle, path_count, recursive_oracle, OracleError, OracleResult, PATH_LIMIT};
pub use plot::{render_svg, render_table};
pub use scaling::{
    matched_budget, roots_within_budget, run_scaling_experiment, CurvePoint, MatchedComparison, ScalingCurve,
};

/// Fits `s(n) = s_inf - a * r^n` to a score curve.
pub fn fit_geometric_decay(curve: &ScalingCurve) -> Result<GeometricFit, FitError> {
    curve.fit()
}
