//! Geometric-decay fit `s(n) = s_inf - a * r^n` for score-vs-samples curves.
//!
//! The ratio is found by grid search over `r = i / 512`, refined by golden
//! section inside the best cell; `(s_inf, a)` is solved in closed form for
//! each candidate `r`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GRID_STEPS: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometricFit {
    pub s_inf: f64,
    pub amplitude: f64,
    /// `None` when the curve is flat and the ratio is unidentifiable.
    pub ratio: Option<f64>,
    pub residual_rms: f64,
    pub degenerate: bool,
}

impl GeometricFit {
    pub fn predict(&self, n: f64) -> f64 {
        match self.ratio {
            Some(r) => self.s_inf - self.amplitude * r.powf(n),
            None => self.s_inf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("need at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("curve contains non-finite values")]
    NonFinite,
}

struct Solve {
    s_inf: f64,
    amplitude: f64,
    sse: f64,
}

fn solve_at(r: f64, xs: &[f64], ys: &[f64]) -> Solve {
    let m = xs.len() as f64;
    let u: Vec<f64> = xs.iter().map(|&x| r.powf(x)).collect();
    let mu = u.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let (mut suu, mut suy) = (0.0, 0.0);
    for (ui, yi) in u.iter().zip(ys) {
        suu += (ui - mu) * (ui - mu);
        suy += (ui - mu) * (yi - my);
    }
    let (s_inf, amplitude) = if suu > 0.0 {
        let slope = suy / suu;
        (my - slope * mu, -slope)
    } else {
        (my, 0.0)
    };
    let sse = u
        .iter()
        .zip(ys)
        .map(|(ui, yi)| {
            let e = yi - (s_inf - amplitude * ui);
            e * e
        })
        .sum();
    Solve { s_inf, amplitude, sse }
}

pub fn fit_points(xs: &[f64], ys: &[f64]) -> Result<GeometricFit, FitError> {
    assert_eq!(xs.len(), ys.len());
    if xs.len() < 4 {
        return Err(FitError::TooFewPoints(xs.len()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(FitError::NonFinite);
    }
    let m = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / m;
    let spread = ys.iter().map(|y| (y - mean).abs()).fold(0.0, f64::max);
    if spread <= 1e-12 * mean.abs().max(1.0) {
        return Ok(GeometricFit {
            s_inf: mean,
            amplitude: 0.0,
            ratio: None,
            residual_rms: (ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / m).sqrt(),
            degenerate: true,
        });
    }

    let step = 1.0 / GRID_STEPS as f64;
    let mut best_i = 1;
    let mut best = solve_at(step, xs, ys);
    for i in 2..GRID_STEPS {
        let s = solve_at(i as f64 * step, xs, ys);
        if s.sse < best.sse {
            best = s;
            best_i = i;
        }
    }
    let mut best_r = best_i as f64 * step;

    // golden section inside the neighbouring cells
    let (mut lo, mut hi) = ((best_i - 1) as f64 * step, (best_i + 1) as f64 * step);
    lo = lo.max(1e-9);
    hi = hi.min(1.0 - 1e-9);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let mut fc = solve_at(c, xs, ys).sse;
    let mut fd = solve_at(d, xs, ys).sse;
    for _ in 0..100 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = solve_at(c, xs, ys).sse;
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = solve_at(d, xs, ys).sse;
        }
    }
    let r = 0.5 * (lo + hi);
    let refined = solve_at(r, xs, ys);
    if refined.sse < best.sse {
        best = refined;
        best_r = r;
    }

    Ok(GeometricFit {
        s_inf: best.s_inf,
        amplitude: best.amplitude,
        ratio: Some(best_r),
        residual_rms: (best.sse / m).sqrt(),
        degenerate: false,
    })
}
