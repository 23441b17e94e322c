//! Scalar supremum search: log-spaced grid scan plus golden-section polish.

use crate::error::{Error, Result};

/// Search window and refinement budget for `sup_{x > 0} phi(x)`.
#[derive(Debug, Clone)]
pub struct SupSearchConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub grid_points: usize,
    pub refine_iters: usize,
    pub refine_tol: f64,
}

impl Default for SupSearchConfig {
    fn default() -> Self {
        // phi(x) <= x^2 near zero and the symmetrized integrands decay like
        // exp(-x^2/8), so the maximizer is interior to this window for all
        // parameter sets exercised here.
        SupSearchConfig {
            x_min: 1e-3,
            x_max: 20.0,
            grid_points: 96,
            refine_iters: 40,
            refine_tol: 1e-7,
        }
    }
}

impl SupSearchConfig {
    pub fn with_grid(mut self, grid_points: usize) -> Self {
        self.grid_points = grid_points;
        self
    }

    pub fn with_window(mut self, x_min: f64, x_max: f64) -> Self {
        self.x_min = x_min;
        self.x_max = x_max;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.x_min > 0.0) || !(self.x_max > self.x_min) {
            return Err(Error::InvalidParam(format!(
                "sup window must satisfy 0 < x_min < x_max, got [{}, {}]",
                self.x_min, self.x_max
            )));
        }
        if self.grid_points < 2 {
            return Err(Error::InvalidParam("grid_points must be >= 2".into()));
        }
        Ok(())
    }

    /// The log-spaced evaluation grid.
    pub fn grid(&self) -> Vec<f64> {
        let n = self.grid_points;
        let (a, b) = (self.x_min.ln(), self.x_max.ln());
        (0..n)
            .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
            .collect()
    }
}

/// Outcome of a supremum search.
#[derive(Debug, Clone)]
pub struct SupResult {
    pub x_star: f64,
    pub value: f64,
    /// The grid maximum sat on the window boundary; the window is likely too
    /// small and the value untrustworthy as a supremum.
    pub boundary: bool,
}

/// Maximize `phi` over the window: scan the log grid, then golden-section
/// refine inside the bracket around the best grid cell.
///
/// The returned value is by construction at least `phi` at every grid node.
pub fn sup_search(mut phi: impl FnMut(f64) -> f64, cfg: &SupSearchConfig) -> Result<SupResult> {
    cfg.validate()?;
    let grid = cfg.grid();

    let mut best_idx = 0;
    let mut best_val = f64::NEG_INFINITY;
    let mut values = Vec::with_capacity(grid.len());
    for (i, &x) in grid.iter().enumerate() {
        let v = phi(x);
        if !v.is_finite() {
            return Err(Error::NonFiniteObjective { x });
        }
        values.push(v);
        if v > best_val {
            best_val = v;
            best_idx = i;
        }
    }
    let boundary = best_idx == 0 || best_idx == grid.len() - 1;

    let mut lo = grid[best_idx.saturating_sub(1)];
    let mut hi = grid[(best_idx + 1).min(grid.len() - 1)];
    let mut x_star = grid[best_idx];
    let mut value = best_val;

    // Golden-section for a maximum; each step shrinks the bracket by 1/phi.
    let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = phi(x1);
    let mut f2 = phi(x2);
    for _ in 0..cfg.refine_iters {
        if !f1.is_finite() {
            return Err(Error::NonFiniteObjective { x: x1 });
        }
        if !f2.is_finite() {
            return Err(Error::NonFiniteObjective { x: x2 });
        }
        if f1 > value {
            value = f1;
            x_star = x1;
        }
        if f2 > value {
            value = f2;
            x_star = x2;
        }
        if hi - lo < cfg.refine_tol {
            break;
        }
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = phi(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = phi(x1);
        }
    }

    Ok(SupResult {
        x_star,
        value,
        boundary,
    })
}
