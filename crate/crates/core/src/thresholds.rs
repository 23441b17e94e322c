//! Scalar phase-transition computations.
//!
//! On the invariant rays of the state-evolution map the dynamics reduce to a
//! scalar iteration `a_{t+1} = kappa^{-1} phi(a_t)`, and exact recovery holds
//! for every initial point iff `kappa` exceeds `sup_x phi(x)/x`. After the
//! stabilizing change of variables the suprema take the symmetrized forms
//! with the `exp(-x^2/8)` (binary/matching) and `exp(-x^2/2)` (symmetric)
//! damping factors; the un-symmetrized forms are kept as cross-checks.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64Mcg;

use crate::error::{Error, Result};
use crate::numerics::seed::mix;
use crate::numerics::{sup_search, ExpectationEngine, Method, SupSearchConfig, DEFAULT_NULL_TOL};
use crate::se::{se_map_f, SEMatrix};

/// A computed phase-transition value with solver diagnostics.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ThresholdResult {
    pub kappa_star: f64,
    /// Maximizing argument of the symmetrized objective.
    pub x_star: f64,
    /// Monte Carlo standard error of the objective near the maximizer
    /// (zero on quadrature paths).
    pub std_err: f64,
    /// The grid maximum sat on the search-window boundary.
    pub boundary: bool,
    /// Gap against the un-symmetrized form at the maximizer, when the
    /// operation carries a cross-check path.
    pub cross_check_gap: Option<f64>,
    pub grid_points: usize,
    pub refine_iters: usize,
}

/// Outcome of the scalar fixed-point iteration.
#[derive(Debug, Clone)]
pub struct ScalarSEResult {
    pub a_star: f64,
    pub trajectory: Vec<f64>,
    /// `kappa * trace` of the limiting matrix: `2 kappa a*` on the binary and
    /// matching rays, `(d-1) kappa a*` on the symmetric ray.
    pub mse_limit: f64,
    pub converged: bool,
}

/// Which invariant ray the scalar iteration lives on.
#[derive(Debug, Clone, Copy)]
pub enum ScalarMap {
    /// `d = 2` with proportions `(p, 1-p)`.
    Binary { p: f64 },
    /// Uniform proportions on `d` categories.
    Symmetric { d: usize },
    /// One matching edge `(r, s)` with masses `(pi_r, pi_s)`.
    Matching { pi_r: f64, pi_s: f64 },
}

// ---------------------------------------------------------------------------
// Scalar maps phi
// ---------------------------------------------------------------------------

/// `phi(x) = E_g[ p(1-p) / (1-p + p e^{g/sqrt(x) + 1/(2x)}) ]`.
pub fn phi_binary(x: f64, p: f64, engine: &ExpectationEngine) -> Result<f64> {
    phi_matching(x, p, 1.0 - p, engine)
}

/// Matching-edge map: `phi(x) = E_g[ pi_r pi_s / (pi_r e^{g/sqrt(x) + 1/(2x)} + pi_s) ]`.
///
/// Reduces to the binary map when `pi_r + pi_s = 1`.
pub fn phi_matching(x: f64, pi_r: f64, pi_s: f64, engine: &ExpectationEngine) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::InvalidParam(format!("x must be positive, got {x}")));
    }
    check_engine_dim(engine, 1)?;
    let (mean, _) = engine.expect_scalar(|g| {
        let w = g[0] / x.sqrt() + 1.0 / (2.0 * x);
        // Divide through by e^{max(w,0)}: stable for all x down to 1e-8.
        if w > 0.0 {
            pi_r * pi_s * (-w).exp() / (pi_r + pi_s * (-w).exp())
        } else {
            pi_r * pi_s / (pi_r * w.exp() + pi_s)
        }
    })?;
    Ok(mean)
}

/// Symmetric-ray map for uniform proportions:
/// `phi(x) = E_g[ e^{g_2/sqrt(x)} / (e^{g_1/sqrt(x) + 1/x} + sum_{r>=2} e^{g_r/sqrt(x)}) ]`.
///
/// Returns the estimate and its standard error (`d`-dimensional Monte Carlo
/// for `d >= 3`).
pub fn phi_sym(x: f64, d: usize, engine: &ExpectationEngine) -> Result<(f64, f64)> {
    if !(x > 0.0) {
        return Err(Error::InvalidParam(format!("x must be positive, got {x}")));
    }
    if d < 2 {
        return Err(Error::InvalidParam("d must be at least 2".into()));
    }
    check_engine_dim(engine, d)?;
    let inv_sqrt = 1.0 / x.sqrt();
    let shift = 1.0 / x;
    let (mean, err) = engine.expect_scalar(|g| {
        // log-sum-exp over the d exponents; the first carries the +1/x shift.
        let mut max_e = g[0] * inv_sqrt + shift;
        for gr in &g[1..] {
            max_e = max_e.max(gr * inv_sqrt);
        }
        let mut denom = ((g[0] * inv_sqrt + shift) - max_e).exp();
        for gr in &g[1..] {
            denom += (gr * inv_sqrt - max_e).exp();
        }
        (g[1] * inv_sqrt - max_e).exp() / denom
    })?;
    Ok((mean, err))
}

// ---------------------------------------------------------------------------
// Symmetrized threshold objectives
// ---------------------------------------------------------------------------

/// Symmetrized binary/matching objective at `x`:
/// `E_g[ pi_r pi_s x^2 e^{-x^2/8} / (pi_r e^{gx/2} + pi_s e^{-gx/2}) ]`.
fn matching_objective(g: f64, x: f64, pi_r: f64, pi_s: f64) -> f64 {
    let t = g * x / 2.0;
    // Divide by e^{|t|}.
    let (er, es) = if t >= 0.0 {
        (1.0, (-2.0 * t).exp())
    } else {
        ((2.0 * t).exp(), 1.0)
    };
    pi_r * pi_s * x * x * (-x * x / 8.0).exp() * (-t.abs()).exp() / (pi_r * er + pi_s * es)
}

/// Un-symmetrized binary/matching objective (cross-check path):
/// `E_g[ pi_r pi_s x^2 / (pi_s + pi_r e^{gx + x^2/2}) ]`.
fn matching_objective_unsym(g: f64, x: f64, pi_r: f64, pi_s: f64) -> f64 {
    let t = g * x + x * x / 2.0;
    let m = t.max(0.0);
    pi_r * pi_s * x * x * (-m).exp() / (pi_s * (-m).exp() + pi_r * (t - m).exp())
}

/// Symmetrized symmetric-case objective at `x`:
/// `E_g[ x^2 e^{-x^2/2} e^{(g_1+g_2)x} / sum_r e^{g_r x} ]`.
fn sym_objective(g: &[f64], x: f64) -> f64 {
    let mut max_e = f64::NEG_INFINITY;
    for gr in g {
        max_e = max_e.max(gr * x);
    }
    let mut denom = 0.0;
    for gr in g {
        denom += (gr * x - max_e).exp();
    }
    let log_num = (g[0] + g[1]) * x - x * x / 2.0 - max_e;
    x * x * log_num.exp() / denom
}

/// `kappa*_binary(p)`: supremum of the symmetrized objective, with the
/// un-symmetrized form evaluated at the maximizer as a cross-check (the two
/// must agree within 1e-4, or the quadrature setup is broken).
pub fn kappa_binary(
    p: f64,
    engine: &ExpectationEngine,
    sup_cfg: &SupSearchConfig,
) -> Result<ThresholdResult> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParam(format!("p must be in (0,1), got {p}")));
    }
    kappa_matching_masses(p, 1.0 - p, engine, sup_cfg)
}

/// `kappa*_{rs}` for a matching edge with masses `(pi_r, pi_s)`.
fn kappa_matching_masses(
    pi_r: f64,
    pi_s: f64,
    engine: &ExpectationEngine,
    sup_cfg: &SupSearchConfig,
) -> Result<ThresholdResult> {
    check_engine_dim(engine, 1)?;
    let set = engine.sample_set();
    let eval = |x: f64| -> Result<(f64, f64)> {
        set.expect(1, |g, out| out[0] = matching_objective(g[0], x, pi_r, pi_s))
            .map(|(m, e)| (m[0], e[0]))
    };
    let mut worst: Option<Error> = None;
    let sup = sup_search(
        |x| match eval(x) {
            Ok((m, _)) => m,
            Err(e) => {
                worst = Some(e);
                f64::NAN
            }
        },
        sup_cfg,
    );
    if let Some(e) = worst {
        return Err(e);
    }
    let sup = sup?;

    let (_, std_err) = eval(sup.x_star)?;
    let (unsym, _) = set
        .expect(1, |g, out| {
            out[0] = matching_objective_unsym(g[0], sup.x_star, pi_r, pi_s)
        })
        .map(|(m, e)| (m[0], e[0]))?;
    let gap = (sup.value - unsym).abs();
    if gap > 1e-4 {
        return Err(Error::InvalidParam(format!(
            "symmetrized and un-symmetrized threshold objectives disagree by {gap:.3e} at x = {}",
            sup.x_star
        )));
    }
    Ok(ThresholdResult {
        kappa_star: sup.value,
        x_star: sup.x_star,
        std_err,
        boundary: sup.boundary,
        cross_check_gap: Some(gap),
        grid_points: sup_cfg.grid_points,
        refine_iters: sup_cfg.refine_iters,
    })
}

/// `kappa*_{rs}` from a proportions vector and an index pair. Symmetric in
/// `(r, s)` by construction (the masses are passed in a canonical order).
pub fn kappa_matching(
    pi: &[f64],
    r: usize,
    s: usize,
    engine: &ExpectationEngine,
    sup_cfg: &SupSearchConfig,
) -> Result<ThresholdResult> {
    let d = pi.len();
    if r >= d || s >= d || r == s {
        return Err(Error::InvalidParam(format!("invalid pair ({r},{s})")));
    }
    if !(pi[r] > 0.0 && pi[s] > 0.0) {
        return Err(Error::InvalidParam(
            "both matched categories need positive mass".into(),
        ));
    }
    let (lo, hi) = (r.min(s), r.max(s));
    kappa_matching_masses(pi[lo], pi[hi], engine, sup_cfg)
}

/// `kappa*_sym(d)`: supremum of the symmetrized objective over the window,
/// averaged over `replicates` seed replicas with common random numbers
/// across the grid within each replica.
pub fn kappa_sym(
    d: usize,
    engine: &ExpectationEngine,
    sup_cfg: &SupSearchConfig,
    replicates: usize,
) -> Result<ThresholdResult> {
    if d < 2 {
        return Err(Error::InvalidParam("d must be at least 2".into()));
    }
    check_engine_dim(engine, d)?;
    let replicates = replicates.max(1);

    let mut sups = Vec::with_capacity(replicates);
    let mut x_stars = Vec::with_capacity(replicates);
    let mut boundary = false;
    let mut std_err_at_max = 0.0f64;
    for rep in 0..replicates {
        let rep_engine = match engine.method() {
            Method::MonteCarlo => engine.reseeded(mix(engine.seed(), 0x5E_u64 + rep as u64)),
            Method::GaussHermite => engine.clone(),
        };
        let set = rep_engine.sample_set();
        let mut failure: Option<Error> = None;
        let sup = sup_search(
            |x| match set.expect(1, |g, out| out[0] = sym_objective(g, x)) {
                Ok((m, _)) => m[0],
                Err(e) => {
                    failure = Some(e);
                    f64::NAN
                }
            },
            sup_cfg,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        let sup = sup?;
        let (_, e) = set
            .expect(1, |g, out| out[0] = sym_objective(g, sup.x_star))
            .map(|(m, e)| (m[0], e[0]))?;
        std_err_at_max = std_err_at_max.max(e);
        boundary |= sup.boundary;
        sups.push(sup.value);
        x_stars.push(sup.x_star);
        if matches!(engine.method(), Method::GaussHermite) {
            break; // quadrature replicas are identical
        }
    }
    let n = sups.len() as f64;
    let kappa_star = sups.iter().sum::<f64>() / n;
    let x_star = x_stars.iter().sum::<f64>() / n;
    let rep_var = sups
        .iter()
        .map(|v| (v - kappa_star) * (v - kappa_star))
        .sum::<f64>()
        / (n - 1.0).max(1.0);
    let std_err = ((rep_var / n).sqrt()).max(std_err_at_max);
    Ok(ThresholdResult {
        kappa_star,
        x_star,
        std_err,
        boundary,
        cross_check_gap: None,
        grid_points: sup_cfg.grid_points,
        refine_iters: sup_cfg.refine_iters,
    })
}

// ---------------------------------------------------------------------------
// Scalar fixed-point iteration
// ---------------------------------------------------------------------------

/// Iterate `a_{t+1} = kappa^{-1} phi(a_t)` from `a0`.
pub fn scalar_se(
    map: ScalarMap,
    kappa: f64,
    a0: f64,
    max_iter: usize,
    tol: f64,
    engine: &ExpectationEngine,
) -> Result<ScalarSEResult> {
    if !(kappa > 0.0) {
        return Err(Error::InvalidParam("kappa must be positive".into()));
    }
    if !(a0 >= 0.0) {
        return Err(Error::InvalidParam("a0 must be non-negative".into()));
    }
    let phi = |a: f64| -> Result<f64> {
        if a == 0.0 {
            return Ok(0.0); // phi(0) = 0: exact fixed point
        }
        match map {
            ScalarMap::Binary { p } => phi_binary(a, p, engine),
            ScalarMap::Matching { pi_r, pi_s } => phi_matching(a, pi_r, pi_s, engine),
            ScalarMap::Symmetric { d } => Ok(phi_sym(a, d, engine)?.0),
        }
    };
    let trace_factor = match map {
        ScalarMap::Binary { .. } | ScalarMap::Matching { .. } => 2.0,
        ScalarMap::Symmetric { d } => (d - 1) as f64,
    };
    let mut a = a0;
    let mut trajectory = vec![a];
    let mut converged = false;
    for _ in 0..max_iter {
        let next = phi(a)? / kappa;
        trajectory.push(next);
        let done = (next - a).abs() <= tol * a.max(1.0);
        a = next;
        if done {
            converged = true;
            break;
        }
    }
    // Collapse to the exact-recovery fixed point when the iteration has
    // fallen below resolution.
    if a < tol {
        a = 0.0;
    }
    Ok(ScalarSEResult {
        a_star: a,
        mse_limit: trace_factor * kappa * a,
        trajectory,
        converged,
    })
}

// ---------------------------------------------------------------------------
// General-case sampled lower bound
// ---------------------------------------------------------------------------

/// Sampled lower bound for `kappa* = sup_{X in A} lmax(f(X)) / lmax(X)`.
///
/// Scans the non-informative ray `s (D - pi pi^T)` with the full supremum
/// search, then adds `n_random` random weighted-graph Laplacians at random
/// log-uniform scales. This certifies only a lower bound; no claim is made
/// of attaining the supremum.
pub fn kappa_general_lower_bound(
    pi: &[f64],
    n_random: usize,
    engine: &ExpectationEngine,
    seed: u64,
    sup_cfg: &SupSearchConfig,
) -> Result<f64> {
    let d = pi.len();
    if d < 2 {
        return Err(Error::InvalidParam("d must be at least 2".into()));
    }
    if n_random == 0 {
        return Err(Error::InvalidParam("n_random must be positive".into()));
    }
    check_engine_dim(engine, d)?;
    let ray = SEMatrix::noninformative(pi, 1.0);

    let ratio = |x: &SEMatrix| -> Result<f64> {
        let lmax_x = lambda_max(x.matrix());
        if lmax_x <= 0.0 {
            return Ok(0.0);
        }
        let eval = se_map_f(x, pi, engine, DEFAULT_NULL_TOL)?;
        Ok(lambda_max(eval.matrix.matrix()) / lmax_x)
    };

    // Ray scan with the shared supremum machinery.
    let mut failure: Option<Error> = None;
    let ray_sup = sup_search(
        |s| match ray.scale(s).and_then(|x| ratio(&x)) {
            Ok(v) => v,
            Err(e) => {
                failure = Some(e);
                f64::NAN
            }
        },
        sup_cfg,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let mut best = ray_sup?.value;

    // Random Laplacians at random scales.
    let mut rng = Pcg64Mcg::seed_from_u64(mix(seed, 0x6B));
    let (ln_lo, ln_hi) = (sup_cfg.x_min.ln(), sup_cfg.x_max.ln());
    let mut produced = 0;
    while produced < n_random {
        let mut x = DMatrix::<f64>::zeros(d, d);
        let mut any_edge = false;
        for r in 0..d {
            for s in (r + 1)..d {
                if rng.gen::<f64>() < 0.6 {
                    let w: f64 = rng.gen::<f64>();
                    if w > 0.0 {
                        x[(r, s)] -= w;
                        x[(s, r)] -= w;
                        x[(r, r)] += w;
                        x[(s, s)] += w;
                        any_edge = true;
                    }
                }
            }
        }
        if !any_edge {
            continue;
        }
        produced += 1;
        let scale = (ln_lo + (ln_hi - ln_lo) * rng.gen::<f64>()).exp();
        let x = SEMatrix::new(x * scale)?;
        best = best.max(ratio(&x)?);
    }
    Ok(best)
}

/// `kappa*_sym(d) * d / log d`, for checking the large-`d` growth law.
pub fn sym_asymptotic_ratio(
    d: usize,
    engine: &ExpectationEngine,
    sup_cfg: &SupSearchConfig,
    replicates: usize,
) -> Result<f64> {
    if d < 3 {
        return Err(Error::InvalidParam("d must be at least 3".into()));
    }
    let res = kappa_sym(d, engine, sup_cfg, replicates)?;
    Ok(res.kappa_star * d as f64 / (d as f64).ln())
}

fn lambda_max(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(0.0f64, f64::max)
}

fn check_engine_dim(engine: &ExpectationEngine, d: usize) -> Result<()> {
    if engine.dim() != d {
        return Err(Error::InvalidParam(format!(
            "engine dimension {} does not match required {d}",
            engine.dim()
        )));
    }
    Ok(())
}

/// Default one-dimensional quadrature engine for threshold objectives.
pub fn default_scalar_engine() -> ExpectationEngine {
    ExpectationEngine::gauss_hermite(1, crate::numerics::DEFAULT_GH_NODES)
        .expect("static configuration is valid")
}

/// Default Monte Carlo engine for the symmetric-case objective, with the
/// documented acceptance budget (2e5 antithetic samples).
pub fn default_sym_engine(d: usize, seed: u64) -> ExpectationEngine {
    ExpectationEngine::monte_carlo(d, 200_000, seed)
}
