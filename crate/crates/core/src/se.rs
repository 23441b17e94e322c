//! Multivariate state evolution on the cone of graph Laplacians.
//!
//! The asymptotic behavior of the decoder is governed by the fixed-point
//! iteration `X_{t+1} = kappa^{-1} f(X_t)` on the set `A` of `d x d`
//! Laplacian matrices (symmetric PSD, zero row sums, non-positive
//! off-diagonals), where
//!
//! `f(X) = sum_r pi_r E_g[(e_r - eta_r(X))(e_r - eta_r(X))^T]`
//!
//! and `eta_r(X)` is the posterior-mean denoiser applied to `e_r + X^{1/2} g`
//! with covariance parameter `X` itself. This module evaluates `f` by seeded
//! quadrature/Monte Carlo in the range eigenbasis of `X`, iterates it, and
//! provides the graph-structural companions: connected components, effective
//! resistances, the partition limit matrices, and the Nishimori and
//! monotonicity diagnostics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ExpectationEngine, Method, SpectralPsd, DEFAULT_NULL_TOL};

/// Relative tolerance for membership checks in the Laplacian cone.
const CONE_TOL: f64 = 1e-10;

/// Positive off-diagonal entries admitted as exact-arithmetic noise.
const OFF_DIAG_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// The Laplacian cone
// ---------------------------------------------------------------------------

/// A member of the set `A`: symmetric PSD with zero row sums and non-positive
/// off-diagonal entries (the Laplacian of a weighted graph on `d` vertices).
#[derive(Debug, Clone, PartialEq)]
pub struct SEMatrix {
    x: DMatrix<f64>,
}

impl SEMatrix {
    /// Validate membership in the cone and wrap.
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        let d = x.nrows();
        if x.ncols() != d || d == 0 {
            return Err(Error::InvalidParam("SE matrix must be square".into()));
        }
        let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for r in 0..d {
            for s in 0..d {
                if (x[(r, s)] - x[(s, r)]).abs() > CONE_TOL * scale {
                    return Err(Error::NotSymmetric {
                        max_asym: (x[(r, s)] - x[(s, r)]).abs(),
                        scale,
                    });
                }
                if r != s && x[(r, s)] > OFF_DIAG_TOL * scale {
                    return Err(Error::InvalidParam(format!(
                        "off-diagonal entry ({r},{s}) = {} is positive",
                        x[(r, s)]
                    )));
                }
            }
            let row_sum: f64 = (0..d).map(|s| x[(r, s)]).sum();
            if row_sum.abs() > CONE_TOL * scale {
                return Err(Error::InvalidParam(format!(
                    "row {r} sums to {row_sum}, expected 0"
                )));
            }
        }
        // Zero row sums with non-positive off-diagonals make the matrix
        // diagonally dominant, hence PSD; no further eigen check needed.
        Ok(SEMatrix { x })
    }

    pub fn zeros(d: usize) -> Self {
        SEMatrix {
            x: DMatrix::zeros(d, d),
        }
    }

    /// Validate a row-major buffer as a cone member.
    pub fn from_row_major(d: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != d * d {
            return Err(Error::InvalidParam(format!(
                "expected {} entries, got {}",
                d * d,
                entries.len()
            )));
        }
        SEMatrix::new(DMatrix::from_fn(d, d, |r, s| entries[r * d + s]))
    }

    /// The non-informative initialization `kappa^{-1} (D - pi pi^T)`.
    pub fn noninformative(pi: &[f64], kappa: f64) -> Self {
        let d = pi.len();
        let x = DMatrix::from_fn(d, d, |r, s| {
            let v = if r == s { pi[r] } else { 0.0 };
            (v - pi[r] * pi[s]) / kappa
        });
        SEMatrix { x }
    }

    /// Laplacian of a matching with the given edge weights.
    pub fn from_matching(d: usize, pairs: &[(usize, usize)], weights: &[f64]) -> Result<Self> {
        if weights.len() != pairs.len() {
            return Err(Error::InvalidParam(
                "one weight per matching edge required".into(),
            ));
        }
        let mut touched = vec![false; d];
        let mut x = DMatrix::<f64>::zeros(d, d);
        for (&(r, s), &w) in pairs.iter().zip(weights) {
            if r >= d || s >= d || r == s {
                return Err(Error::InvalidParam(format!("invalid edge ({r},{s})")));
            }
            if touched[r] || touched[s] {
                return Err(Error::InvalidParam(format!(
                    "vertex reused by edge ({r},{s}); pairs must be disjoint"
                )));
            }
            if !(w > 0.0) {
                return Err(Error::InvalidParam("edge weights must be positive".into()));
            }
            touched[r] = true;
            touched[s] = true;
            x[(r, r)] += w;
            x[(s, s)] += w;
            x[(r, s)] -= w;
            x[(s, r)] -= w;
        }
        Ok(SEMatrix { x })
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.x
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        if !(c >= 0.0) {
            return Err(Error::InvalidParam("scale must be non-negative".into()));
        }
        Ok(SEMatrix { x: &self.x * c })
    }

    pub fn frobenius(&self) -> f64 {
        self.x.norm()
    }

    pub fn trace(&self) -> f64 {
        self.x.trace()
    }
}

// ---------------------------------------------------------------------------
// The map f
// ---------------------------------------------------------------------------

/// Prepared per-`X` sampler for `eta_r(X)` and the PSD-form integrand.
///
/// Gaussian samples are projected onto the range eigenbasis of `X`
/// (`eta_r` depends on `g` only through `X^{-1/2}(e_r - e_s)` inner
/// products), which both cuts the effective dimension and makes the
/// cross-component zeros exact.
pub struct EtaSampler {
    d: usize,
    rank: usize,
    /// `d x rank` range basis.
    basis: DMatrix<f64>,
    /// `delta[r * d + s]`: `Lambda^{-1/2} V^T (e_r - e_s)`, length `rank`.
    delta: Vec<Vec<f64>>,
    /// Constant exponent part `log pi_s - 1/2 ||delta_rs||^2`, or `-inf` when
    /// the pair crosses components (or `pi_s = 0`).
    log_const: Vec<f64>,
    pi: Vec<f64>,
}

impl EtaSampler {
    pub fn new(x: &SEMatrix, pi: &[f64], null_tol: f64) -> Result<Self> {
        let d = x.dim();
        if pi.len() != d {
            return Err(Error::InvalidParam("pi length must match dimension".into()));
        }
        let spec = SpectralPsd::new(x.matrix(), null_tol)?;
        let rank = spec.rank();
        let basis = spec.range_basis();
        let log_pi: Vec<f64> = pi
            .iter()
            .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
            .collect();

        let mut delta = vec![Vec::new(); d * d];
        let mut log_const = vec![f64::NEG_INFINITY; d * d];
        for r in 0..d {
            for s in 0..d {
                if r == s {
                    log_const[r * d + s] = log_pi[s];
                    continue;
                }
                let mut v = DVector::<f64>::zeros(d);
                v[r] = 1.0;
                v[s] = -1.0;
                let coords = spec.eigenvectors().transpose() * &v;
                let null_norm = spec.null_component_norm(&v);
                if null_norm > null_tol * v.norm() {
                    // Infinite effective resistance: weight is exactly zero.
                    continue;
                }
                let mut dvec = Vec::with_capacity(rank);
                let mut sq = 0.0;
                for k in 0..rank {
                    let c = coords[k] / spec.eigenvalues()[k].sqrt();
                    dvec.push(c);
                    sq += c * c;
                }
                delta[r * d + s] = dvec;
                log_const[r * d + s] = log_pi[s] - 0.5 * sq;
            }
        }
        Ok(EtaSampler {
            d,
            rank,
            basis,
            delta,
            log_const,
            pi: pi.to_vec(),
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Project an ambient `d`-dimensional Gaussian onto the range basis.
    fn project(&self, g: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; self.rank];
        for k in 0..self.rank {
            let mut acc = 0.0;
            for j in 0..self.d {
                acc += self.basis[(j, k)] * g[j];
            }
            u[k] = acc;
        }
        u
    }

    /// `eta_r(X)` at the projected sample `u`, written into `out`.
    fn eta_r(&self, u: &[f64], r: usize, out: &mut [f64]) {
        let d = self.d;
        let mut max_log = f64::NEG_INFINITY;
        for s in 0..d {
            let idx = r * d + s;
            let mut lw = self.log_const[idx];
            if lw != f64::NEG_INFINITY && s != r {
                let del = &self.delta[idx];
                let mut dot = 0.0;
                for k in 0..self.rank {
                    dot += u[k] * del[k];
                }
                lw -= dot;
            }
            out[s] = lw;
            if lw > max_log {
                max_log = lw;
            }
        }
        // pi_r > 0 guarantees max_log > -inf; r's own weight never vanishes.
        let mut total = 0.0;
        for v in out.iter_mut() {
            *v = (*v - max_log).exp();
            total += *v;
        }
        for v in out.iter_mut() {
            *v /= total;
        }
    }

    /// One sample of the PSD-form integrand
    /// `sum_r pi_r (e_r - eta_r)(e_r - eta_r)^T`, flattened row-major.
    pub fn sample_term(&self, g: &[f64], out: &mut [f64]) {
        let d = self.d;
        let u = self.project(g);
        let mut eta = vec![0.0; d];
        for r in 0..d {
            if self.pi[r] <= 0.0 {
                continue;
            }
            self.eta_r(&u, r, &mut eta);
            let mut resid = eta.clone();
            for v in resid.iter_mut() {
                *v = -*v;
            }
            resid[r] += 1.0;
            for a in 0..d {
                if resid[a] == 0.0 {
                    continue;
                }
                let pa = self.pi[r] * resid[a];
                for b in 0..d {
                    out[a * d + b] += pa * resid[b];
                }
            }
        }
    }

    /// One sample of the unsimplified order-parameter updates:
    /// `out_m += pi_r eta_r e_r^T` and `out_q += pi_r eta_r eta_r^T`
    /// (both flattened row-major).
    pub fn sample_mq(&self, g: &[f64], out_m: &mut [f64], out_q: &mut [f64]) {
        let d = self.d;
        let u = self.project(g);
        let mut eta = vec![0.0; d];
        for r in 0..d {
            if self.pi[r] <= 0.0 {
                continue;
            }
            self.eta_r(&u, r, &mut eta);
            for s in 0..d {
                out_m[s * d + r] += self.pi[r] * eta[s];
                let ps = self.pi[r] * eta[s];
                for l in 0..d {
                    out_q[s * d + l] += ps * eta[l];
                }
            }
        }
    }
}

/// A Monte Carlo / quadrature evaluation of `f(X)`.
#[derive(Debug, Clone)]
pub struct FEvaluation {
    /// Projected back onto the cone.
    pub matrix: SEMatrix,
    /// Raw estimator mean before projection.
    pub raw: DMatrix<f64>,
    /// Per-entry standard error (zero for quadrature).
    pub std_err: DMatrix<f64>,
}

impl FEvaluation {
    /// Frobenius norm of the per-entry standard errors.
    pub fn std_err_frobenius(&self) -> f64 {
        self.std_err.norm()
    }
}

/// Noise allowance used when comparing estimates: three standard errors with
/// an absolute floor. The floor absorbs quadrature truncation error on
/// deterministic paths (std_err is exactly zero there, but a 61-node rule
/// resolves these integrands to roughly 1e-7 near singular iterates) and
/// degenerate near-constant Monte Carlo entries.
pub const NOISE_FLOOR: f64 = 1e-6;

pub fn noise_allowance(std_err_fro: f64) -> f64 {
    (3.0 * std_err_fro).max(NOISE_FLOOR)
}

/// Evaluate `f(X)` with the given engine (ambient dimension `d`), projecting
/// the estimate back onto the cone: symmetrize, clip stray positive
/// off-diagonals (erroring if they exceed the noise allowance), and restore
/// zero row sums through the diagonal.
pub fn se_map_f(
    x: &SEMatrix,
    pi: &[f64],
    engine: &ExpectationEngine,
    null_tol: f64,
) -> Result<FEvaluation> {
    let d = x.dim();
    if engine.dim() != d {
        return Err(Error::InvalidParam(format!(
            "engine dimension {} does not match d = {d}",
            engine.dim()
        )));
    }
    let sampler = EtaSampler::new(x, pi, null_tol)?;
    let (mean, err) = engine.expect(d * d, |g, out| sampler.sample_term(g, out))?;

    let raw = DMatrix::from_fn(d, d, |r, s| mean[r * d + s]);
    let std_err = DMatrix::from_fn(d, d, |r, s| err[r * d + s]);

    // Symmetrize (each sample term is symmetric; this removes roundoff).
    let mut proj = DMatrix::from_fn(d, d, |r, s| 0.5 * (raw[(r, s)] + raw[(s, r)]));
    // Clip positive off-diagonals within the noise allowance.
    for r in 0..d {
        for s in 0..d {
            if r != s && proj[(r, s)] > 0.0 {
                let allowance = noise_allowance(std_err[(r, s)].max(std_err[(s, r)]));
                if proj[(r, s)] > allowance {
                    return Err(Error::ProjectionTooLarge {
                        r,
                        s,
                        value: proj[(r, s)],
                        allowance,
                    });
                }
                proj[(r, s)] = 0.0;
            }
        }
    }
    // Zero row sums via the diagonal; the result is diagonally dominant,
    // hence a Laplacian.
    for r in 0..d {
        let off: f64 = (0..d).filter(|&s| s != r).map(|s| proj[(r, s)]).sum();
        proj[(r, r)] = -off;
    }
    Ok(FEvaluation {
        matrix: SEMatrix::new(proj)?,
        raw,
        std_err,
    })
}

// ---------------------------------------------------------------------------
// Fixed-point iteration
// ---------------------------------------------------------------------------

/// Configuration of an SE run.
#[derive(Debug, Clone)]
pub struct SEConfig {
    pub kappa: f64,
    pub pi: Vec<f64>,
    pub engine: ExpectationEngine,
    pub max_iter: usize,
    /// Relative Frobenius change declaring a fixed point.
    pub fp_tol: f64,
    pub null_tol: f64,
}

impl SEConfig {
    pub fn new(kappa: f64, pi: Vec<f64>, engine: ExpectationEngine) -> Result<Self> {
        if !(kappa > 0.0) {
            return Err(Error::InvalidParam(format!(
                "kappa must be positive, got {kappa}"
            )));
        }
        crate::model::validate_simplex(&pi)?;
        Ok(SEConfig {
            kappa,
            pi,
            engine,
            max_iter: 500,
            fp_tol: 1e-7,
            null_tol: DEFAULT_NULL_TOL,
        })
    }
}

/// One recorded step of a trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SEStep {
    pub t: usize,
    /// Row-major `d x d` iterate.
    pub x: Vec<f64>,
    /// `kappa * trace(X_t)`.
    pub mse: f64,
}

/// A full SE run with its fixed point.
#[derive(Debug, Clone)]
pub struct SETrajectory {
    pub steps: Vec<SEStep>,
    pub converged: bool,
    pub fixed_point: SEMatrix,
    /// `||X* - kappa^{-1} f(X*)||_F` under the verification evaluation.
    pub residual: f64,
    /// Standard-error scale of the final evaluation.
    pub noise_floor: f64,
}

impl SETrajectory {
    pub fn iterate_matrix(&self, t: usize) -> DMatrix<f64> {
        let d = self.fixed_point.dim();
        DMatrix::from_fn(d, d, |r, s| self.steps[t].x[r * d + s])
    }

    pub fn mse_at(&self, t: usize) -> f64 {
        self.steps[t].mse
    }
}

/// Iterate `X_{t+1} = kappa^{-1} f(X_t)` until the relative Frobenius change
/// drops below `fp_tol` (floored by the Monte Carlo noise) or `max_iter`.
/// The fixed point is re-verified with a four-times-larger sample.
pub fn se_iterate(x0: &SEMatrix, cfg: &SEConfig) -> Result<SETrajectory> {
    let mut x = x0.clone();
    let mut steps = vec![SEStep {
        t: 0,
        x: flat(x.matrix()),
        mse: cfg.kappa * x.trace(),
    }];
    let mut converged = false;

    for t in 0..cfg.max_iter {
        let eval = se_map_f(&x, &cfg.pi, &cfg.engine, cfg.null_tol)?;
        let next = eval.matrix.scale(1.0 / cfg.kappa)?;
        let change = (next.matrix() - x.matrix()).norm();
        let scale = x.frobenius().max(1.0);
        steps.push(SEStep {
            t: t + 1,
            x: flat(next.matrix()),
            mse: cfg.kappa * next.trace(),
        });
        let floor = noise_allowance(eval.std_err_frobenius()) / cfg.kappa;
        x = next;
        if change <= (cfg.fp_tol * scale).max(floor) {
            converged = true;
            break;
        }
    }

    // Verification pass at 4x the sample budget (same seed family).
    let verify_engine = match cfg.engine.method() {
        Method::MonteCarlo => cfg.engine.with_samples(cfg.engine.n_samples() * 4),
        Method::GaussHermite => cfg.engine.clone(),
    };
    let eval = se_map_f(&x, &cfg.pi, &verify_engine, cfg.null_tol)?;
    let residual = (eval.matrix.matrix().unscale(cfg.kappa) - x.matrix()).norm();
    let noise_floor = noise_allowance(eval.std_err_frobenius()) / cfg.kappa;

    Ok(SETrajectory {
        steps,
        converged,
        fixed_point: x,
        residual,
        noise_floor,
    })
}

fn flat(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    let mut out = Vec::with_capacity(d * d);
    for r in 0..d {
        for s in 0..d {
            out.push(m[(r, s)]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Order parameters
// ---------------------------------------------------------------------------

/// The Nishimori-consistent order parameters derived from an SE iterate.
#[derive(Debug, Clone)]
pub struct OrderParams {
    pub m_mat: DMatrix<f64>,
    pub q_mat: DMatrix<f64>,
    pub r_mat: DMatrix<f64>,
    pub d_mat: DMatrix<f64>,
}

/// `M = Q = D - kappa X`, `R = kappa X`; errors when the implied overlap
/// matrix is not PSD (the iterate left the Nishimori-consistent region).
pub fn order_params_from_x(x: &SEMatrix, pi: &[f64], kappa: f64) -> Result<OrderParams> {
    let d = x.dim();
    let d_mat = DMatrix::from_fn(d, d, |r, s| if r == s { pi[r] } else { 0.0 });
    let r_mat = x.matrix() * kappa;
    let m_mat = &d_mat - &r_mat;
    let eig = m_mat.clone().symmetric_eigen();
    let lambda_min = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if lambda_min < -1e-8 * lambda_max.max(1.0) {
        return Err(Error::NotPsd {
            lambda_min,
            lambda_max,
        });
    }
    Ok(OrderParams {
        q_mat: m_mat.clone(),
        m_mat,
        r_mat,
        d_mat,
    })
}

// ---------------------------------------------------------------------------
// Graph structure
// ---------------------------------------------------------------------------

/// Disjoint blocks covering `{0, .., d-1}`, sorted by smallest member.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub blocks: Vec<Vec<usize>>,
}

impl Partition {
    pub fn singletons(d: usize) -> Self {
        Partition {
            blocks: (0..d).map(|r| vec![r]).collect(),
        }
    }

    pub fn block_of(&self, r: usize) -> Option<usize> {
        self.blocks.iter().position(|b| b.contains(&r))
    }
}

/// Connected components of the weighted graph: edge `(r,s)` present iff
/// `-x_rs > weight_tol`.
pub fn connected_components(x: &SEMatrix, weight_tol: f64) -> Partition {
    let d = x.dim();
    let mut parent: Vec<usize> = (0..d).collect();
    fn find(parent: &mut Vec<usize>, mut r: usize) -> usize {
        while parent[r] != r {
            parent[r] = parent[parent[r]];
            r = parent[r];
        }
        r
    }
    for r in 0..d {
        for s in (r + 1)..d {
            if -x.matrix()[(r, s)] > weight_tol {
                let (a, b) = (find(&mut parent, r), find(&mut parent, s));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    let mut root_block = vec![usize::MAX; d];
    for r in 0..d {
        let root = find(&mut parent, r);
        if root_block[root] == usize::MAX {
            root_block[root] = blocks.len();
            blocks.push(Vec::new());
        }
        blocks[root_block[root]].push(r);
    }
    Partition { blocks }
}

/// Effective resistance `||X^{-1/2}(e_r - e_s)||^2`; infinite across
/// components.
pub fn effective_resistance(x: &SEMatrix, r: usize, s: usize, null_tol: f64) -> Result<f64> {
    let d = x.dim();
    if r >= d || s >= d {
        return Err(Error::InvalidParam("vertex out of range".into()));
    }
    if r == s {
        return Ok(0.0);
    }
    let spec = SpectralPsd::new(x.matrix(), null_tol)?;
    let mut v = DVector::<f64>::zeros(d);
    v[r] = 1.0;
    v[s] = -1.0;
    let (q, in_range) = spec.quad_pinv(&v);
    Ok(if in_range { q } else { f64::INFINITY })
}

/// The large-scale limit for a component partition:
/// `L_K = D - sum_k P_k pi pi^T P_k / (1^T P_k pi)`.
pub fn limit_matrix(partition: &Partition, pi: &[f64]) -> Result<DMatrix<f64>> {
    let d = pi.len();
    let mut out = DMatrix::from_fn(d, d, |r, s| if r == s { pi[r] } else { 0.0 });
    for (k, block) in partition.blocks.iter().enumerate() {
        let mass: f64 = block.iter().map(|&r| pi[r]).sum();
        if mass <= 0.0 {
            return Err(Error::ZeroMassBlock { block: k });
        }
        for &r in block {
            for &s in block {
                out[(r, s)] -= pi[r] * pi[s] / mass;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Nishimori and monotonicity diagnostics
// ---------------------------------------------------------------------------

/// Residuals of the order-parameter identities along one trajectory step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NishimoriStep {
    pub t: usize,
    /// `||M 1 - pi||_inf` of the unsimplified update.
    pub row_sum_residual: f64,
    /// `||M - M^T||_inf`.
    pub asymmetry: f64,
    /// `||M - Q||_inf`.
    pub m_q_gap: f64,
    /// Noise allowance the residuals are compared against.
    pub allowance: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NishimoriReport {
    pub steps: Vec<NishimoriStep>,
    pub max_residual: f64,
    pub ok: bool,
}

/// Evaluate the unsimplified order-parameter updates at every recorded
/// iterate of a trajectory and check the consistency identities: the update
/// of `M` has row sums `pi`, is symmetric, and coincides with the update of
/// `Q` — all within three standard errors.
///
/// Each residual is estimated as its own integrand so the standard errors it
/// is compared against are the estimator's own, not a norm heuristic.
pub fn check_nishimori(
    traj: &SETrajectory,
    pi: &[f64],
    _kappa: f64,
    engine: &ExpectationEngine,
    null_tol: f64,
) -> Result<NishimoriReport> {
    let d = pi.len();
    let dd = d * d;
    let mut steps = Vec::new();
    let mut max_residual = 0.0f64;
    let mut all_ok = true;
    for step in &traj.steps {
        let x = SEMatrix::new(DMatrix::from_fn(d, d, |r, s| step.x[r * d + s]))?;
        // At a Nishimori-consistent point the covariance parameter
        // kappa^{-1} R_t equals X_t, so the eta_r sampler applies directly.
        // Outputs: d row-sum residuals, d^2 asymmetry entries, d^2 M-Q gaps.
        let sampler = EtaSampler::new(&x, pi, null_tol)?;
        let (res, err) = engine.expect(d + 2 * dd, |g, out| {
            let mut m_part = vec![0.0; dd];
            let mut q_part = vec![0.0; dd];
            sampler.sample_mq(g, &mut m_part, &mut q_part);
            for s in 0..d {
                let sum: f64 = (0..d).map(|r| m_part[s * d + r]).sum();
                out[s] = sum - pi[s];
            }
            for r in 0..d {
                for s in 0..d {
                    out[d + r * d + s] = m_part[r * d + s] - m_part[s * d + r];
                    out[d + dd + r * d + s] = m_part[r * d + s] - q_part[r * d + s];
                }
            }
        })?;

        // Compare each residual family's max-norm against three standard
        // errors of that family's noisiest entry.
        let mut ok = true;
        let mut worst = 0.0f64;
        let mut allowance = 0.0f64;
        let mut check = |lo: usize, hi: usize| -> f64 {
            let block_max = res[lo..hi].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let block_err = err[lo..hi].iter().fold(0.0f64, |m, v| m.max(*v));
            let block_allowance = noise_allowance(block_err);
            if block_max > block_allowance {
                ok = false;
            }
            worst = worst.max(block_max);
            allowance = allowance.max(block_allowance);
            block_max
        };
        let row_sum_residual = check(0, d);
        let asymmetry = check(d, d + dd);
        let m_q_gap = check(d + dd, d + 2 * dd);
        max_residual = max_residual.max(worst);
        all_ok &= ok;
        steps.push(NishimoriStep {
            t: step.t,
            row_sum_residual,
            asymmetry,
            m_q_gap,
            allowance,
            ok,
        });
    }
    Ok(NishimoriReport {
        steps,
        max_residual,
        ok: all_ok,
    })
}

/// Common-random-numbers check of the order preservation of `f`.
#[derive(Debug, Clone)]
pub struct MonotoneReport {
    /// Smallest eigenvalue of `f(y) - f(x)` under shared samples.
    pub lambda_min: f64,
    /// `-3 sigma` style allowance the eigenvalue is compared against.
    pub allowance: f64,
    pub pass: bool,
}

/// Verify `f(x) <= f(y)` (PSD order) for `x <= y`, evaluating both maps on
/// the same sample set and differencing sample-by-sample.
pub fn check_monotone_pair(
    x: &SEMatrix,
    y: &SEMatrix,
    pi: &[f64],
    engine: &ExpectationEngine,
    null_tol: f64,
) -> Result<MonotoneReport> {
    let d = x.dim();
    if y.dim() != d {
        return Err(Error::InvalidParam("dimension mismatch".into()));
    }
    let gap = (y.matrix() - x.matrix()).symmetric_eigen();
    let gap_min = gap
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let scale = y.matrix().norm().max(1.0);
    if gap_min < -1e-10 * scale {
        return Err(Error::InvalidParam(format!(
            "precondition x <= y violated: lambda_min(y - x) = {gap_min:.3e}"
        )));
    }
    let sx = EtaSampler::new(x, pi, null_tol)?;
    let sy = EtaSampler::new(y, pi, null_tol)?;
    let (diff, err) = engine.expect(d * d, |g, out| {
        let mut tx = vec![0.0; d * d];
        sx.sample_term(g, &mut tx);
        sy.sample_term(g, out);
        for (o, t) in out.iter_mut().zip(&tx) {
            *o -= t;
        }
    })?;
    let diff_m = DMatrix::from_fn(d, d, |r, s| 0.5 * (diff[r * d + s] + diff[s * d + r]));
    let eig = diff_m.symmetric_eigen();
    let lambda_min = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let err_fro = err.iter().map(|e| e * e).sum::<f64>().sqrt();
    let allowance = noise_allowance(err_fro);
    Ok(MonotoneReport {
        lambda_min,
        allowance,
        pass: lambda_min >= -allowance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::GaussHermiteRule;
    use approx::assert_abs_diff_eq;

    fn mc(d: usize, samples: usize, seed: u64) -> ExpectationEngine {
        ExpectationEngine::monte_carlo(d, samples, seed)
    }

    fn gh2() -> ExpectationEngine {
        ExpectationEngine::gauss_hermite(2, 61).unwrap()
    }

    /// Scalar oracle: phi(x) = E_g[p(1-p) / (1-p + p e^{g/sqrt(x) + 1/(2x)})]
    /// via a dense one-dimensional quadrature, independent of the matrix path.
    fn phi_binary_oracle(x: f64, p: f64) -> f64 {
        let rule = GaussHermiteRule::new(201);
        rule.expect(|g| {
            let w = g / x.sqrt() + 1.0 / (2.0 * x);
            // Divide through by e^{max(w,0)} to avoid overflow.
            if w > 0.0 {
                p * (1.0 - p) * (-w).exp() / ((1.0 - p) * (-w).exp() + p)
            } else {
                p * (1.0 - p) / (1.0 - p + p * w.exp())
            }
        })
    }

    #[test]
    fn cone_membership_is_validated() {
        let ok = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert!(SEMatrix::new(ok).is_ok());
        let positive_off = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(SEMatrix::new(positive_off).is_err());
        let bad_rows = DMatrix::from_row_slice(2, 2, &[1.0, -0.5, -0.5, 1.0]);
        assert!(SEMatrix::new(bad_rows).is_err());
    }

    #[test]
    fn f_of_zero_is_zero() {
        let x = SEMatrix::zeros(3);
        let pi = [0.2, 0.3, 0.5];
        let eval = se_map_f(&x, &pi, &mc(3, 2000, 1), DEFAULT_NULL_TOL).unwrap();
        assert_eq!(eval.matrix.matrix().norm(), 0.0);
        assert_eq!(eval.std_err.norm(), 0.0);
    }

    #[test]
    fn f_at_large_scale_approaches_limit() {
        // f(t (D - pi pi^T)) -> D - pi pi^T as t -> infinity.
        let pi = [0.2, 0.3, 0.5];
        let base = SEMatrix::noninformative(&pi, 1.0);
        let x = base.scale(1e6).unwrap();
        let engine = mc(3, 40_000, 7);
        let eval = se_map_f(&x, &pi, &engine, DEFAULT_NULL_TOL).unwrap();
        let limit = base.matrix();
        for r in 0..3 {
            for s in 0..3 {
                let tol = noise_allowance(eval.std_err[(r, s)]);
                assert!(
                    (eval.raw[(r, s)] - limit[(r, s)]).abs() <= tol.max(1e-4),
                    "entry ({r},{s}): {} vs {}",
                    eval.raw[(r, s)],
                    limit[(r, s)]
                );
            }
        }
    }

    #[test]
    fn binary_ray_matches_scalar_quadrature() {
        // f(x u u^T) = phi(x) u u^T for d = 2.
        let pi = [0.5, 0.5];
        for &xval in &[0.2, 1.0, 5.0] {
            let x =
                SEMatrix::new(DMatrix::from_row_slice(2, 2, &[xval, -xval, -xval, xval])).unwrap();
            let eval = se_map_f(&x, &pi, &gh2(), DEFAULT_NULL_TOL).unwrap();
            let phi = phi_binary_oracle(xval, 0.5);
            assert_abs_diff_eq!(eval.matrix.matrix()[(0, 0)], phi, epsilon = 1e-6);
            assert_abs_diff_eq!(eval.matrix.matrix()[(0, 1)], -phi, epsilon = 1e-6);
        }
    }

    #[test]
    fn component_preservation_is_exact() {
        // Two disjoint edges: cross-block entries of f are exactly zero.
        let x = SEMatrix::from_matching(4, &[(0, 1), (2, 3)], &[0.8, 1.7]).unwrap();
        let pi = [0.3, 0.2, 0.25, 0.25];
        let eval = se_map_f(&x, &pi, &mc(4, 4000, 3), DEFAULT_NULL_TOL).unwrap();
        for (r, s) in [(0usize, 2usize), (0, 3), (1, 2), (1, 3)] {
            assert_eq!(eval.raw[(r, s)], 0.0);
            assert_eq!(eval.matrix.matrix()[(r, s)], 0.0);
        }
    }

    #[test]
    fn iterate_from_zero_stays_zero() {
        let pi = vec![0.5, 0.5];
        let cfg = SEConfig::new(0.5, pi, gh2()).unwrap();
        let traj = se_iterate(&SEMatrix::zeros(2), &cfg).unwrap();
        assert!(traj.converged);
        assert_eq!(traj.fixed_point.matrix().norm(), 0.0);
        for s in &traj.steps {
            assert_eq!(s.mse, 0.0);
        }
    }

    #[test]
    fn binary_iterate_above_threshold_recovers() {
        // kappa = 0.6 > kappa*_binary(1/2) ~ 0.47: fixed point 0.
        let pi = vec![0.5, 0.5];
        let cfg = SEConfig::new(0.6, pi.clone(), gh2()).unwrap();
        let x0 = SEMatrix::noninformative(&pi, 0.6);
        let traj = se_iterate(&x0, &cfg).unwrap();
        assert!(traj.converged);
        let final_mse = traj.steps.last().unwrap().mse;
        assert!(final_mse < 1e-3, "mse = {final_mse}");
    }

    #[test]
    fn binary_iterate_below_threshold_matches_scalar_oracle() {
        // kappa = 0.3 < 0.47: nonzero fixed point a* u u^T; the scalar
        // iteration with the dense quadrature oracle is the reference.
        let kappa = 0.3;
        let pi = vec![0.5, 0.5];
        let cfg = SEConfig::new(kappa, pi.clone(), gh2()).unwrap();
        let x0 = SEMatrix::noninformative(&pi, kappa);
        let traj = se_iterate(&x0, &cfg).unwrap();
        assert!(traj.converged);

        let mut a = 0.25 / kappa;
        for _ in 0..2000 {
            let next = phi_binary_oracle(a, 0.5) / kappa;
            if (next - a).abs() < 1e-12 {
                break;
            }
            a = next;
        }
        assert!(a > 1e-3, "scalar fixed point collapsed: {a}");
        let x_star = traj.fixed_point.matrix();
        assert_abs_diff_eq!(x_star[(0, 0)], a, epsilon = 1e-4);
        // MSE_t = kappa trace(X_t), so the limit is 2 kappa a*.
        assert_abs_diff_eq!(
            traj.steps.last().unwrap().mse,
            2.0 * kappa * a,
            epsilon = 1e-3
        );

        // Per-step ray consistency: the full-matrix trajectory coefficient
        // tracks the scalar iteration.
        let mut a_t = 0.25 / kappa;
        for step in traj.steps.iter().skip(1).take(10) {
            a_t = phi_binary_oracle(a_t, 0.5) / kappa;
            let coeff = step.x[0];
            assert_abs_diff_eq!(coeff, a_t, epsilon = 1e-5);
        }
    }

    #[test]
    fn order_params_identities() {
        let pi = [0.2, 0.3, 0.5];
        let kappa = 0.5;
        let x0 = SEMatrix::zeros(3);
        let op = order_params_from_x(&x0, &pi, kappa).unwrap();
        for r in 0..3 {
            assert_abs_diff_eq!(op.m_mat[(r, r)], pi[r], epsilon = 1e-14);
        }

        let xn = SEMatrix::noninformative(&pi, kappa);
        let op = order_params_from_x(&xn, &pi, kappa).unwrap();
        for r in 0..3 {
            for s in 0..3 {
                assert_abs_diff_eq!(op.m_mat[(r, s)], pi[r] * pi[s], epsilon = 1e-12);
            }
            let row: f64 = (0..3).map(|s| op.m_mat[(r, s)]).sum();
            assert_abs_diff_eq!(row, pi[r], epsilon = 1e-10);
        }

        // Far outside the Nishimori region: M loses positive semidefiniteness.
        let too_big = xn.scale(50.0).unwrap();
        assert!(order_params_from_x(&too_big, &pi, kappa).is_err());
    }

    #[test]
    fn components_and_resistance() {
        let d = 3;
        let complete = SEMatrix::new(DMatrix::from_fn(d, d, |r, s| {
            if r == s {
                1.0 - 1.0 / d as f64
            } else {
                -1.0 / d as f64
            }
        }))
        .unwrap();
        let p = connected_components(&complete, 1e-9);
        assert_eq!(p.blocks, vec![vec![0, 1, 2]]);

        let two_edges = SEMatrix::from_matching(4, &[(0, 1), (2, 3)], &[1.0, 1.0]).unwrap();
        let p = connected_components(&two_edges, 1e-9);
        assert_eq!(p.blocks, vec![vec![0, 1], vec![2, 3]]);

        let zero = SEMatrix::zeros(3);
        assert_eq!(connected_components(&zero, 1e-9).blocks.len(), 3);

        // Single unit edge: R = 1. Unit path 0-1-2: R_02 = 2 (series).
        let edge = SEMatrix::from_matching(2, &[(0, 1)], &[1.0]).unwrap();
        assert_abs_diff_eq!(
            effective_resistance(&edge, 0, 1, DEFAULT_NULL_TOL).unwrap(),
            1.0,
            epsilon = 1e-10
        );
        let path = SEMatrix::new(DMatrix::from_row_slice(
            3,
            3,
            &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0],
        ))
        .unwrap();
        assert_abs_diff_eq!(
            effective_resistance(&path, 0, 2, DEFAULT_NULL_TOL).unwrap(),
            2.0,
            epsilon = 1e-10
        );
        assert!(effective_resistance(&two_edges, 0, 2, DEFAULT_NULL_TOL)
            .unwrap()
            .is_infinite());
    }

    #[test]
    fn limit_matrix_examples() {
        let pi = [0.2, 0.3, 0.5];
        // Single block: D - pi pi^T.
        let p1 = Partition {
            blocks: vec![vec![0, 1, 2]],
        };
        let l1 = limit_matrix(&p1, &pi).unwrap();
        let expected = SEMatrix::noninformative(&pi, 1.0);
        assert!((l1 - expected.matrix()).norm() < 1e-14);

        // Blocks {0,1} | {2}: direct arithmetic from the definition.
        let p2 = Partition {
            blocks: vec![vec![0, 1], vec![2]],
        };
        let l2 = limit_matrix(&p2, &pi).unwrap();
        let expect =
            DMatrix::from_row_slice(3, 3, &[0.12, -0.12, 0.0, -0.12, 0.12, 0.0, 0.0, 0.0, 0.0]);
        assert!((l2 - expect).norm() < 1e-12);

        // Singletons: the zero matrix.
        let l3 = limit_matrix(&Partition::singletons(3), &pi).unwrap();
        assert!(l3.norm() < 1e-14);

        // Zero-mass block is rejected.
        let bad_pi = [0.5, 0.5, 0.0];
        let p_bad = Partition {
            blocks: vec![vec![0, 1], vec![2]],
        };
        assert!(matches!(
            limit_matrix(&p_bad, &bad_pi),
            Err(Error::ZeroMassBlock { block: 1 })
        ));
    }

    #[test]
    fn f_is_dominated_by_limit_matrix() {
        // f(x) <= L_K + noise for block-structured x.
        let pi = [0.3, 0.2, 0.25, 0.25];
        let x = SEMatrix::from_matching(4, &[(0, 1), (2, 3)], &[2.0, 0.5]).unwrap();
        let eval = se_map_f(&x, &pi, &mc(4, 30_000, 11), DEFAULT_NULL_TOL).unwrap();
        let partition = connected_components(&x, 1e-9);
        let l = limit_matrix(&partition, &pi).unwrap();
        let gap = (l - &eval.raw).symmetric_eigen();
        let lambda_min = gap
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert!(
            lambda_min >= -noise_allowance(eval.std_err_frobenius()),
            "lambda_min = {lambda_min}"
        );
    }

    #[test]
    fn nishimori_residuals_zero_at_zero() {
        let pi = vec![0.4, 0.6];
        let cfg = SEConfig::new(0.5, pi.clone(), gh2()).unwrap();
        let traj = se_iterate(&SEMatrix::zeros(2), &cfg).unwrap();
        let report = check_nishimori(&traj, &pi, 0.5, &cfg.engine, DEFAULT_NULL_TOL).unwrap();
        assert!(report.ok);
        assert_eq!(report.max_residual, 0.0);
    }

    #[test]
    fn nishimori_holds_along_noninformative_trajectory() {
        let pi = vec![0.2, 0.3, 0.5];
        let kappa = 0.5;
        let engine = mc(3, 20_000, 21);
        let mut cfg = SEConfig::new(kappa, pi.clone(), engine.clone()).unwrap();
        cfg.max_iter = 8;
        let traj = se_iterate(&SEMatrix::noninformative(&pi, kappa), &cfg).unwrap();
        let report = check_nishimori(&traj, &pi, kappa, &engine, DEFAULT_NULL_TOL).unwrap();
        assert!(
            report.ok,
            "max residual {} exceeded allowance",
            report.max_residual
        );
    }

    #[test]
    fn monotonicity_identity_and_ray() {
        let pi = vec![0.5, 0.5];
        let x = SEMatrix::noninformative(&pi, 2.0);
        let engine = mc(2, 10_000, 5);
        // x = y: exactly zero difference under common random numbers.
        let rep = check_monotone_pair(&x, &x, &pi, &engine, DEFAULT_NULL_TOL).unwrap();
        assert_eq!(rep.lambda_min, 0.0);
        assert!(rep.pass);

        let y = x.scale(2.0).unwrap();
        let rep = check_monotone_pair(&x, &y, &pi, &engine, DEFAULT_NULL_TOL).unwrap();
        assert!(rep.pass, "lambda_min = {}", rep.lambda_min);

        // Violated precondition is rejected.
        assert!(check_monotone_pair(&y, &x, &pi, &engine, DEFAULT_NULL_TOL).is_err());
    }

    #[test]
    fn closure_on_random_laplacians() {
        // f maps the cone into itself (up to noise, handled by projection).
        use rand::{Rng, SeedableRng};
        let mut rng = rand_pcg::Pcg64Mcg::seed_from_u64(99);
        let pi = [0.1, 0.2, 0.3, 0.4];
        for trial in 0..5 {
            let mut x = DMatrix::<f64>::zeros(4, 4);
            for r in 0..4 {
                for s in (r + 1)..4 {
                    if rng.gen::<f64>() < 0.7 {
                        let w = rng.gen::<f64>() * 2.0;
                        x[(r, s)] -= w;
                        x[(s, r)] -= w;
                        x[(r, r)] += w;
                        x[(s, s)] += w;
                    }
                }
            }
            let x = SEMatrix::new(x).unwrap();
            let eval = se_map_f(&x, &pi, &mc(4, 8000, 100 + trial), DEFAULT_NULL_TOL)
                .unwrap_or_else(|e| panic!("trial {trial}: {e}"));
            // Projected output is a valid cone member by construction; check
            // the raw estimate was already close.
            let gap = (eval.matrix.matrix() - &eval.raw).norm();
            assert!(gap <= noise_allowance(eval.std_err_frobenius()).max(1e-12) * 4.0);
        }
    }
}
