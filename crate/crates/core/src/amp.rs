//! The approximate message passing decoder and its relaxed belief propagation
//! reference, sharing the posterior-mean thresholding function `eta`.
//!
//! Both decoders work on the centered data. Every matrix the updates invert
//! (`V_a`, the per-variable precision) is exactly singular with the all-ones
//! vector in its null space, so all inverses are pseudo-inverses restricted to
//! `span(1)^perp`; the dynamics provably stay on that subspace.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::model::{error_metrics, hard_decisions, CenteredData, ErrorReport, HqpInstance};
use crate::numerics::SpectralPsd;

/// Knobs for both decoders.
#[derive(Debug, Clone)]
pub struct AmpConfig {
    pub max_iter: usize,
    /// Max-norm change of the estimates that counts as converged.
    pub conv_tol: f64,
    /// Convex blending weight of the previous estimates, in `[0, 1)`.
    /// Zero (the default) reproduces the plain iteration.
    pub damping: f64,
    /// Relative eigenvalue cutoff for all pseudo-inverses.
    pub pinv_tol: f64,
    /// Record the MSE against the planted solution after every sweep.
    pub track_mse: bool,
}

impl Default for AmpConfig {
    fn default() -> Self {
        AmpConfig {
            max_iter: 200,
            conv_tol: 1e-8,
            damping: 0.0,
            pinv_tol: 1e-10,
            track_mse: false,
        }
    }
}

impl AmpConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::InvalidParam(format!(
                "damping must be in [0, 1), got {}",
                self.damping
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Thresholding function
// ---------------------------------------------------------------------------

/// Scale floor used when deciding whether a residual genuinely leaves the
/// range: components below `null_tol * max(1, ||v||)` are floating-point
/// noise, not structure (the estimates live on the unit simplex).
fn excluded(null_norm: f64, v_norm: f64, null_tol: f64) -> bool {
    null_norm > null_tol * v_norm.max(1.0)
}

/// Posterior-mean thresholding with covariance `sigma`:
/// `eta_r ∝ pi_r exp(-1/2 (z - e_r)^T Sigma^{-1} (z - e_r))`.
///
/// The inverse is the pseudo-inverse on the range of `sigma`; when `z - e_r`
/// has a genuine null-space component the `r`-th weight is zero (the
/// zero-variance continuity convention). Computed in the log domain.
pub fn eta(z: &DVector<f64>, sigma: &SpectralPsd, pi: &[f64]) -> Result<DVector<f64>> {
    let d = pi.len();
    let mut log_w = vec![f64::NEG_INFINITY; d];
    for r in 0..d {
        if pi[r] <= 0.0 {
            continue;
        }
        let mut v = z.clone();
        v[r] -= 1.0;
        let (q, null_norm) = sigma.quad_pinv_split(&v);
        if excluded(null_norm, v.norm(), sigma.null_tol()) {
            continue;
        }
        log_w[r] = pi[r].ln() - 0.5 * q;
    }
    normalize_log_weights(&log_w)
}

/// Thresholding with an explicit precision matrix (`Sigma^{-1}` directly).
///
/// This is the form the decoders use: a null direction of the precision means
/// zero information (flat likelihood), so no category is ever excluded here.
pub fn eta_with_precision(
    z: &DVector<f64>,
    precision: &DMatrix<f64>,
    pi: &[f64],
) -> Result<DVector<f64>> {
    let d = pi.len();
    let mut log_w = vec![f64::NEG_INFINITY; d];
    let mut v = DVector::zeros(d);
    for r in 0..d {
        if pi[r] <= 0.0 {
            continue;
        }
        v.copy_from(z);
        v[r] -= 1.0;
        let q = (precision * &v).dot(&v).max(0.0);
        log_w[r] = pi[r].ln() - 0.5 * q;
    }
    normalize_log_weights(&log_w)
}

fn normalize_log_weights(log_w: &[f64]) -> Result<DVector<f64>> {
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(Error::AllWeightsZero);
    }
    let mut out = DVector::zeros(log_w.len());
    let mut total = 0.0;
    for (r, &lw) in log_w.iter().enumerate() {
        let w = (lw - m).exp();
        out[r] = w;
        total += w;
    }
    out /= total;
    Ok(out)
}

// ---------------------------------------------------------------------------
// AMP state and sweep
// ---------------------------------------------------------------------------

/// Per-iteration AMP quantities. Stacks of `d x d` matrices are stored
/// row-major in `d^2`-wide rows so the heavy updates are plain matrix
/// products against the (squared) sensing matrix.
#[derive(Debug, Clone)]
pub struct AmpState {
    /// Posterior estimates, `n x d`, rows on the simplex.
    pub x_hat: Array2<f64>,
    /// Posterior covariances `B_i = Diag(xhat_i) - xhat_i xhat_i^T`, `n x d^2`.
    pub b: Array2<f64>,
    /// Check-node means, `m x d`.
    pub omega: Array2<f64>,
    /// Check-node covariances, `m x d^2`.
    pub v: Array2<f64>,
    /// Pre-threshold estimates, `n x d`.
    pub z: Array2<f64>,
    /// Pre-threshold covariances, `n x d^2`.
    pub sigma: Array2<f64>,
    /// Previous check means (Onsager memory term).
    pub prev_omega: Array2<f64>,
    /// Pseudo-inverses of the previous check covariances.
    pub prev_v_pinv: Array2<f64>,
    /// Sweeps applied so far.
    pub iteration: usize,
}

impl AmpState {
    /// Non-informative initialization: `xhat_i = pi`, `B_i = Diag(pi) - pi pi^T`,
    /// `omega^{-1} = 0`, `V^{-1} = I`.
    pub fn init(n: usize, m: usize, pi: &[f64]) -> Self {
        let d = pi.len();
        let mut x_hat = Array2::<f64>::zeros((n, d));
        for mut row in x_hat.rows_mut() {
            for r in 0..d {
                row[r] = pi[r];
            }
        }
        let mut b = Array2::<f64>::zeros((n, d * d));
        let b_row = covariance_row(pi);
        for mut row in b.rows_mut() {
            row.assign(&ndarray::ArrayView1::from(&b_row));
        }
        let mut prev_v_pinv = Array2::<f64>::zeros((m, d * d));
        for mut row in prev_v_pinv.rows_mut() {
            for r in 0..d {
                row[r * d + r] = 1.0;
            }
        }
        AmpState {
            x_hat,
            b,
            omega: Array2::zeros((m, d)),
            v: Array2::zeros((m, d * d)),
            z: Array2::zeros((n, d)),
            sigma: Array2::zeros((n, d * d)),
            prev_omega: Array2::zeros((m, d)),
            prev_v_pinv,
            iteration: 0,
        }
    }

    /// All estimates exactly one-hot; the decoder is at a hard fixed point.
    fn is_hard_point(&self) -> bool {
        self.x_hat.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// `Diag(x) - x x^T` flattened row-major, with the diagonal assembled as the
/// negated off-diagonal row sum so row sums vanish to roundoff.
fn covariance_row(x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut row = vec![0.0; d * d];
    for r in 0..d {
        let mut off_sum = 0.0;
        for s in 0..d {
            if s != r {
                let v = -x[r] * x[s];
                row[r * d + s] = v;
                off_sum += v;
            }
        }
        row[r * d + r] = -off_sum;
    }
    row
}

/// Immutable per-run data for the sweeps: the centered matrices, their
/// transposes and squares (kept contiguous for the matrix products).
pub struct AmpContext<'a> {
    pub data: &'a CenteredData,
    pub pi: &'a [f64],
    pub cfg: &'a AmpConfig,
    a_t: Array2<f64>,
    asq: Array2<f64>,
    asq_t: Array2<f64>,
}

impl<'a> AmpContext<'a> {
    pub fn new(data: &'a CenteredData, pi: &'a [f64], cfg: &'a AmpConfig) -> Result<Self> {
        cfg.validate()?;
        let asq = data.a_bar.mapv(|v| v * v);
        Ok(AmpContext {
            data,
            pi,
            cfg,
            a_t: data.a_bar.t().as_standard_layout().into_owned(),
            asq_t: asq.t().as_standard_layout().into_owned(),
            asq,
        })
    }

    /// One full synchronous sweep in the derivation's order: all check nodes,
    /// then all variable nodes, then thresholding. Returns the max-norm change
    /// of the estimates.
    pub fn step(&self, state: &mut AmpState) -> Result<f64> {
        let d = self.pi.len();
        let (m, n) = (self.data.a_bar.nrows(), self.data.a_bar.ncols());
        let t = state.iteration;

        // Check-node update.
        let v_new = self.asq.dot(&state.b); // m x d^2
        let omega_lin = self.data.a_bar.dot(&state.x_hat); // m x d
        let mut omega_new = omega_lin;
        for a in 0..m {
            // Memory term V_a^t (V_a^{t-1})^{-1} (hbar_a - omega_a^{t-1}).
            let mut resid = DVector::<f64>::zeros(d);
            for r in 0..d {
                resid[r] = self.data.h_bar[(a, r)] - state.prev_omega[(a, r)];
            }
            let pinv_prev = dmatrix_from_row(state.prev_v_pinv.row(a).to_slice().unwrap(), d);
            let v_a = dmatrix_from_row(v_new.row(a).to_slice().unwrap(), d);
            let mem = &v_a * (pinv_prev * resid);
            for r in 0..d {
                omega_new[(a, r)] -= mem[r];
            }
        }

        // Pseudo-inverses of the new check covariances, and the per-check
        // contribution V_a^+ (hbar_a - omega_a).
        let mut v_pinv = Array2::<f64>::zeros((m, d * d));
        let mut c = Array2::<f64>::zeros((m, d));
        for a in 0..m {
            let v_a = dmatrix_from_row(v_new.row(a).to_slice().unwrap(), d);
            let spec =
                SpectralPsd::new(&v_a, self.cfg.pinv_tol).map_err(|e| Error::PinvFailure {
                    iteration: t,
                    node: a,
                    reason: format!("check covariance: {e}"),
                })?;
            let pinv = spec.pinv();
            let mut resid = DVector::<f64>::zeros(d);
            for r in 0..d {
                resid[r] = self.data.h_bar[(a, r)] - omega_new[(a, r)];
            }
            let ca = &pinv * resid;
            for r in 0..d {
                c[(a, r)] = ca[r];
                for s in 0..d {
                    v_pinv[(a, r * d + s)] = pinv[(r, s)];
                }
            }
        }

        // Variable-node update.
        let sigma_inv = self.asq_t.dot(&v_pinv); // n x d^2
        let s_field = self.a_t.dot(&c); // n x d

        let mut max_change = 0.0f64;
        for i in 0..n {
            let p_i = dmatrix_from_row(sigma_inv.row(i).to_slice().unwrap(), d);
            let spec =
                SpectralPsd::new(&p_i, self.cfg.pinv_tol).map_err(|e| Error::PinvFailure {
                    iteration: t,
                    node: i,
                    reason: format!("variable precision: {e}"),
                })?;
            let sigma_i = spec.pinv();
            let mut z_i = DVector::<f64>::zeros(d);
            for r in 0..d {
                let mut acc = state.x_hat[(i, r)];
                for s in 0..d {
                    acc += sigma_i[(r, s)] * s_field[(i, s)];
                }
                z_i[r] = acc;
            }
            let x_new = eta_with_precision(&z_i, &p_i, self.pi)?;
            let lambda = self.cfg.damping;
            for r in 0..d {
                let blended = (1.0 - lambda) * x_new[r] + lambda * state.x_hat[(i, r)];
                max_change = max_change.max((blended - state.x_hat[(i, r)]).abs());
                state.x_hat[(i, r)] = blended;
                state.z[(i, r)] = z_i[r];
                for s in 0..d {
                    state.sigma[(i, r * d + s)] = sigma_i[(r, s)];
                }
            }
            let b_row = covariance_row(state.x_hat.row(i).to_slice().unwrap());
            for (k, v) in b_row.into_iter().enumerate() {
                state.b[(i, k)] = v;
            }
        }

        state.prev_omega = omega_new.clone();
        state.prev_v_pinv = v_pinv;
        state.omega = omega_new;
        state.v = v_new;
        state.iteration = t + 1;
        Ok(max_change)
    }
}

fn dmatrix_from_row(row: &[f64], d: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, row)
}

/// Operation form of a single sweep: returns the advanced state.
pub fn amp_step(
    state: &AmpState,
    data: &CenteredData,
    pi: &[f64],
    cfg: &AmpConfig,
) -> Result<AmpState> {
    let ctx = AmpContext::new(data, pi, cfg)?;
    let mut next = state.clone();
    ctx.step(&mut next)?;
    Ok(next)
}

/// Everything a decode run produces.
#[derive(Debug, Clone)]
pub struct DecodeResult {
    /// Final posterior marginals, `n x d`.
    pub marginals: Array2<f64>,
    /// Per-row argmax with lowest-index tie break.
    pub hard: Vec<usize>,
    pub report: ErrorReport,
    pub iterations: usize,
    pub converged: bool,
}

/// Run AMP to convergence (or `max_iter`; non-convergence is reported, not an
/// error).
pub fn amp_decode(inst: &HqpInstance, cfg: &AmpConfig) -> Result<DecodeResult> {
    let data = inst.center();
    let ctx = AmpContext::new(&data, &inst.pi, cfg)?;
    let mut state = AmpState::init(inst.n, inst.m, &inst.pi);

    let mut per_iteration_mse = Vec::new();
    if cfg.track_mse {
        per_iteration_mse.push(error_metrics(&state.x_hat.view(), inst)?.mse);
    }

    let mut converged = false;
    for _ in 0..cfg.max_iter {
        let change = ctx.step(&mut state)?;
        if cfg.track_mse {
            per_iteration_mse.push(error_metrics(&state.x_hat.view(), inst)?.mse);
        }
        if change < cfg.conv_tol || state.is_hard_point() {
            converged = true;
            break;
        }
    }

    let mut report = error_metrics(&state.x_hat.view(), inst)?;
    report.per_iteration_mse = per_iteration_mse;
    let hard = hard_decisions(&state.x_hat.view());
    Ok(DecodeResult {
        marginals: state.x_hat.clone(),
        hard,
        report,
        iterations: state.iteration,
        converged,
    })
}

// ---------------------------------------------------------------------------
// Relaxed belief propagation
// ---------------------------------------------------------------------------

/// Size guard: RBP is O(d^3 n m) per sweep and keeps per-edge state.
const RBP_MAX_EDGES: usize = 10_000_000;

/// Edge-indexed relaxed BP messages. Edge `(i, a)` lives at row `i * m + a`
/// in the variable-to-check blocks and `a * n + i` in the check-to-variable
/// blocks. The per-edge `z` and `Sigma` are derived inside each sweep and not
/// stored.
#[derive(Debug, Clone)]
pub struct RbpState {
    /// Variable-to-check means `m_{i->a}` (simplex rows), `(n*m) x d`.
    pub msg: Array2<f64>,
    /// Variable-to-check covariances, `(n*m) x d^2`.
    pub b: Array2<f64>,
    /// Check-to-variable means `omega_{a->i}`, `(m*n) x d`.
    pub omega: Array2<f64>,
    /// Check-to-variable covariances, `(m*n) x d^2`.
    pub v: Array2<f64>,
}

impl RbpState {
    fn init(n: usize, m: usize, pi: &[f64]) -> Self {
        let d = pi.len();
        let mut msg = Array2::<f64>::zeros((n * m, d));
        for mut row in msg.rows_mut() {
            for r in 0..d {
                row[r] = pi[r];
            }
        }
        let mut b = Array2::<f64>::zeros((n * m, d * d));
        let b0 = covariance_row(pi);
        for mut row in b.rows_mut() {
            row.assign(&ndarray::ArrayView1::from(&b0));
        }
        RbpState {
            msg,
            b,
            omega: Array2::zeros((m * n, d)),
            v: Array2::zeros((m * n, d * d)),
        }
    }
}

/// Pseudo-inverse and residual image for every check-to-variable edge:
/// `(V_{a->i})^+` and `(V_{a->i})^+ (hbar_a - omega_{a->i})`.
fn rbp_edge_pinvs(
    state: &RbpState,
    data: &CenteredData,
    d: usize,
    pinv_tol: f64,
    sweep: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let edges = state.omega.nrows();
    let n = edges / data.h_bar.nrows().max(1);
    let mut v_pinv = Array2::<f64>::zeros((edges, d * d));
    let mut resid_c = Array2::<f64>::zeros((edges, d));
    for e in 0..edges {
        let a = e / n.max(1);
        let v_m = dmatrix_from_row(state.v.row(e).to_slice().unwrap(), d);
        let spec = SpectralPsd::new(&v_m, pinv_tol).map_err(|err| Error::PinvFailure {
            iteration: sweep,
            node: a,
            reason: format!("edge covariance: {err}"),
        })?;
        let pinv = spec.pinv();
        let mut resid = DVector::<f64>::zeros(d);
        for r in 0..d {
            resid[r] = data.h_bar[(a, r)] - state.omega[(e, r)];
        }
        let cr = &pinv * resid;
        for r in 0..d {
            resid_c[(e, r)] = cr[r];
            for s in 0..d {
                v_pinv[(e, r * d + s)] = pinv[(r, s)];
            }
        }
    }
    Ok((v_pinv, resid_c))
}

/// Run relaxed BP and return the node marginals (full-neighborhood variant of
/// the variable-side combination).
pub fn rbp_decode(inst: &HqpInstance, cfg: &AmpConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let (n, m, d) = (inst.n, inst.m, inst.d);
    if n.saturating_mul(m) > RBP_MAX_EDGES {
        return Err(Error::TooLarge(format!(
            "relaxed BP needs n*m <= {RBP_MAX_EDGES}, got {}",
            n * m
        )));
    }
    let data = inst.center();
    let a_bar = &data.a_bar;
    let pi = &inst.pi;
    let mut state = RbpState::init(n, m, pi);

    // Messages within this distance of a hard one-hot point are final; the
    // edge covariances they induce are too degenerate to keep inverting.
    const HARD_TOL: f64 = 1e-200;
    let hardened = |state: &RbpState| m > 0 && state.b.iter().all(|&v| v.abs() < HARD_TOL);
    // At a numerically hard point every outgoing message of a variable
    // coincides, so the node marginal is the message itself.
    let marginals_from_messages =
        |state: &RbpState| Array2::from_shape_fn((n, d), |(i, r)| state.msg[(i * m, r)]);

    for sweep in 0..cfg.max_iter {
        if hardened(&state) {
            return Ok(marginals_from_messages(&state));
        }
        // Check side: totals over incoming variable messages, then exact
        // cavity subtraction of the receiving variable's own contribution.
        for a in 0..m {
            let mut omega_tot = vec![0.0; d];
            let mut v_tot = vec![0.0; d * d];
            for i in 0..n {
                let w = a_bar[(a, i)];
                let e = i * m + a;
                for r in 0..d {
                    omega_tot[r] += w * state.msg[(e, r)];
                }
                let w2 = w * w;
                for k in 0..d * d {
                    v_tot[k] += w2 * state.b[(e, k)];
                }
            }
            for i in 0..n {
                let w = a_bar[(a, i)];
                let e_in = i * m + a;
                let e_out = a * n + i;
                for r in 0..d {
                    state.omega[(e_out, r)] = omega_tot[r] - w * state.msg[(e_in, r)];
                }
                let w2 = w * w;
                for k in 0..d * d {
                    state.v[(e_out, k)] = v_tot[k] - w2 * state.b[(e_in, k)];
                }
            }
        }

        // Variable side, same total-minus-own-edge pattern.
        let (v_pinv, resid_c) = rbp_edge_pinvs(&state, &data, d, cfg.pinv_tol, sweep)?;
        let mut max_change = 0.0f64;
        for i in 0..n {
            let mut p_tot = DMatrix::<f64>::zeros(d, d);
            let mut s_tot = DVector::<f64>::zeros(d);
            for a in 0..m {
                let e = a * n + i;
                let w = a_bar[(a, i)];
                let w2 = w * w;
                for r in 0..d {
                    s_tot[r] += w * resid_c[(e, r)];
                    for s in 0..d {
                        p_tot[(r, s)] += w2 * v_pinv[(e, r * d + s)];
                    }
                }
            }
            for a in 0..m {
                let e = a * n + i;
                let w = a_bar[(a, i)];
                let w2 = w * w;
                let mut p_cav = p_tot.clone();
                let mut s_cav = s_tot.clone();
                for r in 0..d {
                    s_cav[r] -= w * resid_c[(e, r)];
                    for s in 0..d {
                        p_cav[(r, s)] -= w2 * v_pinv[(e, r * d + s)];
                    }
                }
                let spec =
                    SpectralPsd::new(&p_cav, cfg.pinv_tol).map_err(|err| Error::PinvFailure {
                        iteration: sweep,
                        node: i,
                        reason: format!("edge precision: {err}"),
                    })?;
                let sigma = spec.pinv();
                let z = &sigma * &s_cav;
                let out = eta_with_precision(&z, &p_cav, pi)?;
                let e_out = i * m + a;
                let lambda = cfg.damping;
                for r in 0..d {
                    let blended = (1.0 - lambda) * out[r] + lambda * state.msg[(e_out, r)];
                    max_change = max_change.max((blended - state.msg[(e_out, r)]).abs());
                    state.msg[(e_out, r)] = blended;
                }
                let b_row = covariance_row(state.msg.row(e_out).to_slice().unwrap());
                for (k, val) in b_row.into_iter().enumerate() {
                    state.b[(e_out, k)] = val;
                }
            }
        }

        if max_change < cfg.conv_tol {
            break;
        }
    }

    // Node marginals from all incoming messages.
    if hardened(&state) {
        return Ok(marginals_from_messages(&state));
    }
    let (v_pinv, resid_c) = rbp_edge_pinvs(&state, &data, d, cfg.pinv_tol, cfg.max_iter)?;
    let mut marginals = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        let mut p_tot = DMatrix::<f64>::zeros(d, d);
        let mut s_tot = DVector::<f64>::zeros(d);
        for a in 0..m {
            let e = a * n + i;
            let w = a_bar[(a, i)];
            let w2 = w * w;
            for r in 0..d {
                s_tot[r] += w * resid_c[(e, r)];
                for s in 0..d {
                    p_tot[(r, s)] += w2 * v_pinv[(e, r * d + s)];
                }
            }
        }
        let spec = SpectralPsd::new(&p_tot, cfg.pinv_tol).map_err(|err| Error::PinvFailure {
            iteration: cfg.max_iter,
            node: i,
            reason: format!("marginal precision: {err}"),
        })?;
        let sigma = spec.pinv();
        let z = &sigma * &s_tot;
        let out = eta_with_precision(&z, &p_tot, pi)?;
        for r in 0..d {
            marginals[(i, r)] = out[r];
        }
    }
    Ok(marginals)
}

/// Max-norm violation of the simplex/orthogonality invariants kept by the
/// sweeps, for tests and diagnostics: estimate row sums against one, `B` and
/// `V` row sums against zero, and `1^T z` against one.
pub fn invariant_violation(state: &AmpState) -> f64 {
    let d = state.x_hat.ncols();
    let mut worst = 0.0f64;
    for i in 0..state.x_hat.nrows() {
        let s: f64 = state.x_hat.row(i).sum();
        worst = worst.max((s - 1.0).abs());
        for r in 0..d {
            let row: f64 = (0..d).map(|c| state.b[(i, r * d + c)]).sum();
            worst = worst.max(row.abs());
        }
        if state.iteration > 0 {
            let zs: f64 = state.z.row(i).sum();
            worst = worst.max((zs - 1.0).abs());
        }
    }
    for a in 0..state.v.nrows() {
        for r in 0..d {
            let row: f64 = (0..d).map(|c| state.v[(a, r * d + c)]).sum();
            worst = worst.max(row.abs());
        }
    }
    worst
}

pub fn rbp_message_simplex_violation(state: &RbpState) -> f64 {
    let mut worst = 0.0f64;
    for row in state.msg.rows() {
        let s: f64 = row.sum();
        worst = worst.max((s - 1.0).abs());
        for &v in row {
            worst = worst.max((-v).max(0.0));
        }
    }
    worst
}

/// Largest per-entry gap between two marginal tables.
pub fn marginal_gap(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_instance, Composition};
    use crate::numerics::DEFAULT_NULL_TOL;
    use approx::assert_abs_diff_eq;

    fn centered_projector(d: usize, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(d, d, |r, s| {
            scale * (f64::from(u8::from(r == s)) - 1.0 / d as f64)
        })
    }

    #[test]
    fn eta_prior_dominates_at_huge_variance() {
        let sigma = SpectralPsd::new(&centered_projector(2, 1e6), DEFAULT_NULL_TOL).unwrap();
        let z = DVector::from_vec(vec![3.0, -2.0]); // sums to one
        let out = eta(&z, &sigma, &[0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(out[0], 0.5, epsilon = 1e-3);
        assert_abs_diff_eq!(out[1], 0.5, epsilon = 1e-3);
    }

    #[test]
    fn eta_snaps_at_tiny_variance() {
        let sigma = SpectralPsd::new(&centered_projector(2, 1e-6), DEFAULT_NULL_TOL).unwrap();
        let z = DVector::from_vec(vec![1.0, 0.0]);
        let out = eta(&z, &sigma, &[0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(out[0], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn eta_matches_direct_scalar_evaluation() {
        // Independent oracle: evaluate the defining formula by hand for
        // d = 2, pi = (0.3, 0.7), z = (0.7, 0.3), Sigma = 0.5 (I - 11^T/2).
        // Sigma^+ = 2 (I - 11^T/2), so the quadratic forms are
        // q_r = 2 ||z - e_r||^2 (both residuals lie in span(1)^perp).
        let q1 = 2.0 * (0.3f64 * 0.3 + 0.3 * 0.3);
        let q2 = 2.0 * (0.7f64 * 0.7 + 0.7 * 0.7);
        let w1 = 0.3 * (-0.5 * q1).exp();
        let w2 = 0.7 * (-0.5 * q2).exp();
        let expect = [w1 / (w1 + w2), w2 / (w1 + w2)];

        let sigma = SpectralPsd::new(&centered_projector(2, 0.5), DEFAULT_NULL_TOL).unwrap();
        let z = DVector::from_vec(vec![0.7, 0.3]);
        let out = eta(&z, &sigma, &[0.3, 0.7]).unwrap();
        assert_abs_diff_eq!(out[0], expect[0], epsilon = 1e-14);
        assert_abs_diff_eq!(out[1], expect[1], epsilon = 1e-14);
        let s: f64 = out.iter().sum();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn eta_null_space_exclusion_and_failure() {
        // Zero covariance: only an exactly one-hot z keeps its own category.
        let sigma = SpectralPsd::new(&DMatrix::zeros(2, 2), DEFAULT_NULL_TOL).unwrap();
        let z = DVector::from_vec(vec![1.0, 0.0]);
        let out = eta(&z, &sigma, &[0.5, 0.5]).unwrap();
        assert_eq!(out[0], 1.0);

        let z = DVector::from_vec(vec![0.5, 0.5]);
        assert!(matches!(
            eta(&z, &sigma, &[0.5, 0.5]),
            Err(Error::AllWeightsZero)
        ));
    }

    #[test]
    fn first_sweep_matches_definitions() {
        let pi = vec![0.4, 0.6];
        let inst = generate_instance(40, 2, 12, 0.5, &pi, 5, Composition::Iid).unwrap();
        let data = inst.center();
        let cfg = AmpConfig::default();
        let state0 = AmpState::init(inst.n, inst.m, &pi);
        let state1 = amp_step(&state0, &data, &pi, &cfg).unwrap();

        // V_a = sum_j Abar_aj^2 B0 with constant B0.
        let b0 = covariance_row(&pi);
        for a in 0..inst.m {
            let w2: f64 = (0..inst.n).map(|i| data.a_bar[(a, i)].powi(2)).sum();
            for k in 0..4 {
                assert_abs_diff_eq!(state1.v[(a, k)], w2 * b0[k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn invariants_hold_across_sweeps() {
        let pi = vec![0.2, 0.3, 0.5];
        let inst = generate_instance(60, 3, 30, 0.5, &pi, 9, Composition::Iid).unwrap();
        let data = inst.center();
        let cfg = AmpConfig::default();
        let ctx = AmpContext::new(&data, &pi, &cfg).unwrap();
        let mut state = AmpState::init(inst.n, inst.m, &pi);
        for _ in 0..5 {
            ctx.step(&mut state).unwrap();
            assert!(
                invariant_violation(&state) < 1e-10,
                "violation {} at sweep {}",
                invariant_violation(&state),
                state.iteration
            );
            for &v in state.x_hat.iter() {
                assert!(v >= -1e-12 && v <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn decode_without_observations_returns_prior() {
        let pi = vec![0.3, 0.7];
        let inst = generate_instance(15, 2, 0, 0.5, &pi, 3, Composition::Iid).unwrap();
        let res = amp_decode(&inst, &AmpConfig::default()).unwrap();
        for i in 0..15 {
            assert_abs_diff_eq!(res.marginals[(i, 0)], 0.3, epsilon = 1e-12);
            assert_abs_diff_eq!(res.marginals[(i, 1)], 0.7, epsilon = 1e-12);
        }
    }

    #[test]
    fn label_permutation_commutes_with_decoding() {
        let pi = vec![0.3, 0.7];
        let inst = generate_instance(50, 2, 30, 0.5, &pi, 17, Composition::Iid).unwrap();
        let swapped = HqpInstance::from_parts(
            inst.planted.iter().map(|&r| 1 - r).collect(),
            inst.pools.clone(),
            2,
            inst.alpha,
            vec![0.7, 0.3],
            inst.seed,
        );
        let cfg = AmpConfig {
            max_iter: 20,
            ..Default::default()
        };
        let a = amp_decode(&inst, &cfg).unwrap();
        let b = amp_decode(&swapped, &cfg).unwrap();
        for i in 0..50 {
            assert_abs_diff_eq!(a.marginals[(i, 0)], b.marginals[(i, 1)], epsilon = 1e-9);
            assert_abs_diff_eq!(a.marginals[(i, 1)], b.marginals[(i, 0)], epsilon = 1e-9);
        }
    }

    #[test]
    fn above_threshold_small_instance_recovers() {
        // kappa = 0.7 at n = 500: comfortably above the binary threshold.
        let pi = vec![0.5, 0.5];
        let inst = generate_instance(500, 2, 350, 0.5, &pi, 23, Composition::Exact).unwrap();
        let res = amp_decode(&inst, &AmpConfig::default()).unwrap();
        assert!(res.report.mse < 1e-4, "mse = {}", res.report.mse);
        assert_eq!(res.hard, inst.planted);
    }

    #[test]
    fn rbp_without_observations_returns_prior() {
        let pi = vec![0.25, 0.75];
        let inst = generate_instance(8, 2, 0, 0.5, &pi, 31, Composition::Iid).unwrap();
        let marg = rbp_decode(&inst, &AmpConfig::default()).unwrap();
        for i in 0..8 {
            assert_abs_diff_eq!(marg[(i, 0)], 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn rbp_size_guard() {
        let pi = vec![0.5, 0.5];
        let mut inst = generate_instance(10, 2, 4, 0.5, &pi, 1, Composition::Iid).unwrap();
        inst.n = 10_000_000;
        inst.m = 2;
        assert!(matches!(
            rbp_decode(&inst, &AmpConfig::default()),
            Err(Error::TooLarge(_))
        ));
    }

    #[test]
    fn empty_pools_need_no_special_casing() {
        // A Bernoulli draw can produce an empty pool; its centered row is the
        // constant -alpha/sqrt(n) and must flow through the same updates.
        let pi = vec![0.5, 0.5];
        let mut pools = ndarray::Array2::<u8>::zeros((6, 40));
        let mut rng_state = 0x9E3779B97F4A7C15u64;
        for a in 1..6 {
            for i in 0..40 {
                rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
                pools[(a, i)] = u8::from(rng_state >> 63 == 1);
            }
        }
        // Row 0 stays empty.
        let planted: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let inst = HqpInstance::from_parts(planted, pools, 2, 0.5, pi, 1);
        assert_eq!(inst.pool_size(0), 0);
        let res = amp_decode(&inst, &AmpConfig::default()).unwrap();
        assert_eq!(res.marginals.nrows(), 40);
        for i in 0..40 {
            let s: f64 = (0..2).map(|r| res.marginals[(i, r)]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_damping() {
        let cfg = AmpConfig {
            damping: 1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
