//! The pooled-histogram observation model: instance generation, centering,
//! error metrics, and an exhaustive-posterior oracle for tiny instances.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64Mcg;

use crate::error::{Error, Result};
use crate::numerics::seed::mix;

pub mod io;

/// Tolerance for accepting a probability vector as lying on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// How planted categories are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Composition {
    /// Independent draws from `pi` (the probabilistic setting).
    Iid,
    /// Deterministic largest-remainder rounding of `n * pi`, then a shuffle.
    /// Makes empirical proportions match `pi` exactly when `n * pi` is
    /// integral, which the centering identity tests rely on.
    Exact,
}

/// A generated problem instance: planted categories, pooling matrix and the
/// exact integer histograms observed for each pool.
#[derive(Debug, Clone)]
pub struct HqpInstance {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    /// Pool inclusion probability.
    pub alpha: f64,
    /// Nominal category proportions (on the simplex).
    pub pi: Vec<f64>,
    /// Planted category index per individual.
    pub planted: Vec<usize>,
    /// Pool membership, `m x n`, entries 0/1.
    pub pools: Array2<u8>,
    /// Per-pool category counts, `m x d`.
    pub histograms: Array2<u64>,
    pub seed: u64,
}

/// Centered and rescaled observations.
#[derive(Debug, Clone)]
pub struct CenteredData {
    /// `(A - alpha 1 1^T) / sqrt(n)`, dense `m x n`.
    pub a_bar: Array2<f64>,
    /// `(h_a - alpha n pi) / sqrt(n)` stacked as `m x d`.
    pub h_bar: Array2<f64>,
}

/// Recovery quality of a set of simplex-valued estimates.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct ErrorReport {
    /// `(1/n) sum_i ||xhat_i - x*_i||^2`.
    pub mse: f64,
    /// `1 - (1/n) sum_i xhat_i . x*_i`.
    pub zero_one: f64,
    /// MSE after each sweep, when tracking was requested.
    pub per_iteration_mse: Vec<f64>,
}

pub fn validate_simplex(pi: &[f64]) -> Result<()> {
    if pi.is_empty() {
        return Err(Error::InvalidParam("pi must be non-empty".into()));
    }
    if pi.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidParam(format!(
            "pi entries must be finite and non-negative, got {pi:?}"
        )));
    }
    let sum: f64 = pi.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidParam(format!(
            "pi must sum to 1 within {SIMPLEX_TOL:.0e}, got sum {sum}"
        )));
    }
    Ok(())
}

/// Largest-remainder rounding of `n * pi`, ties broken toward lower index.
fn exact_counts(n: usize, pi: &[f64]) -> Vec<usize> {
    let d = pi.len();
    let mut counts: Vec<usize> = pi
        .iter()
        .map(|&p| (p * n as f64).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = (0..d).map(|r| (r, p_frac(pi[r] * n as f64))).collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..n.saturating_sub(assigned) {
        counts[remainders[k % d].0] += 1;
    }
    counts
}

fn p_frac(x: f64) -> f64 {
    x - x.floor()
}

/// Draw a full instance: planted categories, Bernoulli(alpha) pools and the
/// exact histograms. Reproducible from `seed` (planted categories and pool
/// membership use separate derived streams).
pub fn generate_instance(
    n: usize,
    d: usize,
    m: usize,
    alpha: f64,
    pi: &[f64],
    seed: u64,
    composition: Composition,
) -> Result<HqpInstance> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidParam("n and d must be positive".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParam(format!(
            "alpha must be in (0, 1], got {alpha}"
        )));
    }
    if pi.len() != d {
        return Err(Error::InvalidParam(format!(
            "pi has length {}, expected d = {d}",
            pi.len()
        )));
    }
    validate_simplex(pi)?;

    let mut planted_rng = Pcg64Mcg::seed_from_u64(mix(seed, 1));
    let planted: Vec<usize> = match composition {
        Composition::Iid => {
            let mut cum = vec![0.0; d];
            let mut acc = 0.0;
            for r in 0..d {
                acc += pi[r];
                cum[r] = acc;
            }
            (0..n)
                .map(|_| {
                    let u: f64 = planted_rng.gen();
                    cum.iter().position(|&c| u < c).unwrap_or(d - 1)
                })
                .collect()
        }
        Composition::Exact => {
            let counts = exact_counts(n, pi);
            let mut labels = Vec::with_capacity(n);
            for (r, &c) in counts.iter().enumerate() {
                labels.extend(std::iter::repeat(r).take(c));
            }
            labels.shuffle(&mut planted_rng);
            labels
        }
    };

    let mut pools_rng = Pcg64Mcg::seed_from_u64(mix(seed, 2));
    let mut pools = Array2::<u8>::zeros((m, n));
    for a in 0..m {
        for i in 0..n {
            let u: f64 = pools_rng.gen();
            pools[(a, i)] = u8::from(u < alpha);
        }
    }

    Ok(HqpInstance::from_parts(
        planted,
        pools,
        d,
        alpha,
        pi.to_vec(),
        seed,
    ))
}

impl HqpInstance {
    /// Assemble an instance from explicit planted categories and pools,
    /// computing the histograms exactly in integer arithmetic.
    pub fn from_parts(
        planted: Vec<usize>,
        pools: Array2<u8>,
        d: usize,
        alpha: f64,
        pi: Vec<f64>,
        seed: u64,
    ) -> Self {
        let m = pools.nrows();
        let n = pools.ncols();
        assert_eq!(planted.len(), n, "planted length must equal pool columns");
        let mut histograms = Array2::<u64>::zeros((m, d));
        for a in 0..m {
            for i in 0..n {
                if pools[(a, i)] != 0 {
                    histograms[(a, planted[i])] += 1;
                }
            }
        }
        HqpInstance {
            n,
            d,
            m,
            alpha,
            pi,
            planted,
            pools,
            histograms,
            seed,
        }
    }

    /// One-hot row matrix of the planted solution.
    pub fn planted_onehot(&self) -> Array2<f64> {
        let mut x = Array2::<f64>::zeros((self.n, self.d));
        for (i, &r) in self.planted.iter().enumerate() {
            x[(i, r)] = 1.0;
        }
        x
    }

    /// Size of pool `a`.
    pub fn pool_size(&self, a: usize) -> u64 {
        (0..self.n).map(|i| self.pools[(a, i)] as u64).sum()
    }

    /// Center and rescale the observations using the nominal proportions.
    pub fn center(&self) -> CenteredData {
        let n = self.n as f64;
        let sqrt_n = n.sqrt();
        let a_bar = self.pools.mapv(|v| (v as f64 - self.alpha) / sqrt_n);
        let mut h_bar = Array2::<f64>::zeros((self.m, self.d));
        for a in 0..self.m {
            for r in 0..self.d {
                h_bar[(a, r)] =
                    (self.histograms[(a, r)] as f64 - self.alpha * n * self.pi[r]) / sqrt_n;
            }
        }
        CenteredData { a_bar, h_bar }
    }
}

/// Operation form of [`HqpInstance::center`].
pub fn center_data(inst: &HqpInstance) -> CenteredData {
    inst.center()
}

impl CenteredData {
    /// Coordinate-sum self check: for any simplex-valued estimate rows, the
    /// residual `h_bar_a - A_bar_a xhat` has zero coordinate sum. Returns the
    /// largest absolute coordinate sum across pools.
    pub fn centering_residual(&self, estimates: &ArrayView2<f64>) -> f64 {
        let fitted = self.a_bar.dot(estimates);
        let mut worst = 0.0f64;
        for a in 0..self.h_bar.nrows() {
            let s: f64 = (0..self.h_bar.ncols())
                .map(|r| self.h_bar[(a, r)] - fitted[(a, r)])
                .sum();
            worst = worst.max(s.abs());
        }
        worst
    }
}

/// MSE and 0-1 error of simplex-valued estimates against the planted truth.
pub fn error_metrics(estimates: &ArrayView2<f64>, inst: &HqpInstance) -> Result<ErrorReport> {
    if estimates.nrows() != inst.n || estimates.ncols() != inst.d {
        return Err(Error::InvalidParam(format!(
            "estimates are {}x{}, expected {}x{}",
            estimates.nrows(),
            estimates.ncols(),
            inst.n,
            inst.d
        )));
    }
    for i in 0..inst.n {
        let row = estimates.row(i);
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > 1e-8 || row.iter().any(|&v| v < -1e-8) {
            return Err(Error::InvalidParam(format!(
                "estimate row {i} is off the simplex (sum {sum})"
            )));
        }
    }
    let mut mse = 0.0;
    let mut overlap = 0.0;
    for i in 0..inst.n {
        let t = inst.planted[i];
        for r in 0..inst.d {
            let diff = estimates[(i, r)] - f64::from(u8::from(r == t));
            mse += diff * diff;
        }
        overlap += estimates[(i, t)];
    }
    let n = inst.n as f64;
    Ok(ErrorReport {
        mse: mse / n,
        zero_one: 1.0 - overlap / n,
        per_iteration_mse: Vec::new(),
    })
}

/// Largest admissible assignment space for the enumeration oracle.
const MAX_ENUMERATION: f64 = 16_777_216.0; // 2^24

/// Exact posterior marginals by enumeration over all `d^n` assignments,
/// conditioning on every histogram constraint holding exactly.
///
/// Only valid for tiny instances; the assignment space is capped at `2^24`.
pub fn exhaustive_posterior(inst: &HqpInstance) -> Result<Array2<f64>> {
    let size = (inst.d as f64).powi(inst.n as i32);
    if size > MAX_ENUMERATION {
        return Err(Error::TooLarge(format!(
            "d^n = {size:.3e} exceeds the enumeration cap {MAX_ENUMERATION:.3e}"
        )));
    }

    // Pools touching each individual, and counts still available per pool.
    let pools_of: Vec<Vec<usize>> = (0..inst.n)
        .map(|i| (0..inst.m).filter(|&a| inst.pools[(a, i)] != 0).collect())
        .collect();
    let mut remaining: Vec<Vec<i64>> = (0..inst.m)
        .map(|a| {
            (0..inst.d)
                .map(|r| inst.histograms[(a, r)] as i64)
                .collect()
        })
        .collect();

    let mut marginals = Array2::<f64>::zeros((inst.n, inst.d));
    let mut assignment = vec![0usize; inst.n];
    let mut total_mass = 0.0f64;

    fn dfs(
        i: usize,
        weight: f64,
        inst: &HqpInstance,
        pools_of: &[Vec<usize>],
        remaining: &mut [Vec<i64>],
        assignment: &mut [usize],
        marginals: &mut Array2<f64>,
        total_mass: &mut f64,
    ) {
        if i == inst.n {
            // Pruning keeps all remaining counts non-negative, and they sum to
            // zero at a full assignment, so reaching here means consistency.
            *total_mass += weight;
            for (j, &r) in assignment.iter().enumerate() {
                marginals[(j, r)] += weight;
            }
            return;
        }
        for r in 0..inst.d {
            if inst.pi[r] <= 0.0 {
                continue;
            }
            if pools_of[i].iter().any(|&a| remaining[a][r] == 0) {
                continue;
            }
            for &a in &pools_of[i] {
                remaining[a][r] -= 1;
            }
            assignment[i] = r;
            dfs(
                i + 1,
                weight * inst.pi[r],
                inst,
                pools_of,
                remaining,
                assignment,
                marginals,
                total_mass,
            );
            for &a in &pools_of[i] {
                remaining[a][r] += 1;
            }
        }
    }

    dfs(
        0,
        1.0,
        inst,
        &pools_of,
        &mut remaining,
        &mut assignment,
        &mut marginals,
        &mut total_mass,
    );

    if total_mass <= 0.0 {
        return Err(Error::InconsistentHistograms);
    }
    marginals.mapv_inplace(|v| v / total_mass);
    Ok(marginals)
}

/// Per-row argmax with lowest-index tie break.
pub fn hard_decisions(marginals: &ArrayView2<f64>) -> Vec<usize> {
    (0..marginals.nrows())
        .map(|i| {
            let row = marginals.row(i);
            let mut best = 0;
            for r in 1..row.len() {
                if row[r] > row[best] {
                    best = r;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn uniform(d: usize) -> Vec<f64> {
        vec![1.0 / d as f64; d]
    }

    #[test]
    fn histogram_counts_directly() {
        // Three individuals all in category 0; the pool {0, 1} counts two.
        let pools = array![[1u8, 1, 0]];
        let inst = HqpInstance::from_parts(vec![0, 0, 0], pools, 2, 0.5, vec![0.5, 0.5], 0);
        assert_eq!(inst.histograms[(0, 0)], 2);
        assert_eq!(inst.histograms[(0, 1)], 0);
    }

    #[test]
    fn alpha_one_pools_everything() {
        let inst = generate_instance(40, 3, 5, 1.0, &uniform(3), 7, Composition::Iid).unwrap();
        let mut totals = vec![0u64; 3];
        for &r in &inst.planted {
            totals[r] += 1;
        }
        for a in 0..inst.m {
            assert_eq!(inst.pool_size(a), 40);
            for r in 0..3 {
                assert_eq!(inst.histograms[(a, r)], totals[r]);
            }
        }
    }

    #[test]
    fn single_category_histograms_are_pool_sizes() {
        let inst = generate_instance(30, 1, 8, 0.4, &[1.0], 3, Composition::Iid).unwrap();
        for a in 0..inst.m {
            assert_eq!(inst.histograms[(a, 0)], inst.pool_size(a));
        }
    }

    #[test]
    fn histogram_rows_sum_to_pool_sizes() {
        let inst = generate_instance(100, 4, 25, 0.3, &[0.1, 0.2, 0.3, 0.4], 11, Composition::Iid)
            .unwrap();
        for a in 0..inst.m {
            let row_sum: u64 = (0..4).map(|r| inst.histograms[(a, r)]).sum();
            assert_eq!(row_sum, inst.pool_size(a));
        }
    }

    #[test]
    fn exact_composition_matches_pi() {
        let pi = vec![0.2, 0.3, 0.5];
        let inst = generate_instance(20, 3, 0, 0.5, &pi, 5, Composition::Exact).unwrap();
        let mut counts = vec![0usize; 3];
        for &r in &inst.planted {
            counts[r] += 1;
        }
        assert_eq!(counts, vec![4, 6, 10]);
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let pi = uniform(2);
        let a = generate_instance(50, 2, 10, 0.5, &pi, 99, Composition::Iid).unwrap();
        let b = generate_instance(50, 2, 10, 0.5, &pi, 99, Composition::Iid).unwrap();
        assert_eq!(a.planted, b.planted);
        assert_eq!(a.pools, b.pools);
        assert_eq!(a.histograms, b.histograms);
    }

    #[test]
    fn rejects_off_simplex_pi() {
        assert!(generate_instance(10, 2, 3, 0.5, &[0.6, 0.6], 1, Composition::Iid).is_err());
    }

    #[test]
    fn centering_alpha_one() {
        let inst = generate_instance(4, 2, 3, 1.0, &uniform(2), 13, Composition::Iid).unwrap();
        let cd = inst.center();
        assert!(cd.a_bar.iter().all(|&v| v == 0.0));
        for a in 0..3 {
            for r in 0..2 {
                let expected = (inst.histograms[(a, r)] as f64 - 4.0 * 0.5) / 2.0;
                assert_abs_diff_eq!(cd.h_bar[(a, r)], expected, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn centered_identity_under_exact_composition() {
        // h_bar_a equals A_bar x* row-wise when the empirical proportions
        // equal pi exactly.
        let pi = vec![0.25, 0.75];
        let inst = generate_instance(16, 2, 6, 0.5, &pi, 21, Composition::Exact).unwrap();
        let cd = inst.center();
        let x_star = inst.planted_onehot();
        let fitted = cd.a_bar.dot(&x_star);
        for a in 0..inst.m {
            for r in 0..inst.d {
                assert_abs_diff_eq!(cd.h_bar[(a, r)], fitted[(a, r)], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn centering_residual_sum_is_zero() {
        let inst = generate_instance(100, 2, 12, 0.5, &uniform(2), 17, Composition::Iid).unwrap();
        let cd = inst.center();
        // Any simplex-valued estimates: use constant pi rows.
        let est = Array2::from_shape_fn((100, 2), |(_, r)| inst.pi[r]);
        assert!(cd.centering_residual(&est.view()) < 1e-10);
    }

    #[test]
    fn metrics_on_perfect_and_prior_estimates() {
        let d = 4;
        let inst = generate_instance(32, d, 4, 0.5, &uniform(d), 23, Composition::Exact).unwrap();
        let perfect = inst.planted_onehot();
        let rep = error_metrics(&perfect.view(), &inst).unwrap();
        assert_eq!(rep.mse, 0.0);
        assert_eq!(rep.zero_one, 0.0);

        let prior = Array2::from_shape_fn((32, d), |(_, r)| inst.pi[r]);
        let rep = error_metrics(&prior.view(), &inst).unwrap();
        assert_abs_diff_eq!(rep.mse, 1.0 - 1.0 / d as f64, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.zero_one, 1.0 - 1.0 / d as f64, epsilon = 1e-12);
    }

    #[test]
    fn zero_one_for_general_pi_prior() {
        let pi = vec![0.2, 0.3, 0.5];
        let inst = generate_instance(30, 3, 4, 0.5, &pi, 29, Composition::Exact).unwrap();
        let prior = Array2::from_shape_fn((30, 3), |(_, r)| pi[r]);
        let rep = error_metrics(&prior.view(), &inst).unwrap();
        let sum_sq: f64 = pi.iter().map(|p| p * p).sum();
        assert_abs_diff_eq!(rep.zero_one, 1.0 - sum_sq, epsilon = 1e-12);
    }

    #[test]
    fn metrics_reject_off_simplex_rows() {
        let inst = generate_instance(5, 2, 2, 0.5, &uniform(2), 31, Composition::Iid).unwrap();
        let est = Array2::from_elem((5, 2), 0.6);
        assert!(error_metrics(&est.view(), &inst).is_err());
    }

    #[test]
    fn posterior_without_observations_is_prior() {
        let pi = vec![0.2, 0.8];
        let inst = generate_instance(6, 2, 0, 0.5, &pi, 37, Composition::Iid).unwrap();
        let marg = exhaustive_posterior(&inst).unwrap();
        for i in 0..6 {
            assert_abs_diff_eq!(marg[(i, 0)], 0.2, epsilon = 1e-12);
            assert_abs_diff_eq!(marg[(i, 1)], 0.8, epsilon = 1e-12);
        }
    }

    #[test]
    fn posterior_fully_observed_is_point_mass() {
        let pools = array![[1u8, 0], [0, 1]];
        let inst = HqpInstance::from_parts(vec![1, 0], pools, 2, 0.5, vec![0.5, 0.5], 0);
        let marg = exhaustive_posterior(&inst).unwrap();
        assert_abs_diff_eq!(marg[(0, 1)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(marg[(1, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn posterior_rows_sum_to_one_and_labels_commute() {
        let pi = vec![0.3, 0.7];
        let inst = generate_instance(8, 2, 6, 0.5, &pi, 41, Composition::Iid).unwrap();
        let marg = exhaustive_posterior(&inst).unwrap();
        for i in 0..8 {
            let s: f64 = (0..2).map(|r| marg[(i, r)]).sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }

        // Swap labels 0 <-> 1 everywhere; marginals must swap identically.
        let swapped = HqpInstance::from_parts(
            inst.planted.iter().map(|&r| 1 - r).collect(),
            inst.pools.clone(),
            2,
            inst.alpha,
            vec![0.7, 0.3],
            inst.seed,
        );
        let marg_swapped = exhaustive_posterior(&swapped).unwrap();
        for i in 0..8 {
            assert_abs_diff_eq!(marg[(i, 0)], marg_swapped[(i, 1)], epsilon = 1e-12);
            assert_abs_diff_eq!(marg[(i, 1)], marg_swapped[(i, 0)], epsilon = 1e-12);
        }
    }

    #[test]
    fn inconsistent_histograms_are_detected() {
        let pools = array![[1u8, 1]];
        let mut inst = HqpInstance::from_parts(vec![0, 0], pools, 2, 0.5, vec![0.5, 0.5], 0);
        // Claim a count that no assignment can produce.
        inst.histograms[(0, 0)] = 0;
        inst.histograms[(0, 1)] = 0;
        assert!(matches!(
            exhaustive_posterior(&inst),
            Err(Error::InconsistentHistograms)
        ));
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let inst = generate_instance(40, 3, 2, 0.5, &uniform(3), 43, Composition::Iid).unwrap();
        assert!(matches!(
            exhaustive_posterior(&inst),
            Err(Error::TooLarge(_))
        ));
    }

    #[test]
    fn hard_decisions_break_ties_low() {
        let marg = array![[0.5, 0.5], [0.2, 0.8]];
        assert_eq!(hard_decisions(&marg.view()), vec![0, 1]);
    }
}
