//! Seeded Gaussian expectation evaluation.
//!
//! Every `E_g[...]` in the crate goes through [`ExpectationEngine`]: either
//! tensor-product Gauss-Hermite quadrature (dimensions 1 and 2) or seeded
//! Monte Carlo with antithetic pairing. Identical seed and configuration
//! produce a bit-identical sample set, which is what makes common-random-number
//! comparisons (monotonicity checks, threshold grids) meaningful.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_pcg::Pcg64Mcg;
use rayon::prelude::*;

use super::hermite::GaussHermiteRule;
use crate::error::{Error, Result};

/// How expectations are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    MonteCarlo,
    GaussHermite,
}

/// Configuration for `E_g[...]` with `g ~ N(0, I_dim)`.
#[derive(Debug, Clone)]
pub struct ExpectationEngine {
    dim: usize,
    method: Method,
    n_samples: usize,
    n_nodes: usize,
    seed: u64,
    antithetic: bool,
}

/// Default Gauss-Hermite resolution per axis.
pub const DEFAULT_GH_NODES: usize = 61;

impl ExpectationEngine {
    /// Monte Carlo engine with antithetic pairing (`n_samples` is the total
    /// number of integrand evaluations; it is rounded up to an even count).
    pub fn monte_carlo(dim: usize, n_samples: usize, seed: u64) -> Self {
        ExpectationEngine {
            dim,
            method: Method::MonteCarlo,
            n_samples: n_samples.max(2) + n_samples % 2,
            n_nodes: 0,
            seed,
            antithetic: true,
        }
    }

    /// Tensor-product Gauss-Hermite engine. Only dimensions 1 and 2 are
    /// supported; higher dimensions are not tensor-separable here.
    pub fn gauss_hermite(dim: usize, n_nodes: usize) -> Result<Self> {
        if dim == 0 || dim > 2 {
            return Err(Error::InvalidParam(format!(
                "gauss-hermite supports dim 1 or 2, got {dim}"
            )));
        }
        if n_nodes == 0 {
            return Err(Error::InvalidParam("n_nodes must be positive".into()));
        }
        Ok(ExpectationEngine {
            dim,
            method: Method::GaussHermite,
            n_samples: 0,
            n_nodes,
            seed: 0,
            antithetic: false,
        })
    }

    pub fn with_antithetic(mut self, antithetic: bool) -> Self {
        self.antithetic = antithetic;
        self
    }

    pub fn reseeded(&self, seed: u64) -> Self {
        let mut e = self.clone();
        e.seed = seed;
        e
    }

    pub fn with_dim(&self, dim: usize) -> Self {
        let mut e = self.clone();
        e.dim = dim;
        e
    }

    pub fn with_samples(&self, n_samples: usize) -> Self {
        let mut e = self.clone();
        e.n_samples = n_samples.max(2) + n_samples % 2;
        e
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    /// Materialize the deterministic sample set for this configuration.
    pub fn sample_set(&self) -> SampleSet {
        match self.method {
            Method::GaussHermite => {
                let rule = GaussHermiteRule::new(self.n_nodes);
                let (points, weights) = match self.dim {
                    1 => (rule.nodes.clone(), rule.weights.clone()),
                    2 => {
                        let n = rule.nodes.len();
                        let mut pts = Vec::with_capacity(2 * n * n);
                        let mut wts = Vec::with_capacity(n * n);
                        for i in 0..n {
                            for j in 0..n {
                                pts.push(rule.nodes[i]);
                                pts.push(rule.nodes[j]);
                                wts.push(rule.weights[i] * rule.weights[j]);
                            }
                        }
                        (pts, wts)
                    }
                    d => unreachable!("gauss-hermite engine with dim {d}"),
                };
                SampleSet {
                    dim: self.dim,
                    points,
                    weights: Some(weights),
                    antithetic: false,
                }
            }
            Method::MonteCarlo => {
                let mut rng = Pcg64Mcg::seed_from_u64(self.seed);
                let n = self.n_samples;
                let mut points = vec![0.0f64; n * self.dim];
                if self.antithetic {
                    // Draw one fresh vector per pair; the partner is its mirror.
                    for p in 0..n / 2 {
                        for k in 0..self.dim {
                            let g: f64 = StandardNormal.sample(&mut rng);
                            points[2 * p * self.dim + k] = g;
                            points[(2 * p + 1) * self.dim + k] = -g;
                        }
                    }
                } else {
                    for v in points.iter_mut() {
                        *v = StandardNormal.sample(&mut rng);
                    }
                }
                SampleSet {
                    dim: self.dim,
                    points,
                    weights: None,
                    antithetic: self.antithetic,
                }
            }
        }
    }

    /// Evaluate `E_g[f(g)]` for a vector-valued integrand writing `out_len`
    /// entries per evaluation. Returns the mean and a per-entry standard
    /// error (zero for quadrature).
    pub fn expect<F>(&self, out_len: usize, f: F) -> Result<(Vec<f64>, Vec<f64>)>
    where
        F: Fn(&[f64], &mut [f64]) + Sync,
    {
        self.sample_set().expect(out_len, f)
    }

    /// Scalar convenience wrapper around [`ExpectationEngine::expect`].
    pub fn expect_scalar<F>(&self, f: F) -> Result<(f64, f64)>
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let (m, s) = self.expect(1, |g, out| out[0] = f(g))?;
        Ok((m[0], s[0]))
    }
}

/// A concrete, ordered set of evaluation points (and weights for quadrature).
///
/// The set is the reproducibility contract: two engines with identical
/// configuration produce identical `SampleSet`s, hence identical expectations
/// for any integrand.
#[derive(Debug, Clone)]
pub struct SampleSet {
    dim: usize,
    points: Vec<f64>,
    weights: Option<Vec<f64>>,
    antithetic: bool,
}

// Pairs per parallel accumulation block; fixed so reductions are
// deterministic regardless of thread scheduling.
const BLOCK: usize = 512;

struct BlockAccum {
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.points.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// Mean and per-entry standard error of a vector-valued integrand.
    ///
    /// Monte Carlo statistics treat antithetic pairs as single units so the
    /// reported standard error stays honest under pairing. Accumulation is
    /// blocked and blocks are combined in index order, which keeps results
    /// bit-identical across runs and thread counts.
    pub fn expect<F>(&self, out_len: usize, f: F) -> Result<(Vec<f64>, Vec<f64>)>
    where
        F: Fn(&[f64], &mut [f64]) + Sync,
    {
        match &self.weights {
            Some(weights) => {
                let mut mean = vec![0.0; out_len];
                let mut buf = vec![0.0; out_len];
                for (i, &w) in weights.iter().enumerate() {
                    let g = self.point(i);
                    buf.iter_mut().for_each(|v| *v = 0.0);
                    f(g, &mut buf);
                    if buf.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFiniteIntegrand { sample: g.to_vec() });
                    }
                    for (m, b) in mean.iter_mut().zip(&buf) {
                        *m += w * b;
                    }
                }
                Ok((mean, vec![0.0; out_len]))
            }
            None => {
                let unit = if self.antithetic { 2 } else { 1 };
                let n_units = self.len() / unit;
                let n_blocks = n_units.div_ceil(BLOCK);

                let blocks: Vec<Result<BlockAccum>> = (0..n_blocks)
                    .into_par_iter()
                    .map(|b| {
                        let lo = b * BLOCK;
                        let hi = ((b + 1) * BLOCK).min(n_units);
                        let mut acc = BlockAccum {
                            sum: vec![0.0; out_len],
                            sumsq: vec![0.0; out_len],
                        };
                        let mut buf = vec![0.0; out_len];
                        let mut unit_val = vec![0.0; out_len];
                        for u in lo..hi {
                            unit_val.iter_mut().for_each(|v| *v = 0.0);
                            for k in 0..unit {
                                let g = self.point(u * unit + k);
                                buf.iter_mut().for_each(|v| *v = 0.0);
                                f(g, &mut buf);
                                if buf.iter().any(|v| !v.is_finite()) {
                                    return Err(Error::NonFiniteIntegrand { sample: g.to_vec() });
                                }
                                for (uv, b) in unit_val.iter_mut().zip(&buf) {
                                    *uv += b / unit as f64;
                                }
                            }
                            for j in 0..out_len {
                                acc.sum[j] += unit_val[j];
                                acc.sumsq[j] += unit_val[j] * unit_val[j];
                            }
                        }
                        Ok(acc)
                    })
                    .collect();

                let mut sum = vec![0.0; out_len];
                let mut sumsq = vec![0.0; out_len];
                for b in blocks {
                    let acc = b?;
                    for j in 0..out_len {
                        sum[j] += acc.sum[j];
                        sumsq[j] += acc.sumsq[j];
                    }
                }
                let n = n_units as f64;
                let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
                let std_err: Vec<f64> = (0..out_len)
                    .map(|j| {
                        if n_units < 2 {
                            f64::INFINITY
                        } else {
                            let var = ((sumsq[j] - n * mean[j] * mean[j]) / (n - 1.0)).max(0.0);
                            (var / n).sqrt()
                        }
                    })
                    .collect();
                Ok((mean, std_err))
            }
        }
    }
}

/// Free-function form matching the operation name used elsewhere.
pub fn gaussian_expect<F>(
    engine: &ExpectationEngine,
    out_len: usize,
    integrand: F,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    engine.expect(out_len, integrand)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn mc_mean_of_identity_is_zero_within_error() {
        let engine = ExpectationEngine::monte_carlo(3, 100_000, 7);
        let (mean, se) = engine.expect(3, |g, out| out.copy_from_slice(g)).unwrap();
        for k in 0..3 {
            // Antithetic pairing cancels odd integrands exactly.
            assert_abs_diff_eq!(mean[k], 0.0, epsilon = 1e-14);
            assert_abs_diff_eq!(se[k], 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn mc_covariance_is_identity() {
        let engine = ExpectationEngine::monte_carlo(2, 100_000, 11);
        let (mean, se) = engine
            .expect(4, |g, out| {
                out[0] = g[0] * g[0];
                out[1] = g[0] * g[1];
                out[2] = g[1] * g[0];
                out[3] = g[1] * g[1];
            })
            .unwrap();
        let target = [1.0, 0.0, 0.0, 1.0];
        for k in 0..4 {
            assert!(
                (mean[k] - target[k]).abs() <= 3.0 * se[k].max(1e-12) + 1e-2,
                "entry {k}: {} vs {} (se {})",
                mean[k],
                target[k],
                se[k]
            );
        }
    }

    #[test]
    fn gh_mgf_is_nearly_exact() {
        let engine = ExpectationEngine::gauss_hermite(1, 61).unwrap();
        let (m, s) = engine.expect_scalar(|g| g[0].exp()).unwrap();
        assert_abs_diff_eq!(m, (0.5f64).exp(), epsilon = 1e-8);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn gh_two_dim_product_moment() {
        let engine = ExpectationEngine::gauss_hermite(2, 31).unwrap();
        let (m, _) = engine.expect_scalar(|g| g[0] * g[0] * g[1] * g[1]).unwrap();
        assert_abs_diff_eq!(m, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn gh_rejects_high_dim() {
        assert!(ExpectationEngine::gauss_hermite(3, 21).is_err());
    }

    #[test]
    fn same_seed_same_result() {
        let a = ExpectationEngine::monte_carlo(4, 20_000, 99);
        let b = ExpectationEngine::monte_carlo(4, 20_000, 99);
        let f = |g: &[f64], out: &mut [f64]| {
            out[0] = (g[0] + 0.3 * g[1]).tanh() * g[2].cos() + g[3];
        };
        let (ma, _) = a.expect(1, f).unwrap();
        let (mb, _) = b.expect(1, f).unwrap();
        assert_eq!(ma[0].to_bits(), mb[0].to_bits());
    }

    #[test]
    fn non_finite_integrand_reports_sample() {
        let engine = ExpectationEngine::monte_carlo(1, 1000, 3);
        let err = engine
            .expect(1, |g, out| {
                out[0] = if g[0] > 0.0 { f64::NAN } else { 1.0 };
            })
            .unwrap_err();
        match err {
            Error::NonFiniteIntegrand { sample } => assert!(sample[0] > 0.0),
            other => panic!("unexpected error {other}"),
        }
    }
}
