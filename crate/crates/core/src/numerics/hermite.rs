//! Gauss-Hermite nodes and weights via the Golub-Welsch algorithm.

use nalgebra::DMatrix;

/// Nodes and weights in the probabilist convention:
/// `E[f(g)] ≈ Σ_i w_i f(x_i)` for `g ~ N(0,1)`, with `Σ_i w_i = 1`.
#[derive(Debug, Clone)]
pub struct GaussHermiteRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermiteRule {
    /// Build an `n`-node rule. Exact for polynomials up to degree `2n - 1`.
    ///
    /// The physicist-form Jacobi matrix is symmetric tridiagonal with zeros on
    /// the diagonal and `sqrt(k/2)` off it; its eigenvalues are the nodes and
    /// the squared first eigenvector components give the weights.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature needs at least one node");
        let mut jacobi = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let off = (k as f64 / 2.0).sqrt();
            jacobi[(k - 1, k)] = off;
            jacobi[(k, k - 1)] = off;
        }
        let eigen = jacobi.symmetric_eigen();

        let mut pairs: Vec<(f64, f64)> = eigen
            .eigenvalues
            .iter()
            .enumerate()
            .map(|(j, &x)| {
                let v0 = eigen.eigenvectors[(0, j)];
                (x, v0 * v0) // physicist weight / sqrt(pi)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

        // Symmetrize the +/- node pairs so odd integrands cancel exactly.
        let mut nodes: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let mut weights: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        for i in 0..n / 2 {
            let j = n - 1 - i;
            let x = 0.5 * (nodes[j] - nodes[i]);
            nodes[i] = -x;
            nodes[j] = x;
            let w = 0.5 * (weights[i] + weights[j]);
            weights[i] = w;
            weights[j] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }

        // Probabilist change of variables: x -> sqrt(2) x, weights normalized
        // so they sum to one.
        let total: f64 = weights.iter().sum();
        for i in 0..n {
            nodes[i] *= std::f64::consts::SQRT_2;
            weights[i] /= total;
        }
        GaussHermiteRule { nodes, weights }
    }

    /// `E[f(g)]` for scalar `f` and `g ~ N(0,1)`.
    pub fn expect(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}
