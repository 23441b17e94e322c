//! Spectral operations on positive semi-definite matrices.
//!
//! The state-evolution map and the AMP updates constantly apply `X^{-1/2}` and
//! `X^{-1}` to matrices that are *exactly* singular (their null space contains
//! the all-ones vector). All inverses here are pseudo-inverses restricted to
//! the range, with eigenvalues below `null_tol * lambda_max` treated as exact
//! zeros. Vectors with a null-space component are flagged so callers can apply
//! the `exp(-inf) = 0` continuity convention.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default relative cutoff below which eigenvalues count as zero.
pub const DEFAULT_NULL_TOL: f64 = 1e-10;

/// Relative tolerance for accepting a matrix as symmetric PSD.
const PSD_INPUT_TOL: f64 = 1e-10;

/// Eigendecomposition of a PSD matrix with an explicit null-space convention.
#[derive(Debug, Clone)]
pub struct SpectralPsd {
    /// Non-negative eigenvalues, descending; entries below the cutoff are 0.
    eigenvalues: DVector<f64>,
    /// Orthonormal eigenvectors, columns matching `eigenvalues`.
    eigenvectors: DMatrix<f64>,
    null_tol: f64,
    rank: usize,
}

impl SpectralPsd {
    /// Decompose `x`, rejecting inputs that are asymmetric or indefinite
    /// beyond a small relative tolerance.
    pub fn new(x: &DMatrix<f64>, null_tol: f64) -> Result<Self> {
        let d = x.nrows();
        if x.ncols() != d {
            return Err(Error::InvalidParam("matrix must be square".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam(
                "matrix contains non-finite entries".into(),
            ));
        }
        let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        let mut max_asym = 0.0f64;
        for r in 0..d {
            for s in (r + 1)..d {
                max_asym = max_asym.max((x[(r, s)] - x[(s, r)]).abs());
            }
        }
        if max_asym > PSD_INPUT_TOL * scale {
            return Err(Error::NotSymmetric { max_asym, scale });
        }

        let sym = DMatrix::from_fn(d, d, |r, s| 0.5 * (x[(r, s)] + x[(s, r)]));
        let eigen = sym.symmetric_eigen();

        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| {
            eigen.eigenvalues[b]
                .partial_cmp(&eigen.eigenvalues[a])
                .unwrap()
        });

        let lambda_max = if d == 0 {
            0.0
        } else {
            eigen.eigenvalues[order[0]].max(0.0)
        };
        let lambda_min = order.last().map_or(0.0, |&i| eigen.eigenvalues[i]);
        if lambda_min < -PSD_INPUT_TOL * lambda_max.max(1.0) {
            return Err(Error::NotPsd {
                lambda_min,
                lambda_max,
            });
        }

        // The floor keeps reciprocals of retained eigenvalues finite even
        // when the whole matrix has collapsed toward zero.
        let cutoff = (null_tol * lambda_max).max(1e-300);
        let mut eigenvalues = DVector::zeros(d);
        let mut eigenvectors = DMatrix::zeros(d, d);
        let mut rank = 0;
        for (k, &i) in order.iter().enumerate() {
            let lam = eigen.eigenvalues[i];
            let lam = if lam > cutoff && lam > 0.0 { lam } else { 0.0 };
            eigenvalues[k] = lam;
            eigenvectors.set_column(k, &eigen.eigenvectors.column(i));
            if lam > 0.0 {
                rank = k + 1;
            }
        }
        Ok(SpectralPsd {
            eigenvalues,
            eigenvectors,
            null_tol,
            rank,
        })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn null_tol(&self) -> f64 {
        self.null_tol
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn lambda_max(&self) -> f64 {
        if self.dim() == 0 {
            0.0
        } else {
            self.eigenvalues[0]
        }
    }

    /// Coordinates of `v` in the eigenbasis (all `dim` of them).
    fn coords(&self, v: &DVector<f64>) -> DVector<f64> {
        self.eigenvectors.transpose() * v
    }

    /// Eigenbasis coordinates of `v` together with the norm of its
    /// null-space component.
    fn range_split(&self, v: &DVector<f64>) -> (DVector<f64>, f64) {
        let c = self.coords(v);
        let mut null_sq = 0.0;
        for k in self.rank..self.dim() {
            null_sq += c[k] * c[k];
        }
        (c, null_sq.sqrt())
    }

    /// Norm of the component of `v` outside the range.
    pub fn null_component_norm(&self, v: &DVector<f64>) -> f64 {
        self.range_split(v).1
    }

    /// `v` is in range when its null-space component is at most
    /// `null_tol * ||v||`; callers treat a violation as infinite effective
    /// resistance.
    fn in_range(&self, v: &DVector<f64>, null_norm: f64) -> bool {
        null_norm <= self.null_tol * v.norm() + f64::MIN_POSITIVE
    }

    /// `X^{-1/2} v` computed on the range; the flag is false when `v` has a
    /// null-space component beyond tolerance.
    pub fn pinv_sqrt_apply(&self, v: &DVector<f64>) -> (DVector<f64>, bool) {
        let (c, null_norm) = self.range_split(v);
        let mut w = DVector::zeros(self.dim());
        for k in 0..self.rank {
            let scale = c[k] / self.eigenvalues[k].sqrt();
            w.axpy(scale, &self.eigenvectors.column(k).into_owned(), 1.0);
        }
        (w, self.in_range(v, null_norm))
    }

    /// `v^T X^{+} v` plus the range flag (the squared `X^{-1/2}` image norm).
    pub fn quad_pinv(&self, v: &DVector<f64>) -> (f64, bool) {
        let (c, null_norm) = self.range_split(v);
        let mut q = 0.0;
        for k in 0..self.rank {
            q += c[k] * c[k] / self.eigenvalues[k];
        }
        (q, self.in_range(v, null_norm))
    }

    /// Quadratic form on the range part together with the raw null-component
    /// norm, for callers that apply their own exclusion scale.
    pub fn quad_pinv_split(&self, v: &DVector<f64>) -> (f64, f64) {
        let (c, null_norm) = self.range_split(v);
        let mut q = 0.0;
        for k in 0..self.rank {
            q += c[k] * c[k] / self.eigenvalues[k];
        }
        (q, null_norm)
    }

    /// `X^{1/2} v`.
    pub fn sqrt_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let c = self.coords(v);
        let mut w = DVector::zeros(self.dim());
        for k in 0..self.rank {
            w.axpy(
                self.eigenvalues[k].sqrt() * c[k],
                &self.eigenvectors.column(k).into_owned(),
                1.0,
            );
        }
        w
    }

    /// Dense `X^{+}`.
    pub fn pinv(&self) -> DMatrix<f64> {
        self.scaled_outer(|lam| 1.0 / lam)
    }

    /// Dense `X^{1/2}`.
    pub fn sqrt(&self) -> DMatrix<f64> {
        self.scaled_outer(|lam| lam.sqrt())
    }

    /// Dense `X^{+1/2}`.
    pub fn pinv_sqrt(&self) -> DMatrix<f64> {
        self.scaled_outer(|lam| 1.0 / lam.sqrt())
    }

    /// Reconstruct the (cleaned) matrix `V diag(lambda) V^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.scaled_outer(|lam| lam)
    }

    fn scaled_outer(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let d = self.dim();
        let mut out = DMatrix::zeros(d, d);
        for k in 0..self.rank {
            let fk = f(self.eigenvalues[k]);
            let col = self.eigenvectors.column(k);
            for r in 0..d {
                for s in 0..d {
                    out[(r, s)] += fk * col[r] * col[s];
                }
            }
        }
        out
    }

    /// Orthonormal basis of the range (first `rank` eigenvector columns).
    pub fn range_basis(&self) -> DMatrix<f64> {
        self.eigenvectors.columns(0, self.rank).into_owned()
    }

    /// Spectral form of the pseudo-inverse: nonzero eigenvalues are inverted
    /// and reordered so the result is again descending. Shares the null space
    /// (and `null_tol`) with `self`.
    pub fn pinv_spectral(&self) -> SpectralPsd {
        let d = self.dim();
        let mut eigenvalues = DVector::zeros(d);
        let mut eigenvectors = DMatrix::zeros(d, d);
        for k in 0..self.rank {
            let src = self.rank - 1 - k;
            eigenvalues[k] = 1.0 / self.eigenvalues[src];
            eigenvectors.set_column(k, &self.eigenvectors.column(src));
        }
        for k in self.rank..d {
            eigenvectors.set_column(k, &self.eigenvectors.column(k));
        }
        SpectralPsd {
            eigenvalues,
            eigenvectors,
            null_tol: self.null_tol,
            rank: self.rank,
        }
    }
}

/// Apply `X^{-1/2}` to `v` under the singular-extension convention.
pub fn psd_pinv_sqrt_apply(
    x: &DMatrix<f64>,
    v: &DVector<f64>,
    null_tol: f64,
) -> Result<(DVector<f64>, bool)> {
    Ok(SpectralPsd::new(x, null_tol)?.pinv_sqrt_apply(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat(d: usize, f: impl Fn(usize, usize) -> f64) -> DMatrix<f64> {
        DMatrix::from_fn(d, d, |r, s| f(r, s))
    }

    #[test]
    fn identity_case() {
        let x = DMatrix::<f64>::identity(3, 3);
        let v = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let (w, in_range) = psd_pinv_sqrt_apply(&x, &v, DEFAULT_NULL_TOL).unwrap();
        assert!(in_range);
        assert_abs_diff_eq!((w - v).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rank_one_edge() {
        // X = x u u^T with u = (1,-1), x = 1: X^{-1/2} u = u / sqrt(2 x).
        let u = DVector::from_vec(vec![1.0, -1.0]);
        let x = mat(2, |r, s| u[r] * u[s]);
        let (w, in_range) = psd_pinv_sqrt_apply(&x, &u, DEFAULT_NULL_TOL).unwrap();
        assert!(in_range);
        let expected = &u / (2.0f64).sqrt();
        assert_abs_diff_eq!((w - expected).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn scaled_projector_difference_vector() {
        // X = x (I - (1/d) 1 1^T): X^{-1/2}(e_r - e_s) = (e_r - e_s)/sqrt(x).
        let d = 4;
        let xval = 2.5;
        let x = mat(d, |r, s| {
            let p = if r == s { 1.0 } else { 0.0 } - 1.0 / d as f64;
            xval * p
        });
        let mut v = DVector::zeros(d);
        v[0] = 1.0;
        v[2] = -1.0;
        let (w, in_range) = psd_pinv_sqrt_apply(&x, &v, DEFAULT_NULL_TOL).unwrap();
        assert!(in_range);
        assert_abs_diff_eq!((w - &v / xval.sqrt()).norm(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn cross_block_vector_is_out_of_range() {
        // Two disjoint edges {0,1} and {2,3}; e_0 - e_2 crosses blocks.
        let mut x = DMatrix::<f64>::zeros(4, 4);
        for (a, b) in [(0usize, 1usize), (2, 3)] {
            x[(a, a)] += 1.0;
            x[(b, b)] += 1.0;
            x[(a, b)] -= 1.0;
            x[(b, a)] -= 1.0;
        }
        let mut v = DVector::zeros(4);
        v[0] = 1.0;
        v[2] = -1.0;
        let (_, in_range) = psd_pinv_sqrt_apply(&x, &v, DEFAULT_NULL_TOL).unwrap();
        assert!(!in_range);
    }

    #[test]
    fn rejects_asymmetric_and_indefinite() {
        let mut x = DMatrix::<f64>::identity(2, 2);
        x[(0, 1)] = 0.5;
        assert!(matches!(
            SpectralPsd::new(&x, DEFAULT_NULL_TOL),
            Err(Error::NotSymmetric { .. })
        ));

        let y = mat(2, |r, s| {
            if r == s {
                if r == 0 {
                    1.0
                } else {
                    -0.5
                }
            } else {
                0.0
            }
        });
        assert!(matches!(
            SpectralPsd::new(&y, DEFAULT_NULL_TOL),
            Err(Error::NotPsd { .. })
        ));
    }

    #[test]
    fn sqrt_of_pinv_sqrt_projects_onto_range() {
        // For v in the range, X^{1/2} (X^{-1/2} v) recovers the projection.
        let u = DVector::from_vec(vec![1.0, -1.0, 0.0]);
        let w2 = DVector::from_vec(vec![0.0, 1.0, -1.0]);
        let x = mat(3, |r, s| 2.0 * u[r] * u[s] + 0.7 * w2[r] * w2[s]);
        let spec = SpectralPsd::new(&x, DEFAULT_NULL_TOL).unwrap();
        let v = DVector::from_vec(vec![0.3, -1.1, 0.8]);
        // Project v onto span(1)^perp = range(X).
        let ones = DVector::from_element(3, 1.0);
        let proj = &v - &ones * (ones.dot(&v) / 3.0);
        let (half, in_range) = spec.pinv_sqrt_apply(&proj);
        assert!(in_range);
        let back = spec.sqrt_apply(&half);
        assert!((back - &proj).norm() <= 1e-8 * proj.norm());
    }

    #[test]
    fn reconstruction_error_is_small() {
        let u = DVector::from_vec(vec![1.0, -2.0, 1.0]);
        let x = mat(3, |r, s| 3.0 * u[r] * u[s]);
        let spec = SpectralPsd::new(&x, DEFAULT_NULL_TOL).unwrap();
        let err = (spec.reconstruct() - &x).norm();
        assert!(err <= 1e-10 * x.norm().max(1.0));
    }

    #[test]
    fn zero_matrix_has_rank_zero() {
        let x = DMatrix::<f64>::zeros(3, 3);
        let spec = SpectralPsd::new(&x, DEFAULT_NULL_TOL).unwrap();
        assert_eq!(spec.rank(), 0);
        let v = DVector::from_vec(vec![1.0, 0.0, -1.0]);
        let (q, in_range) = spec.quad_pinv(&v);
        assert_eq!(q, 0.0);
        assert!(!in_range);
    }
}
