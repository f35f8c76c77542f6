//! Structured operator pairs and the spectral machinery built on them.
//!
//! All geometry uses the uniform quadrature inner product
//! `<x, y> = h * sum_i x_i y_i`, so the plain matrix transpose is the
//! adjoint and projectors computed from Euclidean-orthonormal eigenvectors
//! are orthogonal in the weighted sense as well.

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::Result;

/// Default kernel tolerance as a fraction of the largest eigenvalue.
pub const KERNEL_TOL_REL: f64 = 1e-9;

/// Relative symmetry tolerance for dissipation matrices.
pub const SYMMETRY_TOL_REL: f64 = 1e-12;

/// Uniform-weight discrete inner product `<x, y> = weight * x . y`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerProduct {
    weight: f64,
}

impl InnerProduct {
    pub fn new(weight: f64) -> Self {
        assert!(weight > 0.0, "quadrature weight must be positive");
        Self { weight }
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn dot(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        self.weight * x.dot(y)
    }

    pub fn norm_sq(&self, x: &DVector<f64>) -> f64 {
        self.weight * x.norm_squared()
    }

    pub fn norm(&self, x: &DVector<f64>) -> f64 {
        self.norm_sq(x).sqrt()
    }
}

/// The pair `(J, R)` of a generator `A = J - R`: `J` exactly skew-symmetric,
/// `R` symmetric positive semidefinite. Both carry units 1/time.
#[derive(Clone, Debug)]
pub struct StructuredOperatorPair {
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    n: usize,
}

impl StructuredOperatorPair {
    /// Validates skewness of `J` (exact) and symmetry of `R` (relative
    /// tolerance), then stores `R` symmetrized.
    pub fn new(j: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let n = j.nrows();
        if j.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: j.ncols(),
            });
        }
        if r.nrows() != n || r.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: r.nrows(),
            });
        }

        let skew_dev = (&j + j.transpose()).amax();
        if skew_dev != 0.0 {
            return Err(Error::NotSkew {
                deviation: skew_dev,
            });
        }

        let sym_dev = (&r - r.transpose()).amax();
        let tol = SYMMETRY_TOL_REL * r.norm();
        if sym_dev > tol {
            return Err(Error::NotSymmetric {
                deviation: sym_dev,
                tol,
            });
        }
        let r_sym = (&r + r.transpose()) * 0.5;

        Ok(Self { j, r: r_sym, n })
    }

    pub fn j(&self) -> &DMatrix<f64> {
        &self.j
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// The generator `A = J - R`.
    pub fn generator(&self) -> DMatrix<f64> {
        &self.j - &self.r
    }
}

/// Eigendecomposition of a symmetric PSD matrix with a kernel classification
/// threshold. Eigenvalues ascend; eigenvectors are orthonormal columns.
#[derive(Clone, Debug)]
pub struct SpectralData {
    eigenvalues: DVector<f64>,
    vectors: DMatrix<f64>,
    kernel_tol: f64,
    sigma_plus: Option<f64>,
}

/// Decomposes a symmetric matrix, clamping roundoff-negative eigenvalues in
/// `[-kernel_tol, 0)` to zero. Anything below the band is a modeling error,
/// not roundoff, and is rejected.
///
/// With `kernel_tol = None` the threshold defaults to
/// `KERNEL_TOL_REL * lambda_max`.
pub fn eig_sym(r: &DMatrix<f64>, kernel_tol: Option<f64>) -> Result<SpectralData> {
    let n = r.nrows();
    if r.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: r.ncols(),
        });
    }
    let sym_dev = (r - r.transpose()).amax();
    let tol = SYMMETRY_TOL_REL * r.norm();
    if sym_dev > tol {
        return Err(Error::NotSymmetric {
            deviation: sym_dev,
            tol,
        });
    }
    let r_sym = (r + r.transpose()) * 0.5;

    let eig = r_sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let mut eigenvalues = DVector::zeros(n);
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvalues[dst] = eig.eigenvalues[src];
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }

    let lambda_max = eigenvalues[n - 1].max(0.0);
    let kernel_tol = kernel_tol.unwrap_or(KERNEL_TOL_REL * lambda_max);

    for lambda in eigenvalues.iter_mut() {
        if *lambda < -kernel_tol {
            return Err(Error::NotPsd {
                eigenvalue: *lambda,
                limit: -kernel_tol,
            });
        }
        if *lambda < 0.0 {
            *lambda = 0.0;
        }
    }

    let sigma_plus = eigenvalues.iter().copied().find(|&l| l > kernel_tol);

    Ok(SpectralData {
        eigenvalues,
        vectors,
        kernel_tol,
        sigma_plus,
    })
}

impl SpectralData {
    /// Eigenvalues in ascending order, clamped nonnegative.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Orthonormal eigenvector columns, ordered like the eigenvalues.
    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn kernel_tol(&self) -> f64 {
        self.kernel_tol
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }

    /// Smallest eigenvalue above `kernel_tol`.
    pub fn sigma_plus(&self) -> Result<f64> {
        self.sigma_plus.ok_or(Error::NoGap {
            kernel_tol: self.kernel_tol,
        })
    }

    /// Number of eigenvalues at or below `kernel_tol`.
    pub fn kernel_dim(&self) -> usize {
        self.eigenvalues
            .iter()
            .filter(|&&l| l <= self.kernel_tol)
            .count()
    }

    /// `V diag(lambda) V^T`, for reconstruction checks.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = scale_columns(&self.vectors, &self.eigenvalues);
        &scaled * self.vectors.transpose()
    }

    /// Symmetric PSD square root `V diag(sqrt(lambda)) V^T`.
    pub fn square_root(&self) -> DMatrix<f64> {
        let roots = self.eigenvalues.map(|l| l.sqrt());
        let scaled = scale_columns(&self.vectors, &roots);
        let s = &scaled * self.vectors.transpose();
        (&s + s.transpose()) * 0.5
    }

    /// Orthogonal projector onto the span of eigenvectors with
    /// `lambda <= kernel_tol`. Zero matrix when the kernel is empty.
    pub fn kernel_projector(&self) -> DMatrix<f64> {
        let n = self.eigenvalues.len();
        let k = self.kernel_dim();
        if k == 0 {
            return DMatrix::zeros(n, n);
        }
        let v_ker = self.vectors.columns(0, k);
        let p = &v_ker * v_ker.transpose();
        (&p + p.transpose()) * 0.5
    }
}

fn scale_columns(m: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col *= d[j];
    }
    out
}

/// Distance from `x` to the subspace projected onto by `p`, in the weighted
/// norm: `|| x - P x ||`.
pub fn dist_to_kernel(x: &DVector<f64>, p: &DMatrix<f64>, ip: &InnerProduct) -> Result<f64> {
    if p.ncols() != x.len() || p.nrows() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: p.ncols(),
        });
    }
    let residual = x - p * x;
    Ok(ip.norm(&residual))
}

/// Deterministic power-iteration estimate of the largest singular value.
pub fn operator_norm_est(a: &DMatrix<f64>, iters: usize) -> f64 {
    let n = a.ncols();
    if n == 0 || a.nrows() == 0 {
        return 0.0;
    }
    let mut v = pseudo_random_vector(n, 0x5EED_1234_ABCD_0001);
    v /= v.norm();
    let mut estimate = 0.0;
    let mut w = DVector::zeros(a.nrows());
    let mut z = DVector::zeros(n);
    for _ in 0..iters {
        w.gemv(1.0, a, &v, 0.0);
        z.gemv_tr(1.0, a, &w, 0.0);
        let norm = z.norm();
        if norm == 0.0 {
            return 0.0;
        }
        estimate = norm.sqrt();
        v = &z / norm;
    }
    estimate
}

/// Deterministic pseudo-random vector (splitmix64 stream), for power
/// iteration starts that must not depend on a global RNG.
pub(crate) fn pseudo_random_vector(n: usize, seed: u64) -> DVector<f64> {
    let mut state = seed;
    DVector::from_fn(n, |_, _| {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z as f64 / u64::MAX as f64) * 2.0 - 1.0
    })
}
