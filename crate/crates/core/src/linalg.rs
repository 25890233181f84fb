//! Small dense linear-algebra kernel.
//!
//! Mesh work never exceeds a few thousand entries per matrix (layers are at
//! most a few hundred wide), so a plain row-major `Vec` with fixed loop
//! orders is fast enough, keeps results bit-stable across runs, and avoids
//! linking an external BLAS/LAPACK. The one nontrivial routine is a
//! one-sided Jacobi SVD used when deploying pretrained dense weights onto a
//! mesh.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{CoreError, Real, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
    /// All-zeros matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    /// Identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    /// Builds a matrix from a row-major flat vector.
    pub fn from_flat(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CoreError::Argument(format!(
                "flat data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    /// Builds a matrix from nested row slices (test convenience).
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Borrow row `r` as a slice.
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Borrow row `r` mutably.
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Flat row-major view.
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Matrix product `self · rhs` with a fixed i-k-j loop order.
    pub fn matmul(&self, rhs: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, rhs.rows, "inner dimensions must agree");
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let rrow = rhs.row(k);
                let orow = out.row_mut(i);
                for j in 0..rrow.len() {
                    orow[j] += a * rrow[j];
                }
            }
        }
        out
    }

    /// Product against a transposed right factor: `self · rhsᵀ`.
    ///
    /// Both operands are walked row-wise, which is the cache-friendly layout
    /// for the batched `X·Wᵀ` forward pass.
    pub fn matmul_nt(&self, rhs: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, rhs.cols, "inner dimensions must agree");
        let mut out = Mat::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let lrow = self.row(i);
            for j in 0..rhs.rows {
                let rrow = rhs.row(j);
                let mut acc = T::zero();
                for k in 0..lrow.len() {
                    acc += lrow[k] * rrow[k];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    /// Transposed copy.
    pub fn transpose(&self) -> Mat<T> {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// Matrix-vector product `self · x`.
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(self.cols, x.len(), "dimension mismatch");
        let mut y = vec![T::zero(); self.rows];
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = T::zero();
            for j in 0..row.len() {
                acc += row[j] * x[j];
            }
            y[i] = acc;
        }
        y
    }

    /// Largest absolute entry of `self − rhs`.
    pub fn max_abs_diff(&self, rhs: &Mat<T>) -> T {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        let mut m = T::zero();
        for (a, b) in self.data.iter().zip(rhs.data.iter()) {
            let d = (*a - *b).abs();
            if d > m {
                m = d;
            }
        }
        m
    }

    /// `‖selfᵀ·self − I‖∞`: how far the columns are from orthonormal.
    pub fn orthogonality_error(&self) -> T {
        let gram = self.transpose().matmul(self);
        let mut m = T::zero();
        for i in 0..gram.rows {
            for j in 0..gram.cols {
                let target = if i == j { T::one() } else { T::zero() };
                let d = (gram[(i, j)] - target).abs();
                if d > m {
                    m = d;
                }
            }
        }
        m
    }
}

impl<T: Real> std::ops::Index<(usize, usize)> for Mat<T> {
    type Output = T;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T: Real> std::ops::IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

/// Singular value decomposition `A = U · diag(σ) · Vᵀ`.
///
/// `u` is square `M×M`, `vt` square `N×N`, `sigma` has `min(M,N)` nonnegative
/// entries in descending order.
#[derive(Debug, Clone)]
pub struct Svd<T> {
    pub u: Mat<T>,
    pub sigma: Vec<T>,
    pub vt: Mat<T>,
}

/// One-sided Jacobi SVD for small dense matrices.
///
/// Iteratively orthogonalizes column pairs of `A` while accumulating the
/// rotations into `V`; singular values are the final column norms and `U`'s
/// leading columns the normalized columns, completed to a full orthonormal
/// basis for rank-deficient or wide/tall shapes. Deterministic: sweep order
/// is fixed and there is no pivot randomization.
pub fn jacobi_svd<T: Real>(a: &Mat<T>) -> Svd<T> {
    if a.rows() < a.cols() {
        // Work on the transpose and swap factors: Aᵀ = U'ΣV'ᵀ ⟹ A = V'ΣU'ᵀ.
        let s = jacobi_svd(&a.transpose());
        return Svd { u: s.vt.transpose(), sigma: s.sigma, vt: s.u.transpose() };
    }

    let m = a.rows();
    let n = a.cols();
    let mut b = a.clone();
    let mut v = Mat::identity(n);

    // Column-pair rotations until every pair is orthogonal to roundoff.
    let tol = T::epsilon() * T::c(16.0);
    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut app = T::zero();
                let mut aqq = T::zero();
                let mut apq = T::zero();
                for r in 0..m {
                    let bp = b[(r, p)];
                    let bq = b[(r, q)];
                    app += bp * bp;
                    aqq += bq * bq;
                    apq += bp * bq;
                }
                if apq.abs() <= tol * (app * aqq).sqrt() || apq == T::zero() {
                    continue;
                }
                rotated = true;
                // Jacobi rotation that zeroes the (p,q) inner product.
                let zeta = (aqq - app) / (T::c(2.0) * apq);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let bp = b[(r, p)];
                    let bq = b[(r, q)];
                    b[(r, p)] = c * bp - s * bq;
                    b[(r, q)] = s * bp + c * bq;
                }
                for r in 0..n {
                    let vp = v[(r, p)];
                    let vq = v[(r, q)];
                    v[(r, p)] = c * vp - s * vq;
                    v[(r, q)] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    // Singular values = column norms; sort descending, permuting B and V.
    let mut sigma: Vec<T> = (0..n)
        .map(|j| {
            let mut s = T::zero();
            for r in 0..m {
                s += b[(r, j)] * b[(r, j)];
            }
            s.sqrt()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).expect("finite singular values"));
    let mut b_sorted = Mat::zeros(m, n);
    let mut v_sorted = Mat::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        for r in 0..m {
            b_sorted[(r, new_j)] = b[(r, old_j)];
        }
        for r in 0..n {
            v_sorted[(r, new_j)] = v[(r, old_j)];
        }
    }
    sigma.sort_by(|x, y| y.partial_cmp(x).expect("finite singular values"));

    // U: normalized columns where σ is meaningful, then complete the basis.
    let sig_floor = {
        let smax = sigma.first().copied().unwrap_or(T::zero());
        let scale = if smax > T::zero() { smax } else { T::one() };
        scale * T::epsilon() * T::c(
            // generous: treat tiny σ as rank deficiency
            1e4,
        )
    };
    let mut u = Mat::zeros(m, m);
    let mut filled = 0usize;
    for j in 0..n {
        if sigma[j] > sig_floor {
            for r in 0..m {
                u[(r, filled)] = b_sorted[(r, j)] / sigma[j];
            }
            filled += 1;
        } else {
            sigma[j] = T::zero();
        }
    }
    complete_orthonormal_basis(&mut u, filled);

    // With zeroed tiny σ, U's completed columns are only used against σ=0, so
    // their placement relative to the sorted σ list is immaterial.
    Svd { u, sigma, vt: v_sorted.transpose() }
}

/// Fills columns `filled..m` of `u` with an orthonormal completion of the
/// first `filled` columns (modified Gram-Schmidt against unit vectors).
fn complete_orthonormal_basis<T: Real>(u: &mut Mat<T>, mut filled: usize) {
    let m = u.rows();
    let mut candidate = 0usize;
    while filled < m {
        assert!(candidate < m, "basis completion exhausted candidates");
        // Start from e_candidate and remove projections onto existing columns.
        let mut w = vec![T::zero(); m];
        w[candidate] = T::one();
        candidate += 1;
        for _ in 0..2 {
            // twice for numerical robustness
            for j in 0..filled {
                let mut dot = T::zero();
                for r in 0..m {
                    dot += u[(r, j)] * w[r];
                }
                for r in 0..m {
                    let uj = u[(r, j)];
                    w[r] -= dot * uj;
                }
            }
        }
        let norm = w.iter().map(|x| *x * *x).sum::<T>().sqrt();
        if norm > T::c(1e-3) {
            for r in 0..m {
                u[(r, filled)] = w[r] / norm;
            }
            filled += 1;
        }
    }
}

/// Seeded random orthogonal matrix: Gaussian fill + modified Gram-Schmidt.
pub fn random_orthogonal<T: Real>(n: usize, seed: u64) -> Mat<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = Mat::zeros(n, n);
    let mut col = 0usize;
    while col < n {
        let mut w: Vec<T> =
            (0..n).map(|_| T::c(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))).collect();
        for _ in 0..2 {
            for j in 0..col {
                let mut dot = T::zero();
                for r in 0..n {
                    dot += q[(r, j)] * w[r];
                }
                for r in 0..n {
                    let qj = q[(r, j)];
                    w[r] -= dot * qj;
                }
            }
        }
        let norm = w.iter().map(|x| *x * *x).sum::<T>().sqrt();
        if norm > T::c(1e-6) {
            for r in 0..n {
                q[(r, col)] = w[r] / norm;
            }
            col += 1;
        }
        // Degenerate draws (norm ~ 0) simply redraw.
    }
    q
}
