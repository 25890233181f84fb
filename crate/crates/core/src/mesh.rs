//! Planar-rotation mesh programming.
//!
//! A square orthogonal matrix is realized on hardware as a triangular
//! sequence of two-channel planar rotations followed by a ±1 diagonal; a
//! general weight matrix is realized as the product of two such meshes with
//! a bounded cosine diagonal between them (`W = U·Σ·Vᵀ` with
//! `σ_k = m·cos(φ^S_k)`). This module owns the phase↔matrix mappings in
//! both directions plus the canonical phase wrap to `[0, 2π)`.

use crate::linalg::Mat;
use crate::{CoreError, Real, Result};

/// Number of planar rotations in a full mesh on `n` channels.
pub fn mesh_phase_count(n: usize) -> usize {
    n * (n - 1) / 2
}

/// Ordered rotation schedule for an `n`-channel triangular mesh.
///
/// Pairs `(i, j)` with `j < i` are listed in product order (leftmost factor
/// first): outer index `i` descends from `n−1` to `1`, inner index `j`
/// ascends from `0` to `i−1`.
#[derive(Debug, Clone)]
pub struct RotationPlan {
    n: usize,
    pairs: Vec<(usize, usize)>,
}

impl RotationPlan {
    pub fn new(n: usize) -> Self {
        let mut pairs = Vec::with_capacity(mesh_phase_count(n));
        for i in (1..n).rev() {
            for j in 0..i {
                pairs.push((i, j));
            }
        }
        RotationPlan { n, pairs }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Rotation pairs in product order.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }
}

/// Applies one planar rotation to a vector in place:
/// `x_j ← cosφ·x_j − sinφ·x_i`, `x_i ← sinφ·x_j + cosφ·x_i`.
///
/// Requires `j < i < x.len()`.
pub fn apply_rotation<T: Real>(x: &mut [T], i: usize, j: usize, phi: T) -> Result<()> {
    if j >= i || i >= x.len() {
        return Err(CoreError::Argument(format!(
            "rotation indices (i={}, j={}) invalid for length {}",
            i,
            j,
            x.len()
        )));
    }
    let (s, c) = phi.sin_cos();
    let xj = x[j];
    let xi = x[i];
    x[j] = c * xj - s * xi;
    x[i] = s * xj + c * xi;
    Ok(())
}

/// Builds the mesh matrix `D · R_1 · R_2 ⋯ R_m` for phases in plan order and
/// a ±1 diagonal `d`.
pub fn build_unitary<T: Real>(n: usize, phases: &[T], d: &[T]) -> Result<Mat<T>> {
    let plan = RotationPlan::new(n);
    if phases.len() != plan.len() {
        return Err(CoreError::Argument(format!(
            "expected {} phases for a {}-channel mesh, got {}",
            plan.len(),
            n,
            phases.len()
        )));
    }
    if d.len() != n {
        return Err(CoreError::Argument(format!(
            "expected diagonal of length {}, got {}",
            n,
            d.len()
        )));
    }
    for (k, &dk) in d.iter().enumerate() {
        if dk != T::one() && dk != -T::one() {
            return Err(CoreError::Argument(format!(
                "diagonal entry {} must be ±1, got {}",
                k, dk
            )));
        }
    }

    let mut x = Mat::identity(n);
    // Accumulate right-to-left: X ← R_k · X for k from the last plan entry
    // back to the first, then apply the diagonal on the left.
    for (&(i, j), &phi) in plan.pairs().iter().zip(phases.iter()).rev() {
        let (s, c) = phi.sin_cos();
        for col in 0..n {
            let rj = x[(j, col)];
            let ri = x[(i, col)];
            x[(j, col)] = c * rj - s * ri;
            x[(i, col)] = s * rj + c * ri;
        }
    }
    for k in 0..n {
        if d[k] == -T::one() {
            for col in 0..n {
                x[(k, col)] = -x[(k, col)];
            }
        }
    }
    Ok(x)
}

/// Recovers mesh phases and the ±1 diagonal from an orthogonal matrix, so
/// that `build_unitary(n, &phases, &d)` reproduces it.
///
/// Fails with a validation error if `u` is not square or its columns are not
/// orthonormal to within `max(1e−8, 100·ε·n)`.
pub fn decompose_orthogonal<T: Real>(u: &Mat<T>) -> Result<(Vec<T>, Vec<T>)> {
    if u.rows() != u.cols() {
        return Err(CoreError::Validation(format!(
            "matrix must be square, got {}x{}",
            u.rows(),
            u.cols()
        )));
    }
    let n = u.rows();
    let tol = T::c(1e-8).max(T::c(100.0) * T::epsilon() * T::c(n as f64));
    let err = u.orthogonality_error();
    if !(err <= tol) {
        return Err(CoreError::Validation(format!(
            "matrix is not orthogonal: ‖UᵀU − I‖∞ = {} exceeds {}",
            err, tol
        )));
    }

    let plan = RotationPlan::new(n);
    let mut t = u.clone();
    let mut psis = Vec::with_capacity(plan.len());
    // Null the above-diagonal entry of each plan pair by a left rotation;
    // the residue is a ±1 diagonal (only entry 0 can end at −1).
    for &(i, j) in plan.pairs() {
        let psi = (-t[(j, i)]).atan2(t[(i, i)]);
        let (s, c) = psi.sin_cos();
        for col in 0..n {
            let rj = t[(j, col)];
            let ri = t[(i, col)];
            t[(j, col)] = c * rj + s * ri;
            t[(i, col)] = -s * rj + c * ri;
        }
        psis.push(psi);
    }
    let d: Vec<T> = (0..n)
        .map(|k| if t[(k, k)] < T::zero() { -T::one() } else { T::one() })
        .collect();
    // The factorization so far is u = (∏ R(ψ)) · Δ; moving Δ to the front
    // flips the sign of any rotation whose two channels carry opposite signs.
    let mut phases = Vec::with_capacity(plan.len());
    for (&(i, j), &psi) in plan.pairs().iter().zip(psis.iter()) {
        let flipped = psi * d[i] * d[j];
        phases.push(wrap_phase(flipped)?);
    }
    Ok((phases, d))
}

/// Canonical phase representative in `[0, 2π)`.
///
/// Non-finite input is an argument error.
pub fn wrap_phase<T: Real>(phi: T) -> Result<T> {
    if !phi.is_finite() {
        return Err(CoreError::Argument(format!("phase must be finite, got {}", phi)));
    }
    let tau = T::TAU();
    let mut r = phi % tau;
    if r < T::zero() {
        r += tau;
    }
    if r >= tau {
        r -= tau;
    }
    if r == T::zero() {
        // normalize −0.0
        r = T::zero();
    }
    Ok(r)
}

/// Singular values realized by the cosine diagonal: `σ_k = bound·cos(φ_k)`.
pub fn sigma_from_phases<T: Real>(phases: &[T], bound: T) -> Vec<T> {
    phases.iter().map(|&p| bound * p.cos()).collect()
}

/// Phases that program the cosine diagonal to the requested singular values:
/// `φ_k = arccos(σ_k / bound)` with the ratio clamped into
/// `[−1+1e−6, 1−1e−6]`.
///
/// Returns the phases and how many ratios had to be clamped; every clamp is
/// also logged as a warning because the realized σ differs from the request.
pub fn phases_from_singular<T: Real>(sigmas: &[T], bound: T) -> Result<(Vec<T>, usize)> {
    if !(bound > T::zero()) {
        return Err(CoreError::Argument(format!("sigma bound must be positive, got {}", bound)));
    }
    let lo = -T::one() + T::c(1e-6);
    let hi = T::one() - T::c(1e-6);
    let mut clamped = 0usize;
    let mut phases = Vec::with_capacity(sigmas.len());
    for (k, &s) in sigmas.iter().enumerate() {
        let ratio = s / bound;
        let r = if ratio < lo {
            clamped += 1;
            log::warn!("singular value {} = {} below realizable range, clamping", k, s);
            lo
        } else if ratio > hi {
            clamped += 1;
            log::warn!("singular value {} = {} at or above bound {}, clamping", k, s, bound);
            hi
        } else {
            ratio
        };
        phases.push(r.acos());
    }
    Ok((phases, clamped))
}

/// Which phase bank of a layer an index belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MeshBlock {
    /// Left mesh (output side), `rows(rows−1)/2` phases.
    U,
    /// Cosine diagonal, `min(rows, cols)` phases.
    S,
    /// Right mesh (input side), `cols(cols−1)/2` phases.
    V,
}

/// One mesh-programmed weight layer `W = U(Φ^U) · Σ(Φ^S) · Vᵀ(Φ^V)`.
///
/// `rows × cols` with the right mesh acting on the input space. Phases are
/// stored wrapped to `[0, 2π)`; the diagonals `d_u`, `d_v` are ±1 signs
/// fixed at programming time.
#[derive(Debug, Clone)]
pub struct MeshLayer<T> {
    rows: usize,
    cols: usize,
    phi_u: Vec<T>,
    phi_s: Vec<T>,
    phi_v: Vec<T>,
    d_u: Vec<T>,
    d_v: Vec<T>,
    sigma_bound: T,
}

impl<T: Real> MeshLayer<T> {
    /// All-zero phases with +1 diagonals: programs `W = bound·I` (rectangular
    /// identity pattern).
    pub fn new(rows: usize, cols: usize, sigma_bound: T) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(CoreError::Argument("layer dimensions must be positive".into()));
        }
        if !(sigma_bound > T::zero()) {
            return Err(CoreError::Argument(format!(
                "sigma bound must be positive, got {}",
                sigma_bound
            )));
        }
        Ok(MeshLayer {
            rows,
            cols,
            phi_u: vec![T::zero(); mesh_phase_count(rows)],
            phi_s: vec![T::zero(); rows.min(cols)],
            phi_v: vec![T::zero(); mesh_phase_count(cols)],
            d_u: vec![T::one(); rows],
            d_v: vec![T::one(); cols],
            sigma_bound,
        })
    }

    /// Assembles a layer from explicit parts, validating lengths and signs
    /// and wrapping all phases.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        rows: usize,
        cols: usize,
        phi_u: Vec<T>,
        phi_s: Vec<T>,
        phi_v: Vec<T>,
        d_u: Vec<T>,
        d_v: Vec<T>,
        sigma_bound: T,
    ) -> Result<Self> {
        let mut layer = MeshLayer::new(rows, cols, sigma_bound)?;
        let expect = |name: &str, got: usize, want: usize| -> Result<()> {
            if got != want {
                return Err(CoreError::Argument(format!(
                    "{} must have length {}, got {}",
                    name, want, got
                )));
            }
            Ok(())
        };
        expect("phi_u", phi_u.len(), layer.phi_u.len())?;
        expect("phi_s", phi_s.len(), layer.phi_s.len())?;
        expect("phi_v", phi_v.len(), layer.phi_v.len())?;
        expect("d_u", d_u.len(), rows)?;
        expect("d_v", d_v.len(), cols)?;
        for (name, d) in [("d_u", &d_u), ("d_v", &d_v)] {
            for (k, &s) in d.iter().enumerate() {
                if s != T::one() && s != -T::one() {
                    return Err(CoreError::Argument(format!(
                        "{}[{}] must be ±1, got {}",
                        name, k, s
                    )));
                }
            }
        }
        layer.phi_u = phi_u.into_iter().map(wrap_phase).collect::<Result<_>>()?;
        layer.phi_s = phi_s.into_iter().map(wrap_phase).collect::<Result<_>>()?;
        layer.phi_v = phi_v.into_iter().map(wrap_phase).collect::<Result<_>>()?;
        layer.d_u = d_u;
        layer.d_v = d_v;
        Ok(layer)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn sigma_bound(&self) -> T {
        self.sigma_bound
    }

    pub fn phi_u(&self) -> &[T] {
        &self.phi_u
    }

    pub fn phi_s(&self) -> &[T] {
        &self.phi_s
    }

    pub fn phi_v(&self) -> &[T] {
        &self.phi_v
    }

    pub fn d_u(&self) -> &[T] {
        &self.d_u
    }

    pub fn d_v(&self) -> &[T] {
        &self.d_v
    }

    /// Number of phases in one bank.
    pub fn block_len(&self, block: MeshBlock) -> usize {
        match block {
            MeshBlock::U => self.phi_u.len(),
            MeshBlock::S => self.phi_s.len(),
            MeshBlock::V => self.phi_v.len(),
        }
    }

    /// Total programmable phases in the layer.
    pub fn phase_count(&self) -> usize {
        self.phi_u.len() + self.phi_s.len() + self.phi_v.len()
    }

    pub fn phase(&self, block: MeshBlock, k: usize) -> T {
        match block {
            MeshBlock::U => self.phi_u[k],
            MeshBlock::S => self.phi_s[k],
            MeshBlock::V => self.phi_v[k],
        }
    }

    /// Writes one phase, wrapping it to `[0, 2π)` first.
    pub fn set_phase(&mut self, block: MeshBlock, k: usize, value: T) -> Result<()> {
        let len = self.block_len(block);
        if k >= len {
            return Err(CoreError::Argument(format!(
                "phase index {} out of range for bank of {}",
                k, len
            )));
        }
        let v = wrap_phase(value)?;
        match block {
            MeshBlock::U => self.phi_u[k] = v,
            MeshBlock::S => self.phi_s[k] = v,
            MeshBlock::V => self.phi_v[k] = v,
        }
        Ok(())
    }

    /// Left mesh matrix `U(Φ^U)`.
    pub fn build_u(&self) -> Mat<T> {
        build_unitary(self.rows, &self.phi_u, &self.d_u).expect("layer invariants hold")
    }

    /// Right mesh matrix `Vᵀ(Φ^V)`.
    pub fn build_vt(&self) -> Mat<T> {
        build_unitary(self.cols, &self.phi_v, &self.d_v).expect("layer invariants hold")
    }

    /// Realized singular values `bound·cos(Φ^S)`.
    pub fn sigmas(&self) -> Vec<T> {
        sigma_from_phases(&self.phi_s, self.sigma_bound)
    }

    /// Realized weight matrix from the layer's own (nominal) phases.
    pub fn build_weight(&self) -> Mat<T> {
        build_weight_from(
            self.rows,
            self.cols,
            &self.phi_u,
            &self.phi_s,
            &self.phi_v,
            &self.d_u,
            &self.d_v,
            self.sigma_bound,
        )
        .expect("layer invariants hold")
    }
}

/// Weight matrix from explicit phase banks (used both for nominal phases and
/// for noise-corrupted phase vectors, which are deliberately not wrapped).
#[allow(clippy::too_many_arguments)]
pub fn build_weight_from<T: Real>(
    rows: usize,
    cols: usize,
    phi_u: &[T],
    phi_s: &[T],
    phi_v: &[T],
    d_u: &[T],
    d_v: &[T],
    sigma_bound: T,
) -> Result<Mat<T>> {
    let k = rows.min(cols);
    if phi_s.len() != k {
        return Err(CoreError::Argument(format!(
            "expected {} diagonal phases, got {}",
            k,
            phi_s.len()
        )));
    }
    let u = build_unitary(rows, phi_u, d_u)?;
    let vt = build_unitary(cols, phi_v, d_v)?;
    let sigma = sigma_from_phases(phi_s, sigma_bound);
    let mut w = Mat::zeros(rows, cols);
    for a in 0..rows {
        for kk in 0..k {
            let scaled = u[(a, kk)] * sigma[kk];
            if scaled == T::zero() {
                continue;
            }
            let vrow = vt.row(kk);
            let wrow = w.row_mut(a);
            for b in 0..cols {
                wrow[b] += scaled * vrow[b];
            }
        }
    }
    Ok(w)
}
