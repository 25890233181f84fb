//! Hardware noise: per-shifter drift and thermal crosstalk.
//!
//! Two imperfections separate the phases a controller *commands* from the
//! phases the mesh *realizes*:
//!
//! - **drift** `Γ = diag(1+ε_i)`: each phase shifter's actuation coefficient
//!   deviates by `ε_i ~ N(0, σ_γ²)`, truncated to a configurable multiple of
//!   σ_γ (±3σ_γ by default);
//! - **crosstalk** `Ω`: a driven (active) shifter heats its physical
//!   neighbors, adding `ω` times its drifted phase to each neighbor in the
//!   same bank. `Ω` has unit diagonal and `Ω[i,j] = ω` exactly when `j` is
//!   active and physically adjacent to `i`.
//!
//! The realized phases are `Φ^c = Ω·(Γ·Φ)`, deliberately *not* wrapped: the
//! corruption is an analog perturbation, not a reprogramming. A
//! [`NoiseRealization`] freezes one draw of `Γ` and one `Ω` structure for an
//! entire recovery run, so the optimizer trains against a fixed plant.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{CoreError, Real, Result};

/// Physical neighborhood of the phase shifters, flattened across the model.
///
/// Shifters are adjacent exactly when their global indices are consecutive
/// *and* they sit in the same bank (one mesh's U, Σ, or V block); bank
/// boundaries break adjacency.
#[derive(Debug, Clone)]
pub struct Adjacency {
    block_id: Vec<usize>,
}

impl Adjacency {
    /// Builds the neighborhood from consecutive bank lengths in global phase
    /// order.
    pub fn from_block_sizes(sizes: &[usize]) -> Self {
        let total: usize = sizes.iter().sum();
        let mut block_id = Vec::with_capacity(total);
        for (b, &len) in sizes.iter().enumerate() {
            block_id.extend(std::iter::repeat(b).take(len));
        }
        Adjacency { block_id }
    }

    pub fn len(&self) -> usize {
        self.block_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.block_id.is_empty()
    }

    /// Bank index of a global phase index.
    pub fn block_id(&self, i: usize) -> usize {
        self.block_id[i]
    }

    /// Whether two shifters are physical neighbors.
    pub fn are_adjacent(&self, i: usize, j: usize) -> bool {
        i.abs_diff(j) == 1 && self.block_id[i] == self.block_id[j]
    }
}

/// Noise magnitudes: drift spread `σ_γ`, crosstalk coefficient `ω`, and the
/// truncation of the drift distribution as a multiple of `σ_γ` (default 3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec<T> {
    pub sigma_gamma: T,
    pub omega: T,
    pub truncation: T,
}

impl<T: Real> NoiseSpec<T> {
    /// Spec with the default ±3σ truncation.
    pub fn new(sigma_gamma: T, omega: T) -> Result<Self> {
        let spec = NoiseSpec { sigma_gamma, omega, truncation: T::c(3.0) };
        spec.validate()?;
        Ok(spec)
    }

    /// Same spec with the drift distribution truncated at `±truncation·σ_γ`.
    pub fn with_truncation(mut self, truncation: T) -> Result<Self> {
        self.truncation = truncation;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_gamma >= T::zero()) || !self.sigma_gamma.is_finite() {
            return Err(CoreError::Validation(format!(
                "sigma_gamma must be a finite nonnegative number, got {}",
                self.sigma_gamma
            )));
        }
        if !(self.omega >= T::zero()) || !(self.omega < T::one()) {
            return Err(CoreError::Validation(format!(
                "omega must satisfy 0 ≤ ω < 1, got {}",
                self.omega
            )));
        }
        if !(self.truncation > T::zero()) || !self.truncation.is_finite() {
            return Err(CoreError::Validation(format!(
                "truncation must be a finite positive multiple of σ, got {}",
                self.truncation
            )));
        }
        Ok(())
    }

    /// True when the realization it generates is an exact identity.
    pub fn is_zero(&self) -> bool {
        self.sigma_gamma == T::zero() && self.omega == T::zero()
    }
}

fn next_realization_id() -> u64 {
    static NEXT: AtomicU64 = AtomicU64::new(1);
    NEXT.fetch_add(1, Ordering::Relaxed)
}

/// One frozen draw of drift coefficients plus the crosstalk structure.
///
/// The `id` is unique per process and tags weight caches, so two different
/// realizations never alias.
#[derive(Debug, Clone)]
pub struct NoiseRealization<T> {
    gamma: Vec<T>,
    /// `off_diag[i]` lists `(j, ω)` contributions of aggressor `j` into `i`.
    off_diag: Vec<Vec<(usize, T)>>,
    id: u64,
}

impl<T: Real> NoiseRealization<T> {
    /// Draws drift for every shifter and wires crosstalk from each *active*
    /// shifter to its physical neighbors.
    ///
    /// With `σ_γ = 0` every `γ_i` is exactly 1 and with `ω = 0` there are no
    /// off-diagonal terms, so the zero-noise realization corrupts nothing
    /// (bit for bit).
    pub fn sample<R: Rng + ?Sized>(
        spec: &NoiseSpec<T>,
        adjacency: &Adjacency,
        active: &[bool],
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let n = adjacency.len();
        if active.len() != n {
            return Err(CoreError::Argument(format!(
                "active mask length {} does not match {} shifters",
                active.len(),
                n
            )));
        }
        let gamma = sample_gamma_drift(n, spec.sigma_gamma, spec.truncation, rng);
        let mut off_diag = vec![Vec::new(); n];
        if spec.omega > T::zero() {
            for i in 0..n {
                for j in [i.wrapping_sub(1), i + 1] {
                    if j < n && active[j] && adjacency.are_adjacent(i, j) {
                        off_diag[i].push((j, spec.omega));
                    }
                }
            }
        }
        Ok(NoiseRealization { gamma, off_diag, id: next_realization_id() })
    }

    /// Exact-identity realization for `n` shifters.
    pub fn identity(n: usize) -> Self {
        NoiseRealization {
            gamma: vec![T::one(); n],
            off_diag: vec![Vec::new(); n],
            id: next_realization_id(),
        }
    }

    /// Assembles a realization from explicit parts (mainly for tests).
    pub fn from_parts(gamma: Vec<T>, off_diag: Vec<Vec<(usize, T)>>) -> Result<Self> {
        if gamma.len() != off_diag.len() {
            return Err(CoreError::Argument(format!(
                "gamma has {} entries but off_diag has {}",
                gamma.len(),
                off_diag.len()
            )));
        }
        let n = gamma.len();
        for (i, row) in off_diag.iter().enumerate() {
            for &(j, _) in row {
                if j >= n || j == i {
                    return Err(CoreError::Argument(format!(
                        "off-diagonal index {} invalid in row {}",
                        j, i
                    )));
                }
            }
        }
        Ok(NoiseRealization { gamma, off_diag, id: next_realization_id() })
    }

    /// Process-unique tag for cache invalidation.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn gamma(&self) -> &[T] {
        &self.gamma
    }

    /// Realized phases `Φ^c = Ω·(Γ·Φ)`; **not** wrapped to `[0, 2π)`.
    pub fn corrupted(&self, phases: &[T]) -> Result<Vec<T>> {
        if phases.len() != self.gamma.len() {
            return Err(CoreError::Argument(format!(
                "expected {} phases, got {}",
                self.gamma.len(),
                phases.len()
            )));
        }
        self.corrupted_segment(0, phases)
    }

    /// Realized phases for the global index window
    /// `start..start + phases.len()`.
    ///
    /// Valid only when the window is crosstalk-closed (every aggressor of an
    /// index inside falls inside too), which holds for any union of whole
    /// banks; a leaking reference is an argument error. Lets callers rebuild
    /// one layer without assembling the full phase vector.
    pub fn corrupted_segment(&self, start: usize, phases: &[T]) -> Result<Vec<T>> {
        let end = start + phases.len();
        if end > self.gamma.len() {
            return Err(CoreError::Argument(format!(
                "segment {}..{} exceeds {} shifters",
                start,
                end,
                self.gamma.len()
            )));
        }
        let mut out = Vec::with_capacity(phases.len());
        for (offset, &phi) in phases.iter().enumerate() {
            let i = start + offset;
            let mut v = self.gamma[i] * phi;
            for &(j, w) in &self.off_diag[i] {
                if j < start || j >= end {
                    return Err(CoreError::Argument(format!(
                        "segment {}..{} is not crosstalk-closed: {} references {}",
                        start, end, i, j
                    )));
                }
                v += w * self.gamma[j] * phases[j - start];
            }
            out.push(v);
        }
        Ok(out)
    }
}

/// Draws `γ_i = 1 + ε_i` with `ε_i ~ N(0, σ²)` truncated to
/// `|ε_i| ≤ truncation·σ` by rejection. `σ = 0` yields exactly 1 for every
/// entry. Draws are performed in `f64` regardless of `T`, so the stream of
/// random numbers consumed is identical across scalar types.
pub fn sample_gamma_drift<T: Real, R: Rng + ?Sized>(
    n: usize,
    sigma: T,
    truncation: T,
    rng: &mut R,
) -> Vec<T> {
    if sigma == T::zero() {
        return vec![T::one(); n];
    }
    let sigma64 = sigma.to_f64().expect("sigma converts to f64");
    let normal = Normal::new(0.0f64, sigma64).expect("validated sigma");
    let bound = truncation.to_f64().expect("truncation converts to f64") * sigma64;
    (0..n)
        .map(|_| {
            let eps = loop {
                let e = normal.sample(rng);
                if e.abs() <= bound {
                    break e;
                }
            };
            T::c(1.0 + eps)
        })
        .collect()
}
