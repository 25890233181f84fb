//! Simulation and derivative-free on-chip training of MZI-mesh optical
//! neural networks.
//!
//! An optical neural network (ONN) realizes each weight matrix as a triangular
//! mesh of Mach-Zehnder interferometers: `W = U(Φ^U) · Σ(Φ^S) · V*(Φ^V)`,
//! where `U` and `V*` are products of planar rotations driven by phase
//! shifters and `Σ` is a cosine-parametrized diagonal. This crate provides:
//!
//! - [`mesh`] — building and decomposing weight matrices from phase programs;
//! - [`noise`] — phase-shifter coefficient drift (Γ) and thermal crosstalk (Ω);
//! - [`network`] — multi-layer forward inference (dense and im2col
//!   convolution), loss, and accuracy with query accounting;
//! - [`optim`] — derivative-free on-chip tuning: sparse zeroth-order
//!   stochastic coordinate descent with power-aware pruning, plus STP,
//!   coordinate-wise ZOO-ADAM, ZOO-Newton, and FLOPS-style Gaussian smoothing
//!   baselines;
//! - [`ledger`] — phase-shift power, energy, and forward-query accounting;
//! - [`data`] — dataset ingestion (IDX images, labeled CSV, synthetic
//!   clusters), host-side pretraining, and deployment onto the mesh;
//! - [`linalg`] — the small dense-matrix kernel (including an SVD) that the
//!   rest of the crate is built on.
//!
//! All numeric kernels are generic over a [`Real`] scalar; the `*64` aliases
//! at the crate root fix `f64`, which is what the experiment binaries use.

pub mod data;
pub mod error;
pub mod ledger;
pub mod linalg;
pub mod mesh;
pub mod network;
pub mod noise;
pub mod optim;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};

pub use error::{CoreError, Result};

/// Scalar abstraction for every numeric kernel in the crate.
///
/// Implemented by `f32` and `f64`. Contractual tolerances (orthogonality,
/// round-trips, oracle comparisons) are stated for `f64`; `f32` works but
/// meets proportionally looser bounds.
pub trait Real:
    Float + FloatConst + FromPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` constant.
    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant must convert into the scalar type")
    }
}

impl<T> Real for T where
    T: Float + FloatConst + FromPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
}

/// Dense `f64` matrix.
pub type Mat64 = linalg::Mat<f64>;
/// One SVD-factored mesh layer over `f64`.
pub type MeshLayer64 = mesh::MeshLayer<f64>;
/// Multi-layer ONN over `f64`.
pub type OnnModel64 = network::OnnModel<f64>;
/// Power/energy/query ledger over `f64`.
pub type PowerLedger64 = ledger::PowerLedger<f64>;
/// Noise specification over `f64`.
pub type NoiseSpec64 = noise::NoiseSpec<f64>;
/// Frozen noise realization over `f64`.
pub type NoiseRealization64 = noise::NoiseRealization<f64>;
/// Labeled dataset over `f64`.
pub type Dataset64 = data::Dataset<f64>;
/// Host-side pretrained dense model over `f64`.
pub type PretrainedModel64 = data::PretrainedModel<f64>;
/// Optimizer configuration over `f64`.
pub type TrainConfig64 = optim::TrainConfig<f64>;
