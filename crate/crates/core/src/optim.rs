//! Derivative-free on-chip tuning.
//!
//! The optimizers here treat the hardware as a black box: the only access to
//! the objective is evaluating the loss at the current phase configuration
//! (one metered query per mini-batch forward). The flagship method is
//! sparse zeroth-order stochastic coordinate descent (`szo_scd`): each
//! iteration visits a random subset of an *active* coordinate set and tries
//! a forward probe `φ+δφ`, falling back to a blind backward step `φ−δφ`,
//! with an optional power-aware prune that refuses backward steps which
//! would wrap the phase upward. Four baselines share the same query
//! accounting: STP (compare three candidates), coordinate-wise ZOO-ADAM,
//! coordinate-wise ZOO-Newton, and a FLOPS-style Gaussian-smoothing full
//! gradient step.
//!
//! Loss caching matters for query parity: `szo_scd` and `stp` keep the loss
//! of the *current* point cached and only refresh it on moves, so they pay
//! one baseline query per mini-batch instead of one per coordinate.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ledger::{power_estimate, PowerLedger};
use crate::mesh::{wrap_phase, MeshBlock};
use crate::network::{Batch, OnnModel, PhaseLayout};
use crate::noise::NoiseRealization;
use crate::{CoreError, Real, Result};

/// Which phases the controller is allowed to tune.
///
/// The Σ banks are always tunable (they carry the singular values, the
/// strongest levers); of the U/V rotation phases only a seeded
/// `α`-fraction is, which is what makes sparse recovery cheap.
#[derive(Debug, Clone)]
pub struct ActiveMask {
    active: Vec<bool>,
    active_list: Vec<usize>,
    alpha: f64,
}

impl ActiveMask {
    /// Samples `round(α·|U∪V|)` rotation phases (without replacement) and
    /// marks every Σ phase active.
    pub fn select_active(layout: &PhaseLayout, alpha: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(CoreError::Argument(format!(
                "alpha must lie in [0, 1], got {}",
                alpha
            )));
        }
        let mut uv_indices = Vec::new();
        let mut active = vec![false; layout.total()];
        for range in layout.ranges() {
            match range.block {
                MeshBlock::S => {
                    for g in range.start..range.start + range.len {
                        active[g] = true;
                    }
                }
                MeshBlock::U | MeshBlock::V => {
                    uv_indices.extend(range.start..range.start + range.len);
                }
            }
        }
        let count = (alpha * uv_indices.len() as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for pick in rand::seq::index::sample(&mut rng, uv_indices.len(), count) {
            active[uv_indices[pick]] = true;
        }
        Ok(Self::from_active(active, alpha))
    }

    /// Marks every coordinate active.
    pub fn full(n: usize) -> Self {
        Self::from_active(vec![true; n], 1.0)
    }

    /// Builds a mask from an explicit boolean vector.
    pub fn from_active(active: Vec<bool>, alpha: f64) -> Self {
        let active_list = active
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| if a { Some(i) } else { None })
            .collect();
        ActiveMask { active, active_list, alpha }
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.active[i]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.active
    }

    /// Active global indices in ascending order.
    pub fn active_list(&self) -> &[usize] {
        &self.active_list
    }

    pub fn n_active(&self) -> usize {
        self.active_list.len()
    }

    /// The rotation-phase fraction this mask was built with.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// The tuning algorithms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Sparse zeroth-order stochastic coordinate descent with power-aware
    /// pruning.
    SzoScd,
    /// Stochastic three-point coordinate search.
    Stp,
    /// Coordinate-wise ADAM on central-difference gradients.
    ZooAdam,
    /// Coordinate-wise Newton on central-difference gradient and curvature.
    ZooNewton,
    /// Gaussian-smoothing full-gradient estimator over the active set.
    Flops,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 5] = [
        OptimizerKind::SzoScd,
        OptimizerKind::Stp,
        OptimizerKind::ZooAdam,
        OptimizerKind::ZooNewton,
        OptimizerKind::Flops,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::SzoScd => "szo_scd",
            OptimizerKind::Stp => "stp",
            OptimizerKind::ZooAdam => "zoo_adam",
            OptimizerKind::ZooNewton => "zoo_newton",
            OptimizerKind::Flops => "flops",
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "szo_scd" => Ok(OptimizerKind::SzoScd),
            "stp" => Ok(OptimizerKind::Stp),
            "zoo_adam" => Ok(OptimizerKind::ZooAdam),
            "zoo_newton" => Ok(OptimizerKind::ZooNewton),
            "flops" => Ok(OptimizerKind::Flops),
            other => Err(CoreError::Argument(format!(
                "unknown optimizer '{}'; expected szo_scd, stp, zoo_adam, zoo_newton, or flops",
                other
            ))),
        }
    }
}

/// Hyperparameters for one tuning run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig<T> {
    pub kind: OptimizerKind,
    /// Coordinate probe step at epoch 0.
    pub delta_phi0: T,
    /// Per-epoch multiplicative decay of the probe step.
    pub delta_decay: T,
    /// Learning rate (meaning depends on the algorithm).
    pub lr: T,
    /// Central-difference probe radius for gradient estimators.
    pub mu: T,
    /// Number of Gaussian directions per FLOPS iteration.
    pub q: usize,
    /// Fraction of the active set visited per coordinate-descent iteration.
    pub sparsity: T,
    /// Probability of refusing a power-increasing backward step.
    pub prune_prob: T,
    /// Weight of the power term added to the training loss.
    pub lambda: T,
    /// Mini-batch size the runner should draw.
    pub batch_size: usize,
    pub adam_beta1: T,
    pub adam_beta2: T,
    pub adam_eps: T,
    /// Curvature floor below which Newton falls back to a gradient step.
    pub newton_eps: T,
    /// Seed for coordinate selection, pruning draws, and probe directions.
    pub seed: u64,
}

impl<T: Real> TrainConfig<T> {
    /// Defaults for the given algorithm.
    pub fn new(kind: OptimizerKind) -> Self {
        let lr = match kind {
            OptimizerKind::SzoScd | OptimizerKind::Stp => T::c(2e-2),
            OptimizerKind::ZooAdam | OptimizerKind::ZooNewton => T::c(1e-3),
            OptimizerKind::Flops => T::c(1e-1),
        };
        TrainConfig {
            kind,
            delta_phi0: T::c(0.02),
            delta_decay: T::c(0.985),
            lr,
            mu: T::c(1e-3),
            q: 60,
            sparsity: T::c(0.1),
            prune_prob: T::zero(),
            lambda: T::zero(),
            batch_size: 32,
            adam_beta1: T::c(0.9),
            adam_beta2: T::c(0.999),
            adam_eps: T::c(1e-8),
            newton_eps: T::c(1e-6),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: T| -> Result<()> {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(CoreError::Validation(format!(
                    "{} must be a positive finite number, got {}",
                    name, v
                )));
            }
            Ok(())
        };
        positive("delta_phi0", self.delta_phi0)?;
        positive("lr", self.lr)?;
        positive("mu", self.mu)?;
        if !(self.delta_decay > T::zero()) || !(self.delta_decay <= T::one()) {
            return Err(CoreError::Validation(format!(
                "delta_decay must lie in (0, 1], got {}",
                self.delta_decay
            )));
        }
        if !(self.sparsity > T::zero()) || !(self.sparsity <= T::one()) {
            return Err(CoreError::Validation(format!(
                "sparsity must lie in (0, 1], got {}",
                self.sparsity
            )));
        }
        if !(self.prune_prob >= T::zero()) || !(self.prune_prob <= T::one()) {
            return Err(CoreError::Validation(format!(
                "prune_prob must lie in [0, 1], got {}",
                self.prune_prob
            )));
        }
        if !(self.lambda >= T::zero()) || !self.lambda.is_finite() {
            return Err(CoreError::Validation(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if self.q == 0 {
            return Err(CoreError::Validation("q must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Validation("batch_size must be at least 1".into()));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(v >= T::zero()) || !(v < T::one()) {
                return Err(CoreError::Validation(format!(
                    "{} must lie in [0, 1), got {}",
                    name, v
                )));
            }
        }
        positive("adam_eps", self.adam_eps)?;
        positive("newton_eps", self.newton_eps)?;
        Ok(())
    }
}

/// Probe step for a given epoch: `δφ0 · decay^epoch`.
pub fn step_size_for_epoch<T: Real>(config: &TrainConfig<T>, epoch: usize) -> T {
    config.delta_phi0 * config.delta_decay.powi(epoch as i32)
}

/// Mutable run state shared by all algorithms.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    config: TrainConfig<T>,
    delta_phi: T,
    cached_loss: Option<T>,
    adam_m: Vec<T>,
    adam_v: Vec<T>,
    adam_t: Vec<u64>,
    rng: ChaCha8Rng,
    iteration: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: TrainConfig<T>, dim: usize) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState {
            delta_phi: config.delta_phi0,
            cached_loss: None,
            adam_m: vec![T::zero(); dim],
            adam_v: vec![T::zero(); dim],
            adam_t: vec![0; dim],
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            iteration: 0,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig<T> {
        &self.config
    }

    /// Current coordinate probe step.
    pub fn delta_phi(&self) -> T {
        self.delta_phi
    }

    /// Applies the probe-step schedule for an epoch.
    pub fn set_epoch(&mut self, epoch: usize) {
        self.delta_phi = step_size_for_epoch(&self.config, epoch);
    }

    /// Iterations completed so far.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn cached_loss(&self) -> Option<T> {
        self.cached_loss
    }

    /// Forgets the cached current-point loss. Must be called whenever the
    /// objective changes under the optimizer (a new mini-batch).
    pub fn invalidate_cache(&mut self) {
        self.cached_loss = None;
    }
}

/// A black-box objective over a phase vector.
///
/// `set` wraps the phase like the hardware controller does; `eval` runs one
/// metered forward pass (exactly one ledger query).
pub trait Objective<T: Real> {
    fn dim(&self) -> usize;
    fn get(&self, i: usize) -> T;
    fn set(&mut self, i: usize, value: T) -> Result<()>;
    fn eval(&mut self, ledger: &mut PowerLedger<T>) -> Result<T>;
    /// Snapshot of all phases (for power accounting).
    fn snapshot(&self) -> Vec<T>;
}

/// Training loss with an optional power penalty: `raw + λ·P(Φ)` over the
/// active shifters. `λ = 0` returns `raw` untouched.
pub fn penalized_loss<T: Real>(
    raw: T,
    phases: &[T],
    mask: &ActiveMask,
    lambda: T,
) -> Result<T> {
    if lambda == T::zero() {
        return Ok(raw);
    }
    Ok(raw + lambda * power_estimate(phases, mask.as_slice())?)
}

/// The deployed model + a mini-batch as a black-box objective: evaluating
/// runs a noisy batched forward and adds the power penalty.
pub struct ModelObjective<'a, T> {
    model: &'a mut OnnModel<T>,
    noise: &'a NoiseRealization<T>,
    mask: &'a ActiveMask,
    batch: Batch<T>,
    lambda: T,
}

impl<'a, T: Real> ModelObjective<'a, T> {
    pub fn new(
        model: &'a mut OnnModel<T>,
        noise: &'a NoiseRealization<T>,
        mask: &'a ActiveMask,
        batch: Batch<T>,
        lambda: T,
    ) -> Result<Self> {
        if !(lambda >= T::zero()) || !lambda.is_finite() {
            return Err(CoreError::Argument(format!(
                "lambda must be nonnegative, got {}",
                lambda
            )));
        }
        if mask.len() != model.phase_count() {
            return Err(CoreError::Argument(format!(
                "mask covers {} phases but the model has {}",
                mask.len(),
                model.phase_count()
            )));
        }
        Ok(ModelObjective { model, noise, mask, batch, lambda })
    }

    /// Swaps in the next mini-batch. The caller must also invalidate the
    /// optimizer state's loss cache.
    pub fn set_batch(&mut self, batch: Batch<T>) {
        self.batch = batch;
    }

    pub fn model(&self) -> &OnnModel<T> {
        &*self.model
    }
}

impl<T: Real> Objective<T> for ModelObjective<'_, T> {
    fn dim(&self) -> usize {
        self.model.phase_count()
    }

    fn get(&self, i: usize) -> T {
        self.model.phase(i).expect("index within phase count")
    }

    fn set(&mut self, i: usize, value: T) -> Result<()> {
        self.model.set_phase(i, value)
    }

    fn eval(&mut self, ledger: &mut PowerLedger<T>) -> Result<T> {
        let raw = self.model.batch_loss(&self.batch, self.noise, ledger)?;
        penalized_loss(raw, &self.model.phases_vec(), self.mask, self.lambda)
    }

    fn snapshot(&self) -> Vec<T> {
        self.model.phases_vec()
    }
}

/// Separable quadratic test objective `f(Φ) = Σ wᵢ·(φᵢ − cᵢ)²`.
///
/// Used to calibrate query accounting and step behavior without hardware.
#[derive(Debug, Clone)]
pub struct SyntheticQuadratic<T> {
    weights: Vec<T>,
    centers: Vec<T>,
    phases: Vec<T>,
}

impl<T: Real> SyntheticQuadratic<T> {
    pub fn new(weights: Vec<T>, centers: Vec<T>, init: Vec<T>) -> Result<Self> {
        if weights.len() != centers.len() || weights.len() != init.len() {
            return Err(CoreError::Argument("weights, centers, init must share a length".into()));
        }
        let phases = init.into_iter().map(wrap_phase).collect::<Result<_>>()?;
        Ok(SyntheticQuadratic { weights, centers, phases })
    }
}

impl<T: Real> Objective<T> for SyntheticQuadratic<T> {
    fn dim(&self) -> usize {
        self.phases.len()
    }

    fn get(&self, i: usize) -> T {
        self.phases[i]
    }

    fn set(&mut self, i: usize, value: T) -> Result<()> {
        self.phases[i] = wrap_phase(value)?;
        Ok(())
    }

    fn eval(&mut self, ledger: &mut PowerLedger<T>) -> Result<T> {
        ledger.bump_query();
        let mut total = T::zero();
        for i in 0..self.phases.len() {
            let d = self.phases[i] - self.centers[i];
            total += self.weights[i] * d * d;
        }
        Ok(total)
    }

    fn snapshot(&self) -> Vec<T> {
        self.phases.clone()
    }
}

/// Separable linear test objective `f(Φ) = Σ wᵢ·φᵢ` (constant when all
/// weights are zero). Gradient estimators should recover `w` exactly in
/// expectation.
#[derive(Debug, Clone)]
pub struct SyntheticLinear<T> {
    weights: Vec<T>,
    phases: Vec<T>,
}

impl<T: Real> SyntheticLinear<T> {
    pub fn new(weights: Vec<T>, init: Vec<T>) -> Result<Self> {
        if weights.len() != init.len() {
            return Err(CoreError::Argument("weights and init must share a length".into()));
        }
        let phases = init.into_iter().map(wrap_phase).collect::<Result<_>>()?;
        Ok(SyntheticLinear { weights, phases })
    }
}

impl<T: Real> Objective<T> for SyntheticLinear<T> {
    fn dim(&self) -> usize {
        self.phases.len()
    }

    fn get(&self, i: usize) -> T {
        self.phases[i]
    }

    fn set(&mut self, i: usize, value: T) -> Result<()> {
        self.phases[i] = wrap_phase(value)?;
        Ok(())
    }

    fn eval(&mut self, ledger: &mut PowerLedger<T>) -> Result<T> {
        ledger.bump_query();
        let mut total = T::zero();
        for i in 0..self.phases.len() {
            total += self.weights[i] * self.phases[i];
        }
        Ok(total)
    }

    fn snapshot(&self) -> Vec<T> {
        self.phases.clone()
    }
}

/// Coordinates to visit this iteration: `max(1, ⌊s·|A|⌋)` distinct members
/// of the active list, in sampled order. Seeded by `(seed, iteration)` so a
/// run is reproducible regardless of how much randomness other components
/// consumed.
pub fn select_coords(active_list: &[usize], sparsity: f64, seed: u64, iteration: u64) -> Vec<usize> {
    if active_list.is_empty() {
        return Vec::new();
    }
    let k = ((sparsity * active_list.len() as f64).floor() as usize).clamp(1, active_list.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rand::seq::index::sample(&mut rng, active_list.len(), k)
        .iter()
        .map(|i| active_list[i])
        .collect()
}

fn cached_or_eval<T: Real, O: Objective<T>>(
    state: &mut OptimizerState<T>,
    obj: &mut O,
    ledger: &mut PowerLedger<T>,
) -> Result<T> {
    match state.cached_loss {
        Some(l) => Ok(l),
        None => {
            let l = obj.eval(ledger)?;
            state.cached_loss = Some(l);
            Ok(l)
        }
    }
}

/// One sparse zeroth-order coordinate-descent iteration. Returns the cached
/// loss at the final point (the representative loss of the iteration).
///
/// Per coordinate: probe `φ+δφ` (1 query) and accept if it improves;
/// otherwise step to `φ−δφ` blindly — unless that backward step would *wrap
/// upward* (possible only when `φ < δφ`) and a Bernoulli draw with the
/// prune probability says to skip, in which case the coordinate stays put.
/// A taken backward step re-evaluates to refresh the cache (1 more query).
pub fn szo_scd_iteration<T: Real, O: Objective<T>>(
    obj: &mut O,
    mask: &ActiveMask,
    state: &mut OptimizerState<T>,
    ledger: &mut PowerLedger<T>,
) -> Result<T> {
    let coords = select_coords(
        mask.active_list(),
        state.config.sparsity.to_f64().expect("sparsity converts"),
        state.config.seed,
        state.iteration,
    );
    let dphi = state.delta_phi;
    let prune_p = state.config.prune_prob;
    let mut current = cached_or_eval(state, obj, ledger)?;
    for &i in &coords {
        let phi = obj.get(i);
        obj.set(i, phi + dphi)?;
        let forward = obj.eval(ledger)?;
        if forward < current {
            current = forward;
            continue;
        }
        // The forward probe failed; the backward step wraps upward exactly
        // when φ < δφ, which is when pruning may refuse it.
        if phi < dphi && prune_p > T::zero() {
            let p = prune_p.to_f64().expect("prune_prob converts");
            if state.rng.random_bool(p) {
                obj.set(i, phi)?;
                continue;
            }
        }
        obj.set(i, phi - dphi)?;
        current = obj.eval(ledger)?;
    }
    state.cached_loss = Some(current);
    state.iteration += 1;
    Ok(current)
}

/// One stochastic three-point iteration: per coordinate, compare the cached
/// current loss with probes at `φ±δφ` (2 queries) and keep the best, ties
/// preferring the current point, then the forward probe.
pub fn stp_iteration<T: Real, O: Objective<T>>(
    obj: &mut O,
    mask: &ActiveMask,
    state: &mut OptimizerState<T>,
    ledger: &mut PowerLedger<T>,
) -> Result<T> {
    let coords = select_coords(
        mask.active_list(),
        state.config.sparsity.to_f64().expect("sparsity converts"),
        state.config.seed,
        state.iteration,
    );
    let dphi = state.delta_phi;
    let mut current = cached_or_eval(state, obj, ledger)?;
    for &i in &coords {
        let phi = obj.get(i);
        obj.set(i, phi + dphi)?;
        let forward = obj.eval(ledger)?;
        obj.set(i, phi - dphi)?;
        let backward = obj.eval(ledger)?;
        if current <= forward && current <= backward {
            obj.set(i, phi)?;
        } else if forward <= backward {
            obj.set(i, phi + dphi)?;
            current = forward;
        } else {
            current = backward; // already at φ−δφ
        }
    }
    state.cached_loss = Some(current);
    state.iteration += 1;
    Ok(current)
}

/// Central-difference gradient estimate along coordinate `i` with probe
/// radius `mu`: evaluates `φ±μ` (2 queries), restores `φ`, and returns
/// `(ĝ, (L₊+L₋)/2)`.
pub fn estimate_gradient<T: Real, O: Objective<T>>(
    obj: &mut O,
    i: usize,
    mu: T,
    ledger: &mut PowerLedger<T>,
) -> Result<(T, T)> {
    let phi = obj.get(i);
    obj.set(i, phi + mu)?;
    let lp = obj.eval(ledger)?;
    obj.set(i, phi - mu)?;
    let lm = obj.eval(ledger)?;
    obj.set(i, phi)?;
    let two = T::c(2.0);
    Ok(((lp - lm) / (two * mu), (lp + lm) / two))
}

/// One coordinate-wise ZOO-ADAM iteration: per coordinate, a
/// central-difference gradient (2 queries) feeds a per-coordinate ADAM cell
/// with its own bias-correction clock. Returns the mean probe loss.
pub fn zoo_adam_iteration<T: Real, O: Objective<T>>(
    obj: &mut O,
    mask: &ActiveMask,
    state: &mut OptimizerState<T>,
    ledger: &mut PowerLedger<T>,
) -> Result<T> {
    let coords = select_coords(
        mask.active_list(),
        state.config.sparsity.to_f64().expect("sparsity converts"),
        state.config.seed,
        state.iteration,
    );
    let (b1, b2, eps, lr, mu) = (
        state.config.adam_beta1,
        state.config.adam_beta2,
        state.config.adam_eps,
        state.config.lr,
        state.config.mu,
    );
    let mut loss_sum = T::zero();
    let mut n = 0usize;
    for &i in &coords {
        let (g, mid) = estimate_gradient(obj, i, mu, ledger)?;
        loss_sum += mid;
        n += 1;
        state.adam_t[i] += 1;
        let t = T::c(state.adam_t[i] as f64);
        state.adam_m[i] = b1 * state.adam_m[i] + (T::one() - b1) * g;
        state.adam_v[i] = b2 * state.adam_v[i] + (T::one() - b2) * g * g;
        let m_hat = state.adam_m[i] / (T::one() - b1.powf(t));
        let v_hat = state.adam_v[i] / (T::one() - b2.powf(t));
        let phi = obj.get(i);
        obj.set(i, phi - lr * m_hat / (v_hat.sqrt() + eps))?;
    }
    state.iteration += 1;
    if n == 0 {
        return cached_or_eval(state, obj, ledger);
    }
    Ok(loss_sum / T::c(n as f64))
}

/// One coordinate-wise ZOO-Newton iteration: per coordinate, evaluate
/// `φ`, `φ+μ`, `φ−μ` (3 queries — no caching), estimate gradient and
/// curvature, take `lr·ĝ/ĥ` when the curvature clears the floor and a plain
/// `lr·ĝ` gradient step otherwise. Returns the mean center loss.
pub fn zoo_newton_iteration<T: Real, O: Objective<T>>(
    obj: &mut O,
    mask: &ActiveMask,
    state: &mut OptimizerState<T>,
    ledger: &mut PowerLedger<T>,
) -> Result<T> {
    let coords = select_coords(
        mask.active_list(),
        state.config.sparsity.to_f64().expect("sparsity converts"),
        state.config.seed,
        state.iteration,
    );
    let (lr, mu, h_floor) = (state.config.lr, state.config.mu, state.config.newton_eps);
    let mut loss_sum = T::zero();
    let mut n = 0usize;
    for &i in &coords {
        let phi = obj.get(i);
        let l0 = obj.eval(ledger)?;
        obj.set(i, phi + mu)?;
        let lp = obj.eval(ledger)?;
        obj.set(i, phi - mu)?;
        let lm = obj.eval(ledger)?;
        let g = (lp - lm) / (T::c(2.0) * mu);
        let h = (lp - T::c(2.0) * l0 + lm) / (mu * mu);
        let step = if h > h_floor { lr * g / h } else { lr * g };
        obj.set(i, phi - step)?;
        loss_sum += l0;
        n += 1;
    }
    state.iteration += 1;
    if n == 0 {
        return cached_or_eval(state, obj, ledger);
    }
    Ok(loss_sum / T::c(n as f64))
}

/// One FLOPS-style Gaussian-smoothing step: a baseline eval plus `q`
/// directional probes restricted to the active set (q+1 queries), then one
/// full step along the averaged estimate. Returns the baseline loss.
pub fn flops_gradient_step<T: Real, O: Objective<T>>(
    obj: &mut O,
    mask: &ActiveMask,
    state: &mut OptimizerState<T>,
    ledger: &mut PowerLedger<T>,
) -> Result<T> {
    let active = mask.active_list();
    let base_loss = obj.eval(ledger)?;
    if active.is_empty() {
        state.iteration += 1;
        return Ok(base_loss);
    }
    let (lr, mu, q) = (state.config.lr, state.config.mu, state.config.q);
    let base: Vec<T> = active.iter().map(|&g| obj.get(g)).collect();
    let mut grad = vec![T::zero(); active.len()];
    let mut direction = vec![T::zero(); active.len()];
    for _ in 0..q {
        for d in direction.iter_mut() {
            *d = T::c(<StandardNormal as Distribution<f64>>::sample(
                &StandardNormal,
                &mut state.rng,
            ));
        }
        for (idx, &g) in active.iter().enumerate() {
            obj.set(g, base[idx] + mu * direction[idx])?;
        }
        let probe = obj.eval(ledger)?;
        let scale = (probe - base_loss) / mu;
        for (acc, &d) in grad.iter_mut().zip(direction.iter()) {
            *acc += scale * d;
        }
    }
    let qf = T::c(q as f64);
    for (idx, &g) in active.iter().enumerate() {
        obj.set(g, base[idx] - lr * grad[idx] / qf)?;
    }
    state.cached_loss = None; // the point moved; any cache is stale
    state.iteration += 1;
    Ok(base_loss)
}

/// Runs one iteration of whatever algorithm the state is configured for.
pub fn dispatch_iteration<T: Real, O: Objective<T>>(
    obj: &mut O,
    mask: &ActiveMask,
    state: &mut OptimizerState<T>,
    ledger: &mut PowerLedger<T>,
) -> Result<T> {
    match state.config.kind {
        OptimizerKind::SzoScd => szo_scd_iteration(obj, mask, state, ledger),
        OptimizerKind::Stp => stp_iteration(obj, mask, state, ledger),
        OptimizerKind::ZooAdam => zoo_adam_iteration(obj, mask, state, ledger),
        OptimizerKind::ZooNewton => zoo_newton_iteration(obj, mask, state, ledger),
        OptimizerKind::Flops => flops_gradient_step(obj, mask, state, ledger),
    }
}
