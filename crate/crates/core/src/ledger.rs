//! Power, energy, and query accounting.
//!
//! Thermal phase shifters dissipate in proportion to the phase they hold, so
//! the instantaneous power of a configuration is the sum of the *active*
//! shifters' canonical phases in `[0, 2π)`. Energy integrates that power
//! over iterations (unit timestep), and every hardware forward pass —
//! training eval, accuracy probe, or deployment check — counts as one query.
//! Budgets are advisory: exceeding one records a violation event and logs a
//! warning but never aborts a run.

use crate::mesh::wrap_phase;
use crate::{CoreError, Real, Result};

/// Which advisory limit a violation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetKind {
    Power,
    Energy,
}

/// One recorded budget excursion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetViolation<T> {
    pub kind: BudgetKind,
    /// Iteration at which the excursion was observed (1-based).
    pub iteration: u64,
    pub value: T,
    pub limit: T,
}

/// Instantaneous dissipation of a phase configuration: the sum of wrapped
/// phases over the active shifters. Passive shifters hold their programmed
/// bias and are excluded by convention.
pub fn power_estimate<T: Real>(phases: &[T], active: &[bool]) -> Result<T> {
    if phases.len() != active.len() {
        return Err(CoreError::Argument(format!(
            "phase vector length {} does not match mask length {}",
            phases.len(),
            active.len()
        )));
    }
    let mut total = T::zero();
    for (&phi, &on) in phases.iter().zip(active.iter()) {
        if on {
            total += wrap_phase(phi)?;
        }
    }
    Ok(total)
}

/// Run-long accounting of power, energy, forward queries, and budget
/// excursions.
#[derive(Debug, Clone)]
pub struct PowerLedger<T> {
    power_now: T,
    energy_total: T,
    queries_total: u64,
    iterations: u64,
    power_budget: Option<T>,
    energy_budget: Option<T>,
    violations: Vec<BudgetViolation<T>>,
}

impl<T: Real> Default for PowerLedger<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> PowerLedger<T> {
    pub fn new() -> Self {
        PowerLedger {
            power_now: T::zero(),
            energy_total: T::zero(),
            queries_total: 0,
            iterations: 0,
            power_budget: None,
            energy_budget: None,
            violations: Vec::new(),
        }
    }

    /// Ledger with advisory limits; `None` disables a limit.
    pub fn with_budgets(power_budget: Option<T>, energy_budget: Option<T>) -> Self {
        PowerLedger { power_budget, energy_budget, ..Self::new() }
    }

    /// Counts one hardware forward pass.
    pub fn bump_query(&mut self) {
        self.queries_total += 1;
    }

    pub fn queries_total(&self) -> u64 {
        self.queries_total
    }

    pub fn power_now(&self) -> T {
        self.power_now
    }

    pub fn energy_total(&self) -> T {
        self.energy_total
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    pub fn violations(&self) -> &[BudgetViolation<T>] {
        &self.violations
    }

    /// Closes one optimizer iteration at dissipation `power`: advances the
    /// iteration count, integrates energy over a unit timestep, and checks
    /// the advisory budgets.
    pub fn record_iteration(&mut self, power: T) {
        self.iterations += 1;
        self.power_now = power;
        self.energy_total += power;
        if let Some(limit) = self.power_budget {
            if power > limit {
                log::warn!(
                    "power budget exceeded at iteration {}: {} > {}",
                    self.iterations,
                    power,
                    limit
                );
                self.violations.push(BudgetViolation {
                    kind: BudgetKind::Power,
                    iteration: self.iterations,
                    value: power,
                    limit,
                });
            }
        }
        if let Some(limit) = self.energy_budget {
            if self.energy_total > limit {
                log::warn!(
                    "energy budget exceeded at iteration {}: {} > {}",
                    self.iterations,
                    self.energy_total,
                    limit
                );
                self.violations.push(BudgetViolation {
                    kind: BudgetKind::Energy,
                    iteration: self.iterations,
                    value: self.energy_total,
                    limit,
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{PI, TAU};

    #[test]
    fn power_sums_wrapped_active_phases() {
        // {0, π, 3π} with everything active: 0 + π + wrap(3π) = 2π.
        let p = power_estimate(&[0.0, PI, 3.0 * PI], &[true, true, true]).unwrap();
        assert!((p - TAU).abs() < 1e-12);
    }

    #[test]
    fn passive_shifters_cost_nothing() {
        let p = power_estimate(&[1.0f64, 2.0, 3.0], &[false, false, false]).unwrap();
        assert_eq!(p, 0.0);
        let p = power_estimate(&[1.0f64, 2.0, 3.0], &[false, true, false]).unwrap();
        assert!((p - 2.0).abs() < 1e-15);
    }

    #[test]
    fn power_is_invariant_under_full_turns() {
        let base = power_estimate(&[0.3, 1.1], &[true, true]).unwrap();
        let turned = power_estimate(&[0.3 + TAU, 1.1 - TAU], &[true, true]).unwrap();
        assert!((base - turned).abs() < 1e-12);
    }

    #[test]
    fn power_estimate_validates() {
        assert!(power_estimate(&[1.0], &[true, false]).is_err());
        assert!(power_estimate(&[f64::NAN], &[true]).is_err());
        // A non-finite passive phase is never summed, but the mask length
        // must still match.
        assert!(power_estimate(&[f64::NAN], &[false]).is_ok());
    }

    #[test]
    fn expected_power_scales_with_active_fraction() {
        // Uniform phases on [0, 2π) have mean π, so the expected total over
        // an α-fraction active set is α·n·π.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let phases: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..TAU)).collect();
        let alpha = 0.15;
        let k = (alpha * n as f64).round() as usize;
        let mut active = vec![false; n];
        for idx in rand::seq::index::sample(&mut rng, n, k) {
            active[idx] = true;
        }
        let p = power_estimate(&phases, &active).unwrap();
        let expected = alpha * n as f64 * PI;
        assert!(
            (p - expected).abs() < 0.05 * expected,
            "power {} too far from expectation {}",
            p,
            expected
        );
    }

    #[test]
    fn energy_integrates_power_over_iterations() {
        let mut ledger = PowerLedger::new();
        for _ in 0..10 {
            ledger.record_iteration(5.0);
        }
        assert_eq!(ledger.energy_total(), 50.0);
        assert_eq!(ledger.power_now(), 5.0);
        assert_eq!(ledger.iterations(), 10);

        let mut ledger = PowerLedger::new();
        for p in [1.0, 2.0, 3.0] {
            ledger.record_iteration(p);
        }
        assert_eq!(ledger.energy_total(), 6.0);
        assert_eq!(ledger.power_now(), 3.0);
    }

    #[test]
    fn queries_count_individually() {
        let mut ledger = PowerLedger::<f64>::new();
        assert_eq!(ledger.queries_total(), 0);
        ledger.bump_query();
        ledger.bump_query();
        assert_eq!(ledger.queries_total(), 2);
    }

    #[test]
    fn budgets_record_violations_without_aborting() {
        let mut ledger = PowerLedger::with_budgets(Some(1.0), Some(2.5));
        ledger.record_iteration(0.5); // fine
        ledger.record_iteration(2.0); // power violation
        ledger.record_iteration(0.5); // cumulative energy 3.0: energy violation
        assert_eq!(ledger.violations().len(), 2);
        assert_eq!(ledger.violations()[0].kind, BudgetKind::Power);
        assert_eq!(ledger.violations()[0].iteration, 2);
        assert_eq!(ledger.violations()[1].kind, BudgetKind::Energy);
        assert_eq!(ledger.violations()[1].iteration, 3);
        // The run keeps going; totals keep integrating.
        assert_eq!(ledger.energy_total(), 3.0);
    }
}
