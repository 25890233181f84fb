//! Experiment configuration: defaults, config-file parsing, and validation.
//!
//! A configuration is a flat set of `key = value` pairs. It can be built from
//! three layers with increasing precedence: built-in defaults, an optional
//! config file, and command-line flag overrides. Unknown keys in a config
//! file are rejected, and every offender is listed in the error message so a
//! typo hunt takes one round trip.

use std::fmt::Write as _;
use std::path::PathBuf;

use onn_core::error::{CoreError, Result};
use onn_core::optim::OptimizerKind;

/// Full description of one experiment run.
///
/// `lr` is optional: when unset, each optimizer keeps its own default step
/// size instead of sharing one global value.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Dataset location: a directory of IDX files, or a `.csv` file.
    pub dataset: PathBuf,
    /// Label column name (CSV datasets only).
    pub label_column: String,
    /// Output directory for CSV curves and cached models.
    pub out_dir: PathBuf,
    /// Dense layer widths, input first, class count last.
    pub arch: Vec<usize>,
    /// Pretraining epochs (digital, weight-space).
    pub pre_epochs: usize,
    /// Pretraining learning rate.
    pub pre_lr: f64,
    /// On-chip training epochs.
    pub epochs: usize,
    /// Mini-batch size for both pretraining and on-chip training.
    pub batch_size: usize,
    /// On-chip optimizer.
    pub optimizer: OptimizerKind,
    /// Fraction of rotation phases deployed as tunable (active).
    pub alpha: f64,
    /// Fraction of the active set updated per iteration.
    pub sparsity: f64,
    /// Probability of skipping a power-increasing backward step.
    pub prune_prob: f64,
    /// Power penalty weight on the training objective.
    pub lambda: f64,
    /// Initial coordinate step size (radians).
    pub delta_phi0: f64,
    /// Per-epoch multiplicative decay of the step size.
    pub delta_decay: f64,
    /// Learning rate for gradient-style optimizers; `None` keeps per-optimizer defaults.
    pub lr: Option<f64>,
    /// Finite-difference probe width for gradient estimators.
    pub mu: f64,
    /// Number of random directions per gradient-sampling step.
    pub q: usize,
    /// Device-variation standard deviation (multiplicative phase drift).
    pub sigma_gamma: f64,
    /// Thermal crosstalk coefficient between adjacent active shifters.
    pub omega: f64,
    /// Drift truncation, as a multiple of `sigma_gamma`.
    pub truncation: f64,
    /// Diagonal scale bound: singular values live in [-bound, bound].
    pub sigma_bound: f64,
    /// Seed for data shuffling and batch sampling.
    pub seed_data: u64,
    /// Seed for the active-mask draw.
    pub seed_mask: u64,
    /// Seed for the hardware noise realization.
    pub seed_noise: u64,
    /// Seed for the optimizer's own randomness.
    pub seed_opt: u64,
    /// Optional power budget; exceeding it logs a violation event.
    pub power_budget: Option<f64>,
    /// Optional energy budget; exceeding it logs a violation event.
    pub energy_budget: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("testdata/digits-8x8"),
            label_column: "label".to_string(),
            out_dir: PathBuf::from("runs"),
            arch: vec![64, 24, 24, 10],
            pre_epochs: 30,
            pre_lr: 0.1,
            epochs: 60,
            batch_size: 32,
            optimizer: OptimizerKind::SzoScd,
            alpha: 0.15,
            sparsity: 0.1,
            prune_prob: 0.0,
            lambda: 0.0,
            delta_phi0: 0.02,
            delta_decay: 0.985,
            lr: None,
            mu: 1e-3,
            q: 60,
            sigma_gamma: 2e-3,
            omega: 2e-3,
            truncation: 3.0,
            sigma_bound: 3.0,
            seed_data: 4,
            seed_mask: 1,
            seed_noise: 2,
            seed_opt: 3,
            power_budget: None,
            energy_budget: None,
        }
    }
}

/// Every key accepted in config files, in documentation order.
pub const CONFIG_KEYS: &[&str] = &[
    "dataset",
    "label_column",
    "out_dir",
    "arch",
    "pre_epochs",
    "pre_lr",
    "epochs",
    "batch_size",
    "optimizer",
    "alpha",
    "sparsity",
    "prune_prob",
    "lambda",
    "delta_phi0",
    "delta_decay",
    "lr",
    "mu",
    "q",
    "sigma_gamma",
    "omega",
    "truncation",
    "sigma_bound",
    "seed_data",
    "seed_mask",
    "seed_noise",
    "seed_opt",
    "power_budget",
    "energy_budget",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| {
        CoreError::Argument(format!("invalid value for '{key}': '{value}'"))
    })
}

fn parse_arch(value: &str) -> Result<Vec<usize>> {
    let dims: Result<Vec<usize>> = value
        .split(',')
        .map(|tok| parse_num::<usize>("arch", tok))
        .collect();
    dims
}

impl ExperimentConfig {
    /// Applies a single `key = value` pair. Unknown keys and malformed
    /// values are reported as argument errors.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = PathBuf::from(value),
            "label_column" => self.label_column = value.to_string(),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "arch" => self.arch = parse_arch(value)?,
            "pre_epochs" => self.pre_epochs = parse_num(key, value)?,
            "pre_lr" => self.pre_lr = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "optimizer" => self.optimizer = value.trim().parse::<OptimizerKind>()?,
            "alpha" => self.alpha = parse_num(key, value)?,
            "sparsity" => self.sparsity = parse_num(key, value)?,
            "prune_prob" => self.prune_prob = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "delta_phi0" => self.delta_phi0 = parse_num(key, value)?,
            "delta_decay" => self.delta_decay = parse_num(key, value)?,
            "lr" => self.lr = Some(parse_num(key, value)?),
            "mu" => self.mu = parse_num(key, value)?,
            "q" => self.q = parse_num(key, value)?,
            "sigma_gamma" => self.sigma_gamma = parse_num(key, value)?,
            "omega" => self.omega = parse_num(key, value)?,
            "truncation" => self.truncation = parse_num(key, value)?,
            "sigma_bound" => self.sigma_bound = parse_num(key, value)?,
            "seed_data" => self.seed_data = parse_num(key, value)?,
            "seed_mask" => self.seed_mask = parse_num(key, value)?,
            "seed_noise" => self.seed_noise = parse_num(key, value)?,
            "seed_opt" => self.seed_opt = parse_num(key, value)?,
            "power_budget" => self.power_budget = Some(parse_num(key, value)?),
            "energy_budget" => self.energy_budget = Some(parse_num(key, value)?),
            other => {
                return Err(CoreError::Argument(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// Parses a config file of `key = value` lines over `self`.
    ///
    /// `#` starts a comment; blank lines are skipped. All problems — unknown
    /// keys, missing `=`, malformed values — are collected and reported
    /// together, each tagged with its line number.
    pub fn apply_file(&mut self, path: &std::path::Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        let mut problems = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(cut) => &raw[..cut],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                problems.push(format!("line {}: expected 'key = value'", idx + 1));
                continue;
            };
            if let Err(e) = self.apply_kv(key.trim(), value.trim()) {
                problems.push(format!("line {}: {}", idx + 1, e));
            }
        }
        if problems.is_empty() {
            return Ok(());
        }
        let mut msg = format!("config file {}:", path.display());
        for p in &problems {
            let _ = write!(msg, "\n  {p}");
        }
        Err(CoreError::Argument(msg))
    }

    /// Range checks cheap enough to run before any data is touched.
    pub fn validate(&self) -> Result<()> {
        fn fail(msg: String) -> Result<()> {
            Err(CoreError::Argument(msg))
        }
        if self.arch.len() < 2 {
            return fail(format!("arch needs at least input and output widths, got {:?}", self.arch));
        }
        if self.arch.iter().any(|&d| d == 0) {
            return fail(format!("arch widths must be positive, got {:?}", self.arch));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".to_string());
        }
        if !(self.pre_lr.is_finite() && self.pre_lr >= 0.0) {
            return fail(format!("pre_lr must be finite and non-negative, got {}", self.pre_lr));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return fail(format!("sparsity must lie in (0, 1], got {}", self.sparsity));
        }
        if !(0.0..=1.0).contains(&self.prune_prob) {
            return fail(format!("prune_prob must lie in [0, 1], got {}", self.prune_prob));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return fail(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if !(self.delta_phi0.is_finite() && self.delta_phi0 > 0.0) {
            return fail(format!("delta_phi0 must be positive, got {}", self.delta_phi0));
        }
        if !(self.delta_decay > 0.0 && self.delta_decay <= 1.0) {
            return fail(format!("delta_decay must lie in (0, 1], got {}", self.delta_decay));
        }
        if let Some(lr) = self.lr {
            if !(lr.is_finite() && lr > 0.0) {
                return fail(format!("lr must be positive, got {lr}"));
            }
        }
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return fail(format!("mu must be positive, got {}", self.mu));
        }
        if self.q == 0 {
            return fail("q must be at least 1".to_string());
        }
        if !(self.sigma_gamma.is_finite() && self.sigma_gamma >= 0.0) {
            return fail(format!("sigma_gamma must be non-negative, got {}", self.sigma_gamma));
        }
        if !(self.omega.is_finite() && self.omega >= 0.0) {
            return fail(format!("omega must be non-negative, got {}", self.omega));
        }
        if !(self.truncation.is_finite() && self.truncation > 0.0) {
            return fail(format!("truncation must be positive, got {}", self.truncation));
        }
        if !(self.sigma_bound.is_finite() && self.sigma_bound > 0.0) {
            return fail(format!("sigma_bound must be positive, got {}", self.sigma_bound));
        }
        for (name, budget) in [("power_budget", self.power_budget), ("energy_budget", self.energy_budget)] {
            if let Some(b) = budget {
                if !(b.is_finite() && b > 0.0) {
                    return fail(format!("{name} must be positive, got {b}"));
                }
            }
        }
        Ok(())
    }

    /// Human-readable label for the configured optimizer. A power-penalized
    /// coordinate-descent run is labeled as the penalty-method proxy it is.
    pub fn optimizer_label(&self) -> String {
        if self.optimizer == OptimizerKind::SzoScd && self.lambda > 0.0 {
            "admm-proxy".to_string()
        } else {
            self.optimizer.name().to_string()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn file_overrides_defaults() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            f,
            "# desk experiment\nepochs = 5\nalpha=0.5  # inline comment\n\narch = 64,16,10\noptimizer = stp"
        )
        .unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.apply_file(f.path()).unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.arch, vec![64, 16, 10]);
        assert_eq!(cfg.optimizer, OptimizerKind::Stp);
        // Untouched keys keep their defaults.
        assert_eq!(cfg.batch_size, 32);
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "epochs = 5\nalpah = 0.5\nbatchsize = 16\nepochs 7").unwrap();
        let mut cfg = ExperimentConfig::default();
        let err = cfg.apply_file(f.path()).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("alpah"), "{err}");
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("batchsize"), "{err}");
        assert!(err.contains("line 4"), "{err}");
        assert!(err.contains("expected 'key = value'"), "{err}");
    }

    #[test]
    fn bad_value_names_the_key() {
        let mut cfg = ExperimentConfig::default();
        let err = cfg.apply_kv("alpha", "wide").unwrap_err().to_string();
        assert!(err.contains("alpha") && err.contains("wide"), "{err}");
        let err = cfg.apply_kv("optimizer", "sgd").unwrap_err().to_string();
        assert!(err.contains("szo_scd"), "unknown optimizer should list valid names: {err}");
    }

    #[test]
    fn validate_rejects_out_of_range() {
        let mut cfg = ExperimentConfig::default();
        cfg.alpha = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.sparsity = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.arch = vec![64];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.lr = Some(-1.0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn every_config_key_round_trips() {
        // Each documented key must be accepted by the parser.
        let mut cfg = ExperimentConfig::default();
        for key in CONFIG_KEYS {
            let value = match *key {
                "dataset" | "out_dir" => "somewhere",
                "label_column" => "target",
                "arch" => "8,4,2",
                "optimizer" => "zoo_adam",
                "pre_epochs" | "epochs" | "batch_size" | "q" | "seed_data" | "seed_mask"
                | "seed_noise" | "seed_opt" => "7",
                _ => "0.25",
            };
            cfg.apply_kv(key, value).unwrap();
        }
    }

    #[test]
    fn penalized_coordinate_descent_is_labeled_as_proxy() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.optimizer_label(), "szo_scd");
        cfg.lambda = 0.1;
        assert_eq!(cfg.optimizer_label(), "admm-proxy");
        cfg.optimizer = OptimizerKind::Stp;
        assert_eq!(cfg.optimizer_label(), "stp");
    }
}
