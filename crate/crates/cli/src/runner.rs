//! Experiment orchestration: dataset loading, pretraining with on-disk
//! caching, the on-chip recovery loop, optimizer comparisons, parameter
//! sweeps, and deterministic CSV emission.
//!
//! Every run is a pure function of its configuration: all randomness flows
//! from the four seeds, rows carry fixed-precision numbers, and files are
//! written with a pinned column order, so re-running a config byte-identically
//! reproduces its outputs.

use std::io::Write;
use std::path::{Path, PathBuf};

use onn_core::data::{
    deploy, downsample, load_csv, load_idx, pretrain_mlp, CsvSchema, Dataset, PretrainedModel,
};
use onn_core::error::{CoreError, Result};
use onn_core::ledger::{power_estimate, PowerLedger};
use onn_core::network::Batch;
use onn_core::noise::NoiseSpec;
use onn_core::optim::{
    dispatch_iteration, penalized_loss, ModelObjective, Objective, OptimizerKind, OptimizerState,
    TrainConfig,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;

/// Loss threshold relative to the starting loss that counts as an excursion.
const DIVERGENCE_FACTOR: f64 = 10.0;
/// Consecutive excursion epochs after which a run is declared divergent.
const DIVERGENCE_PATIENCE: usize = 3;

/// One emitted row of a training curve.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    /// 0 = state right after deployment; k = after k training epochs.
    pub epoch: usize,
    /// Cumulative hardware queries, including test-accuracy evaluations.
    pub queries_total: u64,
    /// Mean per-iteration training loss of this epoch (row 0: first-batch loss).
    pub train_loss: f64,
    /// Test-set classification accuracy.
    pub test_accuracy: f64,
    /// Sum of active phase shifts after the epoch.
    pub power_now: f64,
    /// Accumulated power-time integral.
    pub energy_total: f64,
    /// Whether divergence had been declared by the end of this epoch.
    pub diverged: bool,
}

/// Everything a finished run reports.
#[derive(Debug, Clone)]
pub struct RunResult {
    /// Optimizer label the run was filed under (e.g. `szo_scd`, `admm-proxy`).
    pub label: String,
    /// Per-epoch curve, starting with the post-deployment row 0.
    pub rows: Vec<EpochRow>,
    /// True if the divergence rule stopped the run early.
    pub diverged: bool,
}

impl RunResult {
    /// Best test accuracy seen at any epoch boundary, deployment included.
    pub fn best_accuracy(&self) -> f64 {
        self.rows.iter().map(|r| r.test_accuracy).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn final_accuracy(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.test_accuracy)
    }

    pub fn final_power(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.power_now)
    }

    pub fn queries_total(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.queries_total)
    }

    pub fn energy_total(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.energy_total)
    }
}

/// Loads the configured dataset: a directory of IDX files or a `.csv` file.
///
/// CSV datasets arrive unsplit and get a deterministic 80/20 train/test
/// split from the data seed. Image datasets whose resolution exceeds the
/// model's input width are pooled down to fit (e.g. 28x28 inputs feeding a
/// 64-wide model become 8x8).
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset<f64>> {
    let is_csv = cfg.dataset.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let mut ds: Dataset<f64> = if is_csv {
        let schema = CsvSchema { label_column: cfg.label_column.clone() };
        let mut ds = load_csv(&cfg.dataset, &schema)?;
        ds.split(0.2, cfg.seed_data)?;
        ds
    } else {
        load_idx(&cfg.dataset)?
    };
    let want = *cfg.arch.first().ok_or_else(|| {
        CoreError::Argument("arch must name at least input and output widths".to_string())
    })?;
    if ds.n_features() != want {
        if let Some(side) = ds.image_side() {
            let target = (want as f64).sqrt().round() as usize;
            if target * target == want && target <= side {
                ds = downsample(&ds, target)?;
            }
        }
    }
    if ds.n_features() != want {
        return Err(CoreError::Argument(format!(
            "dataset has {} features but the model expects {}",
            ds.n_features(),
            want
        )));
    }
    Ok(ds)
}

/// Deterministic cache path for a pretrained model under this config.
pub fn pretrained_path(cfg: &ExperimentConfig) -> PathBuf {
    let arch: Vec<String> = cfg.arch.iter().map(|d| d.to_string()).collect();
    cfg.out_dir.join(format!(
        "pretrained_{}_{}ep_lr{}_seed{}.bin",
        arch.join("-"),
        cfg.pre_epochs,
        cfg.pre_lr,
        cfg.seed_data
    ))
}

/// Returns the pretrained dense model, training and caching it on first use.
pub fn obtain_pretrained(
    cfg: &ExperimentConfig,
    ds: &Dataset<f64>,
) -> Result<PretrainedModel<f64>> {
    let path = pretrained_path(cfg);
    if path.exists() {
        let pre = PretrainedModel::load(&path)?;
        if pre.arch() != cfg.arch.as_slice() {
            return Err(CoreError::Validation(format!(
                "cached model {} has architecture {:?}, expected {:?}",
                path.display(),
                pre.arch(),
                cfg.arch
            )));
        }
        log::info!("loaded pretrained model from {}", path.display());
        return Ok(pre);
    }
    let pre = pretrain_mlp(ds, &cfg.arch, cfg.pre_epochs, cfg.pre_lr, cfg.seed_data)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    pre.save(&path)?;
    log::info!("pretrained model saved to {}", path.display());
    Ok(pre)
}

fn build_train_config(cfg: &ExperimentConfig) -> TrainConfig<f64> {
    let mut tc = TrainConfig::<f64>::new(cfg.optimizer);
    tc.delta_phi0 = cfg.delta_phi0;
    tc.delta_decay = cfg.delta_decay;
    if let Some(lr) = cfg.lr {
        tc.lr = lr;
    }
    tc.mu = cfg.mu;
    tc.q = cfg.q;
    tc.sparsity = cfg.sparsity;
    tc.prune_prob = cfg.prune_prob;
    tc.lambda = cfg.lambda;
    tc.batch_size = cfg.batch_size;
    tc.seed = cfg.seed_opt;
    tc
}

/// Runs the full on-chip recovery loop for one configuration.
///
/// The deployed model is corrupted by the sampled hardware noise, then
/// trained through the configured derivative-free optimizer. The run stops
/// early — flagged as diverged — when the epoch-mean loss turns non-finite
/// or exceeds [`DIVERGENCE_FACTOR`]x the starting loss for
/// [`DIVERGENCE_PATIENCE`] consecutive epochs.
pub fn run_recover(
    cfg: &ExperimentConfig,
    ds: &Dataset<f64>,
    pre: &PretrainedModel<f64>,
) -> Result<RunResult> {
    let spec = NoiseSpec::new(cfg.sigma_gamma, cfg.omega)?.with_truncation(cfg.truncation)?;
    let dep = deploy(pre, cfg.sigma_bound, &spec, cfg.alpha, cfg.seed_mask, cfg.seed_noise)?;
    let mut model = dep.model;
    let mask = dep.mask;
    let noise = dep.noise;
    log::info!(
        "deployed: {} phases, {} active, {} singular values clamped",
        model.phase_count(),
        mask.n_active(),
        dep.clamp_count
    );

    let test = ds.make_batch(ds.test_idx())?;
    let tc = build_train_config(cfg);
    let mut state = OptimizerState::new(tc, model.phase_count())?;
    let mut ledger = PowerLedger::with_budgets(cfg.power_budget, cfg.energy_budget);
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed_data);
    let iters_per_epoch = ds.train_idx().len().div_ceil(cfg.batch_size);

    let mut rows = Vec::with_capacity(cfg.epochs + 1);
    let acc0 = model.accuracy(&test.inputs, &test.labels, &noise, &mut ledger)?;
    let initial_power = power_estimate(&model.phases_vec(), mask.as_slice())?;
    let first_batch = ds.sample_batch(cfg.batch_size, &mut data_rng)?;
    let raw0 = model.batch_loss(&first_batch, &noise, &mut ledger)?;
    let initial_loss = penalized_loss(raw0, &model.phases_vec(), &mask, cfg.lambda)?;
    rows.push(EpochRow {
        epoch: 0,
        queries_total: ledger.queries_total(),
        train_loss: initial_loss,
        test_accuracy: acc0,
        power_now: initial_power,
        energy_total: 0.0,
        diverged: false,
    });

    let mut diverged = false;
    let mut excursions = 0usize;
    let mut pending = Some(first_batch);
    let mut seen_violations = 0usize;
    for epoch in 0..cfg.epochs {
        state.set_epoch(epoch);
        let mut loss_sum = 0.0;
        {
            let batch: Batch<f64> = match pending.take() {
                Some(b) => b,
                None => ds.sample_batch(cfg.batch_size, &mut data_rng)?,
            };
            let mut obj = ModelObjective::new(&mut model, &noise, &mask, batch, cfg.lambda)?;
            for it in 0..iters_per_epoch {
                if it > 0 {
                    obj.set_batch(ds.sample_batch(cfg.batch_size, &mut data_rng)?);
                    state.invalidate_cache();
                }
                let loss = dispatch_iteration(&mut obj, &mask, &mut state, &mut ledger)?;
                let power = power_estimate(&obj.snapshot(), mask.as_slice())?;
                ledger.record_iteration(power);
                loss_sum += loss;
            }
        }
        for v in &ledger.violations()[seen_violations..] {
            log::warn!(
                "{:?} budget exceeded at iteration {}: {:.3} > {:.3}",
                v.kind,
                v.iteration,
                v.value,
                v.limit
            );
        }
        seen_violations = ledger.violations().len();

        let mean_loss = loss_sum / iters_per_epoch as f64;
        if !mean_loss.is_finite() {
            diverged = true;
        } else if mean_loss > DIVERGENCE_FACTOR * initial_loss {
            excursions += 1;
            if excursions >= DIVERGENCE_PATIENCE {
                diverged = true;
            }
        } else {
            excursions = 0;
        }

        let acc = model.accuracy(&test.inputs, &test.labels, &noise, &mut ledger)?;
        rows.push(EpochRow {
            epoch: epoch + 1,
            queries_total: ledger.queries_total(),
            train_loss: mean_loss,
            test_accuracy: acc,
            power_now: ledger.power_now(),
            energy_total: ledger.energy_total(),
            diverged,
        });
        if diverged {
            log::warn!("divergence detected after epoch {}; stopping the run", epoch + 1);
            break;
        }
    }

    Ok(RunResult { label: cfg.optimizer_label(), rows, diverged })
}

/// Writes a training curve with a pinned header and fixed-precision cells.
pub fn write_rows_csv(path: &Path, rows: &[EpochRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "epoch,queries_total,train_loss,test_accuracy,power_now,energy_total,diverged")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{}",
            r.epoch,
            r.queries_total,
            r.train_loss,
            r.test_accuracy,
            r.power_now,
            r.energy_total,
            u8::from(r.diverged)
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Curve-file path for a labeled run, optionally tagged by a sweep point.
pub fn curve_path(cfg: &ExperimentConfig, label: &str, tag: Option<&str>) -> PathBuf {
    match tag {
        Some(t) => cfg.out_dir.join(format!("recover_{label}_{}.csv", t.replace('/', "_"))),
        None => cfg.out_dir.join(format!("recover_{label}.csv")),
    }
}

fn write_summary_csv(path: &Path, key: &str, entries: &[(String, &RunResult)]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "{key},best_accuracy,final_accuracy,queries_total,final_power,energy_total,diverged"
    )?;
    for (name, r) in entries {
        writeln!(
            out,
            "{},{:.6},{:.6},{},{:.6},{:.6},{}",
            name,
            r.best_accuracy(),
            r.final_accuracy(),
            r.queries_total(),
            r.final_power(),
            r.energy_total(),
            u8::from(r.diverged)
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Runs every requested optimizer under the same configuration and seeds,
/// writing one curve per optimizer plus a `comparison.csv` summary.
pub fn compare_optimizers(
    cfg: &ExperimentConfig,
    kinds: &[OptimizerKind],
    ds: &Dataset<f64>,
    pre: &PretrainedModel<f64>,
) -> Result<Vec<RunResult>> {
    let mut results = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let mut sub = cfg.clone();
        sub.optimizer = kind;
        log::info!("comparing optimizer {}", sub.optimizer_label());
        let res = run_recover(&sub, ds, pre)?;
        write_rows_csv(&curve_path(cfg, &res.label, None), &res.rows)?;
        results.push(res);
    }
    let entries: Vec<(String, &RunResult)> =
        results.iter().map(|r| (r.label.clone(), r)).collect();
    write_summary_csv(&cfg.out_dir.join("comparison.csv"), "optimizer", &entries)?;
    Ok(results)
}

/// Re-runs the recovery while sweeping one config key over a value list,
/// writing one curve per point plus a `sweep_<key>.csv` summary.
pub fn sweep(
    cfg: &ExperimentConfig,
    key: &str,
    values: &[String],
    ds: &Dataset<f64>,
    pre: &PretrainedModel<f64>,
) -> Result<Vec<RunResult>> {
    if values.is_empty() {
        return Err(CoreError::Argument("sweep needs at least one value".to_string()));
    }
    let mut results = Vec::with_capacity(values.len());
    for v in values {
        let mut sub = cfg.clone();
        sub.apply_kv(key, v)?;
        sub.validate()?;
        log::info!("sweep point {key} = {v}");
        let res = run_recover(&sub, ds, pre)?;
        let tag = format!("{key}-{v}");
        write_rows_csv(&curve_path(cfg, &res.label, Some(&tag)), &res.rows)?;
        results.push(res);
    }
    let entries: Vec<(String, &RunResult)> =
        values.iter().cloned().zip(results.iter()).collect();
    write_summary_csv(&cfg.out_dir.join(format!("sweep_{key}.csv")), key, &entries)?;
    Ok(results)
}
