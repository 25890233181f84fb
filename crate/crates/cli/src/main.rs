//! `onn` — command-line experiment runner for MZI-mesh optical neural
//! networks: digital pretraining, noisy photonic deployment, derivative-free
//! on-chip recovery, optimizer comparisons, and parameter sweeps.
//!
//! Exit codes: 0 success; 2 configuration error; 3 data error; 4 the
//! recovery run diverged. Logging goes to stderr (`RUST_LOG` overrides the
//! default `warn` level); result summaries go to stdout.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use onn_core::error::CoreError;
use onn_core::ledger::{power_estimate, PowerLedger};
use onn_core::noise::NoiseSpec;
use onn_core::optim::OptimizerKind;

use onn_cli::config::ExperimentConfig;
use onn_cli::runner;

#[derive(Parser)]
#[command(name = "onn", version, about = "Optical neural network on-chip training experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flag overrides mirroring the config-file keys. Precedence:
/// flags > config file > defaults.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset: directory of IDX files, or a .csv file.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Label column name (CSV datasets).
    #[arg(long)]
    label_column: Option<String>,
    /// Output directory (default: $ONN_OUT_ROOT, else ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated dense layer widths, e.g. 64,24,24,10.
    #[arg(long)]
    arch: Option<String>,
    /// Digital pretraining epochs.
    #[arg(long)]
    pre_epochs: Option<usize>,
    /// Digital pretraining learning rate.
    #[arg(long)]
    pre_lr: Option<f64>,
    /// On-chip training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Optimizer: szo_scd, stp, zoo_adam, zoo_newton, or flops.
    #[arg(long)]
    optimizer: Option<String>,
    /// Fraction of rotation phases deployed as tunable.
    #[arg(long)]
    alpha: Option<f64>,
    /// Fraction of the active set updated per iteration.
    #[arg(long)]
    sparsity: Option<f64>,
    /// Probability of skipping a power-increasing backward step.
    #[arg(long)]
    prune_prob: Option<f64>,
    /// Power penalty weight on the training objective.
    #[arg(long)]
    lambda: Option<f64>,
    /// Initial coordinate step size in radians.
    #[arg(long)]
    delta_phi0: Option<f64>,
    /// Per-epoch step-size decay factor.
    #[arg(long)]
    delta_decay: Option<f64>,
    /// Learning rate for gradient-style optimizers.
    #[arg(long)]
    lr: Option<f64>,
    /// Finite-difference probe width.
    #[arg(long)]
    mu: Option<f64>,
    /// Random directions per gradient-sampling step.
    #[arg(long)]
    q: Option<usize>,
    /// Device-variation standard deviation.
    #[arg(long)]
    sigma_gamma: Option<f64>,
    /// Thermal crosstalk coefficient.
    #[arg(long)]
    omega: Option<f64>,
    /// Drift truncation as a multiple of sigma-gamma.
    #[arg(long)]
    truncation: Option<f64>,
    /// Bound on singular values of each layer.
    #[arg(long)]
    sigma_bound: Option<f64>,
    /// Seed for shuffling and batch sampling.
    #[arg(long)]
    seed_data: Option<u64>,
    /// Seed for the active-mask draw.
    #[arg(long)]
    seed_mask: Option<u64>,
    /// Seed for the hardware noise realization.
    #[arg(long)]
    seed_noise: Option<u64>,
    /// Seed for the optimizer's own randomness.
    #[arg(long)]
    seed_opt: Option<u64>,
    /// Power budget; excursions are logged.
    #[arg(long)]
    power_budget: Option<f64>,
    /// Energy budget; excursions are logged.
    #[arg(long)]
    energy_budget: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the dense digital reference model and cache it on disk.
    Pretrain(Overrides),
    /// Map the pretrained model onto noisy photonic hardware and report accuracy.
    Deploy(Overrides),
    /// Recover deployed accuracy by on-chip training; writes the curve CSV.
    Recover(Overrides),
    /// Run several optimizers under identical seeds and summarize.
    Compare {
        #[command(flatten)]
        ov: Overrides,
        /// Comma-separated optimizer names (default: all five).
        #[arg(long)]
        optimizers: Option<String>,
    },
    /// Re-run recovery while sweeping one config key over a value list.
    Sweep {
        #[command(flatten)]
        ov: Overrides,
        /// Config key to sweep, e.g. alpha or prune_prob.
        #[arg(long)]
        key: String,
        /// Comma-separated values for the swept key.
        #[arg(long)]
        values: String,
    },
}

fn build_config(ov: &Overrides) -> Result<ExperimentConfig, CoreError> {
    let mut cfg = ExperimentConfig::default();
    if let Ok(root) = std::env::var("ONN_OUT_ROOT") {
        if !root.is_empty() {
            cfg.out_dir = PathBuf::from(root);
        }
    }
    if let Some(path) = &ov.config {
        cfg.apply_file(path)?;
    }
    if let Some(v) = &ov.dataset {
        cfg.dataset = v.clone();
    }
    if let Some(v) = &ov.label_column {
        cfg.label_column = v.clone();
    }
    if let Some(v) = &ov.out {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = &ov.arch {
        cfg.apply_kv("arch", v)?;
    }
    if let Some(v) = &ov.optimizer {
        cfg.apply_kv("optimizer", v)?;
    }
    macro_rules! copy_flag {
        ($($field:ident),+ $(,)?) => {
            $(if let Some(v) = ov.$field { cfg.$field = v; })+
        };
    }
    copy_flag!(
        pre_epochs,
        pre_lr,
        epochs,
        batch_size,
        alpha,
        sparsity,
        prune_prob,
        lambda,
        delta_phi0,
        delta_decay,
        mu,
        q,
        sigma_gamma,
        omega,
        truncation,
        sigma_bound,
        seed_data,
        seed_mask,
        seed_noise,
        seed_opt,
    );
    if let Some(v) = ov.lr {
        cfg.lr = Some(v);
    }
    if let Some(v) = ov.power_budget {
        cfg.power_budget = Some(v);
    }
    if let Some(v) = ov.energy_budget {
        cfg.energy_budget = Some(v);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_optimizers(spec: Option<&str>) -> Result<Vec<OptimizerKind>, CoreError> {
    match spec {
        None => Ok(OptimizerKind::ALL.to_vec()),
        Some(s) => s.split(',').map(|tok| tok.trim().parse::<OptimizerKind>()).collect(),
    }
}

fn cmd_pretrain(cfg: &ExperimentConfig) -> anyhow::Result<ExitCode> {
    let ds = runner::load_dataset(cfg)?;
    let pre = runner::obtain_pretrained(cfg, &ds)?;
    let train = ds.make_batch(ds.train_idx())?;
    let test = ds.make_batch(ds.test_idx())?;
    println!("model            = {}", pre.arch_string());
    println!("train_accuracy   = {:.6}", pre.accuracy(&train.inputs, &train.labels)?);
    println!("test_accuracy    = {:.6}", pre.accuracy(&test.inputs, &test.labels)?);
    println!("saved            = {}", runner::pretrained_path(cfg).display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_deploy(cfg: &ExperimentConfig) -> anyhow::Result<ExitCode> {
    let ds = runner::load_dataset(cfg)?;
    let pre = runner::obtain_pretrained(cfg, &ds)?;
    let spec = NoiseSpec::new(cfg.sigma_gamma, cfg.omega)?.with_truncation(cfg.truncation)?;
    let dep = onn_core::data::deploy(
        &pre,
        cfg.sigma_bound,
        &spec,
        cfg.alpha,
        cfg.seed_mask,
        cfg.seed_noise,
    )?;
    let mut model = dep.model;
    let test = ds.make_batch(ds.test_idx())?;
    let ideal = pre.accuracy(&test.inputs, &test.labels)?;
    let mut ledger = PowerLedger::new();
    let noisy = model.accuracy(&test.inputs, &test.labels, &dep.noise, &mut ledger)?;
    println!("phases           = {}", model.phase_count());
    println!("active_phases    = {}", dep.mask.n_active());
    println!("clamped_sigmas   = {}", dep.clamp_count);
    println!("fidelity_error   = {:.3e}", dep.fidelity_error);
    println!("ideal_accuracy   = {:.6}", ideal);
    println!("deployed_accuracy = {:.6}", noisy);
    println!("accuracy_drop    = {:.6}", ideal - noisy);
    println!(
        "active_power     = {:.6}",
        power_estimate(&model.phases_vec(), dep.mask.as_slice())?
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_recover(cfg: &ExperimentConfig) -> anyhow::Result<ExitCode> {
    let ds = runner::load_dataset(cfg)?;
    let pre = runner::obtain_pretrained(cfg, &ds)?;
    let res = runner::run_recover(cfg, &ds, &pre)?;
    let path = runner::curve_path(cfg, &res.label, None);
    runner::write_rows_csv(&path, &res.rows)?;
    println!("optimizer        = {}", res.label);
    println!("epochs_run       = {}", res.rows.len().saturating_sub(1));
    println!("best_accuracy    = {:.6}", res.best_accuracy());
    println!("final_accuracy   = {:.6}", res.final_accuracy());
    println!("final_power      = {:.6}", res.final_power());
    println!("energy_total     = {:.6}", res.energy_total());
    println!("queries_total    = {}", res.queries_total());
    println!("curve            = {}", path.display());
    if res.diverged {
        eprintln!("run diverged; stopping early");
        return Ok(ExitCode::from(4));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_compare(cfg: &ExperimentConfig, optimizers: Option<&str>) -> anyhow::Result<ExitCode> {
    let kinds = parse_optimizers(optimizers)?;
    let ds = runner::load_dataset(cfg)?;
    let pre = runner::obtain_pretrained(cfg, &ds)?;
    let results = runner::compare_optimizers(cfg, &kinds, &ds, &pre)?;
    for r in &results {
        println!(
            "{:12} best {:.4}  final {:.4}  power {:>9.1}  queries {:>9}  {}",
            r.label,
            r.best_accuracy(),
            r.final_accuracy(),
            r.final_power(),
            r.queries_total(),
            if r.diverged { "DIVERGED" } else { "ok" }
        );
    }
    println!("summary          = {}", cfg.out_dir.join("comparison.csv").display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(cfg: &ExperimentConfig, key: &str, values: &str) -> anyhow::Result<ExitCode> {
    let values: Vec<String> =
        values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    let ds = runner::load_dataset(cfg)?;
    let pre = runner::obtain_pretrained(cfg, &ds)?;
    let results = runner::sweep(cfg, key, &values, &ds, &pre)?;
    for (v, r) in values.iter().zip(&results) {
        println!(
            "{key}={v:8} best {:.4}  final {:.4}  power {:>9.1}  queries {:>9}  {}",
            r.best_accuracy(),
            r.final_accuracy(),
            r.final_power(),
            r.queries_total(),
            if r.diverged { "DIVERGED" } else { "ok" }
        );
    }
    println!("summary          = {}", cfg.out_dir.join(format!("sweep_{key}.csv")).display());
    Ok(ExitCode::SUCCESS)
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match &cli.cmd {
        Cmd::Pretrain(ov) => cmd_pretrain(&build_config(ov)?),
        Cmd::Deploy(ov) => cmd_deploy(&build_config(ov)?),
        Cmd::Recover(ov) => cmd_recover(&build_config(ov)?),
        Cmd::Compare { ov, optimizers } => {
            cmd_compare(&build_config(ov)?, optimizers.as_deref())
        }
        Cmd::Sweep { ov, key, values } => cmd_sweep(&build_config(ov)?, key, values),
    }
}

fn classify(err: &anyhow::Error) -> ExitCode {
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Argument(_) | CoreError::Validation(_) | CoreError::Schema(_)) => {
            ExitCode::from(2)
        }
        Some(CoreError::Format(_) | CoreError::Io(_)) => ExitCode::from(3),
        None => ExitCode::FAILURE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            classify(&err)
        }
    }
}
