//! End-to-end tests of the `onn` binary: verbs, exit codes, output files,
//! and byte-level reproducibility of emitted CSVs.

use std::path::Path;
use std::process::{Command, Output};

fn onn() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_onn"));
    cmd.env_remove("ONN_OUT_ROOT");
    cmd
}

fn fixture() -> String {
    onn_cli::test_fixture_dir().display().to_string()
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output().expect("binary runs").status.code().expect("no signal")
}

fn short_recover_args(out_dir: &Path) -> Vec<String> {
    vec![
        "recover".into(),
        "--dataset".into(),
        fixture(),
        "--out".into(),
        out_dir.display().to_string(),
        "--pre-epochs".into(),
        "4".into(),
        "--epochs".into(),
        "2".into(),
    ]
}

#[test]
fn recover_writes_curve_and_reruns_byte_identical() {
    let tmp_a = tempfile::tempdir().unwrap();
    let tmp_b = tempfile::tempdir().unwrap();
    let out = run_ok(onn().args(short_recover_args(tmp_a.path())));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("best_accuracy"), "{stdout}");
    assert!(stdout.contains("queries_total"), "{stdout}");

    let csv_a = tmp_a.path().join("recover_szo_scd.csv");
    assert!(csv_a.exists());
    run_ok(onn().args(short_recover_args(tmp_b.path())));
    let csv_b = tmp_b.path().join("recover_szo_scd.csv");
    let bytes_a = std::fs::read(&csv_a).unwrap();
    let bytes_b = std::fs::read(&csv_b).unwrap();
    assert!(!bytes_a.is_empty());
    assert_eq!(bytes_a, bytes_b, "re-running an identical config must reproduce the CSV");

    let text = String::from_utf8(bytes_a).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,queries_total,train_loss,test_accuracy,power_now,energy_total,diverged"
    );
    assert_eq!(text.lines().count(), 4, "header + epoch rows 0..=2");
}

#[test]
fn pretrain_reports_accuracy_and_caches_model() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_ok(onn().args([
        "pretrain",
        "--dataset",
        &fixture(),
        "--out",
        &tmp.path().display().to_string(),
        "--pre-epochs",
        "4",
    ]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("test_accuracy"), "{stdout}");
    let cached: Vec<_> = std::fs::read_dir(tmp.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("pretrained_"))
        .collect();
    assert_eq!(cached.len(), 1, "exactly one cached model file");
}

#[test]
fn deploy_reports_drop() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_ok(onn().args([
        "deploy",
        "--dataset",
        &fixture(),
        "--out",
        &tmp.path().display().to_string(),
        "--pre-epochs",
        "4",
    ]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("deployed_accuracy"), "{stdout}");
    assert!(stdout.contains("accuracy_drop"), "{stdout}");
    assert!(stdout.contains("active_power"), "{stdout}");
}

#[test]
fn compare_writes_per_optimizer_curves_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    run_ok(onn().args([
        "compare",
        "--dataset",
        &fixture(),
        "--out",
        &tmp.path().display().to_string(),
        "--pre-epochs",
        "4",
        "--epochs",
        "1",
        "--optimizers",
        "szo_scd,stp",
    ]));
    assert!(tmp.path().join("recover_szo_scd.csv").exists());
    assert!(tmp.path().join("recover_stp.csv").exists());
    let summary = std::fs::read_to_string(tmp.path().join("comparison.csv")).unwrap();
    assert!(summary.starts_with("optimizer,best_accuracy"), "{summary}");
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn sweep_writes_summary_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    run_ok(onn().args([
        "sweep",
        "--dataset",
        &fixture(),
        "--out",
        &tmp.path().display().to_string(),
        "--pre-epochs",
        "4",
        "--epochs",
        "1",
        "--key",
        "alpha",
        "--values",
        "0.1,0.2",
    ]));
    let summary = std::fs::read_to_string(tmp.path().join("sweep_alpha.csv")).unwrap();
    assert!(summary.starts_with("alpha,best_accuracy"), "{summary}");
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn out_root_env_is_the_default_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cmd = onn();
    cmd.env("ONN_OUT_ROOT", tmp.path());
    run_ok(cmd.args([
        "pretrain",
        "--dataset",
        &fixture(),
        "--pre-epochs",
        "4",
    ]));
    let cached = std::fs::read_dir(tmp.path()).unwrap().count();
    assert!(cached > 0, "output landed under ONN_OUT_ROOT");
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("exp.conf");
    std::fs::write(
        &cfg_path,
        format!(
            "# desk config\ndataset = {}\nout_dir = {}\npre_epochs = 4\nepochs = 1\n",
            fixture(),
            tmp.path().display()
        ),
    )
    .unwrap();
    let out = run_ok(onn().args([
        "recover",
        "--config",
        &cfg_path.display().to_string(),
        "--epochs",
        "2",
    ]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("epochs_run       = 2"), "flag must beat the file:\n{stdout}");
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    // Out-of-range flag value.
    assert_eq!(
        exit_code(onn().args(["recover", "--dataset", &fixture(), "--alpha", "2.0"])),
        2
    );
    // Unknown optimizer name.
    assert_eq!(
        exit_code(onn().args(["recover", "--dataset", &fixture(), "--optimizer", "sgd"])),
        2
    );
    // Config file with unknown keys: every offender is listed.
    let cfg_path = tmp.path().join("bad.conf");
    std::fs::write(&cfg_path, "alpah = 0.5\nbatchsize = 16\n").unwrap();
    let out = onn()
        .args(["recover", "--config", &cfg_path.display().to_string()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("alpah") && stderr.contains("batchsize"), "{stderr}");
}

#[test]
fn data_errors_exit_3() {
    assert_eq!(
        exit_code(onn().args(["recover", "--dataset", "/definitely/not/here"])),
        3
    );
}

#[test]
fn divergence_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let code = exit_code(onn().args([
        "recover",
        "--dataset",
        &fixture(),
        "--out",
        &tmp.path().display().to_string(),
        "--pre-epochs",
        "4",
        "--epochs",
        "10",
        "--optimizer",
        "zoo_adam",
        "--lr",
        "1000000",
    ]));
    assert_eq!(code, 4);
    // The curve still gets written, with the divergence flagged on its rows.
    let csv = std::fs::read_to_string(tmp.path().join("recover_zoo_adam.csv")).unwrap();
    assert!(csv.lines().last().unwrap().ends_with(",1"), "{csv}");
}
