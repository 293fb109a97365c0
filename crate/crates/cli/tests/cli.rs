use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use espo_cli::spec::example_spec;
use espo_cli::ExperimentSpec;
use espo_core::train::StepMetrics;

fn espo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_espo"))
        .args(args)
        .env("ESPO_DETERMINISTIC", "1")
        .output()
        .expect("binary runs")
}

fn tiny_spec(out: &Path, steps: usize) -> ExperimentSpec {
    let mut spec = example_spec();
    spec.out_dir = out.to_path_buf();
    spec.seeds = vec![0];
    let r = &mut spec.run;
    r.model.width = 8;
    r.model.layers = 1;
    r.group_size = 2;
    r.batch_size = 4;
    r.inner_steps = 1;
    r.mc_samples = 1;
    r.steps = steps;
    spec
}

fn write_spec(dir: &Path, spec: &ExperimentSpec) -> String {
    let p = dir.join("exp.toml");
    fs::write(&p, spec.to_toml()).unwrap();
    p.display().to_string()
}

#[test]
fn flops_prints_table_entry() {
    let out = espo(&["flops", "--k", "256", "--mu", "8", "--m", "2"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("704 N D"), "{text}");
    assert!(text.contains("116%"), "{text}");
}

#[test]
fn zero_step_training_writes_checkpoint_and_empty_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_spec(dir.path(), &tiny_spec(&dir.path().join("run"), 0));
    let out = espo(&["train", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run/seed-0");
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap(), "");
    assert!(fs::metadata(run.join("checkpoint.bin")).unwrap().len() > 0);
    assert!(!run.join("metrics.jsonl.tmp").exists());

    let none = espo(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        run.join("checkpoint.bin").to_str().unwrap(),
        "--n",
        "0",
    ]);
    assert!(none.status.success(), "{}", String::from_utf8_lossy(&none.stderr));
    assert!(String::from_utf8_lossy(&none.stdout).contains("n/a"));
}

#[test]
fn malformed_config_names_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = tiny_spec(dir.path(), 0)
        .to_toml()
        .replacen("inner_steps", "iner_steps", 1);
    let line = text.lines().position(|l| l.starts_with("iner_steps")).unwrap() + 1;
    let p = dir.path().join("bad.toml");
    fs::write(&p, text).unwrap();
    let out = espo(&["train", "--config", p.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("iner_steps") && err.contains(&format!("line {line}")),
        "{err}"
    );
}

#[test]
fn invalid_values_fail_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny_spec(&dir.path().join("run"), 1);
    spec.run.batch_size = 5;
    let cfg = write_spec(dir.path(), &spec);
    let out = espo(&["train", "--config", &cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_size"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn oracle_check_passes_at_length_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = espo(&[
        "oracle-check",
        "--len",
        "3",
        "--instances",
        "10",
        "--draws",
        "2000",
        "--replications",
        "1000",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["all_ok"], true);
    assert!(summary["properties"].as_array().unwrap().len() >= 9);
    assert!(dir.path().join("oracle_check.json").exists());
}

#[test]
fn kl_ablation_runs_every_arm_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny_spec(&dir.path().join("abl"), 2);
    spec.seeds = vec![0, 1, 2];
    let cfg = write_spec(dir.path(), &spec);
    let out = espo(&["ablate", "--config", &cfg, "--axis", "kl"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let root = dir.path().join("abl/kl");
    let csv = fs::read_to_string(root.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3 * 3 * 2);
    assert!(fs::read_to_string(root.join("ablation.svg"))
        .unwrap()
        .starts_with("<svg"));

    // Spot-check one row against its run's metrics stream.
    let fields: Vec<&str> = rows[7].split(',').collect();
    let (step, value, seed) = (fields[0], fields[1], fields[2]);
    let metrics = fs::read_to_string(root.join(value).join(format!("seed-{seed}/metrics.jsonl"))).unwrap();
    let m: StepMetrics = serde_json::from_str(metrics.lines().nth(step.parse().unwrap()).unwrap()).unwrap();
    assert_eq!(fields[3].parse::<f64>().unwrap(), m.mean_reward);
}

#[test]
fn mc_ablation_reports_flops_column() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny_spec(&dir.path().join("abl"), 1);
    spec.ablation.mc = vec![1, 2, 4];
    spec.run.inner_steps = 8;
    spec.run.completion_len = 16;
    let cfg = write_spec(dir.path(), &spec);
    let out = espo(&["ablate", "--config", &cfg, "--axis", "mc"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("abl/mc/ablation.csv")).unwrap();
    assert!(csv.starts_with("step,value,seed,reward,flops_pct"));
    let pcts: Vec<&str> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    // K = 16, mu = 8: 2(16 + 48m) relative to m = 1.
    assert_eq!(pcts, ["100", "175", "325"]);
}

#[test]
fn shipped_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/sudoku.toml");
    let spec = ExperimentSpec::load(&path).unwrap();
    spec.validate().unwrap();
    assert_eq!(spec.run.warm_start.seed, Some(7));
    assert!(spec.run.denoiser().max_len >= spec.run.completion_len);
}
