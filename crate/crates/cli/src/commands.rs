//! Subcommand bodies. Every file they produce is written under a temporary
//! name and renamed into place once complete.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use espo_core::mdm::EstimatorForm;
use espo_core::nn::checkpoint::write_atomic;
use espo_core::nn::Denoiser;
use espo_core::tasks::{read_instances, TaskInstance};
use espo_core::train::{
    evaluate, flops_multiplier, load_model_params, EvalReport, StepMetrics, TrainRunConfig, Trainer,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::chart::{mean_curves, to_csv, to_svg, Row, SMOOTH_WINDOW};
use crate::checks::{
    elbo_unbiasedness, kl_gradient_facts, quadrature_agreement, variance_claims, variational_bound, CheckScale,
    PropertyResult,
};
use crate::spec::{Axis, ExperimentSpec};

/// A file that only appears under its final name after [`AtomicFile::commit`].
pub struct AtomicFile {
    tmp: PathBuf,
    dest: PathBuf,
    w: BufWriter<File>,
}

impl AtomicFile {
    pub fn create(dest: &Path) -> Result<Self> {
        let mut name = dest
            .file_name()
            .context("artifact path has no file name")?
            .to_os_string();
        name.push(".tmp");
        let tmp = dest.with_file_name(name);
        let w = BufWriter::new(File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?);
        Ok(Self {
            tmp,
            dest: dest.to_path_buf(),
            w,
        })
    }

    pub fn writer(&mut self) -> &mut BufWriter<File> {
        &mut self.w
    }

    pub fn commit(mut self) -> Result<()> {
        self.w.flush()?;
        self.w.get_ref().sync_all()?;
        fs::rename(&self.tmp, &self.dest).with_context(|| format!("renaming into {}", self.dest.display()))?;
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

/// What one training run produced.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub dir: PathBuf,
    pub metrics: Vec<StepMetrics>,
    pub eval_accuracy: Option<f64>,
}

/// Trains one configuration into `dir`: `config.toml`, `metrics.jsonl`,
/// `rollouts.jsonl`, `checkpoint.bin` and, when evaluation instances are
/// configured, `eval.json`.
pub fn train_run(cfg: &TrainRunConfig, dir: &Path) -> Result<RunSummary> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(&dir.join("config.toml"), toml::to_string_pretty(cfg)?.as_bytes())?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut metrics_file = AtomicFile::create(&dir.join("metrics.jsonl"))?;
    let mut rollout_file = AtomicFile::create(&dir.join("rollouts.jsonl"))?;
    let metrics = trainer.run(metrics_file.writer(), Some(rollout_file.writer()))?;
    metrics_file.commit()?;
    rollout_file.commit()?;
    trainer.save_checkpoint(&dir.join("checkpoint.bin"))?;
    let mut eval_accuracy = None;
    if cfg.eval_instances > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe7a1);
        let instances = cfg.task.generate_many(&mut rng, cfg.eval_instances)?;
        let report = trainer.evaluate(&instances)?;
        eval_accuracy = report.accuracy;
        write_json(&dir.join("eval.json"), &report)?;
    }
    Ok(RunSummary {
        seed: cfg.seed,
        dir: dir.to_path_buf(),
        metrics,
        eval_accuracy,
    })
}

/// One run per seed under `out_dir/seed-<s>`.
pub fn cmd_train(spec: &ExperimentSpec) -> Result<Vec<RunSummary>> {
    let mut out = Vec::new();
    for &seed in &spec.seeds {
        let mut cfg = spec.run.clone();
        cfg.seed = seed;
        let dir = spec.out_dir.join(format!("seed-{seed}"));
        let s = train_run(&cfg, &dir).with_context(|| format!("training seed {seed}"))?;
        println!(
            "seed {seed}: {} steps, final reward {}, eval accuracy {}",
            s.metrics.len(),
            s.metrics
                .last()
                .map_or("n/a".into(), |m| format!("{:.3}", m.mean_reward)),
            s.eval_accuracy.map_or("n/a".into(), |a| format!("{a:.3}"))
        );
        out.push(s);
    }
    Ok(out)
}

/// Scores a checkpoint on `n` generated instances, or on the instances in
/// `instances_file` when given.
pub fn cmd_eval(
    cfg: &TrainRunConfig,
    checkpoint: &Path,
    n: usize,
    instances_file: Option<&Path>,
    seed: u64,
) -> Result<EvalReport> {
    let model = Denoiser::new(cfg.denoiser())?;
    let params = load_model_params(checkpoint)?;
    let expected = model.init(&mut ChaCha8Rng::seed_from_u64(0));
    if !expected.same_layout(&params) {
        bail!(
            "checkpoint {} does not match the configured model shape",
            checkpoint.display()
        );
    }
    let instances: Vec<TaskInstance> = match instances_file {
        Some(p) => read_instances(p)?,
        None => cfg.task.generate_many(&mut ChaCha8Rng::seed_from_u64(seed), n)?,
    };
    Ok(evaluate(
        &model,
        &params,
        &cfg.task.vocab(),
        cfg.task.answer_format,
        &instances,
        cfg.completion_len,
        &cfg.sampler(true),
        seed,
    )?)
}

/// Per-sample FLOPs in units of `N D`, and that cost relative to a single
/// Monte Carlo sample, rounded to the nearest percent.
pub fn flops_report(k: u64, mu: u64, m: u64, coupled: bool) -> Result<(u64, u64)> {
    let c = flops_multiplier(k, mu, m, coupled)?;
    let base = flops_multiplier(k, mu, 1, coupled)?;
    Ok((c, (200 * c + base) / (2 * base)))
}

pub fn cmd_flops(k: u64, mu: u64, m: u64, coupled: bool, nd: Option<(u64, u64)>) -> Result<String> {
    let (c, pct) = flops_report(k, mu, m, coupled)?;
    let mut s = format!("{c} N D\n{pct}% of the single-sample cost\n");
    if let Some((n, d)) = nd {
        s.push_str(&format!("{} FLOPs per sample\n", c as u128 * n as u128 * d as u128));
    }
    Ok(s)
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleSummary {
    pub scale: CheckScale,
    pub properties: Vec<PropertyResult>,
    pub all_ok: bool,
}

/// Runs every oracle property at the given scale.
pub fn cmd_oracle_check(scale: &CheckScale) -> Result<OracleSummary> {
    let mut properties = Vec::new();
    properties.extend(elbo_unbiasedness(scale, 0.99)?);
    let fits = |max: usize| scale.len.unwrap_or(scale.max_len) <= max;
    if fits(espo_core::oracle::MAX_LOGLIK_LEN) {
        properties.push(variational_bound(scale)?);
    }
    properties.push(quadrature_agreement(scale)?);
    properties.extend(variance_claims(scale, [0.9, 0.9, 0.85])?);
    properties.extend(kl_gradient_facts(scale.instances.max(1), scale.seed)?);
    let all_ok = properties.iter().all(PropertyResult::ok);
    Ok(OracleSummary {
        scale: *scale,
        properties,
        all_ok,
    })
}

/// Outcome of an ablation sweep.
#[derive(Debug, Clone, Serialize)]
pub struct AblationSummary {
    pub axis: Axis,
    pub rows: usize,
    pub failures: Vec<ArmFailure>,
    pub csv: PathBuf,
    pub svg: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmFailure {
    pub value: String,
    pub seed: u64,
    pub error: String,
}

/// Runs every (axis value, seed) pair under `out_dir/<axis>/<value>/seed-<s>`
/// and merges their rewards into `ablation.csv` and `ablation.svg`. A failing
/// arm is recorded in `failures.json` and the rest continue.
pub fn cmd_ablate(spec: &ExperimentSpec, axis: Axis) -> Result<AblationSummary> {
    let root = spec.out_dir.join(axis.name());
    fs::create_dir_all(&root)?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for arm in spec.arms(axis) {
        let flops_pct = match axis {
            Axis::Mc => {
                let c = &arm.config;
                let k = c.sampler(false).steps(c.completion_len) as u64;
                let coupled = c.estimator == EstimatorForm::Coupled;
                Some(flops_report(k, c.inner_steps as u64, c.mc_samples as u64, coupled)?.1)
            }
            _ => None,
        };
        for &seed in &spec.seeds {
            let mut cfg = arm.config.clone();
            cfg.seed = seed;
            let dir = root.join(&arm.label).join(format!("seed-{seed}"));
            match train_run(&cfg, &dir) {
                Ok(s) => {
                    println!("{axis}={} seed {seed}: {} steps", arm.label, s.metrics.len());
                    rows.extend(s.metrics.iter().map(|m| Row {
                        step: m.step,
                        value: arm.label.clone(),
                        seed,
                        reward: m.mean_reward,
                        flops_pct,
                    }))
                }
                Err(e) => {
                    eprintln!("{axis}={} seed {seed} failed: {e:#}", arm.label);
                    failures.push(ArmFailure {
                        value: arm.label.clone(),
                        seed,
                        error: format!("{e:#}"),
                    });
                }
            }
        }
    }
    let csv = root.join("ablation.csv");
    let svg = root.join("ablation.svg");
    write_atomic(&csv, to_csv(&rows).as_bytes())?;
    let title = format!("reward by {axis} (moving average, {SMOOTH_WINDOW} steps)");
    write_atomic(&svg, to_svg(&title, &mean_curves(&rows), SMOOTH_WINDOW).as_bytes())?;
    if !failures.is_empty() {
        write_json(&root.join("failures.json"), &failures)?;
    }
    Ok(AblationSummary {
        axis,
        rows: rows.len(),
        failures,
        csv,
        svg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flops_percentages_round_to_the_table() {
        assert_eq!(flops_report(256, 8, 1, true).unwrap(), (608, 100));
        assert_eq!(flops_report(256, 8, 2, true).unwrap(), (704, 116));
        assert_eq!(flops_report(256, 8, 4, true).unwrap(), (896, 147));
        assert!(cmd_flops(256, 8, 2, true, None).unwrap().starts_with("704 N D\n116%"));
    }

    #[test]
    fn atomic_file_appears_only_on_commit() {
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("m.jsonl");
        let mut f = AtomicFile::create(&dest).unwrap();
        f.writer().write_all(b"x\n").unwrap();
        assert!(!dest.exists());
        f.commit().unwrap();
        assert_eq!(fs::read_to_string(&dest).unwrap(), "x\n");
    }
}
