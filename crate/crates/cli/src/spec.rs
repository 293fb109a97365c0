//! Experiment files: one TOML document holding the run configuration, the
//! output directory, the seeds to repeat over, and ablation axis values.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use espo_core::mdm::EstimatorForm;
use espo_core::objective::{KlEstimator, Variant};
use espo_core::train::TrainRunConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SpecError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub run: TrainRunConfig,
    #[serde(default)]
    pub ablation: AxisValues,
}

/// Values swept by each ablation axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisValues {
    #[serde(default = "all_variants")]
    pub variant: Vec<Variant>,
    #[serde(default = "all_kl")]
    pub kl: Vec<KlEstimator>,
    #[serde(default = "mc_counts")]
    pub mc: Vec<usize>,
    #[serde(default = "mu_counts")]
    pub mu: Vec<usize>,
}

fn all_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}
fn all_kl() -> Vec<KlEstimator> {
    vec![KlEstimator::K1, KlEstimator::K2, KlEstimator::K3]
}
fn mc_counts() -> Vec<usize> {
    vec![1, 2, 4]
}
fn mu_counts() -> Vec<usize> {
    vec![1, 2, 4, 8]
}

impl Default for AxisValues {
    fn default() -> Self {
        Self {
            variant: all_variants(),
            kl: all_kl(),
            mc: mc_counts(),
            mu: mu_counts(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    Variant,
    Kl,
    Mc,
    Mu,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Variant => "variant",
            Axis::Kl => "kl",
            Axis::Mc => "mc",
            Axis::Mu => "mu",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "variant" => Ok(Axis::Variant),
            "kl" => Ok(Axis::Kl),
            "mc" => Ok(Axis::Mc),
            "mu" => Ok(Axis::Mu),
            other => Err(SpecError::Invalid(format!(
                "unknown axis `{other}`; expected variant, kl, mc or mu"
            ))),
        }
    }
}

/// One arm of an ablation: a label and the configuration it runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub label: String,
    pub config: TrainRunConfig,
}

impl ExperimentSpec {
    pub fn parse(text: &str, origin: &str) -> Result<Self, SpecError> {
        let spec: Self = toml::from_str(text).map_err(|e| SpecError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, SpecError> {
        let text = std::fs::read_to_string(path).map_err(|source| SpecError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("experiment specs always serialize")
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.seeds.is_empty() {
            return Err(SpecError::Invalid("`seeds` must list at least one seed".into()));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(SpecError::Invalid("`out_dir` must not be empty".into()));
        }
        self.run
            .validate()
            .map_err(|e| SpecError::Invalid(format!("[run]: {e}")))?;
        let a = &self.ablation;
        if a.variant.is_empty() || a.kl.is_empty() || a.mc.is_empty() || a.mu.is_empty() {
            return Err(SpecError::Invalid(
                "every [ablation] axis needs at least one value".into(),
            ));
        }
        Ok(())
    }

    /// Configurations for each value of `axis`, in the listed order.
    pub fn arms(&self, axis: Axis) -> Vec<Arm> {
        let base = &self.run;
        let with = |label: String, f: &dyn Fn(&mut TrainRunConfig)| {
            let mut config = base.clone();
            f(&mut config);
            Arm { label, config }
        };
        match axis {
            Axis::Variant => self
                .ablation
                .variant
                .iter()
                .map(|&v| with(v.name().to_string(), &|c| c.objective.variant = v))
                .collect(),
            Axis::Kl => self
                .ablation
                .kl
                .iter()
                .map(|&k| with(k.name().to_string(), &|c| c.objective.kl = k))
                .collect(),
            Axis::Mc => self
                .ablation
                .mc
                .iter()
                .map(|&m| with(m.to_string(), &|c| c.mc_samples = m))
                .collect(),
            Axis::Mu => self
                .ablation
                .mu
                .iter()
                .map(|&m| with(m.to_string(), &|c| c.inner_steps = m))
                .collect(),
        }
    }
}

/// A minimal valid experiment on toy Sudoku.
pub fn example_spec() -> ExperimentSpec {
    let mut run = TrainRunConfig::toy_sudoku();
    run.estimator = EstimatorForm::Coupled;
    ExperimentSpec {
        out_dir: PathBuf::from("runs/sudoku"),
        seeds: vec![0, 1, 2],
        run,
        ablation: AxisValues::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let spec = example_spec();
        let text = spec.to_toml();
        let back = ExperimentSpec::parse(&text, "mem").unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let text = example_spec().to_toml().replacen("group_size", "grup_size", 1);
        let line = text.lines().position(|l| l.starts_with("grup_size")).unwrap() + 1;
        let err = ExperimentSpec::parse(&text, "exp.toml").unwrap_err().to_string();
        assert!(err.contains("grup_size"), "{err}");
        assert!(err.contains(&format!("line {line}")), "{err}");
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let mut spec = example_spec();
        spec.seeds.clear();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn kl_axis_sets_estimator() {
        let arms = example_spec().arms(Axis::Kl);
        let labels: Vec<_> = arms.iter().map(|a| a.label.as_str()).collect();
        assert_eq!(labels, ["k1", "k2", "k3"]);
        assert_eq!(arms[2].config.objective.kl, KlEstimator::K3);
    }
}
