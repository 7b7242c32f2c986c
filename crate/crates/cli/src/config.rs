//! Declarative experiment description (TOML) and command-line overrides.

use std::path::{Path, PathBuf};

use advrw::adversarial::{Distance, ReweightTarget, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Reweighing,
    Undersampling,
    Oversampling,
    Adversarial,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Reweighing => "reweighing",
            Method::Undersampling => "undersampling",
            Method::Oversampling => "oversampling",
            Method::Adversarial => "adversarial",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "baseline" => Method::Baseline,
            "reweighing" => Method::Reweighing,
            "undersampling" => Method::Undersampling,
            "oversampling" => Method::Oversampling,
            "adversarial" => Method::Adversarial,
            _ => return Err(HarnessError::Config(format!("unknown method {s:?}"))),
        })
    }
}

/// Synthetic generator parameters; the seed comes from the repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticParams {
    pub n_p: usize,
    pub n_u: usize,
    pub dim: usize,
    pub group_shift: f64,
    pub class_sep: f64,
    #[serde(default = "default_bias")]
    pub majority_bias: f64,
    #[serde(default = "default_shared")]
    pub shared_fraction: f64,
    #[serde(default = "default_sd")]
    pub noise_sd: f64,
}

fn default_bias() -> f64 {
    0.25
}
fn default_shared() -> f64 {
    0.2
}
fn default_sd() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    /// CSV file plus column schema; relative paths resolve against the
    /// working directory.
    Csv { path: PathBuf, schema: PathBuf },
    Synthetic(SyntheticParams),
}

/// Several sensitive levels: every non-reference level is reweighted
/// towards the reference in turn. `pair` names the two levels whose
/// disparities are reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiGroupSpec {
    pub reference: String,
    pub pair: [String; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    DisparateImpact,
    DisparateFpr,
    DisparateFnr,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Accuracy,
        Metric::DisparateImpact,
        Metric::DisparateFpr,
        Metric::DisparateFnr,
    ];

    pub fn column(self) -> &'static str {
        match self {
            Metric::Accuracy => "Accuracy",
            Metric::DisparateImpact => "Disparate Impact",
            Metric::DisparateFpr => "Disparate FPR",
            Metric::DisparateFnr => "Disparate FNR",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub method: Method,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub out: PathBuf,
    pub reps: usize,
    /// Repetition `k` uses seed `seed + k` for the split, the models, the
    /// label noise and any resampling.
    pub seed: u64,
    pub test_fraction: f64,
    /// Label noise injected into the training split only.
    pub noise_ratio: f64,
    pub metrics: Vec<Metric>,
    pub multi_group: Option<MultiGroupSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            method: Method::Baseline,
            dataset: DatasetSpec::Synthetic(SyntheticParams {
                n_p: 1400,
                n_u: 600,
                dim: 2,
                group_shift: 1.0,
                class_sep: 0.26,
                majority_bias: default_bias(),
                shared_fraction: default_shared(),
                noise_sd: default_sd(),
            }),
            train: TrainConfig::default(),
            out: "runs".into(),
            reps: 5,
            seed: 0,
            test_fraction: 0.2,
            noise_ratio: 0.0,
            metrics: Metric::ALL.to_vec(),
            multi_group: None,
        }
    }
}

/// Command-line overrides; set fields replace the file's values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub reps: Option<usize>,
    pub method: Option<Method>,
    pub dataset: Option<PathBuf>,
    pub t: Option<f64>,
    pub distance: Option<Distance>,
    pub target: Option<ReweightTarget>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is serialisable")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.reps {
            self.reps = v;
        }
        if let Some(v) = o.method {
            self.method = v;
        }
        if let Some(v) = &o.dataset {
            if let DatasetSpec::Csv { path, .. } = &mut self.dataset {
                *path = v.clone();
            }
        }
        if let Some(v) = o.t {
            self.train.t = v;
        }
        if let Some(v) = o.distance {
            self.train.distance = v;
        }
        if let Some(v) = o.target {
            self.train.reweight_target = v;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.train.validate()?;
        if self.reps == 0 {
            return bad("reps must be positive".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        if !(0.0..=1.0).contains(&self.noise_ratio) {
            return bad(format!("noise_ratio must lie in [0, 1], got {}", self.noise_ratio));
        }
        if self.metrics.is_empty() {
            return bad("metric list is empty".into());
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("name {:?} is not a plain directory name", self.name));
        }
        if self.method != Method::Adversarial {
            let d = TrainConfig::default();
            if self.train.t != d.t {
                return bad(format!("T applies to the adversarial method only (method {})", self.method.name()));
            }
            if self.train.distance != d.distance || self.train.reweight_target != d.reweight_target {
                return bad(format!(
                    "distance and reweight_target apply to the adversarial method only (method {})",
                    self.method.name()
                ));
            }
        }
        if self.multi_group.is_some() {
            if !matches!(self.dataset, DatasetSpec::Csv { .. }) {
                return bad("multi_group needs a CSV dataset with a multi-level sensitive column".into());
            }
            if matches!(self.method, Method::Undersampling | Method::Oversampling) {
                return bad("resampling baselines are binary-only".into());
            }
            if self.train.reweight_target != ReweightTarget::Majority {
                return bad("multi_group reweights the non-reference levels only".into());
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (object keys sorted), so the hash
    /// does not depend on field order in the source file. The output root
    /// is left out: it does not affect results.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config is serialisable");
        value.as_object_mut().expect("config is an object").remove("out");
        let text = serde_json::to_string(&value).expect("value is serialisable");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(&self.name)
    }

    pub fn rep_seed(&self, rep: usize) -> u64 {
        self.seed.wrapping_add(rep as u64)
    }
}
