use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Result};

/// Biased two-group Gaussian benchmark.
///
/// Coordinate 1 separates the groups, coordinate 2 carries the label, the
/// rest is noise; every coordinate has standard deviation `noise_sd`.
///
/// * Minority: centred at `group_shift` on coordinate 1.
/// * Majority: a `shared_fraction` share is drawn exactly like the minority;
///   the rest sits at 0 on coordinate 1.
/// * Label: `x2 > class_sep`, except in the majority-only component where the
///   threshold is `class_sep − majority_bias`, so the majority has the higher
///   positive rate.
///
/// Reweighting the majority onto its shared component can therefore close
/// the group gap, while the unweighted groups differ by roughly
/// `(1 − shared_fraction)·group_shift` in W1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
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
    pub seed: u64,
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

impl SyntheticSpec {
    pub fn new(n_p: usize, n_u: usize, dim: usize, group_shift: f64, class_sep: f64, seed: u64) -> Self {
        Self {
            n_p,
            n_u,
            dim,
            group_shift,
            class_sep,
            majority_bias: default_bias(),
            shared_fraction: default_shared(),
            noise_sd: default_sd(),
            seed,
        }
    }
}

pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n_p == 0 || spec.n_u == 0 {
        return Err(DataError::Synthetic("group sizes must be positive".into()));
    }
    if spec.dim < 2 {
        return Err(DataError::Synthetic("need at least two dimensions".into()));
    }
    if !(0.0..=1.0).contains(&spec.shared_fraction) || !(spec.noise_sd > 0.0) {
        return Err(DataError::Synthetic("bad shared fraction or noise".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sd).expect("positive sd");
    let n = spec.n_p + spec.n_u;
    let shared = (spec.shared_fraction * spec.n_p as f64).round() as usize;
    let mut x = Array2::zeros((n, spec.dim));
    let mut labels = Vec::with_capacity(n);
    let mut sensitive = Vec::with_capacity(n);
    for i in 0..n {
        let majority = i < spec.n_p;
        let own_region = majority && i >= shared;
        let centre = if own_region { 0.0 } else { spec.group_shift };
        for k in 0..spec.dim {
            x[[i, k]] = noise.sample(&mut rng);
        }
        x[[i, 0]] += centre;
        let threshold = if own_region {
            spec.class_sep - spec.majority_bias
        } else {
            spec.class_sep
        };
        labels.push(u8::from(x[[i, 1]] > threshold));
        sensitive.push(u8::from(majority));
    }
    let names = (1..=spec.dim).map(|k| format!("x{k}")).collect();
    Dataset::from_parts(x, labels, sensitive, names)
}
