//! Tabular ingestion, train/test splitting, the synthetic benchmark, label
//! noise and the resampling baselines.
//!
//! Group convention: `sensitive = 1` is the majority group (size `n_p`),
//! `sensitive = 0` the minority (size `n_u`).

mod preprocess;
mod resample;
mod schema;
mod synthetic;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use preprocess::{ColumnStats, PreprocessStats};
pub use resample::{
    inject_label_noise, multi_group_prepare, oversample, reweighing_weights, undersample,
    SubgroupView,
};
pub use schema::{ColumnKind, ColumnSchema, Schema};
pub use synthetic::{make_synthetic, SyntheticSpec};

use preprocess::Source;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("schema: {0}")]
    Schema(String),
    #[error("column {0} not found in file")]
    MissingColumn(String),
    #[error("{0}: {1}")]
    Csv(String, String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("test fraction must be in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("stratum (label {label}, group {group}) has only {size} rows")]
    StratumTooSmall { label: u8, group: u8, size: usize },
    #[error("noise ratio must be in [0, 1], got {0}")]
    BadRatio(f64),
    #[error("{flips} flips requested in a group of {size}")]
    TooManyFlips { flips: usize, size: usize },
    #[error("group {0} is empty")]
    EmptyGroup(String),
    #[error("majority group ({n_p}) is smaller than minority group ({n_u})")]
    MajoritySmaller { n_p: usize, n_u: usize },
    #[error("reference level {0:?} not present")]
    UnknownLevel(String),
    #[error("invalid synthetic spec: {0}")]
    Synthetic(String),
    #[error("cache: {0}")]
    Cache(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Encoded dataset. When loaded from CSV it remembers the raw records so a
/// split can refit the preprocessing on its training part.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<u8>,
    pub sensitive: Vec<u8>,
    /// Index into `level_names` of each row's raw sensitive value.
    pub levels: Vec<usize>,
    pub level_names: Vec<String>,
    pub feature_names: Vec<String>,
    pub stats: Option<PreprocessStats>,
    #[serde(skip)]
    source: Option<Arc<Source>>,
    #[serde(skip)]
    rows: Vec<usize>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.features == other.features
            && self.labels == other.labels
            && self.sensitive == other.sensitive
            && self.levels == other.levels
            && self.level_names == other.level_names
            && self.feature_names == other.feature_names
            && self.stats == other.stats
    }
}

impl Dataset {
    /// Builds a dataset from already-encoded parts; `levels` mirror `sensitive`.
    pub fn from_parts(
        features: Array2<f64>,
        labels: Vec<u8>,
        sensitive: Vec<u8>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n || sensitive.len() != n || feature_names.len() != features.ncols() {
            return Err(DataError::Schema("part lengths disagree".into()));
        }
        if labels.iter().chain(&sensitive).any(|&v| v > 1) {
            return Err(DataError::Schema("labels and groups must be 0 or 1".into()));
        }
        Ok(Self {
            features,
            levels: sensitive.iter().map(|&s| s as usize).collect(),
            level_names: vec!["0".into(), "1".into()],
            labels,
            sensitive,
            feature_names,
            stats: None,
            source: None,
            rows: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// `(n_p, n_u)`: majority and minority sizes.
    pub fn group_sizes(&self) -> (usize, usize) {
        let n_p = self.sensitive.iter().filter(|&&s| s == 1).count();
        (n_p, self.len() - n_p)
    }

    pub fn group_indices(&self, s: u8) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.sensitive[i] == s).collect()
    }

    pub fn positive_rate(&self, s: u8) -> f64 {
        let idx = self.group_indices(s);
        idx.iter().filter(|&&i| self.labels[i] == 1).count() as f64 / idx.len().max(1) as f64
    }

    /// Rows `idx` (in that order, repeats allowed) with the same encoding.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            sensitive: idx.iter().map(|&i| self.sensitive[i]).collect(),
            levels: idx.iter().map(|&i| self.levels[i]).collect(),
            level_names: self.level_names.clone(),
            feature_names: self.feature_names.clone(),
            stats: self.stats.clone(),
            source: self.source.clone(),
            rows: if self.source.is_some() {
                idx.iter().map(|&i| self.rows[i]).collect()
            } else {
                Vec::new()
            },
        }
    }

    /// Same rows with preprocessing refitted on `fit_on` (a dataset drawn from
    /// the same file). Synthetic datasets are returned unchanged.
    fn reencoded(&self, fit: &PreprocessStats) -> Self {
        let Some(src) = &self.source else {
            return self.clone();
        };
        let (features, _) = fit.transform(src, &self.rows);
        Self {
            features,
            feature_names: fit.feature_names(),
            stats: Some(fit.clone()),
            ..self.clone()
        }
    }

    pub fn with_labels(&self, labels: Vec<u8>) -> Self {
        assert_eq!(labels.len(), self.len());
        Self {
            labels,
            ..self.clone()
        }
    }

    /// Rejects datasets whose majority (`s = 1`) is smaller than the minority.
    pub fn check_groups(&self) -> Result<()> {
        let (n_p, n_u) = self.group_sizes();
        if n_p == 0 {
            return Err(DataError::EmptyGroup("majority".into()));
        }
        if n_u == 0 {
            return Err(DataError::EmptyGroup("minority".into()));
        }
        if n_p < n_u {
            return Err(DataError::MajoritySmaller { n_p, n_u });
        }
        Ok(())
    }

    /// Writes the versioned, checksummed cache file.
    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let payload = serde_json::to_vec(self).map_err(|e| DataError::Cache(e.to_string()))?;
        let mut bytes = Vec::with_capacity(payload.len() + 48);
        bytes.extend_from_slice(CACHE_MAGIC);
        bytes.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        bytes.extend_from_slice(&Sha256::digest(&payload));
        bytes.extend_from_slice(&payload);
        fs::write(path, bytes).map_err(|e| DataError::Io(path.display().to_string(), e))
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| DataError::Io(path.display().to_string(), e))?;
        let head = CACHE_MAGIC.len() + 4 + 32;
        if bytes.len() < head || &bytes[..CACHE_MAGIC.len()] != CACHE_MAGIC {
            return Err(DataError::Cache("not a dataset cache".into()));
        }
        let v = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if v != CACHE_VERSION {
            return Err(DataError::Cache(format!("unsupported version {v}")));
        }
        let payload = &bytes[head..];
        if Sha256::digest(payload).as_slice() != &bytes[12..head] {
            return Err(DataError::Cache("checksum mismatch".into()));
        }
        serde_json::from_slice(payload).map_err(|e| DataError::Cache(e.to_string()))
    }
}

/// Cache layout: magic (8 bytes), version (u32 LE), SHA-256 of the payload
/// (32 bytes), JSON payload.
const CACHE_MAGIC: &[u8; 8] = b"ADVRWDS\0";
const CACHE_VERSION: u32 = 1;

/// Reads `path` with `schema`, drops rows with missing or malformed fields,
/// and encodes with statistics fitted on every remaining row. [`split`]
/// refits them on the training part.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    schema.validate()?;
    let src = Source::read(path, schema)?;
    let rows: Vec<usize> = (0..src.rows.len()).collect();
    let stats = PreprocessStats::fit(&src, &rows);
    let (features, _) = stats.transform(&src, &rows);
    let level_names = src.level_names();
    Ok(Dataset {
        features,
        labels: src.labels(&rows),
        sensitive: src.sensitive(&rows),
        levels: src.levels(&rows, &level_names),
        level_names,
        feature_names: stats.feature_names(),
        stats: Some(stats),
        source: Some(Arc::new(src)),
        rows,
    })
}

/// Rows dropped while loading: `(missing, malformed)`.
pub fn dropped_rows(data: &Dataset) -> Option<(usize, usize)> {
    data.source
        .as_ref()
        .map(|s| (s.dropped_missing, s.dropped_malformed))
}

/// Stratified split on `(label, sensitive)`: each stratum contributes
/// `round(fraction · size)` rows to the test part.
pub fn split_indices(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::BadFraction(test_fraction));
    }
    let mut strata: BTreeMap<(u8, u8), Vec<usize>> = BTreeMap::new();
    for i in 0..data.len() {
        strata.entry((data.labels[i], data.sensitive[i])).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for ((label, group), mut idx) in strata {
        if idx.len() < 2 {
            return Err(DataError::StratumTooSmall {
                label,
                group,
                size: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        let k = ((test_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Stratified train/test split; for CSV-backed data the normalisation and
/// category maps are refitted on the training rows and applied to both.
pub fn split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (tr, te) = split_indices(data, test_fraction, seed)?;
    let train = data.subset(&tr);
    let test = data.subset(&te);
    match &data.source {
        Some(src) => {
            let stats = PreprocessStats::fit(src, &train.rows);
            Ok((train.reencoded(&stats), test.reencoded(&stats)))
        }
        None => Ok((train, test)),
    }
}
