//! Pipelines: data preparation per repetition, training under each method,
//! evaluation, and the sweeps built on top of a single run.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use advrw::adversarial::{
    audit_w1, critic_estimate, train, write_round_log, Checkpoint, Distance, GroupLayout, ReweightTarget,
    TrainConfig, TrainState, WeightPolicy,
};
use advrw::data::{
    inject_label_noise, load_csv, make_synthetic, multi_group_prepare, oversample, split, undersample, Dataset,
    Schema, SyntheticSpec,
};
use advrw::metrics::{evaluate, pairwise_disparity, EvalReport};
use advrw::models::Prediction;
use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSpec, ExperimentConfig, Method};
use crate::report::{aggregate, write_long_csv, write_table, Row};
use crate::{HarnessError, Result};

/// Train/test pair of one repetition.
#[derive(Debug, Clone)]
pub struct RepData {
    pub seed: u64,
    pub train: Dataset,
    pub test: Dataset,
}

/// Loads a CSV dataset once; synthetic data is generated per repetition.
pub fn load_source(cfg: &ExperimentConfig) -> Result<Option<Dataset>> {
    match &cfg.dataset {
        DatasetSpec::Csv { path, schema } => {
            let schema = Schema::from_path(schema)?;
            let data = load_csv(path, &schema)?;
            if let Some((missing, malformed)) = advrw::data::dropped_rows(&data) {
                log::info!("{}: {} rows kept, {missing} with missing values and {malformed} malformed dropped", path.display(), data.len());
            }
            Ok(Some(data))
        }
        DatasetSpec::Synthetic(_) => Ok(None),
    }
}

pub fn rep_data(cfg: &ExperimentConfig, source: Option<&Dataset>, rep: usize) -> Result<RepData> {
    let seed = cfg.rep_seed(rep);
    let full = match (&cfg.dataset, source) {
        (DatasetSpec::Synthetic(p), _) => make_synthetic(&SyntheticSpec {
            n_p: p.n_p,
            n_u: p.n_u,
            dim: p.dim,
            group_shift: p.group_shift,
            class_sep: p.class_sep,
            majority_bias: p.majority_bias,
            shared_fraction: p.shared_fraction,
            noise_sd: p.noise_sd,
            seed,
        })?,
        (DatasetSpec::Csv { .. }, Some(d)) => d.clone(),
        (DatasetSpec::Csv { path, .. }, None) => {
            return Err(HarnessError::Config(format!("{} was not loaded", path.display())))
        }
    };
    let (mut train, test) = split(&full, cfg.test_fraction, seed)?;
    if cfg.noise_ratio > 0.0 {
        train = inject_label_noise(&train, cfg.noise_ratio, seed)?;
    }
    Ok(RepData { seed, train, test })
}

/// What one method trains on: possibly resampled rows, the group layout,
/// the weight policy and the effective training settings.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub data: Dataset,
    pub layout: GroupLayout,
    pub policy: WeightPolicy,
    pub train: TrainConfig,
}

pub fn training_set(cfg: &ExperimentConfig, train: &Dataset, seed: u64) -> Result<TrainingSet> {
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let balanced = |tc: &mut TrainConfig| {
        let half = (tc.batch_majority + tc.batch_minority) / 2;
        tc.batch_majority = half.max(1);
        tc.batch_minority = half.max(1);
    };
    let (data, policy) = match cfg.method {
        Method::Baseline => (train.clone(), WeightPolicy::Fixed(1.0)),
        Method::Reweighing => (train.clone(), WeightPolicy::Reweighing),
        Method::Adversarial => (train.clone(), WeightPolicy::Adversarial),
        Method::Undersampling => {
            balanced(&mut tc);
            (undersample(train, seed)?, WeightPolicy::Fixed(1.0))
        }
        Method::Oversampling => {
            balanced(&mut tc);
            (oversample(train, seed)?, WeightPolicy::Fixed(1.0))
        }
    };
    let layout = match &cfg.multi_group {
        Some(m) => GroupLayout::from_views(&multi_group_prepare(&data, &m.reference)?)?,
        None => GroupLayout::binary(&data),
    };
    Ok(TrainingSet {
        data,
        layout,
        policy,
        train: tc,
    })
}

/// Disparities between the two configured levels of a multi-level attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub group_a: String,
    pub group_b: String,
    pub accuracy_a: f64,
    pub accuracy_b: f64,
    /// Signed `a − b`.
    pub disparate_impact: f64,
    pub disparate_fpr: Option<f64>,
    pub disparate_fnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub method: Method,
    pub rep: usize,
    pub seed: u64,
    pub report: EvalReport,
    pub pair: Option<PairReport>,
    /// Exact subsampled W1 after the last round (when audited).
    pub final_w1: Option<f64>,
    pub round_log: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// Equality up to the wall-clock time and the artefact locations.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.wall_clock_secs = other.wall_clock_secs;
        a.round_log.clone_from(&other.round_log);
        a.weights.clone_from(&other.weights);
        a.checkpoint.clone_from(&other.checkpoint);
        a == *other
    }
}

pub fn evaluate_predictions(cfg: &ExperimentConfig, test: &Dataset, pred: &[Prediction]) -> Result<(EvalReport, Option<PairReport>)> {
    let report = evaluate(pred, &test.labels, &test.sensitive)?;
    let pair = match &cfg.multi_group {
        None => None,
        Some(m) => {
            let level = |name: &str| {
                test.level_names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| HarnessError::Config(format!("unknown level {name:?}")))
            };
            let (a, b) = (level(&m.pair[0])?, level(&m.pair[1])?);
            let labels: Vec<u8> = pred.iter().map(|p| p.label).collect();
            let d = pairwise_disparity(&labels, &test.labels, &test.levels, a, b)?;
            let acc = |l: usize| {
                let rows: Vec<usize> = (0..test.len()).filter(|&i| test.levels[i] == l).collect();
                rows.iter().filter(|&&i| labels[i] == test.labels[i]).count() as f64 / rows.len() as f64
            };
            Some(PairReport {
                group_a: m.pair[0].clone(),
                group_b: m.pair[1].clone(),
                accuracy_a: acc(a),
                accuracy_b: acc(b),
                disparate_impact: d.disparate_impact,
                disparate_fpr: d.disparate_fpr,
                disparate_fnr: d.disparate_fnr,
            })
        }
    };
    Ok((report, pair))
}

/// Outcome of one repetition, with the trained state for further analysis.
pub struct RepOutcome {
    pub record: RunRecord,
    pub state: TrainState,
    pub set: TrainingSet,
    pub data: RepData,
}

/// Trains and evaluates repetition `rep`; writes artefacts under `dir` when given.
pub fn run_rep(cfg: &ExperimentConfig, source: Option<&Dataset>, rep: usize, dir: Option<&Path>) -> Result<RepOutcome> {
    let start = Instant::now();
    let data = rep_data(cfg, source, rep)?;
    let set = training_set(cfg, &data.train, data.seed)?;
    let state = train(&set.data, set.layout.clone(), &set.train, set.policy)?;
    let pred = state.predict(data.test.features.view())?;
    let (report, pair) = evaluate_predictions(cfg, &data.test, &pred)?;
    let final_w1 = state.log.last().and_then(|r| r.w1_exact_subsample);
    let mut record = RunRecord {
        config_hash: cfg.hash(),
        method: cfg.method,
        rep,
        seed: data.seed,
        report,
        pair,
        final_w1,
        round_log: None,
        weights: None,
        checkpoint: None,
        wall_clock_secs: 0.0,
    };
    if let Some(dir) = dir {
        let dir = dir.join(format!("rep-{rep}"));
        create_dir(&dir)?;
        let rounds = dir.join("rounds.csv");
        write_round_log(create(&rounds)?, &state.log)?;
        let weights = dir.join("weights.csv");
        write_weights(&weights, &state)?;
        let ckpt = dir.join("checkpoint.json");
        state.checkpoint().save(&ckpt)?;
        record.round_log = Some(rounds);
        record.weights = Some(weights);
        record.checkpoint = Some(ckpt);
        record.wall_clock_secs = start.elapsed().as_secs_f64();
        write_json(&dir.join("metrics.json"), &record)?;
    } else {
        record.wall_clock_secs = start.elapsed().as_secs_f64();
    }
    log::info!(
        "{} rep {rep}: accuracy {:.4}, disparate impact {:+.4} ({:.1}s)",
        cfg.method.name(),
        record.report.accuracy,
        record.report.disparate_impact,
        record.wall_clock_secs
    );
    Ok(RepOutcome {
        record,
        state,
        set,
        data,
    })
}

/// Every repetition of `cfg` with its artefacts; also writes the
/// aggregated one-row table.
pub fn run(cfg: &ExperimentConfig) -> Result<(Vec<RunRecord>, Row)> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    create_dir(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(|e| io_err(&dir, e))?;
    let source = load_source(cfg)?;
    let records = (0..cfg.reps)
        .map(|rep| run_rep(cfg, source.as_ref(), rep, Some(&dir)).map(|o| o.record))
        .collect::<Result<Vec<_>>>()?;
    write_json(&dir.join("runs.json"), &records)?;
    let row = aggregate(cfg.method.name(), &records);
    write_table(&dir.join("table.csv"), "Method", std::slice::from_ref(&row), &cfg.metrics)?;
    Ok((records, row))
}

/// Same config, another method; drops the adversarial-only settings.
pub fn with_method(cfg: &ExperimentConfig, method: Method) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.method = method;
    if method != Method::Adversarial {
        let d = TrainConfig::default();
        c.train.t = d.t;
        c.train.distance = d.distance;
        c.train.reweight_target = d.reweight_target;
    }
    c
}

fn sub(cfg: &ExperimentConfig, name: String) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.out = cfg.run_dir();
    c.name = name;
    c
}

/// One aggregated row per `T`.
pub fn sweep_t(cfg: &ExperimentConfig, values: &[f64]) -> Result<Vec<(f64, Vec<RunRecord>, Row)>> {
    if values.is_empty() {
        return Err(HarnessError::Config("empty list of T values".into()));
    }
    if cfg.method != Method::Adversarial {
        return Err(HarnessError::Config("sweep-t needs the adversarial method".into()));
    }
    let mut out = Vec::new();
    for &t in values {
        let mut c = sub(cfg, format!("t-{t}"));
        c.train.t = t;
        let (records, mut row) = run(&c)?;
        row.label = format!("{t}");
        out.push((t, records, row));
    }
    let rows: Vec<Row> = out.iter().map(|(_, _, r)| r.clone()).collect();
    write_table(&cfg.run_dir().join("sweep_t.csv"), "T", &rows, &cfg.metrics)?;
    let long: Vec<(String, &RunRecord)> = out
        .iter()
        .flat_map(|(t, recs, _)| recs.iter().map(move |r| (format!("{t}"), r)))
        .collect();
    write_long_csv(&cfg.run_dir().join("sweep_t_long.csv"), &["t"], &long)?;
    Ok(out)
}

/// Method, noise ratio, repetitions and their aggregate.
pub type NoiseRow = (Method, f64, Vec<RunRecord>, Row);

/// One row per (method, noise ratio).
pub fn sweep_noise(cfg: &ExperimentConfig, ratios: &[f64], methods: &[Method]) -> Result<Vec<NoiseRow>> {
    if ratios.is_empty() || methods.is_empty() {
        return Err(HarnessError::Config("empty noise sweep".into()));
    }
    if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(HarnessError::Config(format!("noise ratio {r} outside [0, 1]")));
    }
    let mut out = Vec::new();
    for &m in methods {
        for &ratio in ratios {
            let mut c = sub(&with_method(cfg, m), format!("{}-noise-{ratio}", m.name()));
            c.noise_ratio = ratio;
            let (records, mut row) = run(&c)?;
            row.label = format!("{},{ratio}", m.name());
            out.push((m, ratio, records, row));
        }
    }
    let rows: Vec<Row> = out.iter().map(|o| o.3.clone()).collect();
    write_table(&cfg.run_dir().join("sweep_noise.csv"), "Method,Noise", &rows, &cfg.metrics)?;
    let long: Vec<(String, &RunRecord)> = out
        .iter()
        .flat_map(|(m, ratio, recs, _)| recs.iter().map(move |r| (format!("{},{ratio}", m.name()), r)))
        .collect();
    write_long_csv(&cfg.run_dir().join("sweep_noise_long.csv"), &["method", "noise"], &long)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Distance,
    ReweightTarget,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "distance" => Ok(AblationAxis::Distance),
            "reweight_target" | "reweight-target" | "target" => Ok(AblationAxis::ReweightTarget),
            _ => Err(HarnessError::Config(format!("unknown ablation axis {s:?}"))),
        }
    }
}

/// One row per arm. Every arm audits the exact W1 after its last round.
pub fn ablate(cfg: &ExperimentConfig, axis: AblationAxis) -> Result<Vec<(String, Vec<RunRecord>, Row)>> {
    if cfg.method != Method::Adversarial {
        return Err(HarnessError::Config("ablate needs the adversarial method".into()));
    }
    let arms: Vec<(String, ExperimentConfig)> = match axis {
        AblationAxis::Distance => [Distance::Wasserstein, Distance::Mmd]
            .into_iter()
            .map(|d| {
                let name = if d == Distance::Mmd { "mmd" } else { "wasserstein" };
                let mut c = sub(cfg, format!("distance-{name}"));
                c.train.distance = d;
                (name.to_string(), c)
            })
            .collect(),
        AblationAxis::ReweightTarget => [ReweightTarget::Majority, ReweightTarget::Minority, ReweightTarget::Both]
            .into_iter()
            .map(|t| {
                let name = match t {
                    ReweightTarget::Majority => "majority",
                    ReweightTarget::Minority => "minority",
                    ReweightTarget::Both => "both",
                };
                let mut c = sub(cfg, format!("target-{name}"));
                c.train.reweight_target = t;
                (name.to_string(), c)
            })
            .collect(),
    };
    let mut out = Vec::new();
    for (name, mut c) in arms {
        c.train.audit_every = c.train.epochs.max(1);
        let (records, mut row) = run(&c)?;
        row.label = name.clone();
        out.push((name, records, row));
    }
    let rows: Vec<Row> = out.iter().map(|o| o.2.clone()).collect();
    let file = match axis {
        AblationAxis::Distance => "ablate_distance.csv",
        AblationAxis::ReweightTarget => "ablate_target.csv",
    };
    write_table(&cfg.run_dir().join(file), "Arm", &rows, &cfg.metrics)?;
    Ok(out)
}

/// Runs the configured method and the plain baseline on a multi-level
/// sensitive attribute; rows report the configured pair's disparities.
pub fn multi_group(cfg: &ExperimentConfig) -> Result<Vec<(Method, Vec<RunRecord>, Row)>> {
    if cfg.multi_group.is_none() {
        return Err(HarnessError::Config("multi-group needs a [multi_group] section".into()));
    }
    let mut methods = vec![Method::Baseline];
    if cfg.method != Method::Baseline {
        methods.push(cfg.method);
    }
    let mut out = Vec::new();
    for m in methods {
        let c = sub(&with_method(cfg, m), m.name().to_string());
        let (records, row) = run(&c)?;
        out.push((m, records, row));
    }
    let rows: Vec<Row> = out.iter().map(|o| o.2.clone()).collect();
    write_table(&cfg.run_dir().join("multi_group.csv"), "Method", &rows, &cfg.metrics)?;
    Ok(out)
}

/// Distances of one pool before (uniform weights) and after (learned
/// weights) reweighting, in the checkpoint's latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolDistances {
    pub pool: String,
    pub w1_before: f64,
    pub w1_after: f64,
    pub critic_before: f64,
    pub critic_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepDistances {
    pub rep: usize,
    pub seed: u64,
    pub pools: Vec<PoolDistances>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub config_hash: String,
    pub p: u32,
    pub subsample_points: usize,
    pub subsample_reps: usize,
    pub reps: Vec<RepDistances>,
    pub mean_w1_before: f64,
    pub mean_w1_after: f64,
    /// `mean_w1_after / mean_w1_before`; absent when `before` is zero.
    pub ratio: Option<f64>,
}

/// Reads the checkpoints of a finished `run` and measures the exact
/// subsampled W1 between each pool and the reference group on the
/// training split.
pub fn report_distances(cfg: &ExperimentConfig) -> Result<DistanceReport> {
    cfg.validate()?;
    let source = load_source(cfg)?;
    let points = cfg.train.audit_points;
    let sub_reps = cfg.train.audit_reps.max(1);
    let mut reps = Vec::new();
    for rep in 0..cfg.reps {
        let path = cfg.run_dir().join(format!("rep-{rep}")).join("checkpoint.json");
        if !path.exists() {
            return Err(HarnessError::MissingCheckpoint(path));
        }
        let ckpt = Checkpoint::load(&path)?;
        let data = rep_data(cfg, source.as_ref(), rep)?;
        let set = training_set(cfg, &data.train, data.seed)?;
        if ckpt.layout != set.layout {
            return Err(HarnessError::Config(format!(
                "{} does not belong to this configuration",
                path.display()
            )));
        }
        let zu = ckpt.latents(set.data.features.select(Axis(0), &set.layout.reference).view())?;
        let uniform_u = vec![1.0; zu.nrows()];
        let mut pools = Vec::new();
        for (k, rows) in set.layout.pools.iter().enumerate() {
            let zp = ckpt.latents(set.data.features.select(Axis(0), rows).view())?;
            let uniform_p = vec![1.0; zp.nrows()];
            let w = &ckpt.weights[k].values;
            let v = &ckpt.reference_weights.values;
            let seed = data.seed.wrapping_mul(7919).wrapping_add(k as u64);
            pools.push(PoolDistances {
                pool: set.layout.pool_names[k].clone(),
                w1_before: audit_w1(zp.view(), &uniform_p, zu.view(), &uniform_u, points, sub_reps, seed)?,
                w1_after: audit_w1(zp.view(), w, zu.view(), v, points, sub_reps, seed)?,
                critic_before: critic_estimate(&ckpt.critics[k], zp.view(), &uniform_p, zu.view(), &uniform_u)?,
                critic_after: critic_estimate(&ckpt.critics[k], zp.view(), w, zu.view(), v)?,
            });
        }
        reps.push(RepDistances {
            rep,
            seed: data.seed,
            pools,
        });
    }
    let all = || reps.iter().flat_map(|r| &r.pools);
    let count = all().count() as f64;
    let before = all().map(|p| p.w1_before).sum::<f64>() / count;
    let after = all().map(|p| p.w1_after).sum::<f64>() / count;
    let report = DistanceReport {
        config_hash: cfg.hash(),
        p: 1,
        subsample_points: points,
        subsample_reps: sub_reps,
        reps,
        mean_w1_before: before,
        mean_w1_after: after,
        ratio: (before > 0.0).then(|| after / before),
    };
    write_json(&cfg.run_dir().join("distances.json"), &report)?;
    Ok(report)
}

fn write_weights(path: &Path, state: &TrainState) -> Result<()> {
    let mut f = std::io::BufWriter::new(create(path)?);
    let io = |e| io_err(path, e);
    writeln!(f, "pool,row,weight").map_err(io)?;
    for (k, w) in state.weights.iter().enumerate() {
        for (i, &row) in state.layout.pools[k].iter().enumerate() {
            writeln!(f, "{},{row},{:.12e}", state.layout.pool_names[k], w.values[i]).map_err(io)?;
        }
    }
    for (j, &row) in state.layout.reference.iter().enumerate() {
        writeln!(f, "reference,{row},{:.12e}", state.reference_weights.values[j]).map_err(io)?;
    }
    f.flush().map_err(io)
}

pub(crate) fn io_err(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Io(path.display().to_string(), e)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub(crate) fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| io_err(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serialisable");
    fs::write(path, text).map_err(|e| io_err(path, e))
}
