//! Alternating training: the classifier on the weighted loss, then the
//! critic with gradient penalty, then a fresh solve for the weights.
//!
//! Rows are organised by a [`GroupLayout`]: one or more *pools* whose
//! weights are learned (the majority, or every non-reference subgroup) and a
//! *reference* group (the minority). Each pool's weights sum to the
//! reference size. With several pools the critic/reweight step visits them
//! in turn, one per round.

mod critic;
mod mmd;
mod optim;

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution as _;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use critic::{critic_loss, gradient_penalty, CriticLoss};
pub use mmd::{frank_wolfe, median_bandwidth, mmd_distance, FourierFeatures};
pub use optim::{Adam, Sgd};

use crate::data::{Dataset, SubgroupView};
use crate::diffcore::{Bindings, GraphError, Tape};
use crate::models::{
    classify_batch, weighted_bce_node, FeatureExtractor, MlpModel, MlpSpec, ModelError, OutputActivation,
    Prediction,
};
use crate::otoracle::{subsampled_wasserstein, OtError, WeightedPointCloud};
use crate::reweight::{solve_weights, uniform_weights, CriticScores, ReweightError, WeightVector, CONSTRAINT_TOL};

#[derive(Debug, Error)]
pub enum AdvError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("progress must lie in [0, 1], got {0}")]
    BadProgress(f64),
    #[error("bandwidth must be positive, got {0}")]
    BadSigma(f64),
    #[error("group {0} is empty")]
    EmptyGroup(String),
    #[error("group {0} has a single point")]
    DegenerateGroup(String),
    #[error("weights left the feasible set in round {0}")]
    Infeasible(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Reweight(#[from] ReweightError),
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AdvError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    Wasserstein,
    Mmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReweightTarget {
    #[default]
    Majority,
    Minority,
    Both,
}

/// How the pool weights evolve. The simple baselines are fixed policies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightPolicy {
    /// Learned by the critic/solver loop, starting uniform at `n_u/n_p`.
    Adversarial,
    /// Every pool row carries this constant (1 = plain training,
    /// `n_u/n_p` = reweighing).
    Fixed(f64),
    /// Constant `n_u/n_p`.
    Reweighing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Classifier steps per round (`S`).
    pub steps_classifier: usize,
    pub critic_steps: usize,
    pub batch_majority: usize,
    pub batch_minority: usize,
    /// Rounds; each is `S` classifier steps plus one critic/reweight pass.
    pub epochs: usize,
    pub lr_classifier: f64,
    /// Exponent of the decay `(1 + 10p)^−e`.
    pub lr_exponent: f64,
    pub lr_critic: f64,
    pub adam_betas: [f64; 2],
    pub momentum: f64,
    pub gp_coefficient: f64,
    pub t: f64,
    pub seed: u64,
    pub distance: Distance,
    pub reweight_target: ReweightTarget,
    /// Extractor widths after the input; empty keeps the identity.
    pub extractor_widths: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    /// RBF bandwidth of the MMD arm; 0 picks the median distance.
    pub mmd_sigma: f64,
    pub mmd_features: usize,
    pub mmd_iterations: usize,
    /// Exact W1 audit every this many rounds (0 = never; the last round is
    /// always audited when nonzero).
    pub audit_every: usize,
    pub audit_points: usize,
    pub audit_reps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps_classifier: 24,
            critic_steps: 12,
            batch_majority: 1000,
            batch_minority: 500,
            epochs: 50,
            lr_classifier: 0.01,
            lr_exponent: 0.75,
            lr_critic: 1e-4,
            adam_betas: [0.0, 0.9],
            momentum: 0.9,
            gp_coefficient: 10.0,
            t: 5.0,
            seed: 0,
            distance: Distance::Wasserstein,
            reweight_target: ReweightTarget::Majority,
            extractor_widths: Vec::new(),
            classifier_hidden: vec![64, 32],
            critic_hidden: vec![512, 256, 128, 64],
            mmd_sigma: 0.0,
            mmd_features: 256,
            mmd_iterations: 30,
            audit_every: 0,
            audit_points: 512,
            audit_reps: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AdvError::Config(m.into()));
        if self.steps_classifier == 0 || self.critic_steps == 0 {
            return bad("step counts must be positive");
        }
        if self.batch_majority == 0 || self.batch_minority == 0 {
            return bad("batch sizes must be positive");
        }
        if !(self.lr_classifier >= 0.0 && self.lr_critic >= 0.0 && self.lr_exponent >= 0.0) {
            return bad("learning rates must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !self.adam_betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.gp_coefficient >= 0.0) {
            return bad("gradient-penalty coefficient must be nonnegative");
        }
        if !(self.t >= 0.0) || !self.t.is_finite() {
            return bad("T must be finite and nonnegative");
        }
        if self.extractor_widths.contains(&0) || self.classifier_hidden.contains(&0) || self.critic_hidden.contains(&0) {
            return bad("layer widths must be positive");
        }
        if self.distance == Distance::Mmd && (self.mmd_features == 0 || self.mmd_iterations == 0 || !(self.mmd_sigma >= 0.0)) {
            return bad("MMD arm needs features, iterations and a nonnegative bandwidth");
        }
        if self.audit_every > 0 && (self.audit_points < 2 || self.audit_reps == 0) {
            return bad("audit needs at least 2 points and 1 repetition");
        }
        Ok(())
    }
}

/// Decaying rate `base·(1 + 10p)^−0.75`.
pub fn lr_schedule(p: f64, base: f64) -> Result<f64> {
    lr_schedule_with(p, base, 0.75)
}

pub fn lr_schedule_with(p: f64, base: f64, exponent: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(AdvError::BadProgress(p));
    }
    Ok(base * (1.0 + 10.0 * p).powf(-exponent))
}

/// Row indices of the reweighted pools and the reference group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLayout {
    pub pools: Vec<Vec<usize>>,
    pub pool_names: Vec<String>,
    pub reference: Vec<usize>,
}

impl GroupLayout {
    /// Majority (`s = 1`) as the single pool, minority as reference.
    pub fn binary(data: &Dataset) -> Self {
        Self {
            pools: vec![data.group_indices(1)],
            pool_names: vec!["majority".into()],
            reference: data.group_indices(0),
        }
    }

    /// One pool per subgroup view; they must share a reference.
    pub fn from_views(views: &[SubgroupView]) -> Result<Self> {
        let first = views.first().ok_or_else(|| AdvError::Config("no subgroup views".into()))?;
        if views.iter().any(|v| v.reference != first.reference) {
            return Err(AdvError::Config("subgroup views disagree on the reference".into()));
        }
        Ok(Self {
            pools: views.iter().map(|v| v.members.clone()).collect(),
            pool_names: views.iter().map(|v| v.name.clone()).collect(),
            reference: first.reference.clone(),
        })
    }

    fn check(&self) -> Result<()> {
        if self.pools.is_empty() {
            return Err(AdvError::Config("no reweighted pool".into()));
        }
        for (p, name) in self.pools.iter().zip(&self.pool_names) {
            if p.is_empty() {
                return Err(AdvError::EmptyGroup(name.clone()));
            }
        }
        if self.reference.is_empty() {
            return Err(AdvError::EmptyGroup("reference".into()));
        }
        Ok(())
    }
}

/// Sequential minibatches over a shuffled order, reshuffled (and the short
/// tail dropped) once exhausted.
#[derive(Debug, Clone, PartialEq)]
struct Cursor {
    order: Vec<usize>,
    pos: usize,
}

impl Cursor {
    fn new(len: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn next(&mut self, k: usize, rng: &mut ChaCha8Rng) -> &[usize] {
        if self.pos + k > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += k;
        &self.order[self.pos - k..self.pos]
    }
}

/// One line of the round log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub pool: usize,
    pub weighted_loss: f64,
    /// Critic estimate `E_w D(p) − E_v D(u)` on the full sets after the
    /// critic steps (squared MMD in the MMD arm); absent for fixed policies.
    pub critic_objective: Option<f64>,
    /// Subsampled exact W1 between weighted pool and reference after the
    /// reweight; absent when not audited.
    pub w1_exact_subsample: Option<f64>,
    pub w_min: f64,
    pub w_max: f64,
    pub w_entropy: f64,
}

pub const ROUND_LOG_HEADER: [&str; 7] = [
    "round",
    "weighted_loss",
    "critic_objective",
    "w1_exact_subsample",
    "w_min",
    "w_max",
    "w_entropy",
];

pub fn write_round_log<W: Write>(out: W, records: &[RoundRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| AdvError::Io(std::io::Error::other(e));
    w.write_record(ROUND_LOG_HEADER).map_err(io)?;
    let f = |v: f64| format!("{v:.6}");
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), f);
    for r in records {
        w.write_record([
            r.round.to_string(),
            f(r.weighted_loss),
            opt(r.critic_objective),
            opt(r.w1_exact_subsample),
            f(r.w_min),
            f(r.w_max),
            f(r.w_entropy),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Serializable subset of [`TrainState`]: the models and weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub extractor: FeatureExtractor,
    pub classifier: MlpModel,
    pub critics: Vec<MlpModel>,
    pub weights: Vec<WeightVector>,
    pub reference_weights: WeightVector,
    pub layout: GroupLayout,
    pub round: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| AdvError::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| AdvError::Config(format!("{}: {e}", path.display())))
    }

    pub fn latents(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.extractor.extract_batch(x)?)
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<Prediction>> {
        Ok(classify_batch(&self.classifier, self.latents(x)?.view())?)
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub extractor: FeatureExtractor,
    pub classifier: MlpModel,
    /// One critic per pool.
    pub critics: Vec<MlpModel>,
    /// One weight vector per pool, each summing to the reference size.
    pub weights: Vec<WeightVector>,
    /// Reference-group weights (centre 1); learned only for the minority
    /// and both targets.
    pub reference_weights: WeightVector,
    pub round: usize,
    /// Weighted batch loss of every classifier step.
    pub loss_history: Vec<f64>,
    pub log: Vec<RoundRecord>,
    pub layout: GroupLayout,
    policy: WeightPolicy,
    sgd: Sgd,
    adams: Vec<Adam>,
    batch_rng: ChaCha8Rng,
    critic_rng: ChaCha8Rng,
    pool_cursors: Vec<Cursor>,
    reference_cursor: Cursor,
    /// Total classifier steps of the run, for the schedule's progress.
    total_steps: usize,
}

impl PartialEq for TrainState {
    fn eq(&self, other: &Self) -> bool {
        self.extractor == other.extractor
            && self.classifier == other.classifier
            && self.critics == other.critics
            && self.weights == other.weights
            && self.reference_weights == other.reference_weights
            && self.round == other.round
            && self.loss_history == other.loss_history
            && self.log == other.log
    }
}

const BATCH_STREAM: u64 = 1;
const CRITIC_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl TrainState {
    /// Fresh models and uniform weights. Model seeds derive from `cfg.seed`.
    pub fn init(data: &Dataset, layout: GroupLayout, cfg: &TrainConfig, policy: WeightPolicy) -> Result<Self> {
        cfg.validate()?;
        layout.check()?;
        let d = data.dim();
        let extractor = if cfg.extractor_widths.is_empty() {
            FeatureExtractor::Identity { dim: d }
        } else {
            let mut widths = vec![d];
            widths.extend(&cfg.extractor_widths);
            FeatureExtractor::Mlp(MlpModel::new(MlpSpec::new(
                widths,
                OutputActivation::Identity,
                cfg.seed.wrapping_mul(31).wrapping_add(7),
            ))?)
        };
        let latent = extractor.latent_dim();
        let classifier = MlpModel::new(MlpSpec::classifier(latent, &cfg.classifier_hidden, cfg.seed))?;
        let critics = (0..layout.pools.len())
            .map(|k| {
                MlpModel::new(MlpSpec::critic(
                    latent,
                    &cfg.critic_hidden,
                    cfg.seed.wrapping_add(1000 + k as u64),
                ))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n_u = layout.reference.len();
        let weights = layout
            .pools
            .iter()
            .map(|p| initial_weights(p.len(), n_u, cfg.t, policy))
            .collect::<Result<Vec<_>>>()?;
        let reference_weights = uniform_weights(n_u, n_u, cfg.t)?;
        let mut batch_rng = stream(cfg.seed, BATCH_STREAM);
        let pool_cursors = layout.pools.iter().map(|p| Cursor::new(p.len(), &mut batch_rng)).collect();
        let reference_cursor = Cursor::new(n_u, &mut batch_rng);
        let adams = (0..layout.pools.len())
            .map(|_| Adam::new(cfg.lr_critic, cfg.adam_betas[0], cfg.adam_betas[1]))
            .collect();
        Ok(Self {
            extractor,
            classifier,
            critics,
            weights,
            reference_weights,
            round: 0,
            loss_history: Vec::new(),
            log: Vec::new(),
            layout,
            policy,
            sgd: Sgd::new(cfg.momentum),
            adams,
            batch_rng,
            critic_rng: stream(cfg.seed, CRITIC_STREAM),
            pool_cursors,
            reference_cursor,
            total_steps: cfg.epochs * cfg.steps_classifier,
        })
    }

    /// The critic of the first (for binary data, only) pool.
    pub fn critic(&self) -> &MlpModel {
        &self.critics[0]
    }

    pub fn policy(&self) -> WeightPolicy {
        self.policy
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            extractor: self.extractor.clone(),
            classifier: self.classifier.clone(),
            critics: self.critics.clone(),
            weights: self.weights.clone(),
            reference_weights: self.reference_weights.clone(),
            layout: self.layout.clone(),
            round: self.round,
        }
    }

    pub fn latents(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.extractor.extract_batch(x)?)
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<Prediction>> {
        Ok(classify_batch(&self.classifier, self.latents(x)?.view())?)
    }

    /// Latents of pool `k` and of the reference group.
    pub fn group_latents(&self, data: &Dataset, k: usize) -> Result<(Array2<f64>, Array2<f64>)> {
        let zp = self.latents(data.features.select(Axis(0), &self.layout.pools[k]).view())?;
        let zu = self.latents(data.features.select(Axis(0), &self.layout.reference).view())?;
        Ok((zp, zu))
    }

    /// Per-pool batch sizes: `batch_majority` split in proportion to pool
    /// size, each capped at the pool.
    fn batch_sizes(&self, cfg: &TrainConfig) -> (Vec<usize>, usize) {
        let total: usize = self.layout.pools.iter().map(Vec::len).sum();
        let sizes = self
            .layout
            .pools
            .iter()
            .map(|p| {
                let share = (cfg.batch_majority as f64 * p.len() as f64 / total as f64).round() as usize;
                share.clamp(1, p.len())
            })
            .collect();
        (sizes, cfg.batch_minority.min(self.layout.reference.len()))
    }
}

fn initial_weights(n_p: usize, n_u: usize, t: f64, policy: WeightPolicy) -> Result<WeightVector> {
    let mut w = uniform_weights(n_p, n_u, t)?;
    if let WeightPolicy::Fixed(c) = policy {
        if !(c >= 0.0) {
            return Err(AdvError::Config(format!("fixed weight must be nonnegative, got {c}")));
        }
        w.values.fill(c);
    }
    Ok(w)
}

/// `S` SGD steps on the weighted cross-entropy, normalised by the batch's
/// total weight. Pool rows carry their current weights, reference rows
/// theirs (1 unless the minority is reweighted).
pub fn classifier_round(state: &mut TrainState, data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    let (pool_sizes, ref_size) = state.batch_sizes(cfg);
    let extractor_on = matches!(state.extractor, FeatureExtractor::Mlp(_));
    for _ in 0..cfg.steps_classifier {
        let mut rows = Vec::with_capacity(cfg.batch_majority + ref_size);
        let mut weights = Vec::with_capacity(rows.capacity());
        for (k, &size) in pool_sizes.iter().enumerate() {
            for &i in state.pool_cursors[k].next(size, &mut state.batch_rng) {
                rows.push(state.layout.pools[k][i]);
                weights.push(state.weights[k].values[i]);
            }
        }
        for &j in state.reference_cursor.next(ref_size, &mut state.batch_rng) {
            rows.push(state.layout.reference[j]);
            weights.push(state.reference_weights.values[j]);
        }
        let labels: Vec<u8> = rows.iter().map(|&i| data.labels[i]).collect();
        let x = data.features.select(Axis(0), &rows);
        let total: f64 = weights.iter().sum();

        let mut tape = Tape::new();
        let mut bind = Bindings::new();
        let xin = tape.input(x.dim());
        bind.bind(xin, x);
        let (z, extractor_params) = match &state.extractor {
            FeatureExtractor::Identity { .. } => (xin, Vec::new()),
            FeatureExtractor::Mlp(m) => {
                let g = m.build(&mut tape, xin)?;
                m.bind(&g, &mut bind);
                (g.logits, g.params)
            }
        };
        let head = state.classifier.build(&mut tape, z)?;
        state.classifier.bind(&head, &mut bind);
        let loss = weighted_bce_node(&mut tape, head.logits, &labels, &weights, total.max(f64::MIN_POSITIVE))?;
        tape.forward(&bind)?;
        state.loss_history.push(tape.scalar_value(loss)?);

        let wrt: Vec<_> = extractor_params.iter().chain(&head.params).copied().collect();
        let mut grads = tape.backward_wrt(loss, &wrt)?;
        let grads: Vec<Array2<f64>> = wrt.iter().map(|&p| grads.take(p).expect("requested")).collect();

        let step = state.loss_history.len() - 1;
        let p = if state.total_steps == 0 {
            0.0
        } else {
            (step as f64 / state.total_steps as f64).min(1.0)
        };
        let lr = lr_schedule_with(p, cfg.lr_classifier, cfg.lr_exponent)?;
        let mut params: Vec<&mut [f64]> = Vec::with_capacity(wrt.len());
        let mut lrs = Vec::with_capacity(wrt.len());
        if extractor_on {
            if let FeatureExtractor::Mlp(m) = &mut state.extractor {
                for t in m.tensors_mut() {
                    params.push(t);
                    lrs.push(lr / 10.0);
                }
            }
        }
        for t in state.classifier.tensors_mut() {
            params.push(t);
            lrs.push(lr);
        }
        state.sgd.step(params, &grads, &lrs);
    }
    Ok(())
}

/// Full-set critic estimate `Σ ŵᵢ D(pᵢ) − Σ v̂ⱼ D(uⱼ)` with normalised weights.
pub fn critic_estimate(critic: &MlpModel, zp: ArrayView2<f64>, w: &[f64], zu: ArrayView2<f64>, v: &[f64]) -> Result<f64> {
    let mean = |z: ArrayView2<f64>, w: &[f64]| -> Result<f64> {
        let s = critic.logits(z)?;
        let tot: f64 = w.iter().sum();
        Ok(s.column(0).iter().zip(w).map(|(d, w)| d * w).sum::<f64>() / tot)
    };
    Ok(mean(zp, w)? - mean(zu, v)?)
}

/// Adam ascent on the critic objective of pool `k` minus `λ·GP`, over
/// minibatches of `zp` (pool latents) and `zu` (reference latents).
///
/// Batch weights are rescaled so the pool side and the reference side each
/// sum to the reference batch size. Each interpolate pairs a reference
/// point with a pool point drawn in proportion to the current weights.
/// Returns the mean batch objective over the steps.
pub fn critic_round(
    state: &mut TrainState,
    k: usize,
    zp: ArrayView2<f64>,
    zu: ArrayView2<f64>,
    cfg: &TrainConfig,
) -> Result<f64> {
    if zp.nrows() < 2 {
        return Err(AdvError::DegenerateGroup(state.layout.pool_names[k].clone()));
    }
    if zu.nrows() < 2 {
        return Err(AdvError::DegenerateGroup("reference".into()));
    }
    let bp = cfg.batch_majority.min(zp.nrows());
    let bu = cfg.batch_minority.min(zu.nrows());
    let w = &state.weights[k].values;
    let v = &state.reference_weights.values;
    let pick = WeightedIndex::new(w.iter().copied())
        .map_err(|e| AdvError::Config(format!("weights cannot be sampled: {e}")))?;
    let rng = &mut state.critic_rng;
    let mut objective = 0.0;
    for _ in 0..cfg.critic_steps {
        let ip = rand::seq::index::sample(rng, zp.nrows(), bp).into_vec();
        let iu = rand::seq::index::sample(rng, zu.nrows(), bu).into_vec();
        let a = normalised(ip.iter().map(|&i| w[i]));
        let b = normalised(iu.iter().map(|&j| v[j]));
        let mut zhat = zu.select(Axis(0), &iu);
        for mut row in zhat.rows_mut() {
            let partner = zp.row(pick.sample(rng));
            let eps: f64 = rng.random();
            row.zip_mut_with(&partner, |u, &p| *u = eps * *u + (1.0 - eps) * p);
        }
        let (graph, _) = critic::build(
            &state.critics[k],
            zp.select(Axis(0), &ip).view(),
            &a,
            zu.select(Axis(0), &iu).view(),
            &b,
            zhat.view(),
            cfg.gp_coefficient,
        )?;
        objective += graph.values()?.objective;
        let grads = graph.parameter_gradients(graph.loss)?;
        state.adams[k].step(state.critics[k].tensors_mut(), &grads);
    }
    Ok(objective / cfg.critic_steps.max(1) as f64)
}

fn normalised(it: impl Iterator<Item = f64>) -> Vec<f64> {
    let v: Vec<f64> = it.collect();
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter().map(|x| x / s).collect()
    } else {
        vec![1.0 / v.len() as f64; v.len()]
    }
}

/// Which side a reweight round updates.
fn side(cfg: &TrainConfig, round: usize) -> ReweightTarget {
    match cfg.reweight_target {
        ReweightTarget::Both if round.is_multiple_of(2) => ReweightTarget::Majority,
        ReweightTarget::Both => ReweightTarget::Minority,
        t => t,
    }
}

/// Re-solves the weights of pool `k` (or of the reference group) against
/// the current critic's scores on the full sets.
pub fn reweight_round(
    state: &mut TrainState,
    k: usize,
    zp: ArrayView2<f64>,
    zu: ArrayView2<f64>,
    cfg: &TrainConfig,
) -> Result<()> {
    let dp = state.critics[k].logits(zp)?;
    let du = state.critics[k].logits(zu)?;
    reweight_from_scores(state, k, dp.column(0).to_vec(), du.column(0).to_vec(), cfg)
}

fn reweight_from_scores(state: &mut TrainState, k: usize, dp: Vec<f64>, du: Vec<f64>, cfg: &TrainConfig) -> Result<()> {
    let n_u = state.layout.reference.len();
    match side(cfg, state.round) {
        ReweightTarget::Minority => {
            let neg = CriticScores::new(du.iter().map(|x| -x).collect())?;
            state.reference_weights = solve_weights(&neg, n_u, cfg.t)?;
        }
        _ => state.weights[k] = solve_weights(&CriticScores::new(dp)?, n_u, cfg.t)?,
    }
    Ok(())
}

fn weighted_mean(d: &[f64], w: &[f64]) -> f64 {
    d.iter().zip(w).map(|(d, w)| d * w).sum::<f64>() / w.iter().sum::<f64>()
}

/// Weights minimising the RFF estimate of squared MMD, by Frank–Wolfe from
/// the current weights. Returns the final estimate.
fn mmd_round(
    state: &mut TrainState,
    k: usize,
    zp: ArrayView2<f64>,
    zu: ArrayView2<f64>,
    cfg: &TrainConfig,
    features: &FourierFeatures,
) -> Result<f64> {
    let fp = features.map(zp);
    let fu = features.map(zu);
    let mean_of = |f: &Array2<f64>, w: &WeightVector| f.t().dot(&Array1::from(w.values.clone())) / w.n_u as f64;
    match side(cfg, state.round) {
        ReweightTarget::Minority => {
            let target = mean_of(&fp, &state.weights[k]);
            let (v, obj) = frank_wolfe(&fu, &target, &state.reference_weights, cfg.mmd_iterations)?;
            state.reference_weights = v;
            Ok(obj)
        }
        _ => {
            let target = mean_of(&fu, &state.reference_weights);
            let (w, obj) = frank_wolfe(&fp, &target, &state.weights[k], cfg.mmd_iterations)?;
            state.weights[k] = w;
            Ok(obj)
        }
    }
}

fn entropy(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    -w.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| {
            let p = x / s;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Exact W1 between the weighted pool latents and the weighted reference.
pub fn audit_w1(
    zp: ArrayView2<f64>,
    w: &[f64],
    zu: ArrayView2<f64>,
    v: &[f64],
    points: usize,
    reps: usize,
    seed: u64,
) -> Result<f64> {
    let a = WeightedPointCloud::new(zp.to_owned(), w.to_vec())?;
    let b = WeightedPointCloud::new(zu.to_owned(), v.to_vec())?;
    Ok(subsampled_wasserstein(&a, &b, 1, points, reps, seed)?.mean)
}

/// Runs `cfg.epochs` rounds. Each round: classifier steps; then, for the
/// adversarial policy, critic steps and a reweight of pool
/// `round mod pools` (or the MMD update in the MMD arm).
pub fn train(data: &Dataset, layout: GroupLayout, cfg: &TrainConfig, policy: WeightPolicy) -> Result<TrainState> {
    let mut state = TrainState::init(data, layout, cfg, policy)?;
    let mut features: Option<FourierFeatures> = None;
    for r in 0..cfg.epochs {
        let before = state.loss_history.len();
        classifier_round(&mut state, data, cfg)?;
        let losses = &state.loss_history[before..];
        let weighted_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let k = r % state.layout.pools.len();
        let mut critic_objective = None;
        let audit = cfg.audit_every > 0 && ((r + 1) % cfg.audit_every == 0 || r + 1 == cfg.epochs);
        let mut latents = None;
        if policy == WeightPolicy::Adversarial {
            let (zp, zu) = state.group_latents(data, k)?;
            match cfg.distance {
                Distance::Wasserstein => {
                    critic_round(&mut state, k, zp.view(), zu.view(), cfg)?;
                    // scores are computed once and serve the solve and the estimate
                    let dp = state.critics[k].logits(zp.view())?.column(0).to_vec();
                    let du = state.critics[k].logits(zu.view())?.column(0).to_vec();
                    reweight_from_scores(&mut state, k, dp.clone(), du.clone(), cfg)?;
                    critic_objective = Some(
                        weighted_mean(&dp, &state.weights[k].values)
                            - weighted_mean(&du, &state.reference_weights.values),
                    );
                }
                Distance::Mmd => {
                    let f = features.get_or_insert_with(|| {
                        let sigma = if cfg.mmd_sigma > 0.0 {
                            cfg.mmd_sigma
                        } else {
                            median_bandwidth(zp.view(), zu.view(), 500, &mut state.critic_rng)
                        };
                        FourierFeatures::new(zp.ncols(), cfg.mmd_features, sigma, &mut state.critic_rng)
                    });
                    critic_objective = Some(mmd_round(&mut state, k, zp.view(), zu.view(), cfg, f)?);
                }
            }
            let ok = state.weights[k].is_feasible(1e3 * CONSTRAINT_TOL * state.layout.reference.len() as f64)
                && state.reference_weights.is_feasible(1e3 * CONSTRAINT_TOL * state.layout.reference.len() as f64);
            if !ok {
                return Err(AdvError::Infeasible(r));
            }
            latents = Some((zp, zu));
        }
        let mut w1 = None;
        if audit {
            let (zp, zu) = match latents {
                Some(z) => z,
                None => state.group_latents(data, k)?,
            };
            w1 = Some(audit_w1(
                zp.view(),
                &state.weights[k].values,
                zu.view(),
                &state.reference_weights.values,
                cfg.audit_points,
                cfg.audit_reps,
                cfg.seed ^ (r as u64).wrapping_mul(0x9E37_79B9),
            )?);
        }
        let w = &state.weights[k].values;
        state.log.push(RoundRecord {
            round: r,
            pool: k,
            weighted_loss,
            critic_objective,
            w1_exact_subsample: w1,
            w_min: w.iter().copied().fold(f64::INFINITY, f64::min),
            w_max: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            w_entropy: entropy(w),
        });
        log::debug!(
            "round {r}: loss {weighted_loss:.4} critic {critic_objective:?} w1 {w1:?} w_max {:.3}",
            state.log.last().unwrap().w_max
        );
        state.round += 1;
    }
    Ok(state)
}
