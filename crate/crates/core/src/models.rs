//! Feed-forward networks used as feature extractor, classifier and critic,
//! plus the weighted cross-entropy risk.
//!
//! Weights are stored `out × in`, so a layer computes `x·Wᵀ + b` on a batch
//! `x` of row vectors. Hidden layers use relu; the output layer is either
//! the identity (extractor, critic) or a sigmoid (classifier).

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{sigmoid, Bindings, GraphError, NodeId, Tape};

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("length mismatch: {0} predictions, {1} labels, {2} weights")]
    LengthMismatch(usize, usize, usize),
    #[error("negative weight {value} at index {index}")]
    NegativeWeight { index: usize, value: f64 },
    #[error("critic networks must have identity output and a single output unit")]
    NotACritic,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

/// Architecture of a relu MLP. `layer_widths` includes the input width, so
/// `[4, 8, 1]` is two affine layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub output_activation: OutputActivation,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, output_activation: OutputActivation, seed: u64) -> Self {
        Self {
            layer_widths,
            output_activation,
            seed,
        }
    }

    /// `[input, hidden.., 1]` with sigmoid output.
    pub fn classifier(input: usize, hidden: &[usize], seed: u64) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Self::new(widths, OutputActivation::Sigmoid, seed)
    }

    /// `[input, hidden.., 1]` with identity output.
    pub fn critic(input: usize, hidden: &[usize], seed: u64) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Self::new(widths, OutputActivation::Identity, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(ModelError::InvalidSpec(
                "need an input width and at least one layer".into(),
            ));
        }
        if let Some(i) = self.layer_widths.iter().position(|&w| w == 0) {
            return Err(ModelError::InvalidSpec(format!("width {i} is zero")));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub spec: MlpSpec,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Parameter and output nodes of an [`MlpModel`] recorded on a tape.
#[derive(Debug, Clone)]
pub struct MlpGraph {
    /// Output before the output activation.
    pub logits: NodeId,
    /// `[W0, b0, W1, b1, ..]`, matching [`MlpModel::tensors_mut`].
    pub params: Vec<NodeId>,
}

impl MlpModel {
    /// Uniform `±1/√fan_in` weights and zero biases, reproducible from the
    /// spec seed.
    pub fn new(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in spec.layer_widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| {
                rng.random_range(-bound..bound)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            spec,
            weights,
            biases,
        })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        let mut m = Self::new(spec)?;
        m.weights.iter_mut().for_each(|w| w.fill(0.0));
        Ok(m)
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn check_input(&self, dim: usize) -> Result<()> {
        if dim != self.input_dim() {
            return Err(ModelError::DimensionMismatch {
                expected: self.input_dim(),
                got: dim,
            });
        }
        Ok(())
    }

    /// Batched pre-activation output, one row per input row.
    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let last = self.num_layers() - 1;
        let mut h = x.to_owned();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.dot(&w.t()) + b.view().insert_axis(Axis(0));
            if i < last {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Batched output after the output activation.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = self.logits(x)?;
        if self.spec.output_activation == OutputActivation::Sigmoid {
            out.mapv_inplace(sigmoid);
        }
        Ok(out)
    }

    /// Records the network on `tape` with `x` (`n × input_dim`) as input.
    pub fn build(&self, tape: &mut Tape, x: NodeId) -> Result<MlpGraph> {
        let (n, d) = tape.shape(x)?;
        self.check_input(d)?;
        let last = self.num_layers() - 1;
        let mut params = Vec::with_capacity(2 * self.num_layers());
        let mut h = x;
        for (i, w) in self.weights.iter().enumerate() {
            let wn = tape.parameter(w.dim());
            let bn = tape.parameter((1, w.nrows()));
            params.push(wn);
            params.push(bn);
            let wt = tape.transpose(wn)?;
            let lin = tape.matmul(h, wt)?;
            let bias = tape.broadcast(bn, (n, w.nrows()))?;
            h = tape.add(lin, bias)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(MlpGraph { logits: h, params })
    }

    /// Binds this model's parameter values to the nodes created by [`MlpModel::build`].
    pub fn bind(&self, graph: &MlpGraph, bindings: &mut Bindings) {
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            bindings.bind(graph.params[2 * i], w.clone());
            bindings.bind(graph.params[2 * i + 1], b.view().insert_axis(Axis(0)).to_owned());
        }
    }

    /// Mutable views of every parameter tensor, in [`MlpGraph::params`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.num_layers());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("weights are contiguous"));
            out.push(b.as_slice_mut().expect("biases are contiguous"));
        }
        out
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        m.spec.validate()?;
        for (i, pair) in m.spec.layer_widths.windows(2).enumerate() {
            let ok = m.weights.get(i).map(|w| w.dim()) == Some((pair[1], pair[0]))
                && m.biases.get(i).map(|b| b.len()) == Some(pair[1]);
            if !ok {
                return Err(ModelError::InvalidSpec(format!(
                    "layer {i} parameters do not match the spec"
                )));
            }
        }
        Ok(m)
    }
}

/// Maps raw features to the latent space. Tabular runs use the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureExtractor {
    Identity { dim: usize },
    Mlp(MlpModel),
}

impl FeatureExtractor {
    pub fn input_dim(&self) -> usize {
        match self {
            FeatureExtractor::Identity { dim } => *dim,
            FeatureExtractor::Mlp(m) => m.input_dim(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            FeatureExtractor::Identity { dim } => *dim,
            FeatureExtractor::Mlp(m) => m.output_dim(),
        }
    }

    pub fn extract(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.extract_batch(view)?.into_raw_vec_and_offset().0)
    }

    pub fn extract_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            FeatureExtractor::Identity { dim } => {
                if x.ncols() != *dim {
                    return Err(ModelError::DimensionMismatch {
                        expected: *dim,
                        got: x.ncols(),
                    });
                }
                Ok(x.to_owned())
            }
            FeatureExtractor::Mlp(m) => m.forward(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub probability: f64,
    pub label: u8,
}

impl Prediction {
    pub fn from_probability(probability: f64) -> Self {
        Self {
            probability,
            label: u8::from(probability >= 0.5),
        }
    }
}

pub fn classify(classifier: &MlpModel, z: &[f64]) -> Result<Prediction> {
    let view = ArrayView2::from_shape((1, z.len()), z).expect("row vector");
    Ok(classify_batch(classifier, view)?[0])
}

pub fn classify_batch(classifier: &MlpModel, z: ArrayView2<f64>) -> Result<Vec<Prediction>> {
    let logits = classifier.logits(z)?;
    Ok(logits
        .column(0)
        .iter()
        .map(|&l| Prediction::from_probability(sigmoid(l)))
        .collect())
}

pub fn critic_score(critic: &MlpModel, z: &[f64]) -> Result<f64> {
    let view = ArrayView2::from_shape((1, z.len()), z).expect("row vector");
    Ok(critic_scores(critic, view)?[0])
}

pub fn critic_scores(critic: &MlpModel, z: ArrayView2<f64>) -> Result<Vec<f64>> {
    if critic.spec.output_activation != OutputActivation::Identity || critic.output_dim() != 1 {
        return Err(ModelError::NotACritic);
    }
    Ok(critic.logits(z)?.column(0).to_vec())
}

/// `Σ wᵢ·[−yᵢ log pᵢ − (1−yᵢ) log(1−pᵢ)]` with `p` clamped to
/// `[1e-12, 1 − 1e-12]`.
pub fn weighted_cross_entropy(probabilities: &[f64], labels: &[u8], weights: &[f64]) -> Result<f64> {
    if probabilities.len() != labels.len() || labels.len() != weights.len() {
        return Err(ModelError::LengthMismatch(
            probabilities.len(),
            labels.len(),
            weights.len(),
        ));
    }
    if let Some((index, &value)) = weights.iter().enumerate().find(|(_, &w)| w < 0.0) {
        return Err(ModelError::NegativeWeight { index, value });
    }
    Ok(probabilities
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((&p, &y), &w)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let nll = if y == 1 { -p.ln() } else { -(1.0 - p).ln() };
            w * nll
        })
        .sum())
}

/// Records `Σ wᵢ·CE(yᵢ, σ(logitᵢ)) / normalizer` on the tape, with the
/// log-probabilities taken as `log σ(z)` and `log σ(−z)`.
pub fn weighted_bce_node(
    tape: &mut Tape,
    logits: NodeId,
    labels: &[u8],
    weights: &[f64],
    normalizer: f64,
) -> Result<NodeId> {
    let n = labels.len();
    if tape.shape(logits)? != (n, 1) || weights.len() != n {
        return Err(ModelError::LengthMismatch(
            tape.shape(logits)?.0,
            n,
            weights.len(),
        ));
    }
    let pos = Array2::from_shape_fn((n, 1), |(i, _)| weights[i] * f64::from(labels[i]));
    let neg = Array2::from_shape_fn((n, 1), |(i, _)| weights[i] * f64::from(1 - labels[i]));
    let pos = tape.constant(pos);
    let neg = tape.constant(neg);
    let p = tape.sigmoid(logits)?;
    let log_p = tape.log(p)?;
    let flipped = tape.scale(logits, -1.0)?;
    let q = tape.sigmoid(flipped)?;
    let log_q = tape.log(q)?;
    let a = tape.mul(pos, log_p)?;
    let b = tape.mul(neg, log_q)?;
    let ab = tape.add(a, b)?;
    let total = tape.sum(ab)?;
    Ok(tape.scale(total, -1.0 / normalizer)?)
}
