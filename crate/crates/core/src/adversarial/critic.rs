//! Critic objective with gradient penalty, recorded on a tape.

use ndarray::{concatenate, Array2, ArrayView2, Axis};

use super::Result;
use crate::diffcore::{Bindings, NodeId, Tape};
use crate::models::MlpModel;

/// Added under the square root of the penalty's gradient norm so its
/// derivative stays finite at a zero gradient.
const NORM_EPS: f64 = 1e-12;

/// Critic loss `λ·GP − J` for one batch, where
/// `J = Σ aᵢ D(pᵢ) − Σ bⱼ D(uⱼ)` and
/// `GP = mean_k (‖∇D(ẑ_k)‖ − 1)²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticLoss {
    pub objective: f64,
    pub penalty: f64,
    pub loss: f64,
}

pub(crate) struct CriticGraph {
    pub tape: Tape,
    pub objective: NodeId,
    pub penalty: NodeId,
    pub loss: NodeId,
    /// Parameter nodes of the two network copies, both in
    /// [`MlpModel::tensors_mut`] order.
    params: [Vec<NodeId>; 2],
}

/// Records the loss. `a` weights the rows of `zp`, `b` those of `zu`;
/// `zhat` are the penalty's interpolates.
pub(crate) fn build(
    critic: &MlpModel,
    zp: ArrayView2<f64>,
    a: &[f64],
    zu: ArrayView2<f64>,
    b: &[f64],
    zhat: ArrayView2<f64>,
    lambda: f64,
) -> Result<(CriticGraph, Bindings)> {
    let mut tape = Tape::new();
    let mut bind = Bindings::new();
    let n = zp.nrows() + zu.nrows();
    let x = tape.input((n, zp.ncols()));
    bind.bind(x, concatenate(Axis(0), &[zp, zu]).expect("same latent width"));
    let g1 = critic.build(&mut tape, x)?;
    critic.bind(&g1, &mut bind);
    let coef = Array2::from_shape_fn((n, 1), |(i, _)| if i < a.len() { a[i] } else { -b[i - a.len()] });
    let coef = tape.constant(coef);
    let signed = tape.mul(coef, g1.logits)?;
    let objective = tape.sum(signed)?;

    let m = zhat.nrows();
    let zh = tape.input((m, zhat.ncols()));
    bind.bind(zh, zhat.to_owned());
    let g2 = critic.build(&mut tape, zh)?;
    critic.bind(&g2, &mut bind);
    let total = tape.sum(g2.logits)?;
    let grad = tape.gradient_as_node(total, zh)?;
    let sq = tape.square(grad)?;
    let row = tape.sum_to(sq, (m, 1))?;
    let eps = tape.constant(Array2::from_elem((m, 1), NORM_EPS));
    let row = tape.add(row, eps)?;
    let norm = tape.sqrt(row)?;
    let one = tape.constant(Array2::ones((m, 1)));
    let gap = tape.sub(norm, one)?;
    let gap2 = tape.square(gap)?;
    let penalty = tape.mean(gap2)?;

    let scaled = tape.scale(penalty, lambda)?;
    let loss = tape.sub(scaled, objective)?;
    tape.forward(&bind)?;
    Ok((
        CriticGraph {
            tape,
            objective,
            penalty,
            loss,
            params: [g1.params, g2.params],
        },
        bind,
    ))
}

impl CriticGraph {
    pub fn values(&self) -> Result<CriticLoss> {
        Ok(CriticLoss {
            objective: self.tape.scalar_value(self.objective)?,
            penalty: self.tape.scalar_value(self.penalty)?,
            loss: self.tape.scalar_value(self.loss)?,
        })
    }

    /// Gradient of `root` with respect to the critic parameters, summed over
    /// both network copies.
    pub fn parameter_gradients(&self, root: NodeId) -> Result<Vec<Array2<f64>>> {
        let wrt: Vec<NodeId> = self.params.iter().flatten().copied().collect();
        let grads = self.tape.backward_wrt(root, &wrt)?;
        Ok(self.params[0]
            .iter()
            .zip(&self.params[1])
            .map(|(&p, &q)| grads.get(p).expect("requested") + grads.get(q).expect("requested"))
            .collect())
    }
}

/// Value of the loss terms on one batch (no update).
pub fn critic_loss(
    critic: &MlpModel,
    zp: ArrayView2<f64>,
    a: &[f64],
    zu: ArrayView2<f64>,
    b: &[f64],
    zhat: ArrayView2<f64>,
    lambda: f64,
) -> Result<CriticLoss> {
    build(critic, zp, a, zu, b, zhat, lambda)?.0.values()
}

/// `GP` and its gradient with respect to the critic parameters.
pub fn gradient_penalty(critic: &MlpModel, zhat: ArrayView2<f64>) -> Result<(f64, Vec<Array2<f64>>)> {
    let empty = Array2::zeros((0, zhat.ncols()));
    let (g, _) = build(critic, empty.view(), &[], empty.view(), &[], zhat, 1.0)?;
    Ok((g.tape.scalar_value(g.penalty)?, g.parameter_gradients(g.penalty)?))
}
