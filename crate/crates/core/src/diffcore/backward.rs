use std::collections::HashMap;

use ndarray::Array2;

use super::{broadcast, sum_to, GraphError, NodeId, Op, Result, Tape};

/// Gradients of a scalar root with respect to leaf nodes.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: HashMap<NodeId, Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Array2<f64>> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, contribution: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &contribution,
        None => *slot = Some(contribution),
    }
}

impl Tape {
    fn check_scalar_root(&self, root: NodeId) -> Result<()> {
        if self.node(root)?.shape != (1, 1) {
            return Err(GraphError::NotScalar(root));
        }
        Ok(())
    }

    /// Marks every node at or below `upto` that depends on one of `leaves`.
    fn dependency_mask(&self, upto: NodeId, leaves: &[NodeId]) -> Vec<bool> {
        let mut mask = vec![false; upto.0 + 1];
        for leaf in leaves {
            if leaf.0 <= upto.0 {
                mask[leaf.0] = true;
            }
        }
        for i in 0..=upto.0 {
            if !mask[i] {
                mask[i] = self.nodes[i].op.parents().iter().any(|p| mask[p.0]);
            }
        }
        mask
    }

    /// Numeric reverse sweep from a scalar `root`, returning the gradient
    /// for every input and parameter node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let leaves: Vec<NodeId> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Input | Op::Parameter))
            .map(|(i, _)| NodeId(i))
            .collect();
        self.backward_wrt(root, &leaves)
    }

    /// Like [`Tape::backward`] but only propagates along paths that reach
    /// `wrt`. Leaves unreachable from `root` get a zero gradient.
    pub fn backward_wrt(&self, root: NodeId, wrt: &[NodeId]) -> Result<Gradients> {
        self.check_scalar_root(root)?;
        for &w in wrt {
            self.node(w)?;
        }
        self.value(root)?;
        let mask = self.dependency_mask(root, wrt);
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Array2::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !mask[i] {
                continue;
            }
            let node = &self.nodes[i];
            match node.op {
                Op::Input | Op::Parameter | Op::Constant(_) => {
                    adj[i] = Some(g);
                    continue;
                }
                _ => {}
            }
            let y = self.value(NodeId(i))?;
            let mut push = |p: NodeId, contribution: Array2<f64>| {
                if mask[p.0] {
                    accumulate(&mut adj[p.0], contribution);
                }
            };
            match node.op {
                Op::Input | Op::Parameter | Op::Constant(_) => unreachable!(),
                Op::Add(a, b) => {
                    push(b, g.clone());
                    push(a, g);
                }
                Op::Sub(a, b) => {
                    push(b, -&g);
                    push(a, g);
                }
                Op::Mul(a, b) => {
                    if mask[a.0] {
                        push(a, &g * self.value(b)?);
                    }
                    if mask[b.0] {
                        push(b, &g * self.value(a)?);
                    }
                }
                Op::Div(a, b) => {
                    let vb = self.value(b)?;
                    if mask[b.0] {
                        push(b, -(&g * y) / vb);
                    }
                    if mask[a.0] {
                        push(a, &g / vb);
                    }
                }
                Op::Scale(a, k) => push(a, g * k),
                Op::MatMul(a, b) => {
                    if mask[a.0] {
                        push(a, g.dot(&self.value(b)?.t()));
                    }
                    if mask[b.0] {
                        push(b, self.value(a)?.t().dot(&g));
                    }
                }
                Op::Transpose(a) => push(a, g.reversed_axes()),
                Op::Relu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(a)?, |gi, &x| {
                        if x <= 0.0 {
                            *gi = 0.0
                        }
                    });
                    push(a, ga);
                }
                Op::Step(_) => {}
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(y, |gi, &s| *gi *= s * (1.0 - s));
                    push(a, ga);
                }
                Op::Log(a) => push(a, g / self.value(a)?),
                Op::Square(a) => push(a, g * self.value(a)? * 2.0),
                Op::Sqrt(a) => push(a, g / (y * 2.0)),
                Op::SumTo(a) => {
                    let s = self.nodes[a.0].shape;
                    push(a, broadcast(&g, s));
                }
                Op::Broadcast(a) => {
                    let s = self.nodes[a.0].shape;
                    push(a, sum_to(&g, s));
                }
            }
        }

        let mut grads = HashMap::new();
        for &w in wrt {
            let g = if w.0 <= root.0 { adj[w.0].take() } else { None };
            let g = g.unwrap_or_else(|| Array2::zeros(self.nodes[w.0].shape));
            grads.insert(w, g);
        }
        Ok(Gradients { grads })
    }

    /// Appends nodes computing `∂root/∂wrt` and returns the resulting node.
    ///
    /// The returned node is an ordinary member of the tape: after the next
    /// [`Tape::forward`] it holds the gradient value, and it can serve as
    /// (part of) a new root for a further backward pass.
    pub fn gradient_as_node(&mut self, root: NodeId, wrt: NodeId) -> Result<NodeId> {
        self.check_scalar_root(root)?;
        let wrt_shape = self.node(wrt)?.shape;
        if wrt.0 > root.0 {
            return Ok(self.constant(Array2::zeros(wrt_shape)));
        }
        let mask = self.dependency_mask(root, &[wrt]);
        let mut adj: Vec<Option<NodeId>> = vec![None; root.0 + 1];
        adj[root.0] = Some(self.scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i] else { continue };
            if !mask[i] {
                continue;
            }
            let n = NodeId(i);
            let op = self.nodes[i].op.clone();
            let mut contributions: Vec<(NodeId, NodeId)> = Vec::with_capacity(2);
            match op {
                Op::Input | Op::Parameter | Op::Constant(_) => continue,
                Op::Add(a, b) => {
                    contributions.push((a, g));
                    contributions.push((b, g));
                }
                Op::Sub(a, b) => {
                    contributions.push((a, g));
                    if mask[b.0] {
                        let nb = self.scale(g, -1.0)?;
                        contributions.push((b, nb));
                    }
                }
                Op::Mul(a, b) => {
                    if mask[a.0] {
                        let ga = self.mul(g, b)?;
                        contributions.push((a, ga));
                    }
                    if mask[b.0] {
                        let gb = self.mul(g, a)?;
                        contributions.push((b, gb));
                    }
                }
                Op::Div(a, b) => {
                    if mask[a.0] {
                        let ga = self.div(g, b)?;
                        contributions.push((a, ga));
                    }
                    if mask[b.0] {
                        let gn = self.mul(g, n)?;
                        let q = self.div(gn, b)?;
                        let gb = self.scale(q, -1.0)?;
                        contributions.push((b, gb));
                    }
                }
                Op::Scale(a, k) => {
                    let ga = self.scale(g, k)?;
                    contributions.push((a, ga));
                }
                Op::MatMul(a, b) => {
                    if mask[a.0] {
                        let bt = self.transpose(b)?;
                        let ga = self.matmul(g, bt)?;
                        contributions.push((a, ga));
                    }
                    if mask[b.0] {
                        let at = self.transpose(a)?;
                        let gb = self.matmul(at, g)?;
                        contributions.push((b, gb));
                    }
                }
                Op::Transpose(a) => {
                    let ga = self.transpose(g)?;
                    contributions.push((a, ga));
                }
                Op::Relu(a) => {
                    let st = self.step(a)?;
                    let ga = self.mul(g, st)?;
                    contributions.push((a, ga));
                }
                Op::Step(_) => {}
                Op::Sigmoid(a) => {
                    let sq = self.square(n)?;
                    let ds = self.sub(n, sq)?;
                    let ga = self.mul(g, ds)?;
                    contributions.push((a, ga));
                }
                Op::Log(a) => {
                    let ga = self.div(g, a)?;
                    contributions.push((a, ga));
                }
                Op::Square(a) => {
                    let ga = self.mul(g, a)?;
                    let ga = self.scale(ga, 2.0)?;
                    contributions.push((a, ga));
                }
                Op::Sqrt(a) => {
                    let twice = self.scale(n, 2.0)?;
                    let ga = self.div(g, twice)?;
                    contributions.push((a, ga));
                }
                Op::SumTo(a) => {
                    let s = self.nodes[a.0].shape;
                    let ga = self.broadcast(g, s)?;
                    contributions.push((a, ga));
                }
                Op::Broadcast(a) => {
                    let s = self.nodes[a.0].shape;
                    let ga = self.sum_to(g, s)?;
                    contributions.push((a, ga));
                }
            }
            for (p, c) in contributions {
                if !mask[p.0] {
                    continue;
                }
                adj[p.0] = Some(match adj[p.0] {
                    Some(prev) => self.add(prev, c)?,
                    None => c,
                });
            }
        }
        match adj[wrt.0] {
            Some(g) => Ok(g),
            None => Ok(self.constant(Array2::zeros(wrt_shape))),
        }
    }
}
