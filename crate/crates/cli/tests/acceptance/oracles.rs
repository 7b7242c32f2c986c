//! Independent reference computations.

use advrw::diffcore::{Bindings, NodeId, Tape};
use ndarray::Array2;

/// `|a − b| / max(|a|, |b|, 1e-2)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Central difference of the scalar `root` with respect to every entry of
/// the bound value of `leaf`.
pub fn central_difference(tape: &Tape, bindings: &Bindings, root: NodeId, leaf: NodeId, h: f64) -> Array2<f64> {
    let base = bindings.get(leaf).expect("bound leaf").clone();
    let mut t = tape.clone();
    let mut out = Array2::zeros(base.dim());
    for idx in ndarray::indices(base.dim()) {
        let mut eval = |delta: f64| {
            let mut b = bindings.clone();
            let mut v = base.clone();
            v[idx] += delta;
            b.bind(leaf, v);
            t.forward(&b).unwrap();
            t.scalar_value(root).unwrap()
        };
        out[idx] = (eval(h) - eval(-h)) / (2.0 * h);
    }
    out
}

/// Minimum transport cost over every basic feasible solution: each set of
/// `m + n − 1` cells forming a spanning tree of the bipartite graph fixes
/// at most one plan, found by peeling leaves.
pub fn enumerate_transport(a: &[f64], b: &[f64], cost: &[f64]) -> f64 {
    let (m, n) = (a.len(), b.len());
    let need = m + n - 1;
    let mut best = f64::INFINITY;
    let mut set = Vec::with_capacity(need);
    combinations(m * n, need, 0, &mut set, &mut |cells| {
        if let Some(flow) = tree_flow(cells, a, b) {
            if flow.iter().all(|&f| f >= -1e-12) {
                let total: f64 = cells.iter().zip(&flow).map(|(&c, f)| cost[c] * f).sum();
                best = best.min(total);
            }
        }
    });
    best
}

fn combinations(total: usize, need: usize, start: usize, set: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
    if set.len() == need {
        visit(set);
        return;
    }
    for c in start..total {
        if total - c < need - set.len() {
            break;
        }
        set.push(c);
        combinations(total, need, c + 1, set, visit);
        set.pop();
    }
}

/// Flows on the cells of a spanning tree, or `None` if the cells contain a
/// cycle.
fn tree_flow(cells: &[usize], a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let (m, n) = (a.len(), b.len());
    let ends = |c: usize| (c / n, m + c % n);
    let mut parent: Vec<usize> = (0..m + n).collect();
    fn root(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &c in cells {
        let (i, j) = ends(c);
        let (ri, rj) = (root(&mut parent, i), root(&mut parent, j));
        if ri == rj {
            return None;
        }
        parent[ri] = rj;
    }
    let mut left: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut alive = vec![true; cells.len()];
    let mut flow = vec![0.0; cells.len()];
    for _ in 0..cells.len() {
        let mut degree = vec![0usize; m + n];
        for (e, &c) in cells.iter().enumerate() {
            if alive[e] {
                let (i, j) = ends(c);
                degree[i] += 1;
                degree[j] += 1;
            }
        }
        let (e, leaf, other) = cells
            .iter()
            .enumerate()
            .filter(|(e, _)| alive[*e])
            .find_map(|(e, &c)| {
                let (i, j) = ends(c);
                if degree[i] == 1 {
                    Some((e, i, j))
                } else if degree[j] == 1 {
                    Some((e, j, i))
                } else {
                    None
                }
            })?;
        flow[e] = left[leaf];
        left[other] -= left[leaf];
        left[leaf] = 0.0;
        alive[e] = false;
    }
    Some(flow)
}
