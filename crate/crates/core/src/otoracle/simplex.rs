//! Primal transportation simplex on a spanning-tree basis.
//!
//! Supplies and demands are integers. Callers perturb them so that no partial
//! sum of supplies equals a partial sum of demands; every basis is then
//! nondegenerate, every pivot moves a positive amount and the method cannot
//! cycle.

use std::collections::VecDeque;

pub(crate) struct Solution {
    /// Basic cells and their flows.
    pub cells: Vec<(usize, usize, i64)>,
    pub pivots: usize,
}

struct Basis<'a> {
    m: usize,
    n: usize,
    cost: &'a [f64],
    flow: Vec<i64>,
    basic: Vec<bool>,
    /// Tree adjacency; rows are nodes `0..m`, columns `m..m+n`.
    adj: Vec<Vec<usize>>,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl Basis<'_> {
    fn cell(&self, a: usize, b: usize) -> usize {
        let (r, c) = if a < self.m { (a, b - self.m) } else { (b, a - self.m) };
        r * self.n + c
    }

    fn link(&mut self, i: usize, j: usize, f: i64) {
        let k = i * self.n + j;
        self.basic[k] = true;
        self.flow[k] = f;
        self.adj[i].push(self.m + j);
        self.adj[self.m + j].push(i);
    }

    fn unlink(&mut self, i: usize, j: usize) {
        let k = i * self.n + j;
        self.basic[k] = false;
        self.flow[k] = 0;
        let cj = self.m + j;
        self.adj[i].retain(|&x| x != cj);
        self.adj[cj].retain(|&x| x != i);
    }

    fn potentials(&mut self) {
        let mut seen = vec![false; self.m + self.n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        self.u[0] = 0.0;
        while let Some(a) = queue.pop_front() {
            for idx in 0..self.adj[a].len() {
                let b = self.adj[a][idx];
                if seen[b] {
                    continue;
                }
                seen[b] = true;
                let c = self.cost[self.cell(a, b)];
                if a < self.m {
                    self.v[b - self.m] = c - self.u[a];
                } else {
                    self.u[b] = c - self.v[a - self.m];
                }
                queue.push_back(b);
            }
        }
    }

    /// Tree path from node `from` to node `to`, as a node sequence.
    fn path(&self, from: usize, to: usize) -> Vec<usize> {
        let mut parent = vec![usize::MAX; self.m + self.n];
        parent[from] = from;
        let mut queue = VecDeque::from([from]);
        while let Some(a) = queue.pop_front() {
            if a == to {
                break;
            }
            for &b in &self.adj[a] {
                if parent[b] == usize::MAX {
                    parent[b] = a;
                    queue.push_back(b);
                }
            }
        }
        let mut out = vec![to];
        let mut x = to;
        while x != from {
            x = parent[x];
            out.push(x);
        }
        out.reverse();
        out
    }
}

/// Solves `min Σ c_ij f_ij` subject to row sums `supply` and column sums
/// `demand` (equal totals). `cost` is row-major `m × n`.
pub(crate) fn solve(supply: &[i64], demand: &[i64], cost: &[f64]) -> Solution {
    let (m, n) = (supply.len(), demand.len());
    let mut basis = Basis {
        m,
        n,
        cost,
        flow: vec![0; m * n],
        basic: vec![false; m * n],
        adj: vec![Vec::new(); m + n],
        u: vec![0.0; m],
        v: vec![0.0; n],
    };

    // Row-minimum start: each allocation exhausts exactly one row or column,
    // which yields a spanning tree of m + n − 1 positive cells.
    let mut rem_s = supply.to_vec();
    let mut rem_d = demand.to_vec();
    let mut open_cols: Vec<bool> = vec![true; n];
    for i in 0..m {
        while rem_s[i] > 0 {
            let j = (0..n)
                .filter(|&j| open_cols[j])
                .min_by(|&a, &b| cost[i * n + a].total_cmp(&cost[i * n + b]))
                .expect("totals balance");
            let f = rem_s[i].min(rem_d[j]);
            basis.link(i, j, f);
            rem_s[i] -= f;
            rem_d[j] -= f;
            if rem_d[j] == 0 {
                open_cols[j] = false;
            }
        }
    }

    let scale = cost.iter().fold(0.0f64, |a, &c| a.max(c.abs())).max(1e-300);
    let tol = 1e-12 * scale;
    let total = m * n;
    let block = ((total as f64).sqrt() as usize).max(16).min(total);
    let mut next = 0usize;
    let mut pivots = 0usize;
    basis.potentials();
    loop {
        // Block pricing: scan `block` cells, take the most negative reduced
        // cost; give up after a full sweep without one.
        let mut best: Option<(usize, f64)> = None;
        let mut scanned = 0usize;
        let mut in_block = 0usize;
        while scanned < total {
            let k = next;
            next = if next + 1 == total { 0 } else { next + 1 };
            scanned += 1;
            in_block += 1;
            if !basis.basic[k] {
                let rc = cost[k] - basis.u[k / n] - basis.v[k % n];
                if rc < -tol && best.is_none_or(|(_, b)| rc < b) {
                    best = Some((k, rc));
                }
            }
            if in_block >= block {
                if best.is_some() {
                    break;
                }
                in_block = 0;
            }
        }
        let Some((k, _)) = best else { break };
        let (i, j) = (k / n, k % n);

        // Cycle: entering cell (+), then the tree path from column j back to
        // row i with alternating signs starting at (−).
        let path = basis.path(m + j, i);
        let mut theta = i64::MAX;
        let mut leave = (0, 0);
        for (step, w) in path.windows(2).enumerate() {
            if step % 2 == 0 {
                let c = basis.cell(w[0], w[1]);
                if basis.flow[c] < theta {
                    theta = basis.flow[c];
                    leave = (c / n, c % n);
                }
            }
        }
        for (step, w) in path.windows(2).enumerate() {
            let c = basis.cell(w[0], w[1]);
            if step % 2 == 0 {
                basis.flow[c] -= theta;
            } else {
                basis.flow[c] += theta;
            }
        }
        basis.unlink(leave.0, leave.1);
        basis.link(i, j, theta);
        basis.potentials();
        pivots += 1;
    }

    let cells = (0..total)
        .filter(|&k| basis.basic[k])
        .map(|k| (k / n, k % n, basis.flow[k]))
        .collect();
    Solution { cells, pivots }
}
