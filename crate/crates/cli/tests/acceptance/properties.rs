//! Criteria 8–11: solver, gradients, transport and the Lipschitz bound.

use advrw::adversarial::gradient_penalty;
use advrw::diffcore::{Bindings, NodeId, Tape};
use advrw::models::{weighted_bce_node, MlpModel, MlpSpec};
use advrw::otoracle::{exact_wasserstein, verify_lipschitz_bound, WeightedPointCloud};
use advrw::reweight::{oracle_solve_weights, solve_weights, CriticScores};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracles::{central_difference, enumerate_transport, rel_err};
use crate::Outcome;

const SOLVER_INSTANCES: usize = 500;
const SOLVER_GAP: f64 = 1e-6;
const FEASIBILITY: f64 = 1e-8;
const GRADIENT_SEEDS: u64 = 100;
const FIRST_ORDER_TOL: f64 = 1e-4;
const PENALTY_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;
const MARGINAL_TOL: f64 = 1e-7;
const TRIPLES: u64 = 100;
const ENUMERATION_TOL: f64 = 1e-7;
const LIPSCHITZ_INSTANCES: u64 = 100;
const LIPSCHITZ_SLACK: f64 = 1e-9;

pub fn solver() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut gap, mut resid) = (0.0f64, 0.0f64);
    let mut monotone_violations = 0;
    for _ in 0..SOLVER_INSTANCES {
        let n_p = rng.random_range(1..=8);
        let n_u = rng.random_range(1..=12);
        let t = if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..6.0) };
        // Coarse grid so that ties occur.
        let d: Vec<f64> = (0..n_p)
            .map(|_| if rng.random_bool(0.3) { rng.random_range(-2..=2) as f64 } else { rng.random_range(-2.0..2.0) })
            .collect();
        let scores = CriticScores::new(d.clone()).unwrap();
        let w = solve_weights(&scores, n_u, t).unwrap();
        let o = oracle_solve_weights(&scores, n_u, t).unwrap();
        gap = gap.max((w.objective(&scores) - o.objective(&scores)).abs());
        let sum: f64 = w.values.iter().sum();
        resid = resid
            .max((sum - n_u as f64).abs())
            .max(w.values.iter().map(|&x| (-x).max(0.0)).fold(0.0, f64::max))
            .max((w.deviation() - t * n_u as f64).max(0.0));
        for i in 0..n_p {
            for j in 0..n_p {
                if d[i] < d[j] && w.values[i] < w.values[j] {
                    monotone_violations += 1;
                }
            }
        }
    }
    Outcome::new(
        gap <= SOLVER_GAP && resid <= FEASIBILITY && monotone_violations == 0,
        format!(
            "{SOLVER_INSTANCES} instances: max gap {gap:.1e} (<= {SOLVER_GAP:.0e}), max residual {resid:.1e} (<= {FEASIBILITY:.0e}), monotonicity violations {monotone_violations}"
        ),
    )
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(lo..hi))
}

/// Worst relative error over the leaves of `root`.
fn check_leaves(tape: &Tape, bindings: &Bindings, root: NodeId, leaves: &[NodeId]) -> f64 {
    let mut t = tape.clone();
    t.forward(bindings).unwrap();
    let grads = t.backward(root).unwrap();
    let mut worst = 0.0f64;
    for &leaf in leaves {
        let fd = central_difference(tape, bindings, root, leaf, FD_STEP);
        for (a, b) in grads.get(leaf).unwrap().iter().zip(fd.iter()) {
            worst = worst.max(rel_err(*a, *b));
        }
    }
    worst
}

/// Each primitive on its own, contracted with a random matrix.
fn op_errors(rng: &mut ChaCha8Rng) -> Vec<(&'static str, f64)> {
    const OPS: [&str; 17] = [
        "add", "sub", "mul", "div", "scale", "matmul", "transpose", "relu", "step", "sigmoid", "log", "square",
        "sqrt", "sum_to", "sum", "mean", "broadcast",
    ];
    let mut out = Vec::new();
    for name in OPS {
        let mut t = Tape::new();
        let mut b = Bindings::new();
        let x = t.parameter((3, 4));
        let y = t.parameter((3, 4));
        let positive = matches!(name, "log" | "sqrt");
        let (lo, hi) = if positive { (0.2, 2.0) } else { (-2.0, 2.0) };
        b.bind(x, random(rng, 3, 4, lo, hi));
        // Keep the divisor away from zero, and relu/step away from the kink.
        b.bind(y, random(rng, 3, 4, 0.5, 2.0));
        if matches!(name, "relu" | "step") {
            let v = b.get(x).unwrap().mapv(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
            b.bind(x, v);
        }
        let mut leaves = vec![x, y];
        let node = match name {
            "add" => t.add(x, y),
            "sub" => t.sub(x, y),
            "mul" => t.mul(x, y),
            "div" => t.div(x, y),
            "scale" => t.scale(x, -1.7),
            "matmul" => {
                let w = t.parameter((4, 2));
                b.bind(w, random(rng, 4, 2, -2.0, 2.0));
                leaves = vec![x, w];
                t.matmul(x, w)
            }
            "transpose" => t.transpose(x),
            "relu" => t.relu(x),
            "step" => t.step(x),
            "sigmoid" => t.sigmoid(x),
            "log" => t.log(x),
            "square" => t.square(x),
            "sqrt" => t.sqrt(x),
            "sum_to" => t.sum_to(x, (3, 1)),
            "sum" => t.sum(x),
            "mean" => t.mean(x),
            _ => {
                let c = t.parameter((1, 4));
                b.bind(c, random(rng, 1, 4, -2.0, 2.0));
                leaves = vec![c];
                t.broadcast(c, (3, 4))
            }
        }
        .unwrap();
        let shape = t.shape(node).unwrap();
        let r = t.constant(random(rng, shape.0, shape.1, -1.0, 1.0));
        let prod = t.mul(node, r).unwrap();
        let root = t.sum(prod).unwrap();
        if !matches!(name, "add" | "sub" | "mul" | "div") {
            leaves.retain(|&l| l != y);
        }
        out.push((name, check_leaves(&t, &b, root, &leaves)));
    }
    out
}

fn with_random_biases(mut m: MlpModel, rng: &mut ChaCha8Rng) -> MlpModel {
    for b in &mut m.biases {
        b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    m
}

/// The weighted cross-entropy of a small classifier, checked with respect
/// to its inputs and every parameter.
fn loss_error(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let (n, d) = (6, 3);
    let clf = with_random_biases(MlpModel::new(MlpSpec::classifier(d, &[5, 4], seed)).unwrap(), rng);
    let mut t = Tape::new();
    let mut b = Bindings::new();
    let x = t.parameter((n, d));
    b.bind(x, random(rng, n, d, -2.0, 2.0));
    let g = clf.build(&mut t, x).unwrap();
    clf.bind(&g, &mut b);
    let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
    let total: f64 = weights.iter().sum();
    let root = weighted_bce_node(&mut t, g.logits, &labels, &weights, total).unwrap();
    let mut leaves = vec![x];
    leaves.extend(&g.params);
    check_leaves(&t, &b, root, &leaves)
}

/// Parameter gradient of the gradient penalty against differences of its
/// value.
fn penalty_error(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let critic = with_random_biases(MlpModel::new(MlpSpec::critic(3, &[6, 4], seed)).unwrap(), rng);
    let zhat = random(rng, 5, 3, -2.0, 2.0);
    let (_, grads) = gradient_penalty(&critic, zhat.view()).unwrap();
    let mut worst = 0.0f64;
    for (k, grad) in grads.iter().enumerate() {
        for (i, &analytic) in grad.iter().enumerate() {
            let eval = |delta: f64| {
                let mut m = critic.clone();
                m.tensors_mut()[k][i] += delta;
                gradient_penalty(&m, zhat.view()).unwrap().0
            };
            let fd = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic, fd));
        }
    }
    worst
}

pub fn gradients() -> Outcome {
    let mut op_worst: Vec<(&str, f64)> = Vec::new();
    let (mut loss_worst, mut pen_worst) = (0.0f64, 0.0f64);
    for seed in 0..GRADIENT_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        for (i, (name, e)) in op_errors(&mut rng).into_iter().enumerate() {
            if op_worst.len() <= i {
                op_worst.push((name, e));
            } else {
                op_worst[i].1 = op_worst[i].1.max(e);
            }
        }
        loss_worst = loss_worst.max(loss_error(&mut rng, seed));
        pen_worst = pen_worst.max(penalty_error(&mut rng, seed));
    }
    let (worst_op, op_err) = op_worst.iter().copied().fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    Outcome::new(
        op_err <= FIRST_ORDER_TOL && loss_worst <= FIRST_ORDER_TOL && pen_worst <= PENALTY_TOL,
        format!(
            "{GRADIENT_SEEDS} seeds: {} ops worst {op_err:.1e} ({worst_op}), weighted loss {loss_worst:.1e} (<= {FIRST_ORDER_TOL:.0e}), penalty {pen_worst:.1e} (<= {PENALTY_TOL:.0e})",
            op_worst.len()
        ),
    )
}

fn cloud(rng: &mut ChaCha8Rng, n: usize, d: usize) -> WeightedPointCloud {
    let masses = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    WeightedPointCloud::new(random(rng, n, d, -2.0, 2.0), masses).unwrap()
}

fn euclid_costs(a: &WeightedPointCloud, b: &WeightedPointCloud) -> Vec<f64> {
    let mut c = Vec::new();
    for x in a.points().rows() {
        for y in b.points().rows() {
            c.push((&x - &y).mapv(|v| v * v).sum().sqrt());
        }
    }
    c
}

pub fn transport() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut marginal = 0.0f64;
    let (mut asym, mut triangle_violations) = (0.0f64, 0);
    for _ in 0..TRIPLES {
        let d = rng.random_range(1..4);
        let [a, b, c] = [(); 3].map(|_| {
            let n = rng.random_range(1..13);
            cloud(&mut rng, n, d)
        });
        for (x, y) in [(&a, &b), (&b, &c), (&a, &c)] {
            let (_, plan) = exact_wasserstein(x, y, 1).unwrap();
            for (row, m) in plan.matrix.sum_axis(Axis(1)).iter().zip(x.masses()) {
                marginal = marginal.max((row - m).abs());
            }
            for (col, m) in plan.matrix.sum_axis(Axis(0)).iter().zip(y.masses()) {
                marginal = marginal.max((col - m).abs());
            }
        }
        let w = |x, y| exact_wasserstein(x, y, 1).unwrap().0;
        let (ab, ba, bc, ac) = (w(&a, &b), w(&b, &a), w(&b, &c), w(&a, &c));
        asym = asym.max((ab - ba).abs());
        if ac > ab + bc + MARGINAL_TOL {
            triangle_violations += 1;
        }
    }
    let mut enum_gap = 0.0f64;
    let mut pairs = 0;
    for m in 1..=5 {
        for n in 1..=5 {
            for _ in 0..4 {
                let a = cloud(&mut rng, m, 2);
                let b = cloud(&mut rng, n, 2);
                let exact = exact_wasserstein(&a, &b, 1).unwrap().0;
                let reference = enumerate_transport(a.masses(), b.masses(), &euclid_costs(&a, &b));
                enum_gap = enum_gap.max((exact - reference).abs());
                pairs += 1;
            }
        }
    }
    Outcome::new(
        marginal <= MARGINAL_TOL && asym <= MARGINAL_TOL && triangle_violations == 0 && enum_gap <= ENUMERATION_TOL,
        format!(
            "marginal residual {marginal:.1e}, asymmetry {asym:.1e}, triangle violations {triangle_violations}/{TRIPLES}, enumeration gap {enum_gap:.1e} over {pairs} pairs up to 5x5"
        ),
    )
}

/// A few dozen SGD steps of a small classifier on random labels.
fn trained_classifier(rng: &mut ChaCha8Rng, x: &Array2<f64>, seed: u64) -> MlpModel {
    let mut clf = MlpModel::new(MlpSpec::classifier(x.ncols(), &[8], seed)).unwrap();
    let labels: Vec<u8> = (0..x.nrows()).map(|_| rng.random_range(0..2)).collect();
    let weights = vec![1.0; x.nrows()];
    for _ in 0..40 {
        let mut t = Tape::new();
        let mut b = Bindings::new();
        let xn = t.input(x.dim());
        b.bind(xn, x.clone());
        let g = clf.build(&mut t, xn).unwrap();
        clf.bind(&g, &mut b);
        let loss = weighted_bce_node(&mut t, g.logits, &labels, &weights, x.nrows() as f64).unwrap();
        t.forward(&b).unwrap();
        let grads = t.backward_wrt(loss, &g.params).unwrap();
        for (p, node) in clf.tensors_mut().into_iter().zip(&g.params) {
            for (v, gv) in p.iter_mut().zip(grads.get(*node).unwrap().iter()) {
                *v -= 0.5 * gv;
            }
        }
    }
    clf
}

pub fn lipschitz() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut violations = 0;
    let mut tight = 0.0f64;
    for seed in 0..LIPSCHITZ_INSTANCES {
        let d = rng.random_range(1..4);
        let na = rng.random_range(1..=8);
        let nb = rng.random_range(1..=8);
        let a = cloud(&mut rng, na, d);
        let b = cloud(&mut rng, nb, d);
        let both = ndarray::concatenate(Axis(0), &[a.points().view(), b.points().view()]).unwrap();
        let clf = trained_classifier(&mut rng, &both, seed);
        let r = verify_lipschitz_bound(&clf, &a, &b).unwrap();
        if r.lhs > r.rhs + LIPSCHITZ_SLACK {
            violations += 1;
        }
        if r.rhs > 0.0 {
            tight = tight.max(r.lhs / r.rhs);
        }
    }
    Outcome::new(
        violations == 0,
        format!("{LIPSCHITZ_INSTANCES} instances: {violations} violations, tightest lhs/rhs {tight:.3}"),
    )
}
