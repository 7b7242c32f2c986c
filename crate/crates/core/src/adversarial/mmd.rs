//! Maximum-mean-discrepancy arm: exact V-statistic for reporting, random
//! Fourier features for learning the weights.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{AdvError, Result};
use crate::reweight::{solve_weights, CriticScores, WeightVector};

fn rbf(x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>, sigma: f64) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Biased squared MMD between `a` (masses `weights_a`, normalised here) and
/// uniform `b`, RBF kernel of bandwidth `sigma`.
pub fn mmd_distance(a: ArrayView2<f64>, weights_a: &[f64], b: ArrayView2<f64>, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(AdvError::BadSigma(sigma));
    }
    if weights_a.len() != a.nrows() || a.ncols() != b.ncols() || b.nrows() == 0 {
        return Err(AdvError::Config("mmd inputs disagree in shape".into()));
    }
    if weights_a.iter().any(|&w| !(w >= 0.0)) {
        return Err(AdvError::Config("mmd weights must be nonnegative".into()));
    }
    let total: f64 = weights_a.iter().sum();
    if !(total > 0.0) {
        return Err(AdvError::Config("mmd weights sum to zero".into()));
    }
    let wa: Vec<f64> = weights_a.iter().map(|w| w / total).collect();
    let wb = 1.0 / b.nrows() as f64;
    let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
    for (i, x) in a.rows().into_iter().enumerate() {
        for (j, y) in a.rows().into_iter().enumerate() {
            aa += wa[i] * wa[j] * rbf(x, y, sigma);
        }
        for y in b.rows() {
            ab += wa[i] * wb * rbf(x, y, sigma);
        }
    }
    for x in b.rows() {
        for y in b.rows() {
            bb += wb * wb * rbf(x, y, sigma);
        }
    }
    Ok((aa + bb - 2.0 * ab).max(0.0))
}

/// Median pairwise distance over at most `cap` rows of the stacked clouds.
pub fn median_bandwidth(a: ArrayView2<f64>, b: ArrayView2<f64>, cap: usize, rng: &mut ChaCha8Rng) -> f64 {
    let stacked = ndarray::concatenate(Axis(0), &[a, b]).expect("same width");
    let n = stacked.nrows();
    let idx = rand::seq::index::sample(rng, n, cap.min(n)).into_vec();
    let mut d = Vec::with_capacity(idx.len() * idx.len() / 2);
    for (k, &i) in idx.iter().enumerate() {
        for &j in &idx[k + 1..] {
            let r = stacked.row(i);
            d.push(r.iter().zip(stacked.row(j)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Random Fourier features: `k(x, y) ≈ φ(x)·φ(y)` for the RBF kernel.
#[derive(Debug, Clone)]
pub struct FourierFeatures {
    omega: Array2<f64>,
    phase: Array1<f64>,
}

impl FourierFeatures {
    pub fn new(dim: usize, count: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Self {
        let omega = Array2::from_shape_fn((dim, count), |_| rng.sample::<f64, _>(StandardNormal) / sigma);
        let phase = Array1::from_shape_fn(count, |_| rng.random_range(0.0..std::f64::consts::TAU));
        Self { omega, phase }
    }

    pub fn map(&self, z: ArrayView2<f64>) -> Array2<f64> {
        let scale = (2.0 / self.phase.len() as f64).sqrt();
        let mut f = z.dot(&self.omega) + self.phase.view().insert_axis(Axis(0));
        f.mapv_inplace(|v| scale * v.cos());
        f
    }
}

/// Frank–Wolfe on `‖Φᵀv/n − c‖²` over the feasible set of `v` (sum `n`,
/// radius `t`), starting from `start`. The linear subproblem is the exact
/// weight solver; the step length is the exact line minimum.
/// Returns the weights and the final objective.
pub fn frank_wolfe(
    phi: &Array2<f64>,
    target: &Array1<f64>,
    start: &WeightVector,
    iterations: usize,
) -> Result<(WeightVector, f64)> {
    let n = start.n_u as f64;
    let mut w = Array1::from(start.values.clone());
    let mut resid = phi.t().dot(&w) / n - target;
    for _ in 0..iterations {
        let grad = phi.dot(&resid) * (2.0 / n);
        let s = solve_weights(&CriticScores::new(grad.to_vec())?, start.n_u, start.t)?;
        let dir = Array1::from(s.values) - &w;
        let delta = phi.t().dot(&dir) / n;
        let dd = delta.dot(&delta);
        if dd <= 1e-300 {
            break;
        }
        let gamma = (-resid.dot(&delta) / dd).clamp(0.0, 1.0);
        if gamma == 0.0 {
            break;
        }
        w.scaled_add(gamma, &dir);
        resid.scaled_add(gamma, &delta);
    }
    let mut values = w.to_vec();
    values.iter_mut().for_each(|v| *v = v.max(0.0));
    let sum: f64 = values.iter().sum();
    values.iter_mut().for_each(|v| *v *= n / sum);
    let out = WeightVector {
        values,
        n_u: start.n_u,
        t: start.t,
    };
    let obj = resid.dot(&resid);
    Ok((out, obj))
}
