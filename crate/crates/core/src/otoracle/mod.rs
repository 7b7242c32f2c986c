//! Exact discrete optimal transport between weighted point clouds, used to
//! audit the critic, to measure latent-space distances between groups, and to
//! check the Lipschitz bound relating classifier push-forwards to the latent
//! distance.

mod simplex;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{classify_batch, critic_scores, MlpModel, ModelError};

/// Total integer mass the LP works with.
const MASS_SCALE: i64 = 1_000_000_000_000;

#[derive(Debug, Error)]
pub enum OtError {
    #[error("point cloud is empty")]
    Empty,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("{points} points but {masses} masses")]
    LengthMismatch { points: usize, masses: usize },
    #[error("mass {index} is negative or not finite")]
    BadMass { index: usize },
    #[error("masses sum to zero")]
    ZeroTotal,
    #[error("ground-cost exponent must be 1 or 2, got {0}")]
    InvalidExponent(u32),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, OtError>;

/// Points (one per row) with masses normalised to sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPointCloud {
    points: Array2<f64>,
    masses: Vec<f64>,
}

impl WeightedPointCloud {
    pub fn new(points: Array2<f64>, masses: Vec<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(OtError::Empty);
        }
        if points.nrows() != masses.len() {
            return Err(OtError::LengthMismatch {
                points: points.nrows(),
                masses: masses.len(),
            });
        }
        if let Some(index) = masses.iter().position(|m| !m.is_finite() || *m < 0.0) {
            return Err(OtError::BadMass { index });
        }
        let total: f64 = masses.iter().sum();
        if total <= 0.0 {
            return Err(OtError::ZeroTotal);
        }
        let masses = masses.into_iter().map(|m| m / total).collect();
        Ok(Self { points, masses })
    }

    pub fn uniform(points: Array2<f64>) -> Result<Self> {
        let n = points.nrows();
        Self::new(points, vec![1.0; n])
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Same cloud restricted to positive-mass points.
    fn support(&self) -> (Vec<usize>, Self) {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.masses[i] > 0.0).collect();
        let cloud = Self {
            points: self.points.select(Axis(0), &keep),
            masses: keep.iter().map(|&i| self.masses[i]).collect(),
        };
        (keep, cloud)
    }

    /// Uniform subsample (without replacement) of at most `max_points`
    /// positive-mass points, masses renormalised.
    pub fn subsample(&self, max_points: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (_, cloud) = self.support();
        if cloud.len() <= max_points {
            return Ok(cloud);
        }
        let mut idx = sample(rng, cloud.len(), max_points).into_vec();
        idx.sort_unstable();
        Self::new(
            cloud.points.select(Axis(0), &idx),
            idx.iter().map(|&i| cloud.masses[i]).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// `|a| × |b|` coupling; rows index `a`, columns `b`.
    pub matrix: Array2<f64>,
    pub cost: f64,
}

fn ground_cost(x: ArrayView1<f64>, y: ArrayView1<f64>, p: u32) -> f64 {
    let sq: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    if p == 1 {
        sq.sqrt()
    } else {
        sq
    }
}

/// Largest-remainder rounding of `masses` (summing to one) to positive
/// integers summing to `total`.
fn integerize(masses: &[f64], total: i64) -> Vec<i64> {
    let scaled: Vec<f64> = masses.iter().map(|m| m * total as f64).collect();
    let mut ints: Vec<i64> = scaled.iter().map(|s| (s.floor() as i64).max(1)).collect();
    let mut diff = total - ints.iter().sum::<i64>();
    let mut order: Vec<usize> = (0..masses.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = scaled[a] - scaled[a].floor();
        let fb = scaled[b] - scaled[b].floor();
        fb.total_cmp(&fa)
    });
    let mut k = 0;
    while diff > 0 {
        ints[order[k % order.len()]] += 1;
        diff -= 1;
        k += 1;
    }
    while diff < 0 {
        let i = (0..ints.len()).max_by_key(|&i| ints[i]).unwrap();
        ints[i] -= 1;
        diff += 1;
    }
    ints
}

/// Exact optimal transport cost `min_π Σ π_ij ‖a_i − b_j‖^p` for `p ∈ {1, 2}`
/// (no root is taken for `p = 2`).
pub fn exact_wasserstein(
    a: &WeightedPointCloud,
    b: &WeightedPointCloud,
    p: u32,
) -> Result<(f64, TransportPlan)> {
    if p != 1 && p != 2 {
        return Err(OtError::InvalidExponent(p));
    }
    if a.dim() != b.dim() {
        return Err(OtError::DimensionMismatch(a.dim(), b.dim()));
    }
    let (rows, sa) = a.support();
    let (cols, sb) = b.support();
    let (m, n) = (sa.len(), sb.len());
    let mut cost = Vec::with_capacity(m * n);
    for x in sa.points.rows() {
        for y in sb.points.rows() {
            cost.push(ground_cost(x, y, p));
        }
    }
    // Perturbation: supplies K·aᵢ + 1, demands K·bⱼ with m added to the last.
    // No proper subset of supplies can then balance a subset of demands.
    let k = m as i64 + 1;
    let mut supply = integerize(&sa.masses, MASS_SCALE);
    let mut demand = integerize(&sb.masses, MASS_SCALE);
    supply.iter_mut().for_each(|s| *s = *s * k + 1);
    demand.iter_mut().for_each(|d| *d *= k);
    demand[n - 1] += m as i64;

    let sol = simplex::solve(&supply, &demand, &cost);
    log::trace!("transport {m}x{n}: {} pivots", sol.pivots);
    let denom = (MASS_SCALE * k) as f64;
    let mut matrix = Array2::zeros((a.len(), b.len()));
    let mut total = 0.0;
    for (i, j, f) in sol.cells {
        let mass = f as f64 / denom;
        matrix[[rows[i], cols[j]]] = mass;
        total += mass * cost[i * n + j];
    }
    Ok((
        total,
        TransportPlan {
            matrix,
            cost: total,
        },
    ))
}

/// Dual estimate `Σ mass_a·D(a) − Σ mass_b·D(b)` from a trained critic.
pub fn critic_distance_estimate(
    critic: &MlpModel,
    a: &WeightedPointCloud,
    b: &WeightedPointCloud,
) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(OtError::DimensionMismatch(a.dim(), b.dim()));
    }
    let expect = |c: &WeightedPointCloud| -> Result<f64> {
        let s = critic_scores(critic, c.points.view())?;
        Ok(s.iter().zip(&c.masses).map(|(d, m)| d * m).sum())
    };
    Ok(expect(a)? - expect(b)?)
}

/// Image of `a` under the classifier's hard predictions: a 1-D cloud on
/// `{0, 1}` holding the mass predicted for each label.
pub fn pushforward_cloud(classifier: &MlpModel, a: &WeightedPointCloud) -> Result<WeightedPointCloud> {
    let preds = classify_batch(classifier, a.points.view())?;
    let mut mass = [0.0; 2];
    for (p, m) in preds.iter().zip(&a.masses) {
        mass[p.label as usize] += m;
    }
    let labels: Vec<usize> = (0..2).filter(|&l| mass[l] > 0.0).collect();
    let points = Array2::from_shape_fn((labels.len(), 1), |(i, _)| labels[i] as f64);
    WeightedPointCloud::new(points, labels.iter().map(|&l| mass[l]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub k: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Checks `W1(C#a, C#b) ≤ K·W1(a, b)` where `1/K` is the smallest distance
/// between support points that the classifier labels differently.
pub fn verify_lipschitz_bound(
    classifier: &MlpModel,
    a: &WeightedPointCloud,
    b: &WeightedPointCloud,
) -> Result<LipschitzReport> {
    if a.dim() != b.dim() {
        return Err(OtError::DimensionMismatch(a.dim(), b.dim()));
    }
    let (_, sa) = a.support();
    let (_, sb) = b.support();
    let pts = ndarray::concatenate(Axis(0), &[sa.points.view(), sb.points.view()])
        .expect("equal dimension");
    let labels: Vec<u8> = classify_batch(classifier, pts.view())?
        .iter()
        .map(|p| p.label)
        .collect();
    let mut min_dist = f64::INFINITY;
    for i in 0..pts.nrows() {
        for j in (i + 1)..pts.nrows() {
            if labels[i] != labels[j] {
                min_dist = min_dist.min(ground_cost(pts.row(i), pts.row(j), 1));
            }
        }
    }
    let lhs = exact_wasserstein(&pushforward_cloud(classifier, a)?, &pushforward_cloud(classifier, b)?, 1)?.0;
    if !min_dist.is_finite() {
        return Ok(LipschitzReport {
            k: 0.0,
            lhs,
            rhs: 0.0,
            holds: true,
        });
    }
    let k = 1.0 / min_dist;
    let rhs = k * exact_wasserstein(a, b, 1)?.0;
    Ok(LipschitzReport {
        k,
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-9,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSummary {
    pub mean: f64,
    pub sd: f64,
    pub subsample_size: usize,
    pub distances: Vec<f64>,
}

/// Exact distance averaged over `reps` independent subsamples of at most
/// `max_points` points per cloud. `sd` is the sample standard deviation.
pub fn subsampled_wasserstein(
    a: &WeightedPointCloud,
    b: &WeightedPointCloud,
    p: u32,
    max_points: usize,
    reps: usize,
    seed: u64,
) -> Result<DistanceSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut distances = Vec::with_capacity(reps);
    let mut size = 0;
    for _ in 0..reps.max(1) {
        let sa = a.subsample(max_points, &mut rng)?;
        let sb = b.subsample(max_points, &mut rng)?;
        size = sa.len().max(sb.len());
        distances.push(exact_wasserstein(&sa, &sb, p)?.0);
    }
    let k = distances.len() as f64;
    let mean = distances.iter().sum::<f64>() / k;
    let sd = if distances.len() > 1 {
        (distances.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(DistanceSummary {
        mean,
        sd,
        subsample_size: size,
        distances,
    })
}

/// One line of the distance report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRecord {
    pub phase: String,
    pub p: u32,
    pub distance: f64,
    pub subsample_size: usize,
    pub seed: u64,
}
