//! Majority-sample weights: the feasible set
//! `{w ≥ 0, Σw = n_u, Σ(w − n_u/n_p)² ≤ T·n_u}` and the exact minimiser of a
//! linear objective `dᵀw` over it.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the sum and ball constraints.
pub const CONSTRAINT_TOL: f64 = 1e-8;
/// Largest instance the enumeration oracle accepts.
pub const ORACLE_MAX: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum ReweightError {
    #[error("radius parameter T must be nonnegative, got {0}")]
    NegativeRadius(f64),
    #[error("need at least one majority sample")]
    Empty,
    #[error("minority count must be positive")]
    ZeroMinority,
    #[error("critic score {index} is not finite")]
    NonFinite { index: usize },
    #[error("oracle limited to {max} samples, got {n_p}")]
    TooLarge { n_p: usize, max: usize },
    #[error("length mismatch: {0} scores vs {1} weights")]
    LengthMismatch(usize, usize),
    #[error("csv: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, ReweightError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub values: Vec<f64>,
    pub n_u: usize,
    pub t: f64,
}

impl WeightVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The ball centre `n_u/n_p`.
    pub fn center(&self) -> f64 {
        self.n_u as f64 / self.values.len() as f64
    }

    /// `Σ(wᵢ − n_u/n_p)²`.
    pub fn deviation(&self) -> f64 {
        let c = self.center();
        self.values.iter().map(|w| (w - c).powi(2)).sum()
    }

    pub fn objective(&self, d: &CriticScores) -> f64 {
        dot(&d.0, &self.values)
    }

    /// Checks all three constraints with the given tolerance.
    pub fn is_feasible(&self, tol: f64) -> bool {
        let sum: f64 = self.values.iter().sum();
        self.values.iter().all(|&w| w >= -tol)
            && (sum - self.n_u as f64).abs() <= tol
            && self.deviation() <= self.t * self.n_u as f64 + tol
    }
}

/// Critic outputs on the majority samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticScores(pub Vec<f64>);

impl CriticScores {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(ReweightError::NonFinite { index });
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check(n_p: usize, n_u: usize, t: f64) -> Result<()> {
    if n_p == 0 {
        return Err(ReweightError::Empty);
    }
    if n_u == 0 {
        return Err(ReweightError::ZeroMinority);
    }
    if t.is_nan() || t < 0.0 {
        return Err(ReweightError::NegativeRadius(t));
    }
    Ok(())
}

pub fn uniform_weights(n_p: usize, n_u: usize, t: f64) -> Result<WeightVector> {
    check(n_p, n_u, t)?;
    Ok(WeightVector {
        values: vec![n_u as f64 / n_p as f64; n_p],
        n_u,
        t,
    })
}

/// Exact minimiser of `dᵀw` over the feasible set.
///
/// Because `Σw` is fixed, the ball is equivalent to `‖w‖² ≤ R` with
/// `R = T·n_u + n_u²/n_p`. If the least-norm LP solution (uniform mass on the
/// argmin of `d`) fits in the ball it is optimal. Otherwise the ball binds and
/// the KKT conditions give `wᵢ = α·max(0, θ − dᵢ)`, supported on the `k`
/// smallest scores; `k` is found by a scan over the sorted scores.
pub fn solve_weights(d: &CriticScores, n_u: usize, t: f64) -> Result<WeightVector> {
    let n_p = d.len();
    check(n_p, n_u, t)?;
    CriticScores::new(d.0.clone())?;
    let mut out = uniform_weights(n_p, n_u, t)?;
    let n = n_u as f64;
    let lo = d.0.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = d.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if t == 0.0 || lo == hi {
        return Ok(out);
    }
    let r = t * n + n * n / n_p as f64;

    let ties: Vec<usize> = (0..n_p).filter(|&i| d.0[i] == lo).collect();
    let m = ties.len() as f64;
    if n * n / m <= r {
        out.values.fill(0.0);
        for &i in &ties {
            out.values[i] = n / m;
        }
        return Ok(out);
    }

    let mut order: Vec<usize> = (0..n_p).collect();
    order.sort_by(|&a, &b| d.0[a].total_cmp(&d.0[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| d.0[i]).collect();
    // Shift for numerical stability of the running variance.
    let shift = sorted[0];
    let (mut s1, mut s2) = (0.0, 0.0);
    let mut best: Option<(f64, f64, f64)> = None; // (violation, alpha, theta)
    for k in 1..=n_p {
        let x = sorted[k - 1] - shift;
        s1 += x;
        s2 += x * x;
        let kf = k as f64;
        let mean = s1 / kf;
        let var = (s2 - kf * mean * mean).max(0.0);
        let slack = r - n * n / kf;
        if var <= 0.0 || slack <= 0.0 {
            continue;
        }
        let alpha = (slack / var).sqrt();
        let theta = mean + n / (alpha * kf);
        let mut viol = (x - theta).max(0.0);
        if k < n_p {
            viol = viol.max(theta - (sorted[k] - shift));
        }
        if best.is_none_or(|(v, _, _)| viol < v) {
            best = Some((viol, alpha, theta));
            if viol == 0.0 {
                break;
            }
        }
    }
    let (_, alpha, theta) = best.expect("k = n_p always has positive slack and variance");
    for (w, &di) in out.values.iter_mut().zip(&d.0) {
        *w = (alpha * (theta - (di - shift))).max(0.0);
    }
    let sum: f64 = out.values.iter().sum();
    out.values.iter_mut().for_each(|w| *w *= n / sum);
    pull_into_ball(&mut out);
    Ok(out)
}

/// Shrinks towards the centre if rounding left `w` slightly outside the ball.
/// Convex combination with the centre keeps the sum and nonnegativity.
fn pull_into_ball(w: &mut WeightVector) {
    let cap = w.t * w.n_u as f64;
    let dev = w.deviation();
    if dev > cap {
        let c = w.center();
        let s = (cap / dev).sqrt() * (1.0 - 1e-12);
        w.values.iter_mut().for_each(|v| *v = c + s * (*v - c));
    }
}

/// Exhaustive verifier for [`solve_weights`]: for every nonempty support `F`
/// it evaluates the ball-constrained stationary point on `F`, the uniform
/// point on `F`, and the simplex vertices, keeping the best feasible one.
pub fn oracle_solve_weights(d: &CriticScores, n_u: usize, t: f64) -> Result<WeightVector> {
    let n_p = d.len();
    check(n_p, n_u, t)?;
    if n_p > ORACLE_MAX {
        return Err(ReweightError::TooLarge {
            n_p,
            max: ORACLE_MAX,
        });
    }
    let n = n_u as f64;
    let u = n / n_p as f64;
    let r2 = t * n;
    let mut best = uniform_weights(n_p, n_u, t)?;
    let mut best_obj = best.objective(d);
    let mut consider = |w: Vec<f64>| {
        let dev: f64 = w.iter().map(|x| (x - u).powi(2)).sum();
        if w.iter().any(|&x| x < -1e-12) || dev > r2 + 1e-9 {
            return;
        }
        let obj = dot(&d.0, &w);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        if obj < best_obj - 1e-12 || (obj <= best_obj + 1e-12 && norm(&w) < norm(&best.values)) {
            best_obj = obj;
            best.values = w.into_iter().map(|x| x.max(0.0)).collect();
        }
    };
    for mask in 1u32..(1 << n_p) {
        let free: Vec<usize> = (0..n_p).filter(|i| mask & (1 << i) != 0).collect();
        let k = free.len() as f64;
        let mean = free.iter().map(|&i| d.0[i]).sum::<f64>() / k;
        let var: f64 = free.iter().map(|&i| (d.0[i] - mean).powi(2)).sum();
        let zeros = (n_p - free.len()) as f64;
        // Ball radius left for the free block once the zeros and the shift of
        // its mean away from u are paid for.
        let left = r2 - zeros * u * u - k * (n / k - u).powi(2);
        let mut w = vec![0.0; n_p];
        for &i in &free {
            w[i] = n / k;
        }
        consider(w.clone());
        if var > 0.0 && left >= 0.0 {
            let alpha = (left / var).sqrt();
            for &i in &free {
                w[i] = n / k - alpha * (d.0[i] - mean);
            }
            consider(w);
        }
        if free.len() == 1 {
            let mut v = vec![0.0; n_p];
            v[free[0]] = n;
            consider(v);
        }
    }
    Ok(best)
}

/// One CSV row per majority sample: `index,d,w`.
pub fn write_weights_csv<W: Write>(out: W, d: &CriticScores, w: &WeightVector) -> Result<()> {
    if d.len() != w.len() {
        return Err(ReweightError::LengthMismatch(d.len(), w.len()));
    }
    let csv_err = |e: csv::Error| ReweightError::Csv(e.to_string());
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["index", "d", "w"]).map_err(csv_err)?;
    for (i, (di, wi)) in d.0.iter().zip(&w.values).enumerate() {
        wtr.write_record([i.to_string(), di.to_string(), wi.to_string()])
            .map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| ReweightError::Csv(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scores(v: &[f64]) -> CriticScores {
        CriticScores::new(v.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn uniform_examples() {
        assert_eq!(uniform_weights(4, 2, 3.0).unwrap().values, vec![0.5; 4]);
        assert_eq!(uniform_weights(1, 1, 0.0).unwrap().values, vec![1.0]);
        let w = uniform_weights(3, 1, 0.0).unwrap();
        assert!(close(&w.values, &[1.0 / 3.0; 3], 1e-15));
        assert_eq!(w.deviation(), 0.0);
        assert!(w.is_feasible(CONSTRAINT_TOL));
    }

    #[test]
    fn zero_radius_is_uniform() {
        let w = solve_weights(&scores(&[3.0, -1.0, 7.0, 0.5]), 2, 0.0).unwrap();
        assert_eq!(w.values, vec![0.5; 4]);
    }

    #[test]
    fn vertex_inside_ball() {
        let d = scores(&[0.0, 1.0, 2.0]);
        let w = solve_weights(&d, 1, 1.0).unwrap();
        assert_eq!(w.values, vec![1.0, 0.0, 0.0]);
        assert_eq!(w.objective(&d), 0.0);
        assert!((w.deviation() - 6.0 / 9.0).abs() < 1e-12);
        let o = oracle_solve_weights(&d, 1, 1.0).unwrap();
        assert!(close(&o.values, &w.values, 1e-12));
    }

    #[test]
    fn ball_active_without_clipping() {
        let d = scores(&[0.0, 1.0, 2.0]);
        let w = solve_weights(&d, 1, 0.06).unwrap();
        let a = 0.03f64.sqrt();
        let u = 1.0 / 3.0;
        let expected = [u + a, u, u - a];
        assert!(close(&w.values, &expected, 1e-10), "{:?}", w.values);
        assert!(close(&w.values, &[0.50654, 0.33333, 0.16013], 1e-5));
        let o = oracle_solve_weights(&d, 1, 0.06).unwrap();
        assert!(close(&o.values, &expected, 1e-10));
    }

    #[test]
    fn constant_scores_are_uniform() {
        let d = scores(&[2.5; 3]);
        assert_eq!(solve_weights(&d, 3, 5.0).unwrap().values, vec![1.0; 3]);
        assert!(close(&oracle_solve_weights(&d, 3, 5.0).unwrap().values, &[1.0; 3], 1e-12));
    }

    #[test]
    fn ties_at_minimum_share_mass() {
        let d = scores(&[0.0, 0.0, 1.0, 3.0]);
        let w = solve_weights(&d, 2, 5.0).unwrap();
        assert_eq!(w.values, vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn oracle_single_variable() {
        let w = oracle_solve_weights(&scores(&[5.0]), 3, 10.0).unwrap();
        assert_eq!(w.values, vec![3.0]);
        assert_eq!(solve_weights(&scores(&[5.0]), 3, 10.0).unwrap().values, vec![3.0]);
    }

    #[test]
    fn errors() {
        assert_eq!(
            solve_weights(&scores(&[1.0]), 1, -0.1).unwrap_err(),
            ReweightError::NegativeRadius(-0.1)
        );
        assert!(matches!(
            oracle_solve_weights(&scores(&[0.0; 13]), 1, 1.0),
            Err(ReweightError::TooLarge { .. })
        ));
        assert!(CriticScores::new(vec![0.0, f64::NAN]).is_err());
        assert!(uniform_weights(0, 1, 1.0).is_err());
    }

    #[test]
    fn oracle_beats_or_matches_solver_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n_p = 8;
            let n_u = rng.random_range(1..12);
            let t = rng.random_range(0.0..3.0);
            let d = scores(&(0..n_p).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>());
            let w = solve_weights(&d, n_u, t).unwrap();
            let o = oracle_solve_weights(&d, n_u, t).unwrap();
            assert!(o.objective(&d) <= w.objective(&d) + 1e-6);
            assert!((o.objective(&d) - w.objective(&d)).abs() <= 1e-6);
        }
    }

    #[test]
    fn random_feasible_points_never_beat_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n_p = 6;
            let n_u = 4;
            let t = rng.random_range(0.1..2.0);
            let d = scores(&(0..n_p).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let best = oracle_solve_weights(&d, n_u, t).unwrap().objective(&d);
            let u = n_u as f64 / n_p as f64;
            for _ in 0..200 {
                // Random point of the simplex pulled into the ball.
                let raw: Vec<f64> = (0..n_p).map(|_| rng.random_range(0.0..1.0f64)).collect();
                let s: f64 = raw.iter().sum();
                let mut w = WeightVector {
                    values: raw.iter().map(|x| x * n_u as f64 / s).collect(),
                    n_u,
                    t,
                };
                let dev = w.deviation();
                if dev > t * n_u as f64 {
                    let k = (t * n_u as f64 / dev).sqrt();
                    w.values.iter_mut().for_each(|v| *v = u + k * (*v - u));
                }
                assert!(w.is_feasible(1e-9));
                assert!(w.objective(&d) >= best - 1e-9);
            }
        }
    }

    #[test]
    fn csv_dump() {
        let d = scores(&[0.0, 1.0]);
        let w = solve_weights(&d, 1, 5.0).unwrap();
        let mut buf = Vec::new();
        write_weights_csv(&mut buf, &d, &w).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "index,d,w\n0,0,1\n1,1,0\n");
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, usize, f64)> {
        (1usize..=8)
            .prop_flat_map(|n| {
                (
                    prop::collection::vec(-5.0f64..5.0, n),
                    1usize..20,
                    prop_oneof![Just(0.0), 0.0f64..10.0],
                )
            })
    }

    proptest! {
        #[test]
        fn feasible((d, n_u, t) in instance()) {
            let w = solve_weights(&scores(&d), n_u, t).unwrap();
            prop_assert!(w.is_feasible(CONSTRAINT_TOL), "{:?}", w);
        }

        #[test]
        fn monotone((d, n_u, t) in instance()) {
            let w = solve_weights(&scores(&d), n_u, t).unwrap();
            for i in 0..d.len() {
                for j in 0..d.len() {
                    if d[i] < d[j] {
                        prop_assert!(w.values[i] >= w.values[j] - 1e-9);
                    }
                }
            }
        }

        #[test]
        fn shift_invariant((d, n_u, t) in instance(), c in -10.0f64..10.0) {
            let a = solve_weights(&scores(&d), n_u, t).unwrap();
            let shifted: Vec<f64> = d.iter().map(|x| x + c).collect();
            let b = solve_weights(&scores(&shifted), n_u, t).unwrap();
            prop_assert!(close(&a.values, &b.values, 1e-6), "{:?} {:?}", a.values, b.values);
        }

        #[test]
        fn scale_invariant((d, n_u, t) in instance(), c in 0.01f64..100.0) {
            let a = solve_weights(&scores(&d), n_u, t).unwrap();
            let scaled: Vec<f64> = d.iter().map(|x| x * c).collect();
            let b = solve_weights(&scores(&scaled), n_u, t).unwrap();
            prop_assert!(close(&a.values, &b.values, 1e-6), "{:?} {:?}", a.values, b.values);
        }

        #[test]
        fn matches_oracle((d, n_u, t) in instance()) {
            let d = scores(&d);
            let w = solve_weights(&d, n_u, t).unwrap();
            let o = oracle_solve_weights(&d, n_u, t).unwrap();
            prop_assert!((w.objective(&d) - o.objective(&d)).abs() <= 1e-6);
        }
    }
}
