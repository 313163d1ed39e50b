//! Loss-weight selection for Pareto training.
//!
//! Given windowed means `mu` and covariance `sigma` of the four losses
//! (natural, PGD, flow, RT), the weights `alpha` minimise
//! `alpha' P alpha` with `P = 8 diag(M) - 2 M`, `M = sigma + mu mu'`,
//! over the simplex intersected with `mu_1 a_1 + mu_2 a_2 + mu_3 a_3 = r`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Matrix4, SymmetricEigen, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COMPONENTS: usize = 4;
pub const RIDGE: f64 = 1e-6;
const MAX_PIVOTS: usize = 100;
const TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossMoments {
    pub mean: [f64; 4],
    pub cov: [[f64; 4]; 4],
    pub window: usize,
    pub seen: usize,
}

impl LossMoments {
    /// Moments with zero spread plus the ridge, for tests and bootstrapping.
    pub fn from_mean(mean: [f64; 4]) -> Self {
        let mut cov = [[0.0; 4]; 4];
        for (i, row) in cov.iter_mut().enumerate() {
            row[i] = RIDGE;
        }
        LossMoments {
            mean,
            cov,
            window: 1,
            seen: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = self.mean.iter().chain(self.cov.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::numerical("loss moments contain non-finite values"));
        }
        for i in 0..4 {
            for j in 0..i {
                if (self.cov[i][j] - self.cov[j][i]).abs() > 1e-12 * (1.0 + self.cov[i][j].abs()) {
                    return Err(Error::input("loss covariance is not symmetric"));
                }
            }
        }
        Ok(())
    }
}

/// Mean and unbiased covariance of the most recent `min(window, len)`
/// loss vectors, with `RIDGE * I` added to the covariance. Fewer than two
/// samples in the window gives a zero covariance before the ridge.
pub fn estimate_moments(history: &[[f64; 4]], window: usize) -> Result<LossMoments> {
    if history.is_empty() {
        return Err(Error::State("no loss samples recorded yet".into()));
    }
    if window == 0 {
        return Err(Error::input("moment window must be at least 1"));
    }
    let used = &history[history.len() - window.min(history.len())..];
    let n = used.len() as f64;
    let mut mean = [0.0; 4];
    for s in used {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n;
        }
    }
    let mut cov = [[0.0; 4]; 4];
    if used.len() >= 2 {
        for s in used {
            for i in 0..4 {
                for j in 0..4 {
                    cov[i][j] += (s[i] - mean[i]) * (s[j] - mean[j]) / (n - 1.0);
                }
            }
        }
    }
    for (i, row) in cov.iter_mut().enumerate() {
        row[i] += RIDGE;
    }
    Ok(LossMoments {
        mean,
        cov,
        window,
        seen: history.len(),
    })
}

/// Ring buffer of per-step component losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    window: usize,
    samples: VecDeque<[f64; 4]>,
    seen: usize,
}

impl LossHistory {
    pub fn new(window: usize) -> Self {
        LossHistory {
            window: window.max(1),
            samples: VecDeque::new(),
            seen: 0,
        }
    }

    pub fn push(&mut self, sample: [f64; 4]) {
        if self.samples.len() == self.window {
            self.samples.pop_front();
        }
        self.samples.push_back(sample);
        self.seen += 1;
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn moments(&self) -> Result<LossMoments> {
        let samples: Vec<[f64; 4]> = self.samples.iter().copied().collect();
        let mut m = estimate_moments(&samples, self.window)?;
        m.seen = self.seen;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoWeights {
    pub alpha: [f64; 4],
}

impl ParetoWeights {
    pub fn uniform() -> Self {
        ParetoWeights { alpha: [0.25; 4] }
    }

    /// Total weight on the three adversarial losses.
    pub fn robust_mass(&self) -> f64 {
        self.alpha[1..].iter().sum()
    }

    pub fn on_simplex(&self) -> bool {
        self.alpha.iter().all(|a| *a >= -1e-9) && (self.alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpProblem {
    pub p: [[f64; 4]; 4],
    pub mean: [f64; 4],
    pub second_moment: [[f64; 4]; 4],
    pub r_requested: f64,
    /// Robustness level after clamping into the achievable range.
    pub r: f64,
    pub clamped: bool,
}

impl QpProblem {
    pub fn objective(&self, alpha: &[f64; 4]) -> f64 {
        let p = Matrix4::from_fn(|i, j| self.p[i][j]);
        let a = Vector4::from_column_slice(alpha);
        a.dot(&(p * a))
    }

    /// `sum_{i,j} E[(a_i L_i - a_j L_j)^2]` written out through the second
    /// moments, independent of how `P` was assembled.
    pub fn pairwise_objective(&self, alpha: &[f64; 4]) -> f64 {
        let m = &self.second_moment;
        let mut total = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                total +=
                    alpha[i] * alpha[i] * m[i][i] + alpha[j] * alpha[j] * m[j][j] - 2.0 * alpha[i] * alpha[j] * m[i][j];
            }
        }
        total
    }

    /// Residuals of the two equality rows, `(robust row, sum row)`.
    pub fn residuals(&self, alpha: &[f64; 4]) -> (f64, f64) {
        let robust: f64 = (1..4).map(|i| self.mean[i] * alpha[i]).sum();
        (robust - self.r, alpha.iter().sum::<f64>() - 1.0)
    }

    fn dump(&self) -> String {
        serde_json::to_string(self).unwrap_or_else(|_| format!("{self:?}"))
    }
}

pub fn build_qp(moments: &LossMoments, r: f64) -> Result<QpProblem> {
    moments.validate()?;
    if !r.is_finite() {
        return Err(Error::input(format!("robustness level r must be finite, got {r}")));
    }
    let mu = moments.mean;
    let mut m = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            m[i][j] = moments.cov[i][j] + mu[i] * mu[j];
        }
    }
    let mut p = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            p[i][j] = -2.0 * m[i][j];
        }
        p[i][i] += 8.0 * m[i][i];
    }
    let top = mu[1].max(mu[2]).max(mu[3]);
    if top <= 0.0 && r > 0.0 {
        return Err(Error::Infeasible(format!(
            "no adversarial loss mean is positive ({mu:?}) but r = {r}"
        )));
    }
    let r_eff = r.clamp(0.0, top.max(0.0));
    let clamped = r_eff != r;
    if clamped {
        log::warn!(
            "robustness level {r} clamped to {r_eff} (adversarial means {:?})",
            &mu[1..]
        );
    }
    Ok(QpProblem {
        p,
        mean: mu,
        second_moment: m,
        r_requested: r,
        r: r_eff,
        clamped,
    })
}

fn rank(rows: &[Vector4<f64>]) -> usize {
    if rows.is_empty() {
        return 0;
    }
    let a = DMatrix::from_fn(rows.len(), 4, |i, j| rows[i][j]);
    a.rank(1e-10)
}

/// Orthonormal basis of the null space of the stacked rows.
fn null_space(rows: &[Vector4<f64>]) -> Vec<Vector4<f64>> {
    let mut gram = Matrix4::zeros();
    for r in rows {
        gram += r * r.transpose();
    }
    let scale = gram.diagonal().max().max(1.0);
    let eig = SymmetricEigen::new(gram);
    (0..4)
        .filter(|&k| eig.eigenvalues[k].abs() <= 1e-10 * scale)
        .map(|k| eig.eigenvectors.column(k).into_owned())
        .collect()
}

fn feasible_start(problem: &QpProblem) -> [f64; 4] {
    let mu = problem.mean;
    let k = (1..4).max_by(|&a, &b| mu[a].total_cmp(&mu[b]).then(b.cmp(&a))).unwrap();
    let mut alpha = [0.0; 4];
    if mu[k] > 0.0 {
        alpha[k] = problem.r / mu[k];
        alpha[0] = 1.0 - alpha[k];
    } else {
        alpha[0] = 1.0;
    }
    alpha
}

/// Primal active-set method on the four weights.
///
/// The feasible set is compact, so every descent direction (including
/// zero-curvature ones when `P` is singular on the working face) is
/// stopped by a bound.
pub fn solve_qp(problem: &QpProblem) -> Result<ParetoWeights> {
    let p = Matrix4::from_fn(|i, j| problem.p[i][j]);
    let eq_rows = [
        Vector4::new(0.0, problem.mean[1], problem.mean[2], problem.mean[3]),
        Vector4::new(1.0, 1.0, 1.0, 1.0),
    ];
    let unit = |i: usize| {
        let mut e = Vector4::zeros();
        e[i] = 1.0;
        e
    };
    let mut alpha = Vector4::from_column_slice(&feasible_start(problem));
    let mut working: Vec<usize> = Vec::new();
    for i in 0..4 {
        if alpha[i] == 0.0 {
            let mut rows = eq_rows.to_vec();
            rows.extend(working.iter().map(|&w| unit(w)));
            let before = rank(&rows);
            rows.push(unit(i));
            if rank(&rows) > before {
                working.push(i);
            }
        }
    }

    // Set after a full, unblocked Newton step: the iterate then minimises
    // over the working face and only the multipliers remain to be checked.
    let mut on_face_minimum = false;
    for _ in 0..MAX_PIVOTS {
        let mut rows = eq_rows.to_vec();
        rows.extend(working.iter().map(|&w| unit(w)));
        let z = null_space(&rows);
        let g = 2.0 * p * alpha;

        let step = if z.is_empty() || on_face_minimum {
            None
        } else {
            let zm = DMatrix::from_fn(4, z.len(), |i, k| z[k][i]);
            let pd = DMatrix::from_fn(4, 4, |i, j| p[(i, j)]);
            let h = 2.0 * (zm.transpose() * &pd * &zm);
            let rhs = -(zm.transpose() * DVector::from_column_slice(g.as_slice()));
            let eig = SymmetricEigen::new(h);
            let hscale = eig.eigenvalues.amax().max(1.0);
            let mut newton = DVector::zeros(z.len());
            let mut ray = DVector::zeros(z.len());
            for k in 0..z.len() {
                let v = eig.eigenvectors.column(k);
                let c = v.dot(&rhs);
                if eig.eigenvalues[k] > 1e-12 * hscale {
                    newton += v * (c / eig.eigenvalues[k]);
                } else if c.abs() > 1e-12 * (1.0 + g.norm()) {
                    ray += v * c;
                }
            }
            let to4 = |d: DVector<f64>| {
                let full = &zm * d;
                Vector4::from_column_slice(full.as_slice())
            };
            if ray.norm() > 0.0 {
                Some((to4(ray), true))
            } else {
                let d = to4(newton);
                if d.norm() > 1e-12 {
                    Some((d, false))
                } else {
                    None
                }
            }
        };

        match step {
            None => {
                // Stationary on the working face: check bound multipliers.
                let cols = 2 + working.len();
                let a = DMatrix::from_fn(
                    4,
                    cols,
                    |i, c| if c < 2 { eq_rows[c][i] } else { unit(working[c - 2])[i] },
                );
                let gd = DVector::from_column_slice(g.as_slice());
                let lambda = a
                    .pseudo_inverse(1e-12)
                    .map_err(|e| Error::numerical(format!("KKT multipliers: {e}")))?
                    * gd;
                let gscale = 1e-9 * (1.0 + g.amax());
                let worst = (0..working.len())
                    .map(|k| (k, lambda[2 + k]))
                    .filter(|(_, l)| *l < -gscale)
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                match worst {
                    Some((k, _)) => {
                        working.remove(k);
                    }
                    None => return Ok(finish(alpha)),
                }
                on_face_minimum = false;
            }
            Some((d, unbounded)) => {
                let mut t = if unbounded { f64::INFINITY } else { 1.0 };
                let mut blocking = None;
                for i in 0..4 {
                    if working.contains(&i) || d[i] >= -TOL {
                        continue;
                    }
                    let ti = (alpha[i] / -d[i]).max(0.0);
                    if ti < t {
                        t = ti;
                        blocking = Some(i);
                    }
                }
                if !t.is_finite() {
                    return Err(Error::numerical(format!(
                        "unbounded descent direction in QP {}",
                        problem.dump()
                    )));
                }
                alpha += d * t;
                match blocking {
                    Some(i) => {
                        alpha[i] = 0.0;
                        working.push(i);
                    }
                    None => on_face_minimum = !unbounded,
                }
            }
        }
    }
    Err(Error::numerical(format!(
        "QP active set did not settle within {MAX_PIVOTS} pivots: {}",
        problem.dump()
    )))
}

fn finish(alpha: Vector4<f64>) -> ParetoWeights {
    let mut a = [0.0; 4];
    for (dst, src) in a.iter_mut().zip(alpha.iter()) {
        *dst = if src.abs() < 1e-15 { 0.0 } else { *src };
    }
    ParetoWeights { alpha: a }
}

/// Brute-force minimiser over a lattice of step `grid_step`.
///
/// Two of the three adversarial weights (all but the one with the largest
/// mean) and the natural weight range over the lattice; the remaining
/// adversarial weight is solved from the `r` row, so every candidate is
/// exactly feasible. If that weight has a non-positive mean, the scan falls
/// back to the full four-weight lattice with a hyperplane tolerance of
/// `grid_step * max|mu|`, doubled once before giving up.
pub fn simplex_oracle(problem: &QpProblem, grid_step: f64) -> Result<ParetoWeights> {
    if !(grid_step > 0.0 && grid_step <= 0.5) {
        return Err(Error::input(format!("grid step must lie in (0, 0.5], got {grid_step}")));
    }
    let n = (1.0 / grid_step).round() as usize;
    let step = 1.0 / n as f64;
    let mu = problem.mean;
    let j = (1..4).max_by(|&a, &b| mu[a].total_cmp(&mu[b]).then(b.cmp(&a))).unwrap();
    let others: Vec<usize> = (1..4).filter(|&i| i != j).collect();
    let mut best: Option<([f64; 4], f64)> = None;
    let consider = |best: &mut Option<([f64; 4], f64)>, alpha: [f64; 4]| {
        let obj = problem.pairwise_objective(&alpha);
        if best.is_none_or(|(_, b)| obj < b) {
            *best = Some((alpha, obj));
        }
    };
    if mu[j] > 0.0 {
        for a in 0..=n {
            for b in 0..=n - a {
                let (x, y) = (a as f64 * step, b as f64 * step);
                let aj = (problem.r - mu[others[0]] * x - mu[others[1]] * y) / mu[j];
                let a0 = 1.0 - x - y - aj;
                if aj < -1e-12 || a0 < -1e-12 {
                    continue;
                }
                let mut alpha = [0.0; 4];
                alpha[others[0]] = x;
                alpha[others[1]] = y;
                alpha[j] = aj.max(0.0);
                alpha[0] = a0.max(0.0);
                consider(&mut best, alpha);
            }
        }
    } else {
        let scale = mu.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        for widen in [1.0, 2.0] {
            let tol = grid_step * scale * widen;
            for a in 0..=n {
                for b in 0..=n - a {
                    for c in 0..=n - a - b {
                        let alpha = [
                            (n - a - b - c) as f64 * step,
                            a as f64 * step,
                            b as f64 * step,
                            c as f64 * step,
                        ];
                        if problem.residuals(&alpha).0.abs() <= tol {
                            consider(&mut best, alpha);
                        }
                    }
                }
            }
            if best.is_some() {
                break;
            }
        }
    }
    best.map(|(alpha, _)| ParetoWeights { alpha })
        .ok_or_else(|| Error::Infeasible(format!("no lattice point satisfies {}", problem.dump())))
}
