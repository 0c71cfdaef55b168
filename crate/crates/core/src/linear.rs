//! Worst case over rewards `θᵀφ̃(s,a)` with `θ ≥ 0`, where `φ̃` are features
//! whitened under `μ_ref`, subject to `E_ref[θᵀφ̃·p] = r`, `E_ref[θᵀφ̃] = 0` and
//! `E_ref[(θᵀφ̃)²] = 1`.
//!
//! The Lagrangian separates across coordinates. For duals `λ` (with `λ3 < 0`)
//! the minimizing weights are `θ_j = max(0, q_j / (2λ3))` with
//! `q_j = v_j − λ1·d_j − λ2·c_j`, and the dual function
//! `g(λ) = Σ_j (q_j θ_j − λ3 θ_j²) + λ1·r + λ3` is concave. Its stationary point
//! is found by a damped Newton (Levenberg–Marquardt) iteration on `∇g = 0`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::adversary::DualVariables;
use crate::error::{Error, Result};
use crate::linalg::{lu_solve, symmetric_eigen, Matrix};
use crate::math::{abs, dot, norm, sqrt};
use crate::mdp::{OccupancyMeasure, RewardTable, TrajectoryBatch};
use crate::ratio::{LogRatioModel, RatioDirection};

/// Smallest admissible eigenvalue of `Q` before whitening.
pub const SPAN_EIGEN_TOL: f64 = 1e-10;
/// Iterates of `λ3` that reach zero or above are projected here.
pub const LAMBDA3_CEILING: f64 = -1e-8;

/// Per-pair feature vectors, `values[pair * dim + j]`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FeatureMap {
    dim: usize,
    n_pairs: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(n_pairs: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() != n_pairs * dim {
            return Err(Error::shape(format!(
                "feature table has {} entries, expected {n_pairs}x{dim}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features must be finite"));
        }
        Ok(FeatureMap { dim, n_pairs, values })
    }

    /// Builds a map from one column per feature.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let dim = columns.len();
        let n_pairs = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != n_pairs) {
            return Err(Error::shape("feature columns differ in length"));
        }
        let mut values = vec![0.0; n_pairs * dim];
        for (j, col) in columns.iter().enumerate() {
            for (i, x) in col.iter().enumerate() {
                values[i * dim + j] = *x;
            }
        }
        Self::new(n_pairs, dim, values)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_pairs(&self) -> usize {
        self.n_pairs
    }

    pub fn row(&self, pair: usize) -> &[f64] {
        &self.values[pair * self.dim..(pair + 1) * self.dim]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_pairs).map(|i| self.values[i * self.dim + j]).collect()
    }

    /// `Σ_j w_j φ_j(s,a)` for every pair.
    pub fn combine(&self, weights: &[f64]) -> RewardTable {
        RewardTable::new((0..self.n_pairs).map(|i| dot(self.row(i), weights)).collect())
            .expect("finite features and weights")
    }

    /// `E_μ[φ]`.
    pub fn expectation(&self, occ: &OccupancyMeasure) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, m) in occ.mass().iter().enumerate() {
            for (o, f) in out.iter_mut().zip(self.row(i)) {
                *o += m * f;
            }
        }
        out
    }

    /// The listed columns, in the given order.
    pub fn select(&self, columns: &[usize]) -> Result<FeatureMap> {
        if columns.is_empty() || columns.iter().any(|&c| c >= self.dim) {
            return Err(Error::shape(format!("feature columns {columns:?} out of range for dimension {}", self.dim)));
        }
        let values = (0..self.n_pairs).flat_map(|i| columns.iter().map(move |&c| self.values[i * self.dim + c])).collect();
        Ok(FeatureMap { dim: columns.len(), n_pairs: self.n_pairs, values })
    }

    /// Features minus their `occ`-weighted mean, so every combination has mean
    /// zero under `occ`.
    pub fn centered(&self, occ: &OccupancyMeasure) -> Result<FeatureMap> {
        if occ.len() != self.n_pairs || !(occ.total() > 0.0) {
            return Err(Error::shape("features and occupancy differ in length"));
        }
        let total = occ.total();
        let mean: Vec<f64> = self.expectation(occ).into_iter().map(|m| m / total).collect();
        let mut values = self.values.clone();
        for row in values.chunks_mut(self.dim) {
            for (v, m) in row.iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        Ok(FeatureMap { dim: self.dim, n_pairs: self.n_pairs, values })
    }

    fn transformed(&self, w: &Matrix) -> FeatureMap {
        let mut values = Vec::with_capacity(self.values.len());
        for i in 0..self.n_pairs {
            values.extend(w.matvec(self.row(i)));
        }
        FeatureMap { dim: self.dim, n_pairs: self.n_pairs, values }
    }
}

/// `Q = Σ μ_ref φφᵀ`.
pub fn compute_q(occ_ref: &OccupancyMeasure, features: &FeatureMap) -> Result<Matrix> {
    if occ_ref.len() != features.n_pairs {
        return Err(Error::shape("features and occupancy differ in length"));
    }
    let k = features.dim;
    let mut q = Matrix::zeros(k, k);
    for (i, m) in occ_ref.mass().iter().enumerate() {
        if *m == 0.0 {
            continue;
        }
        let f = features.row(i);
        for a in 0..k {
            for b in 0..k {
                q[(a, b)] += m * f[a] * f[b];
            }
        }
    }
    Ok(q)
}

/// Visitation-weighted sums over a batch from `π`, each sample reweighted by a
/// reversed ratio `μ_ref / μ_π`.
fn importance_weights(batch_pi: &TrajectoryBatch, ratio: &LogRatioModel, discount: f64) -> Result<Vec<f64>> {
    if ratio.direction() != RatioDirection::Reversed {
        return Err(Error::invalid("importance weighting needs a reversed-direction ratio model"));
    }
    if ratio.n_pairs() != batch_pi.n_pairs() {
        return Err(Error::shape("ratio model and batch differ in size"));
    }
    let occ = crate::estimators::empirical_occupancy(batch_pi, discount)?;
    let mut w = vec![0.0; occ.len()];
    for (i, m) in occ.mass().iter().enumerate() {
        if *m > 0.0 {
            w[i] = m * ratio.ratio(i).ok_or(Error::Support { pairs: vec![i] })?;
        }
    }
    Ok(w)
}

/// `Q̃ = (1−γ) E_{D_π}[Σ_t γ^t e^{d̄} φφᵀ]` with a reversed ratio model.
pub fn sampled_q(
    batch_pi: &TrajectoryBatch,
    ratio: &LogRatioModel,
    features: &FeatureMap,
    discount: f64,
) -> Result<Matrix> {
    let w = importance_weights(batch_pi, ratio, discount)?;
    compute_q(&OccupancyMeasure::unchecked(w), features)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WhitenedFeatures {
    /// `W = Q^{-1/2}` (symmetric).
    pub transform: Matrix,
    pub features: FeatureMap,
}

/// Whitens features with the symmetric inverse square root of `q`.
pub fn whiten(q: &Matrix, features: &FeatureMap) -> Result<WhitenedFeatures> {
    if q.rows() != features.dim || q.cols() != features.dim {
        return Err(Error::shape("Q does not match the feature dimension"));
    }
    let (vals, vecs) = symmetric_eigen(q)?;
    if vals[0] <= SPAN_EIGEN_TOL {
        let directions = vals
            .iter()
            .enumerate()
            .filter(|(_, v)| **v <= SPAN_EIGEN_TOL)
            .map(|(j, _)| (0..q.rows()).map(|i| vecs[(i, j)]).collect())
            .collect();
        return Err(Error::Span { min_eigenvalue: vals[0], directions });
    }
    let inv_sqrt: Vec<f64> = vals.iter().map(|v| 1.0 / sqrt(*v)).collect();
    let transform = vecs.matmul(&Matrix::diag(&inv_sqrt))?.matmul(&vecs.transpose())?;
    Ok(WhitenedFeatures { features: features.transformed(&transform), transform })
}

/// Coefficients of the dual system in whitened coordinates.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LinearDualStats {
    /// `c_j = E_ref[φ̃_j]`
    pub c_phi: Vec<f64>,
    /// `d_j = E_ref[p·φ̃_j]`
    pub d_phi: Vec<f64>,
    /// `v_j = E_π[φ̃_j]`
    pub v_phi: Vec<f64>,
}

impl LinearDualStats {
    pub fn dim(&self) -> usize {
        self.v_phi.len()
    }

    /// `q_j = v_j − λ1·d_j − λ2·c_j`.
    pub fn q(&self, duals: &DualVariables) -> Vec<f64> {
        (0..self.dim())
            .map(|j| self.v_phi[j] - duals.lambda1 * self.d_phi[j] - duals.lambda2 * self.c_phi[j])
            .collect()
    }
}

pub fn linear_dual_stats(
    occ_pi: &OccupancyMeasure,
    occ_ref: &OccupancyMeasure,
    whitened: &WhitenedFeatures,
    proxy_norm: &RewardTable,
) -> Result<LinearDualStats> {
    let f = &whitened.features;
    if occ_pi.len() != f.n_pairs || occ_ref.len() != f.n_pairs || proxy_norm.len() != f.n_pairs {
        return Err(Error::shape("occupancies, proxy and features differ in length"));
    }
    let weighted = OccupancyMeasure::unchecked(
        occ_ref.mass().iter().zip(proxy_norm.values()).map(|(m, p)| m * p).collect(),
    );
    Ok(LinearDualStats {
        c_phi: f.expectation(occ_ref),
        d_phi: f.expectation(&weighted),
        v_phi: f.expectation(occ_pi),
    })
}

/// Sampled dual statistics from one batch of `π`: `v` by plain averaging, `c`
/// and `d` by importance weighting with a reversed ratio model.
pub fn sampled_linear_dual_stats(
    batch_pi: &TrajectoryBatch,
    ratio: &LogRatioModel,
    whitened: &WhitenedFeatures,
    proxy_norm: &RewardTable,
    discount: f64,
) -> Result<LinearDualStats> {
    let f = &whitened.features;
    let w = importance_weights(batch_pi, ratio, discount)?;
    let occ = crate::estimators::empirical_occupancy(batch_pi, discount)?;
    let weighted = OccupancyMeasure::unchecked(w.iter().zip(proxy_norm.values()).map(|(m, p)| m * p).collect());
    Ok(LinearDualStats {
        c_phi: f.expectation(&OccupancyMeasure::unchecked(w)),
        d_phi: f.expectation(&weighted),
        v_phi: f.expectation(&occ),
    })
}

/// Adversarial weights, in whitened coordinates and mapped back to raw features.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ThetaWeights {
    pub weights: Vec<f64>,
    /// `Wᵀθ`, so that `θᵀφ̃ = (Wᵀθ)ᵀφ`.
    pub unwhitened: Vec<f64>,
}

fn check_lambda3(duals: &DualVariables) -> Result<()> {
    if duals.lambda3 < 0.0 { Ok(()) } else { Err(Error::NonNegativeLambda3(duals.lambda3)) }
}

/// `θ_j = max(0, q_j / (2λ3))` in whitened coordinates.
pub fn theta_weights(duals: &DualVariables, stats: &LinearDualStats) -> Result<Vec<f64>> {
    check_lambda3(duals)?;
    Ok(stats.q(duals).into_iter().map(|q| (q / (2.0 * duals.lambda3)).max(0.0)).collect())
}

pub fn theta_star(duals: &DualVariables, stats: &LinearDualStats, whitened: &WhitenedFeatures) -> Result<ThetaWeights> {
    let weights = theta_weights(duals, stats)?;
    let unwhitened = whitened.transform.transpose().matvec(&weights);
    Ok(ThetaWeights { weights, unwhitened })
}

/// `∇g(λ) = (r − d·θ, −c·θ, 1 − ‖θ‖²)`.
pub fn linear_dual_gradients(duals: &DualVariables, stats: &LinearDualStats, r: f64) -> Result<[f64; 3]> {
    let theta = theta_weights(duals, stats)?;
    Ok([r - dot(&stats.d_phi, &theta), -dot(&stats.c_phi, &theta), 1.0 - dot(&theta, &theta)])
}

/// Dual function value `g(λ)`.
pub fn linear_dual_objective(duals: &DualVariables, stats: &LinearDualStats, r: f64) -> Result<f64> {
    let theta = theta_weights(duals, stats)?;
    let q = stats.q(duals);
    let inner: f64 = q.iter().zip(&theta).map(|(q, t)| q * t - duals.lambda3 * t * t).sum();
    Ok(inner + duals.lambda1 * r + duals.lambda3)
}

/// Jacobian of `∇g`, i.e. the Hessian of `g`, from the active coordinates.
fn dual_hessian(duals: &DualVariables, stats: &LinearDualStats) -> Result<Matrix> {
    let theta = theta_weights(duals, stats)?;
    let q = stats.q(duals);
    let l3 = duals.lambda3;
    let mut h = Matrix::zeros(3, 3);
    for j in 0..stats.dim() {
        // q_j ≤ 0 is the active side; the boundary counts so that the iteration can leave θ_j = 0
        if q[j] > 0.0 {
            continue;
        }
        let dtheta = [-stats.d_phi[j] / (2.0 * l3), -stats.c_phi[j] / (2.0 * l3), -theta[j] / l3];
        let coeff = [stats.d_phi[j], stats.c_phi[j], 2.0 * theta[j]];
        for a in 0..3 {
            for b in 0..3 {
                h[(a, b)] -= coeff[a] * dtheta[b];
            }
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub tol: f64,
    pub initial_damping: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { max_iterations: 500, tol: 1e-6, initial_damping: 1e-3 }
    }
}

/// Starting point `λ = (0, 0, −1)`.
pub const DEFAULT_DUAL_INIT: DualVariables = DualVariables { lambda1: 0.0, lambda2: 0.0, lambda3: -1.0 };

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearDualSolution {
    pub duals: DualVariables,
    pub residual: f64,
    pub iterations: usize,
}

fn project(l: [f64; 3]) -> DualVariables {
    let mut d = DualVariables::from_array(l);
    if !(d.lambda3 < 0.0) {
        d.lambda3 = LAMBDA3_CEILING;
    }
    d
}

/// Solves `∇g(λ) = 0` from `init`.
///
/// Each step solves `(−H + μI) δ = ∇g` and is accepted when it increases the
/// concave dual `g`; `μ` shrinks after accepted steps and grows after rejected
/// ones. `λ3` is projected to `−1e-8` whenever a step would make it nonnegative.
pub fn solve_linear_duals(
    stats: &LinearDualStats,
    r: f64,
    init: DualVariables,
    options: &SolverOptions,
) -> Result<LinearDualSolution> {
    let mut lam = project(init.as_array());
    let mut grad = linear_dual_gradients(&lam, stats, r)?;
    let mut value = linear_dual_objective(&lam, stats, r)?;
    let mut mu = options.initial_damping;
    let mut best = (lam, norm(&grad));
    for iteration in 0..options.max_iterations {
        let residual = norm(&grad);
        if residual < best.1 {
            best = (lam, residual);
        }
        if residual < options.tol {
            return Ok(LinearDualSolution { duals: lam, residual, iterations: iteration });
        }
        let h = dual_hessian(&lam, stats)?;
        let mut accepted = false;
        for _ in 0..60 {
            let mut a = Matrix::identity(3);
            for i in 0..3 {
                for j in 0..3 {
                    a[(i, j)] = -h[(i, j)] + if i == j { mu } else { 0.0 };
                }
            }
            let Ok(delta) = lu_solve(a, &grad) else {
                mu *= 4.0;
                continue;
            };
            let cur = lam.as_array();
            let cand = project([cur[0] + delta[0], cur[1] + delta[1], cur[2] + delta[2]]);
            let cand_value = linear_dual_objective(&cand, stats, r)?;
            if cand_value.is_finite() && cand_value >= value - 1e-15 * value.abs().max(1.0) {
                let cand_grad = linear_dual_gradients(&cand, stats, r)?;
                // flat ascent steps only count when they also reduce the residual
                if cand_value > value || norm(&cand_grad) < residual {
                    lam = cand;
                    grad = cand_grad;
                    value = cand_value;
                    mu = (mu / 3.0).max(1e-12);
                    accepted = true;
                    break;
                }
            }
            mu *= 4.0;
            if mu > 1e20 {
                break;
            }
        }
        if !accepted {
            break;
        }
    }
    let residual = norm(&grad);
    if residual < best.1 {
        best = (lam, residual);
    }
    if best.1 < options.tol {
        return Ok(LinearDualSolution { duals: best.0, residual: best.1, iterations: options.max_iterations });
    }
    Err(Error::DualNonConvergence { best: best.0, residual: best.1, iterations: options.max_iterations })
}

/// Largest feature count for [`enumerate_theta`] (it visits `2^k − 1` faces).
pub const ENUMERATION_MAX_DIM: usize = 16;

/// Exact minimizer of `v·θ` over `{θ ≥ 0, d·θ = r, c·θ = 0, ‖θ‖ = 1}`.
///
/// The dual route relaxes `‖θ‖ = 1` to `‖θ‖ ≤ 1`, which is not tight when the
/// ball minimum is interior (then `λ3 → 0` and the dual never converges). Here
/// every support `S` is tried: on its face the constraint set is a sphere of
/// radius `√(1 − ‖θ₀‖²)` around the min-norm solution `θ₀`, and the linear
/// minimum over it is `θ₀ − ρ·Pv/‖Pv‖` with `P` the projector onto the face's
/// null space.
pub fn enumerate_theta(stats: &LinearDualStats, r: f64) -> Result<Vec<f64>> {
    let k = stats.dim();
    if k == 0 || k > ENUMERATION_MAX_DIM {
        return Err(Error::invalid(format!("enumeration supports 1..={ENUMERATION_MAX_DIM} features, got {k}")));
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1u32 << k) {
        let idx: Vec<usize> = (0..k).filter(|j| mask >> j & 1 == 1).collect();
        let rows = [
            idx.iter().map(|&j| stats.d_phi[j]).collect::<Vec<_>>(),
            idx.iter().map(|&j| stats.c_phi[j]).collect::<Vec<_>>(),
        ];
        let b = [r, 0.0];
        let Some(theta) = face_minimizer(&rows, &b, &idx.iter().map(|&j| stats.v_phi[j]).collect::<Vec<_>>()) else {
            continue;
        };
        let mut full = vec![0.0; k];
        for (&j, t) in idx.iter().zip(&theta) {
            full[j] = t.max(0.0);
        }
        let value = dot(&stats.v_phi, &full);
        if best.as_ref().map_or(true, |(bv, _)| value < *bv) {
            best = Some((value, full));
        }
    }
    best.map(|(_, t)| t).ok_or_else(|| Error::invalid("no nonnegative unit-variance weights have the requested correlation"))
}

fn face_minimizer(rows: &[Vec<f64>; 2], b: &[f64; 2], v: &[f64]) -> Option<Vec<f64>> {
    const TOL: f64 = 1e-10;
    let n = v.len();
    // pseudo-inverse of the 2x2 Gram matrix
    let mut g = Matrix::zeros(2, 2);
    for a in 0..2 {
        for c in 0..2 {
            g[(a, c)] = dot(&rows[a], &rows[c]);
        }
    }
    let (vals, vecs) = symmetric_eigen(&g).ok()?;
    let cutoff = TOL * vals.iter().fold(1.0f64, |m, x| m.max(abs(*x)));
    let ginv = |x: [f64; 2]| -> [f64; 2] {
        let mut out = [0.0; 2];
        for (e, &lam) in vals.iter().enumerate() {
            if lam > cutoff {
                let coef = (vecs[(0, e)] * x[0] + vecs[(1, e)] * x[1]) / lam;
                out[0] += coef * vecs[(0, e)];
                out[1] += coef * vecs[(1, e)];
            }
        }
        out
    };
    let lift = |y: [f64; 2]| -> Vec<f64> { (0..n).map(|i| rows[0][i] * y[0] + rows[1][i] * y[1]).collect() };
    let theta0 = lift(ginv(*b));
    // inconsistent constraints on this face
    for a in 0..2 {
        if abs(dot(&rows[a], &theta0) - b[a]) > 1e-9 {
            return None;
        }
    }
    let n0 = dot(&theta0, &theta0);
    if n0 > 1.0 + 1e-12 {
        return None;
    }
    let radius = sqrt((1.0 - n0).max(0.0));
    let project = |x: &[f64]| -> Vec<f64> {
        let back = lift(ginv([dot(&rows[0], x), dot(&rows[1], x)]));
        x.iter().zip(&back).map(|(a, b)| a - b).collect()
    };
    let rank = vals.iter().filter(|l| **l > cutoff).count();
    let nonneg = |t: &Vec<f64>| t.iter().all(|x| *x > -1e-12);
    let value = |t: &Vec<f64>| dot(v, t);
    let along = |dir: &[f64], sign: f64| -> Vec<f64> {
        let dn = norm(dir);
        theta0.iter().zip(dir).map(|(t, d)| t + sign * radius * d / dn).collect()
    };
    let pv = project(v);
    match n - rank {
        0 => (radius < 1e-9 && nonneg(&theta0)).then_some(theta0),
        // the face sphere is two points; either may be the feasible one
        1 => {
            let dir = if norm(&pv) > 1e-14 {
                pv
            } else {
                (0..n)
                    .map(|i| {
                        let mut e = vec![0.0; n];
                        e[i] = 1.0;
                        project(&e)
                    })
                    .max_by(|a, b| norm(a).total_cmp(&norm(b)))?
            };
            [along(&dir, -1.0), along(&dir, 1.0)]
                .into_iter()
                .filter(nonneg)
                .min_by(|a, b| value(a).total_cmp(&value(b)))
        }
        // a connected sphere: an infeasible minimizer means the optimum sits on a smaller face
        _ if norm(&pv) > 1e-14 => Some(along(&pv, -1.0)).filter(nonneg),
        _ => (radius < 1e-9 && nonneg(&theta0)).then_some(theta0),
    }
}

/// `θᵀφ̃(s,a)` for every pair.
pub fn linear_worst_reward(theta: &ThetaWeights, whitened: &WhitenedFeatures) -> Result<RewardTable> {
    if theta.weights.len() != whitened.features.dim {
        return Err(Error::shape("theta does not match the feature dimension"));
    }
    Ok(whitened.features.combine(&theta.weights))
}

/// Everything the linear adversary produces for one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAdversary {
    pub whitened: WhitenedFeatures,
    pub stats: LinearDualStats,
    pub solution: LinearDualSolution,
    pub theta: ThetaWeights,
    /// `⟨μ_π, θᵀφ̃⟩ = v·θ`.
    pub value: f64,
    /// `θ` came from [`enumerate_theta`] because the dual solve did not
    /// converge; `solution` then holds the best dual iterate.
    pub enumerated: bool,
}

/// Full exact-mode pipeline: `Q`, whitening, dual statistics, dual solve and `θ*`.
pub fn solve_linear_adversary(
    occ_pi: &OccupancyMeasure,
    occ_ref: &OccupancyMeasure,
    features: &FeatureMap,
    proxy_norm: &RewardTable,
    r: f64,
    init: DualVariables,
    options: &SolverOptions,
) -> Result<LinearAdversary> {
    let q = compute_q(occ_ref, features)?;
    let whitened = whiten(&q, features)?;
    let stats = linear_dual_stats(occ_pi, occ_ref, &whitened, proxy_norm)?;
    let (solution, theta, enumerated) = match solve_linear_duals(&stats, r, init, options) {
        Ok(solution) => {
            let theta = theta_star(&solution.duals, &stats, &whitened)?;
            (solution, theta, false)
        }
        Err(Error::DualNonConvergence { best, residual, iterations }) if stats.dim() <= ENUMERATION_MAX_DIM => {
            let weights = enumerate_theta(&stats, r)?;
            let unwhitened = whitened.transform.transpose().matvec(&weights);
            (LinearDualSolution { duals: best, residual, iterations }, ThetaWeights { weights, unwhitened }, true)
        }
        Err(e) => return Err(e),
    };
    let value = dot(&stats.v_phi, &theta.weights);
    Ok(LinearAdversary { whitened, stats, solution, theta, value, enumerated })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn occ(v: &[f64]) -> OccupancyMeasure {
        OccupancyMeasure::new(v.to_vec()).unwrap()
    }

    fn stats(c: &[f64], d: &[f64], v: &[f64]) -> LinearDualStats {
        LinearDualStats { c_phi: c.to_vec(), d_phi: d.to_vec(), v_phi: v.to_vec() }
    }

    #[test]
    fn q_examples() {
        let ones = FeatureMap::new(3, 1, vec![1.0; 3]).unwrap();
        let q = compute_q(&occ(&[0.2, 0.3, 0.5]), &ones).unwrap();
        assert!((q[(0, 0)] - 1.0).abs() < 1e-15);
        let ind = FeatureMap::from_columns(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let q = compute_q(&occ(&[0.5, 0.5]), &ind).unwrap();
        assert_eq!(q, Matrix::diag(&[0.5, 0.5]));
    }

    #[test]
    fn whitening_examples() {
        let f = FeatureMap::from_columns(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap();
        let w = whiten(&Matrix::identity(2), &f).unwrap();
        assert!(w.transform.max_abs_diff(&Matrix::identity(2)) < 1e-15);
        assert!(w.features.values.iter().zip(&f.values).all(|(a, b)| (a - b).abs() < 1e-15));

        let q = Matrix::diag(&[4.0, 0.25]);
        let w = whiten(&q, &f).unwrap();
        assert!(w.transform.max_abs_diff(&Matrix::diag(&[0.5, 2.0])) < 1e-14);
        let wqw = w.transform.matmul(&q).unwrap().matmul(&w.transform.transpose()).unwrap();
        assert!(wqw.max_abs_diff(&Matrix::identity(2)) < 1e-14);

        let singular = Matrix::from_rows(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        match whiten(&singular, &f) {
            Err(Error::Span { directions, .. }) => assert_eq!(directions.len(), 1),
            other => panic!("expected span error, got {other:?}"),
        }
    }

    #[test]
    fn theta_uses_the_minimizing_sign() {
        // q = (0.4, −0.2) with c = (0, 1)... q_j = v_j when λ1 = λ2 = 0
        let s = stats(&[0.0, 1.0], &[1.0, 0.0], &[0.4, -0.2]);
        let d = DualVariables { lambda1: 0.0, lambda2: 0.0, lambda3: -0.5 };
        assert_eq!(theta_weights(&d, &s).unwrap(), vec![0.0, 0.2]);
        let g = linear_dual_gradients(&d, &s, 0.3).unwrap();
        assert!((g[0] - 0.3).abs() < 1e-15 && (g[1] + 0.2).abs() < 1e-15 && (g[2] - 0.96).abs() < 1e-15);
        // all q > 0: every coordinate clipped
        let s = stats(&[0.0, 1.0], &[1.0, 0.0], &[0.4, 0.2]);
        assert_eq!(theta_weights(&d, &s).unwrap(), vec![0.0, 0.0]);
        assert_eq!(linear_dual_gradients(&d, &s, 0.3).unwrap(), [0.3, 0.0, 1.0]);
        let bad = DualVariables { lambda3: 0.1, ..d };
        assert!(matches!(theta_weights(&bad, &s), Err(Error::NonNegativeLambda3(_))));
    }

    #[test]
    fn hessian_matches_finite_differences() {
        let s = stats(&[0.1, -0.3, 0.2], &[0.5, 0.2, -0.4], &[-0.3, 0.1, -0.2]);
        let d = DualVariables { lambda1: 0.2, lambda2: -0.1, lambda3: -0.7 };
        let h = dual_hessian(&d, &s).unwrap();
        let eps = 1e-6;
        for b in 0..3 {
            let mut up = d.as_array();
            let mut dn = d.as_array();
            up[b] += eps;
            dn[b] -= eps;
            let gu = linear_dual_gradients(&DualVariables::from_array(up), &s, 0.4).unwrap();
            let gd = linear_dual_gradients(&DualVariables::from_array(dn), &s, 0.4).unwrap();
            for a in 0..3 {
                let fd = (gu[a] - gd[a]) / (2.0 * eps);
                assert!((fd - h[(a, b)]).abs() < 1e-6, "H[{a},{b}] = {} vs {fd}", h[(a, b)]);
            }
        }
    }

    #[test]
    fn solver_converges_on_interior_instance() {
        // features: e1 = proxy direction, e2 orthogonal, both mean zero under μ_ref
        let s = stats(&[0.0, 0.0], &[1.0, 0.0], &[-0.2, -0.5]);
        let sol = solve_linear_duals(&s, 0.6, DEFAULT_DUAL_INIT, &SolverOptions::default()).unwrap();
        let theta = theta_weights(&sol.duals, &s).unwrap();
        assert!(sol.residual < 1e-6);
        assert!((theta[0] - 0.6).abs() < 1e-6 && (theta[1] - 0.8).abs() < 1e-6);
        assert!((dot(&theta, &theta) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn swapping_features_swaps_weights() {
        let s = stats(&[0.0, 0.0], &[0.0, 1.0], &[-0.5, -0.2]);
        let sol = solve_linear_duals(&s, 0.6, DEFAULT_DUAL_INIT, &SolverOptions::default()).unwrap();
        let theta = theta_weights(&sol.duals, &s).unwrap();
        assert!((theta[0] - 0.8).abs() < 1e-6 && (theta[1] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn infeasible_instance_reports_best_iterate() {
        // θ ≥ 0 cannot reach correlation 0.9 when d ≤ 0
        let s = stats(&[0.0, 0.0], &[-1.0, 0.0], &[0.1, 0.1]);
        let opts = SolverOptions { max_iterations: 50, ..Default::default() };
        assert!(matches!(
            solve_linear_duals(&s, 0.9, DEFAULT_DUAL_INIT, &opts),
            Err(Error::DualNonConvergence { .. })
        ));
    }

    #[test]
    fn enumeration_matches_converged_dual() {
        let s = stats(&[0.0, 0.0], &[0.0, 1.0], &[-0.5, -0.2]);
        let theta = enumerate_theta(&s, 0.6).unwrap();
        assert!((theta[0] - 0.8).abs() < 1e-12 && (theta[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn enumeration_handles_interior_ball_minimum() {
        // the ball minimum (0.6, 0) has norm < 1, so the dual relaxation is loose
        let s = stats(&[0.0, 0.0], &[1.0, 0.0], &[1.0, 1.0]);
        assert!(solve_linear_duals(&s, 0.6, DEFAULT_DUAL_INIT, &SolverOptions::default()).is_err());
        let theta = enumerate_theta(&s, 0.6).unwrap();
        assert!((theta[0] - 0.6).abs() < 1e-12 && (theta[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn enumeration_reports_infeasible_sets() {
        let s = stats(&[0.0, 0.0], &[-1.0, 0.0], &[0.1, 0.1]);
        assert!(enumerate_theta(&s, 0.9).is_err());
    }
}
