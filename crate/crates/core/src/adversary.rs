//! Worst case over the unstructured correlation set
//! `{R : E_ref[R] = M, Var_ref[R] = V², corr_ref(R, proxy) = r}`.
//!
//! Everything here is phrased in terms of the normalized proxy `p` (mean 0,
//! variance 1 under `μ_ref`), the ratio `L = μ_π / μ_ref`, `χ² = E_ref[L²] − 1`,
//! `E = E_π[p]` and `h = χ² − E² ≥ 0`. The inner minimum is
//! `r·V·E − V·√(1−r²)·√h + M`.

use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::estimators::check_support;
use crate::math::{abs, dot, norm, sqrt};
use crate::mdp::{OccupancyMeasure, RewardTable};
use crate::ratio::LogRatioModel;

/// Floor on `h` inside square roots.
pub const EPS_H: f64 = 1e-12;

const NORMALIZATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CorrelationSpec {
    r: f64,
    mean_m: f64,
    std_v: f64,
}

impl CorrelationSpec {
    pub fn new(r: f64, mean_m: f64, std_v: f64) -> Result<Self> {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::invalid(alloc::format!("correlation must lie in (0, 1], got {r}")));
        }
        if !(std_v > 0.0) || !std_v.is_finite() || !mean_m.is_finite() {
            return Err(Error::invalid(alloc::format!("need finite M and V > 0, got M={mean_m}, V={std_v}")));
        }
        Ok(CorrelationSpec { r, mean_m, std_v })
    }

    /// `M = 0`, `V = 1`.
    pub fn standard(r: f64) -> Result<Self> {
        Self::new(r, 0.0, 1.0)
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn mean_m(&self) -> f64 {
        self.mean_m
    }

    pub fn std_v(&self) -> f64 {
        self.std_v
    }

    /// `√(1 − r²)`.
    pub fn slack(&self) -> f64 {
        sqrt((1.0 - self.r * self.r).max(0.0))
    }

    pub fn with_r(&self, r: f64) -> Result<Self> {
        Self::new(r, self.mean_m, self.std_v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DualVariables {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl DualVariables {
    pub fn as_array(&self) -> [f64; 3] {
        [self.lambda1, self.lambda2, self.lambda3]
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        DualVariables { lambda1: v[0], lambda2: v[1], lambda3: v[2] }
    }
}

/// Closed-form duals, tagged with how they were obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum DualSolution {
    Regular(DualVariables),
    /// `h < ε_h`: `λ3` uses `√ε_h` in place of `√h`.
    Degenerate(DualVariables),
    /// `r = 1`: the set is the single reward `M + V·p`, no finite `λ3` exists.
    PerfectCorrelation,
}

impl DualSolution {
    pub fn duals(&self) -> Option<&DualVariables> {
        match self {
            DualSolution::Regular(d) | DualSolution::Degenerate(d) => Some(d),
            DualSolution::PerfectCorrelation => None,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self, DualSolution::Degenerate(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RobustStats {
    pub chi2: f64,
    pub proxy_mean_pi: f64,
    /// `χ² − E²`, clamped at zero.
    pub h: f64,
}

impl RobustStats {
    /// Assembles stats from (possibly estimated) `χ²` and `E`.
    pub fn new(chi2: f64, proxy_mean_pi: f64) -> Self {
        RobustStats { chi2, proxy_mean_pi, h: (chi2 - proxy_mean_pi * proxy_mean_pi).max(0.0) }
    }

    /// Like [`RobustStats::new`] with an independently estimated `E²`
    /// (double sampling) in the radicand.
    pub fn with_squared_mean(chi2: f64, proxy_mean_pi: f64, proxy_mean_sq: f64) -> Self {
        RobustStats { chi2, proxy_mean_pi, h: (chi2 - proxy_mean_sq).max(0.0) }
    }

    pub fn is_degenerate(&self) -> bool {
        self.h < EPS_H
    }
}

/// Checks `E_ref[p] = 0` and `E_ref[p²] = 1` within `1e-6`.
pub fn check_normalized(occ_ref: &OccupancyMeasure, proxy_norm: &RewardTable) -> Result<()> {
    if occ_ref.len() != proxy_norm.len() {
        return Err(Error::shape("proxy and occupancy differ in length"));
    }
    let mean = occ_ref.expect(proxy_norm.values());
    let second: f64 = occ_ref.mass().iter().zip(proxy_norm.values()).map(|(m, p)| m * p * p).sum();
    if abs(mean) > NORMALIZATION_TOL || abs(second - 1.0) > NORMALIZATION_TOL {
        return Err(Error::NotNormalized { mean, second_moment: second });
    }
    Ok(())
}

/// `χ²`, `E_π[p]` and `h` from exact occupancies.
pub fn robust_stats(
    occ_pi: &OccupancyMeasure,
    occ_ref: &OccupancyMeasure,
    proxy_norm: &RewardTable,
) -> Result<RobustStats> {
    check_support(occ_pi, occ_ref)?;
    check_normalized(occ_ref, proxy_norm)?;
    let chi2 = crate::estimators::chi_squared(occ_pi, occ_ref)?;
    Ok(RobustStats::new(chi2, occ_pi.expect(proxy_norm.values())))
}

/// Closed-form duals of the inner problem.
pub fn dual_solution(stats: &RobustStats, spec: &CorrelationSpec) -> DualSolution {
    if spec.r >= 1.0 {
        return DualSolution::PerfectCorrelation;
    }
    let v = spec.std_v;
    let degenerate = stats.is_degenerate();
    let root = sqrt(stats.h.max(EPS_H));
    let lambda3 = -root / (2.0 * v * spec.slack());
    let lambda2 = 1.0 - 2.0 * lambda3 * spec.mean_m;
    let lambda1 = v * stats.proxy_mean_pi - 2.0 * spec.r * lambda3 * v * v;
    let duals = DualVariables { lambda1, lambda2, lambda3 };
    if degenerate { DualSolution::Degenerate(duals) } else { DualSolution::Regular(duals) }
}

/// `r·V·E − V·√(1−r²)·√h + M`.
pub fn robust_value(stats: &RobustStats, spec: &CorrelationSpec) -> f64 {
    spec.std_v * improvement_lower_bound(stats, spec) + spec.mean_m
}

/// `r·E − √(1−r²)·√h`: guaranteed improvement over the reference for any
/// normalized true reward in the set.
pub fn improvement_lower_bound(stats: &RobustStats, spec: &CorrelationSpec) -> f64 {
    spec.r * stats.proxy_mean_pi - spec.slack() * sqrt(stats.h)
}

/// A reward known only on part of the state-action space.
pub trait PartialReward {
    fn n_pairs(&self) -> usize;
    fn get(&self, pair: usize) -> Option<f64>;
}

impl PartialReward for RewardTable {
    fn n_pairs(&self) -> usize {
        self.len()
    }

    fn get(&self, pair: usize) -> Option<f64> {
        Some(self.values()[pair])
    }
}

/// Worst-case reward; `None` marks pairs the reference never visits, where the
/// set places no constraint at all.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdversarialReward {
    values: Vec<Option<f64>>,
}

impl AdversarialReward {
    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    /// `Σ_seen μ_π R*`.
    pub fn seen_return(&self, occ_pi: &OccupancyMeasure) -> f64 {
        self.values.iter().zip(occ_pi.mass()).filter_map(|(r, m)| r.map(|r| r * m)).sum()
    }

    /// Occupancy mass of `occ_pi` on unseen pairs.
    pub fn unseen_mass(&self, occ_pi: &OccupancyMeasure) -> f64 {
        self.values.iter().zip(occ_pi.mass()).filter(|(r, _)| r.is_none()).map(|(_, m)| m).sum()
    }

    /// Dense table with `fill` on unseen pairs.
    pub fn filled(&self, fill: f64) -> RewardTable {
        RewardTable::new(self.values.iter().map(|r| r.unwrap_or(fill)).collect())
            .expect("adversarial rewards are finite")
    }
}

impl PartialReward for AdversarialReward {
    fn n_pairs(&self) -> usize {
        self.values.len()
    }

    fn get(&self, pair: usize) -> Option<f64> {
        self.values[pair]
    }
}

/// `R* = (L − λ1·p/V − λ2) / (2λ3)` wherever the ratio is defined.
pub fn worst_case_reward(
    ratio: &LogRatioModel,
    proxy_norm: &RewardTable,
    duals: &DualVariables,
    spec: &CorrelationSpec,
) -> Result<AdversarialReward> {
    if !(duals.lambda3 < 0.0) {
        return Err(Error::NonNegativeLambda3(duals.lambda3));
    }
    if ratio.n_pairs() != proxy_norm.len() {
        return Err(Error::shape("ratio model and proxy differ in length"));
    }
    let values = proxy_norm
        .values()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            ratio
                .ratio(i)
                .map(|l| (l - duals.lambda1 * p / spec.std_v - duals.lambda2) / (2.0 * duals.lambda3))
        })
        .collect();
    Ok(AdversarialReward { values })
}

/// [`worst_case_reward`] for any [`DualSolution`], including `r = 1` where the
/// worst case is `M + V·p`.
pub fn adversarial_reward(
    ratio: &LogRatioModel,
    proxy_norm: &RewardTable,
    solution: &DualSolution,
    spec: &CorrelationSpec,
) -> Result<AdversarialReward> {
    match solution.duals() {
        Some(d) => worst_case_reward(ratio, proxy_norm, d, spec),
        None => {
            if ratio.n_pairs() != proxy_norm.len() {
                return Err(Error::shape("ratio model and proxy differ in length"));
            }
            let values = proxy_norm
                .values()
                .iter()
                .enumerate()
                .map(|(i, p)| ratio.ratio(i).map(|_| spec.mean_m + spec.std_v * p))
                .collect();
            Ok(AdversarialReward { values })
        }
    }
}

/// Worst case when `μ_π` may also put mass on pairs the reference never visits.
///
/// Only the seen part `m = Σ_seen μ_π` is constrained. With `L = μ_π/μ_ref` on
/// the seen pairs, the same closed form holds with `λ2 = m − 2λ3M` and
/// `h = E_ref[L²] − m² − E²`; the returned stats carry `E_ref[L²] − m²` in place
/// of `χ²`. Without unseen mass this is exactly [`adversarial_reward`].
pub fn seen_adversarial_reward(
    occ_pi: &OccupancyMeasure,
    occ_ref: &OccupancyMeasure,
    proxy_norm: &RewardTable,
    spec: &CorrelationSpec,
) -> Result<(AdversarialReward, RobustStats)> {
    if occ_pi.len() != occ_ref.len() || proxy_norm.len() != occ_ref.len() {
        return Err(Error::shape("occupancies and proxy differ in length"));
    }
    check_normalized(occ_ref, proxy_norm)?;
    let (mut seen, mut second, mut e) = (0.0, 0.0, 0.0);
    for ((pi, w), p) in occ_pi.mass().iter().zip(occ_ref.mass()).zip(proxy_norm.values()) {
        if *w > 0.0 {
            seen += pi;
            second += pi * pi / w;
            e += pi * p;
        }
    }
    let stats = RobustStats::new(second - seen * seen, e);
    let (m, v) = (spec.mean_m, spec.std_v);
    let solution = dual_solution(&stats, spec);
    let values = occ_pi
        .mass()
        .iter()
        .zip(occ_ref.mass())
        .zip(proxy_norm.values())
        .map(|((pi, w), p)| {
            if *w <= 0.0 {
                return None;
            }
            Some(match solution.duals() {
                Some(d) => {
                    let lambda2 = seen - 2.0 * d.lambda3 * m;
                    (pi / w - d.lambda1 * p / v - lambda2) / (2.0 * d.lambda3)
                }
                None => m + v * p,
            })
        })
        .collect();
    Ok((AdversarialReward { values }, stats))
}

/// Residuals of the three equality constraints under `μ_ref`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FeasibilityReport {
    /// `|E_ref[R] − M|`
    pub mean_residual: f64,
    /// `|E_ref[R²] − (M² + V²)|`
    pub second_moment_residual: f64,
    /// `|E_ref[R·p] − r·V|`
    pub correlation_residual: f64,
    /// Pearson correlation of `R` with the proxy, for reporting.
    pub correlation: f64,
    pub tol: f64,
    pub passed: bool,
}

pub fn feasibility_check(
    candidate: &dyn PartialReward,
    occ_ref: &OccupancyMeasure,
    proxy_norm: &RewardTable,
    spec: &CorrelationSpec,
    tol: f64,
) -> Result<FeasibilityReport> {
    if candidate.n_pairs() != occ_ref.len() || proxy_norm.len() != occ_ref.len() {
        return Err(Error::shape("candidate, proxy and occupancy differ in length"));
    }
    let (mut m1, mut m2, mut mp) = (0.0, 0.0, 0.0);
    let mut missing = Vec::new();
    for (i, w) in occ_ref.mass().iter().enumerate() {
        if *w <= 0.0 {
            continue;
        }
        match candidate.get(i) {
            Some(r) => {
                let p = proxy_norm.values()[i];
                m1 += w * r;
                m2 += w * r * r;
                mp += w * r * p;
            }
            None => missing.push(i),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Support { pairs: missing });
    }
    let (m, v, r) = (spec.mean_m, spec.std_v, spec.r);
    let mean_residual = abs(m1 - m);
    let second_moment_residual = abs(m2 - (m * m + v * v));
    let correlation_residual = abs(mp - r * v);
    let var = (m2 - m1 * m1).max(0.0);
    let p_mean = occ_ref.expect(proxy_norm.values());
    let p_var: f64 = occ_ref
        .mass()
        .iter()
        .zip(proxy_norm.values())
        .map(|(w, p)| w * (p - p_mean) * (p - p_mean))
        .sum();
    let correlation = if var > 0.0 && p_var > 0.0 { (mp - m1 * p_mean) / sqrt(var * p_var) } else { 0.0 };
    let passed = mean_residual < tol && second_moment_residual < tol && correlation_residual < tol;
    Ok(FeasibilityReport { mean_residual, second_moment_residual, correlation_residual, correlation, tol, passed })
}

/// The feasible set written as `center + z`, where `z` ranges over a sphere of
/// radius `ρ` in the `μ_ref`-orthogonal complement of `{1, p}`.
///
/// Built by Gram-Schmidt directly from `μ_ref` and `p`, without using the
/// closed-form duals, so it serves as an independent check on them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibleSphere {
    n_pairs: usize,
    support: Vec<usize>,
    sqrt_w: Vec<f64>,
    /// Euclidean-orthonormal images `√μ_ref·ê0`, `√μ_ref·ê1` on the support.
    b0: Vec<f64>,
    b1: Vec<f64>,
    center: Vec<f64>,
    radius: f64,
}

impl FeasibleSphere {
    pub fn new(occ_ref: &OccupancyMeasure, proxy_norm: &RewardTable, spec: &CorrelationSpec) -> Result<Self> {
        if occ_ref.len() != proxy_norm.len() {
            return Err(Error::shape("proxy and occupancy differ in length"));
        }
        let support: Vec<usize> = (0..occ_ref.len()).filter(|&i| occ_ref.mass()[i] > 0.0).collect();
        if support.len() < 3 {
            return Err(Error::invalid(alloc::format!(
                "sphere oracle needs at least 3 supported pairs, got {}",
                support.len()
            )));
        }
        let sqrt_w: Vec<f64> = support.iter().map(|&i| sqrt(occ_ref.mass()[i])).collect();
        let p: Vec<f64> = support.iter().map(|&i| proxy_norm.values()[i]).collect();
        // Euclidean picture: u ↦ √w·u maps the μ_ref inner product to the dot product
        let m0 = dot(&sqrt_w, &sqrt_w);
        let b0: Vec<f64> = sqrt_w.iter().map(|s| s / sqrt(m0)).collect();
        let wp: Vec<f64> = sqrt_w.iter().zip(&p).map(|(s, p)| s * p).collect();
        let proj = dot(&wp, &b0);
        let pc: Vec<f64> = wp.iter().zip(&b0).map(|(x, b)| x - proj * b).collect();
        let pc_norm = norm(&pc);
        if pc_norm <= 1e-12 {
            return Err(Error::DegenerateProxy { variance: pc_norm * pc_norm });
        }
        let b1: Vec<f64> = pc.iter().map(|x| x / pc_norm).collect();
        let (m, v) = (spec.mean_m, spec.std_v);
        // coefficients along ê0 = 1/√m0 and ê1 in the μ_ref inner product
        let a0 = m / sqrt(m0);
        let a1 = (spec.r * v - a0 * proj) / pc_norm;
        let rho2 = m * m + v * v - a0 * a0 - a1 * a1;
        if rho2 < -1e-9 * (m * m + v * v) {
            return Err(Error::Numerical(alloc::format!("feasible set is empty (radius² = {rho2:e})")));
        }
        let center = (0..support.len()).map(|k| (a0 * b0[k] + a1 * b1[k]) / sqrt_w[k]).collect();
        Ok(FeasibleSphere {
            n_pairs: occ_ref.len(),
            support,
            sqrt_w,
            b0,
            b1,
            center,
            radius: sqrt(rho2.max(0.0)),
        })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    fn project_out(&self, u: &mut [f64]) {
        for b in [&self.b0, &self.b1] {
            let c = dot(u, b);
            for (x, y) in u.iter_mut().zip(b.iter()) {
                *x -= c * y;
            }
        }
    }

    fn assemble(&self, dir: &[f64], scale: f64) -> RewardTable {
        let mut out = vec![0.0; self.n_pairs];
        for (k, &i) in self.support.iter().enumerate() {
            out[i] = self.center[k] + scale * dir[k] / self.sqrt_w[k];
        }
        RewardTable::new(out).expect("sphere points are finite")
    }

    /// `√μ_ref·L` restricted to the support, with the `{1, p}` components removed.
    fn ratio_residual(&self, occ_pi: &OccupancyMeasure) -> Vec<f64> {
        let mut u: Vec<f64> = self
            .support
            .iter()
            .zip(&self.sqrt_w)
            .map(|(&i, s)| occ_pi.mass()[i] / s)
            .collect();
        self.project_out(&mut u);
        u
    }

    fn check_occupancy(&self, occ_pi: &OccupancyMeasure) -> Result<()> {
        if occ_pi.len() != self.n_pairs {
            return Err(Error::shape("occupancy does not match the sphere"));
        }
        let mut on_support = vec![false; self.n_pairs];
        self.support.iter().for_each(|&i| on_support[i] = true);
        let pairs: Vec<usize> =
            (0..self.n_pairs).filter(|&i| !on_support[i] && occ_pi.mass()[i] > 0.0).collect();
        if pairs.is_empty() { Ok(()) } else { Err(Error::Support { pairs }) }
    }

    /// `min ⟨μ_π, R⟩` over the set, by projecting `L` onto the sphere's subspace.
    pub fn analytic_min(&self, occ_pi: &OccupancyMeasure) -> Result<f64> {
        self.check_occupancy(occ_pi)?;
        let base: f64 = self.support.iter().zip(&self.center).map(|(&i, c)| occ_pi.mass()[i] * c).sum();
        Ok(base - self.radius * norm(&self.ratio_residual(occ_pi)))
    }

    /// The minimizing reward (zero off the support).
    pub fn minimizer(&self, occ_pi: &OccupancyMeasure) -> Result<RewardTable> {
        self.check_occupancy(occ_pi)?;
        let mut u = self.ratio_residual(occ_pi);
        let mut n = norm(&u);
        if n <= 1e-300 {
            // every sphere point is optimal; pick a deterministic one
            for k in 0..u.len() {
                u.iter_mut().for_each(|x| *x = 0.0);
                u[k] = 1.0;
                self.project_out(&mut u);
                n = norm(&u);
                if n > 1e-6 {
                    break;
                }
            }
        }
        Ok(self.assemble(&u, -self.radius / n))
    }

    /// A uniformly distributed point of the sphere (zero off the support).
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> RewardTable {
        loop {
            let mut u: Vec<f64> = (0..self.support.len()).map(|_| StandardNormal.sample(rng)).collect();
            self.project_out(&mut u);
            let n = norm(&u);
            if n > 1e-12 {
                return self.assemble(&u, self.radius / n);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BruteForceMin {
    /// Exact minimum via projection.
    pub analytic: f64,
    /// Smallest `⟨μ_π, R⟩` over the sampled sphere points (`+∞` with no samples).
    pub sampled: f64,
}

/// Independent oracle for [`robust_value`].
pub fn brute_force_inner_min<R: rand::Rng + ?Sized>(
    occ_pi: &OccupancyMeasure,
    occ_ref: &OccupancyMeasure,
    proxy_norm: &RewardTable,
    spec: &CorrelationSpec,
    n_samples: usize,
    rng: &mut R,
) -> Result<BruteForceMin> {
    let sphere = FeasibleSphere::new(occ_ref, proxy_norm, spec)?;
    let analytic = sphere.analytic_min(occ_pi)?;
    let mut sampled = f64::INFINITY;
    for _ in 0..n_samples {
        let r = sphere.sample(rng);
        sampled = sampled.min(occ_pi.expect(r.values()));
    }
    Ok(BruteForceMin { analytic, sampled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ratio::ratio_exact;

    fn occ(v: &[f64]) -> OccupancyMeasure {
        OccupancyMeasure::new(v.to_vec()).unwrap()
    }

    fn table(v: &[f64]) -> RewardTable {
        RewardTable::new(v.to_vec()).unwrap()
    }

    #[test]
    fn stats_examples() {
        let s = robust_stats(&occ(&[0.3, 0.7]), &occ(&[0.3, 0.7]), &table(&[sqrt(7.0 / 3.0), -sqrt(3.0 / 7.0)]))
            .unwrap();
        assert!(s.chi2.abs() < 1e-12 && s.proxy_mean_pi.abs() < 1e-12 && s.h == 0.0);

        let s = robust_stats(&occ(&[0.8, 0.2]), &occ(&[0.5, 0.5]), &table(&[1.0, -1.0])).unwrap();
        assert!((s.chi2 - 0.36).abs() < 1e-12);
        assert!((s.proxy_mean_pi - 0.6).abs() < 1e-12);
        assert!(s.h.abs() < 1e-12);

        let s = robust_stats(&occ(&[0.4, 0.3, 0.2, 0.1]), &occ(&[0.25; 4]), &table(&[1.0, 1.0, -1.0, -1.0]))
            .unwrap();
        assert!((s.chi2 - 0.2).abs() < 1e-12);
        assert!((s.proxy_mean_pi - 0.4).abs() < 1e-12);
        assert!((s.h - 0.04).abs() < 1e-12);
    }

    #[test]
    fn stats_reject_unnormalized_proxy() {
        let err = robust_stats(&occ(&[0.5, 0.5]), &occ(&[0.5, 0.5]), &table(&[2.0, 4.0])).unwrap_err();
        assert!(matches!(err, Error::NotNormalized { .. }));
    }

    #[test]
    fn closed_form_duals_example() {
        let stats = RobustStats::new(0.72, 0.6);
        let spec = CorrelationSpec::standard(0.5).unwrap();
        let DualSolution::Regular(d) = dual_solution(&stats, &spec) else { panic!("expected regular") };
        // λ3 = −0.6/(2·√0.75), λ1 = 0.6 − 2·0.5·λ3
        assert!((d.lambda3 + 0.346_410_161_513_775_4).abs() < 1e-12);
        assert!((d.lambda1 - 0.946_410_161_513_775_4).abs() < 1e-12);
        assert_eq!(d.lambda2, 1.0);
        assert!((robust_value(&stats, &spec) + 0.219_615_242_270_663_2).abs() < 1e-12);
        assert!((improvement_lower_bound(&stats, &spec) - robust_value(&stats, &spec)).abs() < 1e-15);
    }

    #[test]
    fn reference_policy_is_degenerate() {
        let spec = CorrelationSpec::new(0.4, 1.5, 2.0).unwrap();
        let stats = RobustStats::new(0.0, 0.0);
        let sol = dual_solution(&stats, &spec);
        let d = *sol.duals().unwrap();
        assert!(sol.is_degenerate());
        assert!((d.lambda1 + 2.0 * 0.4 * d.lambda3 * 4.0).abs() < 1e-15);
        assert!((d.lambda2 - (1.0 - 2.0 * d.lambda3 * 1.5)).abs() < 1e-15);
        assert_eq!(robust_value(&stats, &spec), 1.5);
        assert_eq!(improvement_lower_bound(&stats, &spec), 0.0);
    }

    #[test]
    fn perfect_correlation_drops_penalty() {
        let spec = CorrelationSpec::new(1.0, 0.5, 2.0).unwrap();
        let stats = RobustStats::new(0.9, 0.3);
        assert_eq!(dual_solution(&stats, &spec), DualSolution::PerfectCorrelation);
        assert!((robust_value(&stats, &spec) - (2.0 * 0.3 + 0.5)).abs() < 1e-15);
        assert!(CorrelationSpec::standard(0.0).is_err());
        assert!(CorrelationSpec::standard(1.01).is_err());
        assert!(CorrelationSpec::new(0.5, 0.0, 0.0).is_err());
    }

    #[test]
    fn unit_ratio_gives_zero_reward() {
        let ratio = ratio_exact(&occ(&[0.5, 0.5]), &occ(&[0.5, 0.5])).unwrap();
        let d = DualVariables { lambda1: 0.0, lambda2: 1.0, lambda3: -0.7 };
        let spec = CorrelationSpec::standard(0.5).unwrap();
        let r = worst_case_reward(&ratio, &table(&[1.0, -1.0]), &d, &spec).unwrap();
        assert!(r.values().iter().all(|v| *v == Some(0.0)));
        let bad = DualVariables { lambda3: 0.0, ..d };
        assert_eq!(
            worst_case_reward(&ratio, &table(&[1.0, -1.0]), &bad, &spec).unwrap_err(),
            Error::NonNegativeLambda3(0.0)
        );
    }

    fn three_pair_instance() -> (OccupancyMeasure, OccupancyMeasure, RewardTable) {
        // proxy normalized under μ_ref = (0.5, 0.25, 0.25): p = (0, √2, −√2)
        let r2 = sqrt(2.0);
        (occ(&[0.3, 0.5, 0.2]), occ(&[0.5, 0.25, 0.25]), table(&[0.0, r2, -r2]))
    }

    #[test]
    fn adversarial_reward_is_feasible_and_attains_robust_value() {
        let (pi, rf, p) = three_pair_instance();
        for (r, m, v) in [(0.5, 0.0, 1.0), (0.3, 1.0, 2.0), (0.9, -2.0, 0.5)] {
            let spec = CorrelationSpec::new(r, m, v).unwrap();
            let stats = robust_stats(&pi, &rf, &p).unwrap();
            let sol = dual_solution(&stats, &spec);
            let rstar = adversarial_reward(&ratio_exact(&pi, &rf).unwrap(), &p, &sol, &spec).unwrap();
            let rep = feasibility_check(&rstar, &rf, &p, &spec, 1e-9).unwrap();
            assert!(rep.passed, "{rep:?}");
            assert!((rep.correlation - r).abs() < 1e-9);
            assert!((rstar.seen_return(&pi) - robust_value(&stats, &spec)).abs() < 1e-12);
            let second: f64 = rf.mass().iter().zip(rstar.values()).map(|(w, x)| w * x.unwrap().powi(2)).sum();
            assert!((second - (m * m + v * v)).abs() < 1e-12);
        }
    }

    #[test]
    fn seen_reward_matches_full_support_path() {
        let (pi, rf, p) = three_pair_instance();
        let spec = CorrelationSpec::new(0.3, 1.0, 2.0).unwrap();
        let stats = robust_stats(&pi, &rf, &p).unwrap();
        let full = adversarial_reward(&ratio_exact(&pi, &rf).unwrap(), &p, &dual_solution(&stats, &spec), &spec).unwrap();
        let (seen, seen_stats) = seen_adversarial_reward(&pi, &rf, &p, &spec).unwrap();
        assert!((seen_stats.h - stats.h).abs() < 1e-14);
        for (a, b) in full.values().iter().zip(seen.values()) {
            assert!((a.unwrap() - b.unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn seen_reward_with_unseen_mass() {
        // μ_π leaks 0.2 onto a pair the reference never visits
        let r2 = sqrt(2.0);
        let pi = occ(&[0.2, 0.4, 0.2, 0.2]);
        let rf = occ(&[0.5, 0.25, 0.25, 0.0]);
        let p = table(&[0.0, r2, -r2, 5.0]);
        let spec = CorrelationSpec::new(0.5, 0.5, 1.5).unwrap();
        let (rstar, stats) = seen_adversarial_reward(&pi, &rf, &p, &spec).unwrap();
        assert_eq!(rstar.values()[3], None);
        assert!((rstar.unseen_mass(&pi) - 0.2).abs() < 1e-15);
        assert!(feasibility_check(&rstar, &rf, &p, &spec, 1e-9).unwrap().passed);
        // E_ref[L²] − m² = 0.08 + 0.64 + 0.16 − 0.64 = 0.24, E = 0.2√2
        assert!((stats.chi2 - 0.24).abs() < 1e-12);
        let e = 0.2 * r2;
        let expected = 0.5 * 0.8 + 1.5 * (0.5 * e - sqrt(0.75) * sqrt(0.24 - e * e));
        assert!((rstar.seen_return(&pi) - expected).abs() < 1e-12);
    }

    #[test]
    fn feasibility_simple_cases() {
        let (_, rf, p) = three_pair_instance();
        let perfect = CorrelationSpec::standard(1.0).unwrap();
        assert!(feasibility_check(&p, &rf, &p, &perfect, 1e-9).unwrap().passed);
        let spec = CorrelationSpec::new(0.5, 2.0, 3.0).unwrap();
        let rep = feasibility_check(&RewardTable::constant(3, 2.0), &rf, &p, &spec, 1e-6).unwrap();
        assert!(rep.mean_residual < 1e-12);
        assert!((rep.second_moment_residual - 9.0).abs() < 1e-12);
        assert!(!rep.passed);
    }

    #[test]
    fn sphere_oracle_matches_closed_form() {
        let (pi, rf, p) = three_pair_instance();
        let spec = CorrelationSpec::new(0.6, 0.5, 1.5).unwrap();
        let stats = robust_stats(&pi, &rf, &p).unwrap();
        let mut rng = crate::rng::seeded(5);
        let bf = brute_force_inner_min(&pi, &rf, &p, &spec, 200, &mut rng).unwrap();
        assert!((bf.analytic - robust_value(&stats, &spec)).abs() < 1e-12);
        assert!(bf.sampled >= bf.analytic - 1e-12);
    }

    #[test]
    fn sphere_needs_three_pairs() {
        let spec = CorrelationSpec::standard(0.5).unwrap();
        let e = FeasibleSphere::new(&occ(&[0.5, 0.5]), &table(&[1.0, -1.0]), &spec).unwrap_err();
        assert!(matches!(e, Error::InvalidArgument(_)));
    }
}
