//! Worst / Worst* / Occ metrics, feasible-θ robustness sweeps, the improvement
//! lower-bound check and the r grid search. Everything here uses exact
//! occupancies.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::adversary::{
    improvement_lower_bound, robust_stats, seen_adversarial_reward, CorrelationSpec, FeasibleSphere,
};
use crate::env::EnvBundle;
use crate::error::{Error, Result};
use crate::estimators::{normalize_proxy, ProxyMoments};
use crate::linear::{solve_linear_adversary, FeatureMap, SolverOptions, ThetaWeights, DEFAULT_DUAL_INIT};
use crate::math::{abs, dot, sqrt};
use crate::mdp::{exact_occupancy, OccupancyMeasure, RewardTable, SoftmaxPolicy};
use crate::policy_opt::{train, TrainConfig};
use crate::rng::{derive_seed, seeded, Rng};

pub const DEFAULT_R_MIN: f64 = -10.0;
pub const DEFAULT_THETA_TOL: f64 = 0.02;
/// Below this acceptance rate θ sampling reports the set as (nearly) infeasible.
pub const MIN_ACCEPTANCE_RATE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub r_min: f64,
    /// Also solve the linear adversary when the environment has features.
    pub linear: bool,
    /// Center features under the reference before solving the linear adversary.
    pub center_features: bool,
    pub solver: SolverOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { r_min: DEFAULT_R_MIN, linear: true, center_features: true, solver: SolverOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsRow {
    pub policy_id: String,
    pub r: f64,
    /// Raw true reward.
    pub true_return: f64,
    /// Normalized proxy.
    pub proxy_return: f64,
    /// `Σ_seen μ_π R*`.
    pub worst: f64,
    pub occ_unseen: f64,
    pub r_min: f64,
    pub worst_star: f64,
    pub linear_worst: Option<f64>,
    pub theta: Option<ThetaWeights>,
    /// Why the linear adversary is missing, when it is.
    pub linear_note: Option<String>,
}

/// Exact occupancy of the reference and the proxy normalized under it.
pub fn reference_frame(bundle: &EnvBundle) -> Result<(OccupancyMeasure, RewardTable)> {
    let occ_ref = exact_occupancy(&bundle.mdp, &bundle.reference)?;
    let moments = ProxyMoments::exact(&occ_ref, &bundle.proxy_raw)?;
    let proxy_norm = normalize_proxy(&bundle.proxy_raw, &moments);
    Ok((occ_ref, proxy_norm))
}

pub fn evaluate_policy(
    bundle: &EnvBundle,
    policy: &SoftmaxPolicy,
    spec: &CorrelationSpec,
    r_min: f64,
) -> Result<MetricsRow> {
    evaluate_policy_with(bundle, "policy", policy, spec, &EvalOptions { r_min, ..Default::default() })
}

pub fn evaluate_policy_with(
    bundle: &EnvBundle,
    policy_id: &str,
    policy: &SoftmaxPolicy,
    spec: &CorrelationSpec,
    options: &EvalOptions,
) -> Result<MetricsRow> {
    let (occ_ref, proxy_norm) = reference_frame(bundle)?;
    let occ = exact_occupancy(&bundle.mdp, policy)?;
    evaluate_occupancy(bundle, policy_id, &occ, &occ_ref, &proxy_norm, spec, options)
}

/// [`evaluate_policy_with`] for a precomputed occupancy.
pub fn evaluate_occupancy(
    bundle: &EnvBundle,
    policy_id: &str,
    occ: &OccupancyMeasure,
    occ_ref: &OccupancyMeasure,
    proxy_norm: &RewardTable,
    spec: &CorrelationSpec,
    options: &EvalOptions,
) -> Result<MetricsRow> {
    let (rstar, _) = seen_adversarial_reward(occ, occ_ref, proxy_norm, spec)?;
    let worst = rstar.seen_return(occ);
    let occ_unseen = rstar.unseen_mass(occ).clamp(0.0, 1.0);
    let (mut linear_worst, mut theta, mut linear_note) = (None, None, None);
    if options.linear {
        match &bundle.features {
            Some(features) => {
                let solved = if options.center_features { features.centered(occ_ref) } else { Ok(features.clone()) }
                    .and_then(|f| {
                        solve_linear_adversary(occ, occ_ref, &f, proxy_norm, spec.r(), DEFAULT_DUAL_INIT, &options.solver)
                    });
                match solved {
                    Ok(adv) => {
                        linear_worst = Some(adv.value);
                        theta = Some(adv.theta);
                    }
                    Err(e) => linear_note = Some(alloc::format!("{e}")),
                }
            }
            None => linear_note = Some("no feature map".into()),
        }
    }
    Ok(MetricsRow {
        policy_id: policy_id.into(),
        r: spec.r(),
        true_return: occ.expect(bundle.true_raw.values()),
        proxy_return: occ.expect(proxy_norm.values()),
        worst,
        occ_unseen,
        r_min: options.r_min,
        worst_star: worst + occ_unseen * options.r_min,
        linear_worst,
        theta,
        linear_note,
    })
}

/// Raised when rejection sampling accepts too rarely to be trusted.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InfeasibilityWarning {
    pub r: f64,
    pub acceptance_rate: f64,
    /// Range of correlations seen among the proposals.
    pub min_correlation: f64,
    pub max_correlation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaSamples {
    pub thetas: Vec<Vec<f64>>,
    pub proposed: usize,
    pub warning: Option<InfeasibilityWarning>,
}

/// `μ_ref`-moments needed to score `corr(θᵀφ, p)` in `O(k²)`.
struct CorrelationScorer {
    cov_p: Vec<f64>,
    cov: Vec<f64>,
    dim: usize,
    sd_p: f64,
}

impl CorrelationScorer {
    fn new(occ_ref: &OccupancyMeasure, features: &FeatureMap, proxy_norm: &RewardTable) -> Result<Self> {
        let k = features.dim();
        if features.n_pairs() != occ_ref.len() || proxy_norm.len() != occ_ref.len() {
            return Err(Error::shape("features, proxy and occupancy differ in length"));
        }
        let total = occ_ref.total();
        let w: Vec<f64> = occ_ref.mass().iter().map(|m| m / total).collect();
        let p = proxy_norm.values();
        let mean_p = dot(&w, p);
        let mean_f: Vec<f64> = (0..k).map(|j| (0..w.len()).map(|i| w[i] * features.row(i)[j]).sum()).collect();
        let mut cov = vec![0.0; k * k];
        let mut cov_p = vec![0.0; k];
        let mut var_p = 0.0;
        for (i, wi) in w.iter().enumerate() {
            if *wi == 0.0 {
                continue;
            }
            let row = features.row(i);
            let dp = p[i] - mean_p;
            var_p += wi * dp * dp;
            for a in 0..k {
                let da = row[a] - mean_f[a];
                cov_p[a] += wi * da * dp;
                for b in 0..k {
                    cov[a * k + b] += wi * da * (row[b] - mean_f[b]);
                }
            }
        }
        Ok(CorrelationScorer { cov_p, cov, dim: k, sd_p: sqrt(var_p) })
    }

    /// `None` for a constant reward.
    fn correlation(&self, theta: &[f64]) -> Option<f64> {
        let k = self.dim;
        let mut var = 0.0;
        for a in 0..k {
            for b in 0..k {
                var += theta[a] * theta[b] * self.cov[a * k + b];
            }
        }
        if !(var > 1e-300) || self.sd_p == 0.0 {
            return None;
        }
        Some(dot(theta, &self.cov_p) / (sqrt(var) * self.sd_p))
    }
}

/// Pearson correlation of `θᵀφ` with the proxy under `μ_ref`, computed directly
/// from the combined reward.
pub fn reward_correlation(occ_ref: &OccupancyMeasure, reward: &RewardTable, proxy_norm: &RewardTable) -> Option<f64> {
    let total = occ_ref.total();
    let w = occ_ref.mass();
    let (x, y) = (reward.values(), proxy_norm.values());
    let mx = dot(w, x) / total;
    let my = dot(w, y) / total;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..w.len() {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxy += w[i] * dx * dy;
        sxx += w[i] * dx * dx;
        syy += w[i] * dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / sqrt(sxx * syy))
}

/// Rejection sampling of `θ ~ U[0,1]^k` with `|corr_ref(θᵀφ, p) − r| ≤ tol`.
///
/// Stops after `n` acceptances or `n / MIN_ACCEPTANCE_RATE` proposals, whichever
/// comes first; the latter yields a warning.
pub fn sample_feasible_thetas(
    occ_ref: &OccupancyMeasure,
    features: &FeatureMap,
    proxy_norm: &RewardTable,
    r: f64,
    n: usize,
    tol: f64,
    rng: &mut Rng,
) -> Result<ThetaSamples> {
    if n == 0 || !(tol > 0.0) {
        return Err(Error::invalid("need n ≥ 1 and a positive tolerance"));
    }
    let scorer = CorrelationScorer::new(occ_ref, features, proxy_norm)?;
    let k = features.dim();
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    let cap = (n as f64 / MIN_ACCEPTANCE_RATE) as usize;
    let mut thetas = Vec::with_capacity(n);
    let mut proposed = 0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut theta = vec![0.0; k];
    while thetas.len() < n && proposed < cap {
        proposed += 1;
        for t in theta.iter_mut() {
            *t = unit.sample(rng);
        }
        let Some(c) = scorer.correlation(&theta) else { continue };
        lo = lo.min(c);
        hi = hi.max(c);
        if abs(c - r) <= tol {
            thetas.push(theta.clone());
        }
    }
    let rate = thetas.len() as f64 / proposed as f64;
    let warning = (thetas.len() < n && rate < MIN_ACCEPTANCE_RATE).then_some(InfeasibilityWarning {
        r,
        acceptance_rate: rate,
        min_correlation: lo,
        max_correlation: hi,
    });
    Ok(ThetaSamples { thetas, proposed, warning })
}

/// Alternative sampler: `R = p + σ·ε` with Gaussian `ε`, accepted when its
/// correlation with the proxy is within `tol` of `r`.
pub fn sample_perturbed_rewards(
    occ_ref: &OccupancyMeasure,
    proxy_norm: &RewardTable,
    r: f64,
    sigma: f64,
    n: usize,
    tol: f64,
    rng: &mut Rng,
) -> Result<(Vec<RewardTable>, usize)> {
    if occ_ref.len() != proxy_norm.len() {
        return Err(Error::shape("proxy and occupancy differ in length"));
    }
    let cap = (n as f64 / MIN_ACCEPTANCE_RATE) as usize;
    let mut out = Vec::with_capacity(n);
    let mut proposed = 0;
    while out.len() < n && proposed < cap {
        proposed += 1;
        let values: Vec<f64> = proxy_norm
            .values()
            .iter()
            .map(|p| {
                let e: f64 = StandardNormal.sample(rng);
                p + sigma * e
            })
            .collect();
        let reward = RewardTable::new(values)?;
        if reward_correlation(occ_ref, &reward, proxy_norm).is_some_and(|c| abs(c - r) <= tol) {
            out.push(reward);
        }
    }
    Ok((out, proposed))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepCell {
    pub r: f64,
    pub policy_id: String,
    pub mean: f64,
    /// Sample standard deviation; 0 with `std_defined = false` for one sample.
    pub std: f64,
    pub std_defined: bool,
    pub n_accepted: usize,
    pub n_proposed: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub warnings: Vec<InfeasibilityWarning>,
}

impl SweepResult {
    pub fn cell(&self, r: f64, policy_id: &str) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.r == r && c.policy_id == policy_id)
    }
}

/// Per-`r` seed for θ sampling; all policies at one `r` share the same draws.
pub fn sweep_seed(master: u64, r_index: usize) -> u64 {
    derive_seed(master, 0x5EE9_0000 + r_index as u64)
}

/// Mean and spread of `⟨μ_π, θᵀφ⟩` (raw feature scale) over feasible θ.
/// Cells with no accepted θ are omitted and reported through `warnings`.
pub fn robustness_sweep(
    bundle: &EnvBundle,
    policies: &[(String, SoftmaxPolicy)],
    r_grid: &[f64],
    n_samples: usize,
    tol: f64,
    seed: u64,
) -> Result<SweepResult> {
    let expectations = feature_expectations(bundle, policies)?;
    let mut result = SweepResult::default();
    for (ri, &r) in r_grid.iter().enumerate() {
        let (cells, warning) = sweep_row(bundle, policies, &expectations, r, ri, n_samples, tol, seed)?;
        result.cells.extend(cells);
        result.warnings.extend(warning);
    }
    Ok(result)
}

/// `E_π[φ]` for each policy, on the raw feature scale.
pub fn feature_expectations(bundle: &EnvBundle, policies: &[(String, SoftmaxPolicy)]) -> Result<Vec<Vec<f64>>> {
    let features =
        bundle.features.as_ref().ok_or_else(|| Error::invalid("robustness sweep needs a feature map"))?;
    policies.iter().map(|(_, p)| Ok(features.expectation(&exact_occupancy(&bundle.mdp, p)?))).collect()
}

/// One `r` of [`robustness_sweep`]; rows are independent, so callers may run
/// them in any order and get identical cells.
#[allow(clippy::too_many_arguments)]
pub fn sweep_row(
    bundle: &EnvBundle,
    policies: &[(String, SoftmaxPolicy)],
    expectations: &[Vec<f64>],
    r: f64,
    r_index: usize,
    n_samples: usize,
    tol: f64,
    seed: u64,
) -> Result<(Vec<SweepCell>, Option<InfeasibilityWarning>)> {
    let features =
        bundle.features.as_ref().ok_or_else(|| Error::invalid("robustness sweep needs a feature map"))?;
    let (occ_ref, proxy_norm) = reference_frame(bundle)?;
    let mut rng = seeded(sweep_seed(seed, r_index));
    let samples = sample_feasible_thetas(&occ_ref, features, &proxy_norm, r, n_samples, tol, &mut rng)?;
    Ok((sweep_cells(r, policies, expectations, &samples), samples.warning))
}

/// Summaries of one `r` row given each policy's feature expectation.
pub fn sweep_cells(
    r: f64,
    policies: &[(String, SoftmaxPolicy)],
    expectations: &[Vec<f64>],
    samples: &ThetaSamples,
) -> Vec<SweepCell> {
    let n = samples.thetas.len();
    if n == 0 {
        return Vec::new();
    }
    policies
        .iter()
        .zip(expectations)
        .map(|((id, _), ef)| {
            let vals: Vec<f64> = samples.thetas.iter().map(|t| dot(t, ef)).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let (std, std_defined) = if n > 1 {
                (sqrt(vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64), true)
            } else {
                (0.0, false)
            };
            SweepCell {
                r,
                policy_id: id.clone(),
                mean,
                std,
                std_defined,
                n_accepted: n,
                n_proposed: samples.proposed,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LowerBoundReport {
    /// `V·(r·E − √(1−r²)·√h)`.
    pub bound: f64,
    pub n_rewards: usize,
    pub min_margin: f64,
    pub mean_margin: f64,
    pub max_margin: f64,
    /// Margin at the sphere point minimizing the policy's return.
    pub minimizer_margin: f64,
}

/// Samples feasible true rewards on the sphere and checks
/// `J(π,R) − J(π_ref,R) ≥ bound − 1e-8` for each, plus the minimizing point.
pub fn verify_lower_bound(
    bundle: &EnvBundle,
    policy: &SoftmaxPolicy,
    spec: &CorrelationSpec,
    n_rewards: usize,
    rng: &mut Rng,
) -> Result<LowerBoundReport> {
    let (occ_ref, proxy_norm) = reference_frame(bundle)?;
    let occ = exact_occupancy(&bundle.mdp, policy)?;
    let stats = robust_stats(&occ, &occ_ref, &proxy_norm)?;
    let bound = spec.std_v() * improvement_lower_bound(&stats, spec);
    let sphere = FeasibleSphere::new(&occ_ref, &proxy_norm, spec)?;
    let margin = |reward: &RewardTable| occ.expect(reward.values()) - occ_ref.expect(reward.values()) - bound;
    let minimizer_margin = margin(&sphere.minimizer(&occ)?);
    let (mut lo, mut hi, mut sum) = (minimizer_margin, minimizer_margin, 0.0);
    let mut violations = usize::from(minimizer_margin < -1e-8);
    for _ in 0..n_rewards {
        let m = margin(&sphere.sample(rng));
        violations += usize::from(m < -1e-8);
        lo = lo.min(m);
        hi = hi.max(m);
        sum += m;
    }
    if violations > 0 {
        return Err(Error::BoundViolation { violations, min_margin: lo });
    }
    Ok(LowerBoundReport {
        bound,
        n_rewards,
        min_margin: lo,
        mean_margin: if n_rewards > 0 { sum / n_rewards as f64 } else { minimizer_margin },
        max_margin: hi,
        minimizer_margin,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchResult {
    pub best_r: f64,
    /// One row per grid value, evaluated at its own training `r`.
    pub rows: Vec<MetricsRow>,
}

/// Highest Worst; ties go to the smaller (more conservative) `r`.
pub fn select_best_r(rows: &[MetricsRow]) -> Option<f64> {
    let mut best: Option<&MetricsRow> = None;
    for row in rows {
        best = match best {
            Some(b) if row.worst < b.worst || (row.worst == b.worst && row.r >= b.r) => Some(b),
            _ => Some(row),
        };
    }
    best.map(|b| b.r)
}

/// Trains one policy per grid value with `config` (only `r` varies).
pub fn r_grid_search(
    bundle: &EnvBundle,
    config: &TrainConfig,
    r_grid: &[f64],
    options: &EvalOptions,
) -> Result<GridSearchResult> {
    if r_grid.is_empty() {
        return Err(Error::invalid("empty r grid"));
    }
    let (occ_ref, proxy_norm) = reference_frame(bundle)?;
    let mut rows = Vec::with_capacity(r_grid.len());
    for &r in r_grid {
        let cfg = TrainConfig { r, ..config.clone() };
        let policy = train(bundle, &cfg)?.policy;
        let occ = exact_occupancy(&bundle.mdp, &policy)?;
        let spec = CorrelationSpec::standard(r)?;
        let id = alloc::format!("r={r}");
        rows.push(evaluate_occupancy(bundle, &id, &occ, &occ_ref, &proxy_norm, &spec, options)?);
    }
    let best_r = select_best_r(&rows).expect("nonempty grid");
    Ok(GridSearchResult { best_r, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_chain, make_tomato, ChainConfig, TomatoConfig};

    fn row(r: f64, worst: f64) -> MetricsRow {
        MetricsRow {
            policy_id: String::new(),
            r,
            true_return: 0.0,
            proxy_return: 0.0,
            worst,
            occ_unseen: 0.0,
            r_min: DEFAULT_R_MIN,
            worst_star: worst,
            linear_worst: None,
            theta: None,
            linear_note: None,
        }
    }

    #[test]
    fn reference_policy_metrics() {
        let b = make_tomato(&TomatoConfig::default()).unwrap();
        let spec = CorrelationSpec::standard(0.4).unwrap();
        let m = evaluate_policy(&b, &b.reference, &spec, -10.0).unwrap();
        assert!(m.worst.abs() < 1e-8, "{}", m.worst);
        assert!(m.proxy_return.abs() < 1e-9);
        assert_eq!(m.occ_unseen, 0.0);
        assert_eq!(m.worst_star, m.worst);
    }

    #[test]
    fn best_r_ties_prefer_smaller() {
        assert_eq!(select_best_r(&[row(0.4, 1.0), row(0.2, 1.0), row(0.6, 0.5)]), Some(0.2));
        assert_eq!(select_best_r(&[row(0.7, 0.1)]), Some(0.7));
        assert_eq!(select_best_r(&[row(0.1, -1.0), row(0.5, 0.0)]), Some(0.5));
        assert_eq!(select_best_r(&[]), None);
    }

    fn whitened_pair() -> (OccupancyMeasure, FeatureMap, RewardTable) {
        // uniform reference over 4 pairs; feature 0 = proxy, feature 1 ⟂ proxy, both unit variance
        let occ = OccupancyMeasure::new(vec![0.25; 4]).unwrap();
        let p = vec![1.0, 1.0, -1.0, -1.0];
        let q = vec![1.0, -1.0, 1.0, -1.0];
        let f = FeatureMap::from_columns(&[p.clone(), q]).unwrap();
        (occ, f, RewardTable::new(p).unwrap())
    }

    #[test]
    fn single_aligned_feature_rejects_everything_below_one() {
        let occ = OccupancyMeasure::new(vec![0.5, 0.5]).unwrap();
        let p = RewardTable::new(vec![1.0, -1.0]).unwrap();
        let f = FeatureMap::from_columns(&[p.values().to_vec()]).unwrap();
        let mut rng = seeded(1);
        let s = sample_feasible_thetas(&occ, &f, &p, 0.5, 5, 0.02, &mut rng).unwrap();
        assert!(s.thetas.is_empty());
        let w = s.warning.unwrap();
        assert_eq!((w.min_correlation, w.max_correlation), (1.0, 1.0));
        let s = sample_feasible_thetas(&occ, &f, &p, 1.0, 5, 0.02, &mut rng).unwrap();
        assert_eq!(s.thetas.len(), 5);
    }

    #[test]
    fn two_feature_acceptance_region() {
        let (occ, f, p) = whitened_pair();
        let mut rng = seeded(2);
        let s = sample_feasible_thetas(&occ, &f, &p, 0.6, 200, 0.02, &mut rng).unwrap();
        assert_eq!(s.thetas.len(), 200);
        for t in &s.thetas {
            let c = t[0] / sqrt(t[0] * t[0] + t[1] * t[1]);
            assert!((c - 0.6).abs() <= 0.02 + 1e-12);
            let direct = reward_correlation(&occ, &f.combine(t), &p).unwrap();
            assert!((direct - c).abs() < 1e-12);
        }
    }

    #[test]
    fn single_sample_sweep_flags_std() {
        let b = make_tomato(&TomatoConfig::default()).unwrap();
        let pols = vec![(String::from("ref"), b.reference.clone())];
        let s = robustness_sweep(&b, &pols, &[0.5], 1, 0.02, 3).unwrap();
        assert_eq!(s.cells.len(), 1);
        assert!(!s.cells[0].std_defined && s.cells[0].std == 0.0);
    }

    #[test]
    fn lower_bound_holds_at_reference_and_chain() {
        let b = make_chain(&ChainConfig::default()).unwrap();
        let spec = CorrelationSpec::standard(0.5).unwrap();
        let mut rng = seeded(4);
        let rep = verify_lower_bound(&b, &b.reference, &spec, 200, &mut rng).unwrap();
        assert!(rep.bound.abs() < 1e-7 && rep.min_margin.abs() < 1e-7 && rep.max_margin.abs() < 1e-7, "{rep:?}");
        let pol = SoftmaxPolicy::new(6, 2, (0..12).map(|i| ((i * 7) % 5) as f64 * 0.3).collect()).unwrap();
        let rep = verify_lower_bound(&b, &pol, &spec, 1000, &mut rng).unwrap();
        assert!(rep.minimizer_margin.abs() < 1e-9);
        assert!(rep.min_margin >= -1e-8);
    }
}
