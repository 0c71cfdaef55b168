//! Moment, occupancy and divergence estimators, in exact form (known occupancies)
//! and sampled form (trajectory batches).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{powi, sqrt};
use crate::mdp::{OccupancyMeasure, RewardTable, TrajectoryBatch};
use crate::ratio::LogRatioModel;

/// Floor applied to the proxy standard deviation before dividing by it.
pub const STD_FLOOR: f64 = 1e-8;

/// Reference-policy moments of the raw proxy reward.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProxyMoments {
    pub mean: f64,
    pub std: f64,
}

impl ProxyMoments {
    /// Population moments under a known reference occupancy.
    pub fn exact(occ_ref: &OccupancyMeasure, raw_proxy: &RewardTable) -> Result<Self> {
        check_len(occ_ref.len(), raw_proxy.len())?;
        let total = occ_ref.total();
        let mean = occ_ref.expect(raw_proxy.values()) / total;
        let second: f64 = occ_ref
            .mass()
            .iter()
            .zip(raw_proxy.values())
            .map(|(m, r)| m * r * r)
            .sum::<f64>()
            / total;
        // centred form avoids cancellation when |mean| ≫ std
        let var: f64 = occ_ref
            .mass()
            .iter()
            .zip(raw_proxy.values())
            .map(|(m, r)| m * (r - mean) * (r - mean))
            .sum::<f64>()
            / total;
        Self::from_variance(mean, var, second)
    }

    fn from_variance(mean: f64, var: f64, second: f64) -> Result<Self> {
        if !(var > 1e-12 * second.abs().max(1.0)) {
            return Err(Error::DegenerateProxy { variance: var });
        }
        Ok(ProxyMoments { mean, std: sqrt(var).max(STD_FLOOR) })
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{a} state-action pairs vs {b}")));
    }
    Ok(())
}

fn check_batch(batch: &TrajectoryBatch, n_pairs: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("trajectory batch is empty"));
    }
    check_len(batch.n_pairs(), n_pairs)
}

/// Discounted per-pair visitation weights `(1-γ)/N Σ_i Σ_t γ^t 1{(s_t,a_t) = pair}`.
pub fn empirical_occupancy(batch: &TrajectoryBatch, discount: f64) -> Result<OccupancyMeasure> {
    if batch.is_empty() {
        return Err(Error::invalid("cannot estimate occupancy from an empty batch"));
    }
    let mut mass = vec![0.0; batch.n_pairs()];
    let scale = (1.0 - discount) / batch.len() as f64;
    for traj in batch.trajectories() {
        let mut w = scale;
        for &pair in traj {
            mass[pair as usize] += w;
            w *= discount;
        }
    }
    OccupancyMeasure::new(mass)
}

/// `(1-γ)/N Σ_i Σ_t γ^t R(s_t, a_t)`, the plain Monte-Carlo return estimate.
pub fn sampled_return(batch: &TrajectoryBatch, reward: &RewardTable, discount: f64) -> Result<f64> {
    check_batch(batch, reward.len())?;
    let values = reward.values();
    let mut total = 0.0;
    for traj in batch.trajectories() {
        let mut w = 1.0;
        for &pair in traj {
            total += w * values[pair as usize];
            w *= discount;
        }
    }
    Ok((1.0 - discount) * total / batch.len() as f64)
}

/// Occupancy mass covered by a length-`horizon` rollout, `1 - γ^H`.
pub fn truncation_mass(discount: f64, horizon: usize) -> f64 {
    1.0 - powi(discount, horizon as i32)
}

/// Unbiased estimate of `E_μ[R]²` as the product of two independent batch returns.
pub fn double_sample_square(
    batch_a: &TrajectoryBatch,
    batch_b: &TrajectoryBatch,
    reward: &RewardTable,
    discount: f64,
) -> Result<f64> {
    if batch_a.seed() == batch_b.seed() {
        return Err(Error::DependentBatches(batch_a.seed()));
    }
    Ok(sampled_return(batch_a, reward, discount)? * sampled_return(batch_b, reward, discount)?)
}

/// Proxy mean and standard deviation from two independent reference batches.
///
/// Batch estimates are rescaled by the truncation mass so that a constant reward
/// `c` has mean exactly `c`. The variance is `E[R²] − E²`, with the squared mean
/// double-sampled across the two batches.
pub fn proxy_moments_ref(
    batch_ref: &TrajectoryBatch,
    batch_ref_star: &TrajectoryBatch,
    raw_proxy: &RewardTable,
    discount: f64,
) -> Result<ProxyMoments> {
    let mass_a = truncation_mass(discount, batch_ref.horizon());
    let mass_b = truncation_mass(discount, batch_ref_star.horizon());
    let mean = sampled_return(batch_ref, raw_proxy, discount)? / mass_a;
    let squared = raw_proxy.map(|r| r * r);
    let second = sampled_return(batch_ref, &squared, discount)? / mass_a;
    let mean_sq = double_sample_square(batch_ref, batch_ref_star, raw_proxy, discount)? / (mass_a * mass_b);
    ProxyMoments::from_variance(mean, second - mean_sq, second)
}

/// `(R − mean) / std`.
pub fn normalize_proxy(raw_proxy: &RewardTable, moments: &ProxyMoments) -> RewardTable {
    let std = moments.std.max(STD_FLOOR);
    raw_proxy.map(|r| (r - moments.mean) / std)
}

/// Pairs where `occ_pi` has mass but `occ_ref` does not.
pub fn support_violations(occ_pi: &OccupancyMeasure, occ_ref: &OccupancyMeasure) -> Vec<usize> {
    occ_pi
        .mass()
        .iter()
        .zip(occ_ref.mass())
        .enumerate()
        .filter(|(_, (p, r))| **p > 0.0 && **r <= 0.0)
        .map(|(i, _)| i)
        .collect()
}

pub(crate) fn check_support(occ_pi: &OccupancyMeasure, occ_ref: &OccupancyMeasure) -> Result<()> {
    check_len(occ_pi.len(), occ_ref.len())?;
    let pairs = support_violations(occ_pi, occ_ref);
    if pairs.is_empty() { Ok(()) } else { Err(Error::Support { pairs }) }
}

/// `χ²(μ_π ‖ μ_ref) = Σ μ_π² / μ_ref − 1`.
pub fn chi_squared(occ_pi: &OccupancyMeasure, occ_ref: &OccupancyMeasure) -> Result<f64> {
    check_support(occ_pi, occ_ref)?;
    let s: f64 = occ_pi
        .mass()
        .iter()
        .zip(occ_ref.mass())
        .filter(|(_, r)| **r > 0.0)
        .map(|(p, r)| p * p / r)
        .sum();
    Ok((s - 1.0).max(0.0))
}

/// `E_{D_π}[L − 1]` with `L` taken from a forward ratio model, using discounted
/// visitation weights normalized to the covered mass.
pub fn sampled_chi_squared(batch_pi: &TrajectoryBatch, ratio: &LogRatioModel, discount: f64) -> Result<f64> {
    check_batch(batch_pi, ratio.n_pairs())?;
    let occ = empirical_occupancy(batch_pi, discount)?;
    let mut acc = 0.0;
    for (pair, m) in occ.mass().iter().enumerate() {
        if *m > 0.0 {
            let l = ratio.ratio(pair).ok_or(Error::Support { pairs: vec![pair] })?;
            acc += m * (l - 1.0);
        }
    }
    Ok(acc / occ.total())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{exact_occupancy, sample_trajectories, SoftmaxPolicy, TabularMdp};

    fn occ(v: &[f64]) -> OccupancyMeasure {
        OccupancyMeasure::new(v.to_vec()).unwrap()
    }

    fn small_mdp() -> TabularMdp {
        let t = vec![0.7, 0.3, 0.1, 0.9, 0.5, 0.5, 0.2, 0.8];
        TabularMdp::new(2, 2, t, vec![0.6, 0.4], 0.8).unwrap()
    }

    #[test]
    fn two_step_trajectory_weights() {
        let batch = TrajectoryBatch::from_trajectories(2, 2, 2, 0, &[vec![(0, 0), (1, 1)]]).unwrap();
        let m = empirical_occupancy(&batch, 0.5).unwrap();
        assert_eq!(m.mass(), &[0.5, 0.0, 0.0, 0.25]);
        assert!((m.deficit() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_discount_counts_first_pairs() {
        let trajs = [vec![(0, 1), (1, 1)], vec![(1, 0), (0, 0)], vec![(0, 1), (0, 0)]];
        let batch = TrajectoryBatch::from_trajectories(2, 2, 2, 0, &trajs).unwrap();
        let m = empirical_occupancy(&batch, 0.0).unwrap();
        assert!((m.mass()[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.mass()[2] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.mass()[0] + m.mass()[3], 0.0);
    }

    #[test]
    fn two_point_moments_and_normalization() {
        let m = ProxyMoments::exact(&occ(&[0.5, 0.5]), &RewardTable::new(vec![2.0, 4.0]).unwrap()).unwrap();
        assert!((m.mean - 3.0).abs() < 1e-15 && (m.std - 1.0).abs() < 1e-15);
        let n = normalize_proxy(&RewardTable::new(vec![2.0, 4.0]).unwrap(), &m);
        assert_eq!(n.values(), &[-1.0, 1.0]);
        let shifted = ProxyMoments::exact(&occ(&[0.5, 0.5]), &RewardTable::new(vec![7.0, 9.0]).unwrap()).unwrap();
        assert_eq!(normalize_proxy(&RewardTable::new(vec![7.0, 9.0]).unwrap(), &shifted).values(), n.values());
    }

    #[test]
    fn constant_proxy_is_degenerate() {
        let mdp = small_mdp();
        let pol = SoftmaxPolicy::uniform(2, 2);
        let exact = exact_occupancy(&mdp, &pol).unwrap();
        let c = RewardTable::constant(4, 2.5);
        assert!(matches!(ProxyMoments::exact(&exact, &c), Err(Error::DegenerateProxy { .. })));
        let a = sample_trajectories(&mdp, &pol, 50, 60, 1).unwrap();
        let b = sample_trajectories(&mdp, &pol, 50, 60, 2).unwrap();
        assert!(matches!(proxy_moments_ref(&a, &b, &c, 0.8), Err(Error::DegenerateProxy { .. })));
        let mean = sampled_return(&a, &c, 0.8).unwrap() / truncation_mass(0.8, 60);
        assert!((mean - 2.5).abs() < 1e-12);
    }

    #[test]
    fn double_sampling_rules() {
        let mdp = small_mdp();
        let pol = SoftmaxPolicy::uniform(2, 2);
        let a = sample_trajectories(&mdp, &pol, 10, 200, 1).unwrap();
        let b = sample_trajectories(&mdp, &pol, 10, 200, 2).unwrap();
        assert!(matches!(
            double_sample_square(&a, &a, &RewardTable::zeros(4), 0.8),
            Err(Error::DependentBatches(1))
        ));
        assert_eq!(double_sample_square(&a, &b, &RewardTable::zeros(4), 0.8).unwrap(), 0.0);
        let c = double_sample_square(&a, &b, &RewardTable::constant(4, 3.0), 0.8).unwrap();
        assert!((c - 9.0).abs() < 1e-9);
    }

    #[test]
    fn chi_squared_examples() {
        assert_eq!(chi_squared(&occ(&[0.3, 0.7]), &occ(&[0.3, 0.7])).unwrap(), 0.0);
        let x = chi_squared(&occ(&[0.8, 0.2]), &occ(&[0.5, 0.5])).unwrap();
        assert!((x - 0.36).abs() < 1e-12);
        let err = chi_squared(&occ(&[0.5, 0.5, 0.0]), &occ(&[1.0, 0.0, 0.0])).unwrap_err();
        assert_eq!(err, Error::Support { pairs: vec![1] });
    }
}
