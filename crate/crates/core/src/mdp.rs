//! Finite MDPs, tabular softmax policies and discounted occupancy measures.
//!
//! State-action pairs are flattened as `s * n_actions + a` everywhere in the crate.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{lu_solve, Matrix};
use crate::math::{abs, ceil, exp, ln};
use crate::rng;

const ROW_SUM_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// `p(s' | s, a)` stored at `(s * n_actions + a) * n_states + s'`.
    transitions: Vec<f64>,
    initial: Vec<f64>,
    discount: f64,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<f64>,
        initial: Vec<f64>,
        discount: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::invalid("an MDP needs at least one state and one action"));
        }
        if transitions.len() != n_states * n_actions * n_states {
            return Err(Error::shape(format!(
                "transition kernel has {} entries, expected {}",
                transitions.len(),
                n_states * n_actions * n_states
            )));
        }
        if initial.len() != n_states {
            return Err(Error::shape(format!(
                "initial distribution has {} entries, expected {n_states}",
                initial.len()
            )));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::invalid(format!("discount must lie in [0, 1), got {discount}")));
        }
        for (row_idx, row) in transitions.chunks(n_states).enumerate() {
            check_distribution(row).map_err(|msg| {
                Error::invalid(format!(
                    "transition row (s={}, a={}) {msg}",
                    row_idx / n_actions,
                    row_idx % n_actions
                ))
            })?;
        }
        check_distribution(&initial)
            .map_err(|msg| Error::invalid(format!("initial distribution {msg}")))?;
        Ok(TabularMdp { n_states, n_actions, transitions, initial, discount })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn pair(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    pub fn next_state_dist(&self, s: usize, a: usize) -> &[f64] {
        let start = self.pair(s, a) * self.n_states;
        &self.transitions[start..start + self.n_states]
    }

    /// Smallest horizon `H` with `γ^H < 1e-6`; sampled returns truncated at `H`
    /// miss at most that fraction of occupancy mass.
    pub fn default_horizon(&self) -> usize {
        if self.discount == 0.0 {
            return 1;
        }
        let h = ceil(ln(1e-6) / ln(self.discount)) as usize;
        let h = h.max(1);
        // guard the boundary where γ^h lands exactly on 1e-6
        if crate::math::powi(self.discount, h as i32) < 1e-6 { h } else { h + 1 }
    }
}

fn check_distribution(p: &[f64]) -> core::result::Result<(), alloc::string::String> {
    if let Some(bad) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(format!("has invalid entry {bad}"));
    }
    let sum: f64 = p.iter().sum();
    if abs(sum - 1.0) > ROW_SUM_TOL {
        return Err(format!("sums to {sum}, expected 1"));
    }
    Ok(())
}

/// Tabular policy `π(a|s) ∝ exp(logits[s, a])`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SoftmaxPolicy {
    n_states: usize,
    n_actions: usize,
    logits: Vec<f64>,
}

impl SoftmaxPolicy {
    pub fn new(n_states: usize, n_actions: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != n_states * n_actions {
            return Err(Error::shape(format!(
                "policy has {} logits, expected {n_states}x{n_actions}",
                logits.len()
            )));
        }
        if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite logit {bad}")));
        }
        Ok(SoftmaxPolicy { n_states, n_actions, logits })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        SoftmaxPolicy { n_states, n_actions, logits: vec![0.0; n_states * n_actions] }
    }

    /// Logits `ln π(a|s)` for a strictly positive probability table.
    pub fn from_probabilities(n_states: usize, n_actions: usize, probs: &[f64]) -> Result<Self> {
        if probs.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::invalid("softmax policies need strictly positive probabilities"));
        }
        Self::new(n_states, n_actions, probs.iter().map(|p| ln(*p)).collect())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn into_logits(self) -> Vec<f64> {
        self.logits
    }

    pub fn check_shape(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n_states != mdp.n_states || self.n_actions != mdp.n_actions {
            return Err(Error::shape(format!(
                "policy is {}x{} but the MDP is {}x{}",
                self.n_states, self.n_actions, mdp.n_states, mdp.n_actions
            )));
        }
        Ok(())
    }

    /// Writes `π(·|s)` into `out`.
    pub fn action_probs_into(&self, s: usize, out: &mut [f64]) {
        let row = &self.logits[s * self.n_actions..(s + 1) * self.n_actions];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, l) in out.iter_mut().zip(row) {
            *o = exp(l - max);
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }

    pub fn action_probs(&self, s: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_actions];
        self.action_probs_into(s, &mut out);
        out
    }

    /// Full `π(a|s)` table, flattened by pair index.
    pub fn probabilities(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.logits.len()];
        for s in 0..self.n_states {
            self.action_probs_into(s, &mut out[s * self.n_actions..(s + 1) * self.n_actions]);
        }
        out
    }

    /// A copy moved by `step * direction` in logit space.
    pub fn stepped(&self, direction: &[f64], step: f64) -> Self {
        let logits = self.logits.iter().zip(direction).map(|(l, d)| l + step * d).collect();
        SoftmaxPolicy { n_states: self.n_states, n_actions: self.n_actions, logits }
    }
}

/// Reward value per state-action pair.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RewardTable {
    values: Vec<f64>,
}

impl RewardTable {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("reward tables must be finite, found {bad}")));
        }
        Ok(RewardTable { values })
    }

    pub fn zeros(n_pairs: usize) -> Self {
        RewardTable { values: vec![0.0; n_pairs] }
    }

    pub fn constant(n_pairs: usize, c: f64) -> Self {
        RewardTable { values: vec![c; n_pairs] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RewardTable {
        RewardTable { values: self.values.iter().map(|v| f(*v)).collect() }
    }
}

/// Discounted state-action visitation `(1-γ) Σ_t γ^t Pr(s_t=s, a_t=a)`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OccupancyMeasure {
    mass: Vec<f64>,
    /// Mass lost to horizon truncation; zero for exact measures.
    deficit: f64,
}

impl OccupancyMeasure {
    /// Builds a measure from explicit masses (nonnegative, total at most 1 + 1e-8).
    pub fn new(mass: Vec<f64>) -> Result<Self> {
        if let Some(bad) = mass.iter().find(|m| !m.is_finite() || **m < 0.0) {
            return Err(Error::invalid(format!("occupancy mass must be nonnegative, found {bad}")));
        }
        let total: f64 = mass.iter().sum();
        if total > 1.0 + 1e-8 {
            return Err(Error::invalid(format!("occupancy mass sums to {total} > 1")));
        }
        Ok(OccupancyMeasure { deficit: (1.0 - total).max(0.0), mass })
    }

    /// Arbitrary per-pair weights, used internally as a weighting measure.
    pub(crate) fn unchecked(mass: Vec<f64>) -> Self {
        OccupancyMeasure { mass, deficit: 0.0 }
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn deficit(&self) -> f64 {
        self.deficit
    }

    pub fn l1_distance(&self, other: &OccupancyMeasure) -> f64 {
        self.mass.iter().zip(&other.mass).map(|(a, b)| abs(a - b)).sum()
    }

    /// Expectation of a per-pair quantity.
    pub fn expect(&self, values: &[f64]) -> f64 {
        crate::math::dot(&self.mass, values)
    }
}

/// Transition matrix of the state chain under `policy`, row-major `P_π[s, s']`.
fn policy_transition(mdp: &TabularMdp, probs: &[f64]) -> Matrix {
    let n = mdp.n_states;
    let mut p = Matrix::zeros(n, n);
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let w = probs[mdp.pair(s, a)];
            if w == 0.0 {
                continue;
            }
            for (s2, q) in mdp.next_state_dist(s, a).iter().enumerate() {
                p[(s, s2)] += w * q;
            }
        }
    }
    p
}

/// Normalized discounted state distribution `d = (1-γ) (I - γ P_πᵀ)⁻¹ μ₀`.
fn state_distribution(mdp: &TabularMdp, probs: &[f64]) -> Result<Vec<f64>> {
    let n = mdp.n_states;
    let g = mdp.discount;
    let p = policy_transition(mdp, probs);
    let mut a = Matrix::identity(n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] -= g * p[(j, i)];
        }
    }
    let rhs: Vec<f64> = mdp.initial.iter().map(|m| (1.0 - g) * m).collect();
    lu_solve(a, &rhs)
}

/// Exact occupancy measure of `policy` via the discounted flow equations.
pub fn exact_occupancy(mdp: &TabularMdp, policy: &SoftmaxPolicy) -> Result<OccupancyMeasure> {
    policy.check_shape(mdp)?;
    let probs = policy.probabilities();
    let d = state_distribution(mdp, &probs)?;
    let mut mass = vec![0.0; mdp.n_pairs()];
    for s in 0..mdp.n_states {
        // tiny negative round-off from the solve
        let ds = d[s].max(0.0);
        for a in 0..mdp.n_actions {
            mass[mdp.pair(s, a)] = ds * probs[mdp.pair(s, a)];
        }
    }
    Ok(OccupancyMeasure { mass, deficit: 0.0 })
}

/// `J(π, R) = E_{μ_π}[R]`.
pub fn return_value(occ: &OccupancyMeasure, reward: &RewardTable) -> Result<f64> {
    if occ.len() != reward.len() {
        return Err(Error::shape(format!(
            "occupancy has {} pairs but reward has {}",
            occ.len(),
            reward.len()
        )));
    }
    Ok(occ.expect(reward.values()))
}

/// Advantages `Q(s,a) − V(s)` of `reward` under `policy`, on the undiscounted
/// value scale (`V = r_π + γ P_π V`).
pub fn advantages(mdp: &TabularMdp, policy: &SoftmaxPolicy, reward: &RewardTable) -> Result<Vec<f64>> {
    policy.check_shape(mdp)?;
    if reward.len() != mdp.n_pairs() {
        return Err(Error::shape("reward does not match the MDP"));
    }
    let probs = policy.probabilities();
    advantages_with(mdp, &probs, reward)
}

fn advantages_with(mdp: &TabularMdp, probs: &[f64], reward: &RewardTable) -> Result<Vec<f64>> {
    let n = mdp.n_states;
    let g = mdp.discount;
    let p = policy_transition(mdp, probs);
    let mut a = Matrix::identity(n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] -= g * p[(i, j)];
        }
    }
    let r_pi: Vec<f64> = (0..n)
        .map(|s| (0..mdp.n_actions).map(|a| probs[mdp.pair(s, a)] * reward.values[mdp.pair(s, a)]).sum())
        .collect();
    let v = lu_solve(a, &r_pi)?;
    let mut adv = vec![0.0; mdp.n_pairs()];
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let i = mdp.pair(s, a);
            adv[i] = reward.values[i] + g * crate::math::dot(mdp.next_state_dist(s, a), &v) - v[s];
        }
    }
    if adv.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite advantages".into()));
    }
    Ok(adv)
}

/// Gradient of `⟨μ_π, reward⟩` with respect to the policy logits, with `reward`
/// held fixed: `∂/∂θ[s,a] = d(s) π(a|s) (Q(s,a) − V(s))`, where `d` is the
/// normalized discounted state distribution.
pub fn occupancy_gradient(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    reward: &RewardTable,
) -> Result<Vec<f64>> {
    policy.check_shape(mdp)?;
    if reward.len() != mdp.n_pairs() {
        return Err(Error::shape("reward does not match the MDP"));
    }
    let probs = policy.probabilities();
    let d = state_distribution(mdp, &probs)?;
    let mut grad = advantages_with(mdp, &probs, reward)?;
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let i = mdp.pair(s, a);
            grad[i] *= d[s] * probs[i];
        }
    }
    Ok(grad)
}

/// The policy whose occupancy is `mass` (`π(a|s) ∝ μ(s,a)`); states without
/// mass keep `fallback`'s action distribution.
pub fn policy_from_occupancy(mdp: &TabularMdp, mass: &[f64], fallback: &SoftmaxPolicy) -> Result<SoftmaxPolicy> {
    fallback.check_shape(mdp)?;
    if mass.len() != mdp.n_pairs() || mass.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
        return Err(Error::invalid("occupancy must be finite and nonnegative on every pair"));
    }
    let na = mdp.n_actions;
    let mut logits = fallback.logits().to_vec();
    for s in 0..mdp.n_states {
        let row = &mass[s * na..(s + 1) * na];
        if row.iter().all(|m| *m > 0.0) {
            for (l, m) in logits[s * na..(s + 1) * na].iter_mut().zip(row) {
                *l = ln(*m);
            }
        }
    }
    SoftmaxPolicy::new(mdp.n_states, na, logits)
}

/// Residual of `values` after weighted least-squares projection onto the
/// Bellman residuals `u(s) − γ E[u(s')]`, weighted by `occ`.
///
/// The result `ℓ` satisfies `Σ occ·ℓ·(u − γPu) = 0` for every `u`, so
/// `occ ⊙ ℓ` is a flow-preserving direction in occupancy space. Pairs outside
/// the support get zero.
pub fn tangent_projection(mdp: &TabularMdp, occ: &OccupancyMeasure, values: &[f64]) -> Result<Vec<f64>> {
    let (ns, na, g) = (mdp.n_states, mdp.n_actions, mdp.discount);
    if occ.len() != mdp.n_pairs() || values.len() != mdp.n_pairs() {
        return Err(Error::shape("occupancy/values do not match the MDP"));
    }
    let mass = occ.mass();
    let mut normal = Matrix::zeros(ns, ns);
    let mut rhs = vec![0.0; ns];
    let mut row = vec![0.0; ns];
    for pair in 0..mdp.n_pairs() {
        let w = mass[pair];
        if w == 0.0 {
            continue;
        }
        let s = pair / na;
        for (r, p) in row.iter_mut().zip(mdp.next_state_dist(s, pair % na)) {
            *r = -g * p;
        }
        row[s] += 1.0;
        for i in 0..ns {
            if row[i] == 0.0 {
                continue;
            }
            rhs[i] += w * row[i] * values[pair];
            for j in 0..ns {
                normal[(i, j)] += w * row[i] * row[j];
            }
        }
    }
    // states never visited leave the normal matrix singular
    for i in 0..ns {
        normal[(i, i)] += 1e-12;
    }
    let u = lu_solve(normal, &rhs)?;
    let mut out = vec![0.0; mdp.n_pairs()];
    for pair in 0..mdp.n_pairs() {
        if mass[pair] == 0.0 {
            continue;
        }
        let s = pair / na;
        let next: f64 = mdp.next_state_dist(s, pair % na).iter().zip(&u).map(|(p, v)| p * v).sum();
        out[pair] = values[pair] - (u[s] - g * next);
    }
    Ok(out)
}

/// Fixed-horizon trajectories sampled from one policy.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrajectoryBatch {
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    seed: u64,
    /// Pair indices, trajectory-major: `pairs[i * horizon + t]`.
    pairs: Vec<u32>,
}

impl TrajectoryBatch {
    /// Wraps explicit `(state, action)` sequences, all of length `horizon`.
    pub fn from_trajectories(
        n_states: usize,
        n_actions: usize,
        horizon: usize,
        seed: u64,
        trajectories: &[Vec<(usize, usize)>],
    ) -> Result<Self> {
        let mut pairs = Vec::with_capacity(trajectories.len() * horizon);
        for traj in trajectories {
            if traj.len() != horizon {
                return Err(Error::shape("all trajectories must share the batch horizon"));
            }
            for &(s, a) in traj {
                if s >= n_states || a >= n_actions {
                    return Err(Error::shape(format!("pair ({s}, {a}) out of bounds")));
                }
                pairs.push((s * n_actions + a) as u32);
            }
        }
        Ok(TrajectoryBatch { n_states, n_actions, horizon, seed, pairs })
    }

    pub fn len(&self) -> usize {
        if self.horizon == 0 { 0 } else { self.pairs.len() / self.horizon }
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    /// Pair indices of trajectory `i`.
    pub fn trajectory(&self, i: usize) -> &[u32] {
        &self.pairs[i * self.horizon..(i + 1) * self.horizon]
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &[u32]> {
        self.pairs.chunks(self.horizon.max(1))
    }
}

fn sample_index<R: rand::Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // round-off: fall back to the last index with positive mass
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// Samples `n` trajectories of length `horizon`; identical seeds give identical batches.
pub fn sample_trajectories(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    n: usize,
    horizon: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    policy.check_shape(mdp)?;
    if n == 0 || horizon == 0 {
        return Err(Error::invalid("need at least one trajectory and a positive horizon"));
    }
    let mut rng = rng::seeded(seed);
    let probs = policy.probabilities();
    let na = mdp.n_actions;
    let mut pairs = Vec::with_capacity(n * horizon);
    for _ in 0..n {
        let mut s = sample_index(&mdp.initial, &mut rng);
        for _ in 0..horizon {
            let a = sample_index(&probs[s * na..(s + 1) * na], &mut rng);
            pairs.push(mdp.pair(s, a) as u32);
            s = sample_index(mdp.next_state_dist(s, a), &mut rng);
        }
    }
    Ok(TrajectoryBatch { n_states: mdp.n_states, n_actions: na, horizon, seed, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state_cycle(discount: f64) -> TabularMdp {
        // one action, deterministic 0 -> 1 -> 0
        TabularMdp::new(2, 1, vec![0.0, 1.0, 1.0, 0.0], vec![1.0, 0.0], discount).unwrap()
    }

    #[test]
    fn single_state_occupancy_is_one() {
        let mdp = TabularMdp::new(1, 1, vec![1.0], vec![1.0], 0.9).unwrap();
        let occ = exact_occupancy(&mdp, &SoftmaxPolicy::uniform(1, 1)).unwrap();
        assert!((occ.mass()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_cycle_matches_geometric_series() {
        // μ(0) = (1-γ)(1 + γ² + γ⁴ + ...) = 1/(1+γ), μ(1) = γ/(1+γ)
        let occ = exact_occupancy(&two_state_cycle(0.5), &SoftmaxPolicy::uniform(2, 1)).unwrap();
        assert!((occ.mass()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((occ.mass()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn cycle_with_two_uniform_actions_splits_mass() {
        let t = vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let mdp = TabularMdp::new(2, 2, t, vec![1.0, 0.0], 0.5).unwrap();
        let occ = exact_occupancy(&mdp, &SoftmaxPolicy::uniform(2, 2)).unwrap();
        let want = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0];
        for (g, w) in occ.mass().iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_discount_is_initial_times_policy() {
        let t = vec![0.5, 0.5, 0.2, 0.8, 1.0, 0.0, 0.3, 0.7];
        let mdp = TabularMdp::new(2, 2, t, vec![0.25, 0.75], 0.0).unwrap();
        let policy = SoftmaxPolicy::new(2, 2, vec![0.0, 1.0, -1.0, 2.0]).unwrap();
        let occ = exact_occupancy(&mdp, &policy).unwrap();
        let probs = policy.probabilities();
        for s in 0..2 {
            for a in 0..2 {
                let i = s * 2 + a;
                assert!((occ.mass()[i] - mdp.initial()[s] * probs[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rejects_bad_kernels() {
        assert!(TabularMdp::new(2, 1, vec![0.5, 0.4, 1.0, 0.0], vec![1.0, 0.0], 0.9).is_err());
        assert!(TabularMdp::new(2, 1, vec![0.0, 1.0, 1.0, 0.0], vec![1.0, 0.0], 1.0).is_err());
        assert!(matches!(
            TabularMdp::new(2, 1, vec![0.0, 1.0], vec![1.0, 0.0], 0.9),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn policy_shape_mismatch_is_an_error() {
        let mdp = two_state_cycle(0.5);
        let policy = SoftmaxPolicy::uniform(3, 1);
        assert!(matches!(exact_occupancy(&mdp, &policy), Err(Error::Shape(_))));
    }

    #[test]
    fn return_value_examples() {
        let occ = OccupancyMeasure::new(vec![0.8, 0.2]).unwrap();
        let r = RewardTable::new(vec![1.0, -1.0]).unwrap();
        assert!((return_value(&occ, &r).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(return_value(&occ, &RewardTable::zeros(2)).unwrap(), 0.0);
        assert!(return_value(&occ, &RewardTable::zeros(3)).is_err());
        let exact = exact_occupancy(&two_state_cycle(0.7), &SoftmaxPolicy::uniform(2, 1)).unwrap();
        assert!((return_value(&exact, &RewardTable::constant(2, 3.5)).unwrap() - 3.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_strictly_positive() {
        let policy = SoftmaxPolicy::new(1, 3, vec![300.0, -300.0, 0.0]).unwrap();
        let probs = policy.action_probs(0);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(probs.iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn deterministic_dynamics_give_identical_trajectories() {
        let mdp = two_state_cycle(0.9);
        let batch = sample_trajectories(&mdp, &SoftmaxPolicy::uniform(2, 1), 5, 6, 3).unwrap();
        let first = batch.trajectory(0).to_vec();
        assert!(batch.trajectories().all(|t| t == first.as_slice()));
        assert_eq!(first, vec![0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let t = vec![0.5, 0.5, 0.2, 0.8, 1.0, 0.0, 0.3, 0.7];
        let mdp = TabularMdp::new(2, 2, t, vec![0.5, 0.5], 0.9).unwrap();
        let pol = SoftmaxPolicy::uniform(2, 2);
        let a = sample_trajectories(&mdp, &pol, 20, 10, 11).unwrap();
        let b = sample_trajectories(&mdp, &pol, 20, 10, 11).unwrap();
        let c = sample_trajectories(&mdp, &pol, 20, 10, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.pairs, c.pairs);
    }

    #[test]
    fn default_horizon_truncates_below_threshold() {
        let mdp = TabularMdp::new(1, 1, vec![1.0], vec![1.0], 0.95).unwrap();
        let h = mdp.default_horizon();
        assert!(0.95f64.powi(h as i32) < 1e-6);
        assert!(0.95f64.powi(h as i32 - 1) >= 1e-6);
    }

    #[test]
    fn tangent_projection_preserves_flow() {
        // two states, two actions with different transitions
        let mdp = TabularMdp::new(2, 2, vec![0.9, 0.1, 0.2, 0.8, 0.5, 0.5, 0.0, 1.0], vec![0.3, 0.7], 0.8).unwrap();
        let occ = exact_occupancy(&mdp, &SoftmaxPolicy::uniform(2, 2)).unwrap();
        let ell = tangent_projection(&mdp, &occ, &[1.0, -2.0, 0.5, 3.0]).unwrap();
        for u in [[1.0, 0.0], [0.0, 1.0], [2.0, -1.0]] {
            let mut inner = 0.0;
            for pair in 0..4 {
                let (s, a) = (pair / 2, pair % 2);
                let next: f64 = mdp.next_state_dist(s, a).iter().zip(&u).map(|(p, v)| p * v).sum();
                inner += occ.mass()[pair] * ell[pair] * (u[s] - 0.8 * next);
            }
            assert!(inner.abs() < 1e-9, "{inner}");
        }
    }

    #[test]
    fn occupancy_round_trips_through_policy() {
        let mdp = TabularMdp::new(2, 2, vec![0.9, 0.1, 0.2, 0.8, 0.5, 0.5, 0.0, 1.0], vec![0.3, 0.7], 0.8).unwrap();
        let pol = SoftmaxPolicy::new(2, 2, vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        let occ = exact_occupancy(&mdp, &pol).unwrap();
        let back = policy_from_occupancy(&mdp, occ.mass(), &SoftmaxPolicy::uniform(2, 2)).unwrap();
        for (a, b) in pol.probabilities().iter().zip(back.probabilities()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
