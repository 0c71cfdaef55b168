//! Outer-loop training for Max-Min, Linear Max-Min, the χ²-regularized baseline
//! and plain proxy maximization.
//!
//! Policy gradients are assembled as "pseudo-rewards": per-pair quantities whose
//! occupancy-weighted policy gradient equals the gradient of the objective.
//! Exact mode ascends with a backtracking line search on the true objective;
//! sampled mode estimates every quantity from trajectories and takes
//! REINFORCE / clipped-surrogate steps.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::adversary::{robust_stats, robust_value, CorrelationSpec, DualVariables, RobustStats, EPS_H};
use crate::env::EnvBundle;
use crate::error::{Error, Result};
use crate::estimators::{
    chi_squared, double_sample_square, empirical_occupancy, normalize_proxy, proxy_moments_ref,
    sampled_chi_squared, sampled_return, truncation_mass, ProxyMoments,
};
use crate::linear::{
    compute_q, linear_dual_stats, sampled_linear_dual_stats, sampled_q, enumerate_theta, solve_linear_duals, theta_star, whiten,
    FeatureMap, LinearDualStats, SolverOptions, ThetaWeights, WhitenedFeatures, DEFAULT_DUAL_INIT, ENUMERATION_MAX_DIM,
};
use crate::math::{dot, sqrt};
use crate::mdp::{
    advantages, exact_occupancy, occupancy_gradient, policy_from_occupancy, sample_trajectories, tangent_projection, OccupancyMeasure, RewardTable, SoftmaxPolicy,
    TabularMdp, TrajectoryBatch,
};
use crate::ratio::{ratio_exact, train_ratio_estimator, DiscriminatorConfig, LogRatioModel, RatioDirection};
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Algorithm {
    #[default]
    Maxmin,
    LinearMaxmin,
    Orpo,
    /// Unregularized maximization of the normalized proxy.
    Proxy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum BatchMode {
    #[default]
    Exact,
    Sampled,
}

/// Starting point of the ascent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Initialization {
    /// The reference policy's logits.
    #[default]
    Reference,
    /// All-zero logits.
    Uniform,
}

/// Minimum gain accepted at a degenerate point, where Armijo has no slope.
const DEGENERATE_GAIN: f64 = 1e-12;

/// Ascent direction in exact mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ExactUpdate {
    /// Tabular natural gradient: logits move along the pseudo-reward advantages.
    #[default]
    Natural,
    /// Plain logit gradient.
    Gradient,
}

/// How sampled mode obtains occupancy ratios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum RatioSource {
    /// Ratio of empirical visitation frequencies (discrete environments).
    #[default]
    Empirical,
    Discriminator,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SampledConfig {
    pub trajectories: usize,
    pub reference_trajectories: usize,
    /// Defaults to the MDP's truncation horizon.
    pub horizon: Option<usize>,
    pub ratio: RatioSource,
    pub discriminator: DiscriminatorConfig,
    /// Surrogate epochs per batch.
    pub epochs: usize,
}

impl Default for SampledConfig {
    fn default() -> Self {
        SampledConfig {
            trajectories: 200,
            reference_trajectories: 2000,
            horizon: None,
            ratio: RatioSource::Empirical,
            discriminator: DiscriminatorConfig { epochs: 500, ..Default::default() },
            epochs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub r: f64,
    pub iterations: usize,
    pub mode: BatchMode,
    /// Initial trial step in exact mode; the fixed step in sampled mode.
    pub step_size: f64,
    pub clip_ratio: Option<f64>,
    pub seed: u64,
    pub init: Initialization,
    /// Standard deviation of Gaussian noise added to the initial logits.
    pub init_jitter: f64,
    /// Regularization weight on the normalized scale; defaults to `√(1−r²)`.
    pub orpo_lambda: Option<f64>,
    /// Assumed proxy standard deviation `σ`: the raw-scale weight becomes
    /// `σ·√(1−r²)`, rescaled by the actual reference proxy spread. Ignored when
    /// `orpo_lambda` is set.
    pub orpo_sigma: Option<f64>,
    /// Center features under the reference before whitening, which makes the
    /// mean-zero constraint of the linear set hold for every weight vector.
    pub center_features: bool,
    /// Feature columns visible to the linear adversary during training; the
    /// rest are withheld (all columns when unset).
    pub train_features: Option<Vec<usize>>,
    pub exact_update: ExactUpdate,
    /// Exact mode: cap on the largest single-logit change per iteration, which
    /// keeps early steps from saturating the softmax.
    pub max_logit_step: Option<f64>,
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Exact mode stops once the objective improves by less than this.
    pub tolerance: f64,
    pub sampled: SampledConfig,
    /// Linear dual solver settings.
    pub solver: SolverOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Algorithm::Maxmin,
            r: 0.4,
            iterations: 100,
            mode: BatchMode::Exact,
            step_size: 10.0,
            clip_ratio: None,
            seed: 0,
            init: Initialization::Reference,
            init_jitter: 0.0,
            orpo_lambda: None,
            orpo_sigma: None,
            center_features: true,
            train_features: None,
            exact_update: ExactUpdate::Natural,
            max_logit_step: Some(1.0),
            armijo: 1e-4,
            max_backtracks: 40,
            tolerance: 0.0,
            sampled: SampledConfig::default(),
            solver: SolverOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        CorrelationSpec::standard(self.r)?;
        if !(self.step_size > 0.0) || !(self.init_jitter >= 0.0) {
            return Err(Error::invalid("step size must be positive and jitter nonnegative"));
        }
        if self.clip_ratio.is_some_and(|c| !(c > 0.0)) || self.max_logit_step.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::invalid("clip ratio and logit step cap must be positive"));
        }
        if self.orpo_lambda.is_some_and(|l| !(l >= 0.0)) || self.orpo_sigma.is_some_and(|l| !(l >= 0.0)) {
            return Err(Error::invalid("regularization weight must be nonnegative"));
        }
        Ok(())
    }

    /// Regularization weight on the normalized scale, given the reference
    /// proxy standard deviation.
    pub fn lambda(&self, proxy_std: f64) -> f64 {
        match (self.orpo_lambda, self.orpo_sigma) {
            (Some(l), _) => l,
            (None, Some(sigma)) => orpo_lambda(sigma, self.r) / proxy_std,
            (None, None) => sqrt((1.0 - self.r * self.r).max(0.0)),
        }
    }
}

/// `λ = σ·√(1 − r²)`: the regularization weight on the raw proxy scale.
pub fn orpo_lambda(sigma: f64, r: f64) -> f64 {
    sigma * sqrt((1.0 - r * r).max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IterationRecord {
    pub iteration: usize,
    /// Objective of the algorithm, evaluated before this iteration's update.
    pub objective: f64,
    /// `E_π[p]` for the normalized proxy.
    pub proxy_return: f64,
    pub chi2: f64,
    pub h: f64,
    pub duals: Option<[f64; 3]>,
    pub theta: Option<Vec<f64>>,
    /// Pseudo-reward fell back to the bare proxy (`h` or `χ²` below `ε_h`).
    pub degenerate: bool,
    /// Accepted step length (0 when the line search stalled).
    pub step: f64,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainLog {
    pub records: Vec<IterationRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub policy: SoftmaxPolicy,
    pub log: TrainLog,
}

fn ratio_or_zero(ratio: &LogRatioModel, pair: usize) -> f64 {
    // pairs outside the reference support: no policy of this MDP can reach them
    // without failing the support check elsewhere
    ratio.ratio(pair).unwrap_or(0.0)
}

/// Per-pair `p − (√(1−r²)/r)·(L − E·p)/√h`; the gradient of the robust value is
/// `r·V` times this. Falls back to `p` when `h < ε_h`.
pub fn maxmin_pseudo_reward(
    ratio: &LogRatioModel,
    proxy_norm: &RewardTable,
    stats: &RobustStats,
    r: f64,
) -> Result<(RewardTable, bool)> {
    if ratio.n_pairs() != proxy_norm.len() {
        return Err(Error::shape("ratio model and proxy differ in length"));
    }
    if stats.is_degenerate() || r >= 1.0 {
        return Ok((proxy_norm.clone(), stats.is_degenerate()));
    }
    let coeff = sqrt(1.0 - r * r) / r / sqrt(stats.h);
    let e = stats.proxy_mean_pi;
    let values = proxy_norm
        .values()
        .iter()
        .enumerate()
        .map(|(i, p)| p - coeff * (ratio_or_zero(ratio, i) - e * p))
        .collect();
    Ok((RewardTable::new(values)?, false))
}

/// Per-pair `p − λ·L/√χ²`, the gradient of `E_π[p] − λ·√χ²`. Falls back to `p`
/// when `χ² < ε_h`.
pub fn orpo_pseudo_reward(
    ratio: &LogRatioModel,
    proxy_norm: &RewardTable,
    chi2: f64,
    lambda: f64,
) -> Result<(RewardTable, bool)> {
    if ratio.n_pairs() != proxy_norm.len() {
        return Err(Error::shape("ratio model and proxy differ in length"));
    }
    if chi2 < EPS_H {
        return Ok((proxy_norm.clone(), true));
    }
    let coeff = lambda / sqrt(chi2);
    let values = proxy_norm.values().iter().enumerate().map(|(i, p)| p - coeff * ratio_or_zero(ratio, i)).collect();
    Ok((RewardTable::new(values)?, false))
}

/// `E_π[p] − λ·√χ²`.
pub fn orpo_objective(proxy_mean_pi: f64, chi2: f64, lambda: f64) -> f64 {
    proxy_mean_pi - lambda * sqrt(chi2)
}

/// One exact ascent step on `⟨μ_π, pseudo⟩` with the pseudo-reward held fixed.
pub fn policy_gradient_step(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    pseudo: &RewardTable,
    step_size: f64,
) -> Result<SoftmaxPolicy> {
    let grad = occupancy_gradient(mdp, policy, pseudo)?;
    Ok(policy.stepped(&grad, step_size))
}

/// Reference-side quantities shared by every iteration.
struct Reference {
    occ: Option<OccupancyMeasure>,
    batch: Option<TrajectoryBatch>,
    empirical: Option<OccupancyMeasure>,
    proxy_norm: RewardTable,
    proxy_std: f64,
    /// Features as the linear adversary sees them (centered if configured).
    features: Option<FeatureMap>,
    /// Whitened features under the exact reference occupancy (exact mode only).
    whitened: Option<WhitenedFeatures>,
    /// Occupancy-space ascent direction for leaving the reference (exact mode).
    escape: Option<Vec<f64>>,
}

/// Objective value and ascent direction of one policy.
struct Evaluation {
    value: f64,
    proxy_return: f64,
    chi2: f64,
    h: f64,
    pseudo: RewardTable,
    /// Gradient of the objective = `scale ·` policy gradient of `pseudo`.
    scale: f64,
    degenerate: bool,
    duals: Option<DualVariables>,
    theta: Option<ThetaWeights>,
    note: Option<String>,
}

struct Trainer<'a> {
    bundle: &'a EnvBundle,
    config: &'a TrainConfig,
    spec: CorrelationSpec,
    reference: Reference,
    last_duals: Option<DualVariables>,
}

impl<'a> Trainer<'a> {
    fn new(bundle: &'a EnvBundle, config: &'a TrainConfig) -> Result<Self> {
        config.validate()?;
        bundle.validate()?;
        let spec = CorrelationSpec::standard(config.r)?;
        let mdp = &bundle.mdp;
        let linear = config.algorithm == Algorithm::LinearMaxmin;
        if linear && bundle.features.is_none() {
            return Err(Error::invalid("linear max-min needs a feature map"));
        }
        let prepare = |occ: &OccupancyMeasure| -> Result<Option<FeatureMap>> {
            let Some(f) = bundle.features.as_ref().filter(|_| linear) else { return Ok(None) };
            let f = match &config.train_features {
                Some(cols) => f.select(cols)?,
                None => f.clone(),
            };
            Ok(Some(if config.center_features { f.centered(occ)? } else { f }))
        };
        let reference = match config.mode {
            BatchMode::Exact => {
                let occ = exact_occupancy(mdp, &bundle.reference)?;
                let moments = ProxyMoments::exact(&occ, &bundle.proxy_raw)?;
                let proxy_norm = normalize_proxy(&bundle.proxy_raw, &moments);
                let features = prepare(&occ)?;
                let whitened = match &features {
                    Some(f) => Some(whiten(&compute_q(&occ, f)?, f)?),
                    None => None,
                };
                let escape = tangent_projection(mdp, &occ, proxy_norm.values())?
                    .into_iter()
                    .zip(occ.mass())
                    .map(|(l, m)| l * m)
                    .collect();
                Reference {
                    occ: Some(occ),
                    batch: None,
                    empirical: None,
                    proxy_norm,
                    proxy_std: moments.std,
                    features,
                    whitened,
                    escape: Some(escape),
                }
            }
            BatchMode::Sampled => {
                let horizon = config.sampled.horizon.unwrap_or_else(|| mdp.default_horizon());
                let n = config.sampled.reference_trajectories;
                let a = sample_trajectories(mdp, &bundle.reference, n, horizon, derive_seed(config.seed, 0x5EF0))?;
                let b = sample_trajectories(mdp, &bundle.reference, n, horizon, derive_seed(config.seed, 0x5EF1))?;
                let moments = proxy_moments_ref(&a, &b, &bundle.proxy_raw, mdp.discount())?;
                let proxy_norm = normalize_proxy(&bundle.proxy_raw, &moments);
                let empirical = empirical_occupancy(&a, mdp.discount())?;
                let features = prepare(&empirical)?;
                Reference {
                    occ: None,
                    batch: Some(a),
                    empirical: Some(empirical),
                    proxy_norm,
                    proxy_std: moments.std,
                    features,
                    whitened: None,
                    escape: None,
                }
            }
        };
        Ok(Trainer { bundle, config, spec, reference, last_duals: None })
    }

    fn initial_policy(&self) -> Result<SoftmaxPolicy> {
        let uniform;
        let base = match self.config.init {
            Initialization::Reference => &self.bundle.reference,
            Initialization::Uniform => {
                uniform = SoftmaxPolicy::uniform(self.bundle.mdp.n_states(), self.bundle.mdp.n_actions());
                &uniform
            }
        };
        if self.config.init_jitter == 0.0 {
            return Ok(base.clone());
        }
        let mut rng = seeded(derive_seed(self.config.seed, 0x1417));
        let noise: Vec<f64> = (0..base.logits().len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(base.stepped(&noise, self.config.init_jitter))
    }

    /// Exact objective and pseudo-reward at `policy`.
    fn evaluate_exact(&self, policy: &SoftmaxPolicy, warm: Option<DualVariables>) -> Result<Evaluation> {
        let occ_ref = self.reference.occ.as_ref().expect("exact mode");
        let p = &self.reference.proxy_norm;
        let occ = exact_occupancy(&self.bundle.mdp, policy)?;
        let proxy_return = occ.expect(p.values());
        let blank = |value: f64, pseudo: RewardTable| Evaluation {
            value,
            proxy_return,
            chi2: 0.0,
            h: 0.0,
            pseudo,
            scale: 1.0,
            degenerate: false,
            duals: None,
            theta: None,
            note: None,
        };
        match self.config.algorithm {
            Algorithm::Proxy => Ok(blank(proxy_return, p.clone())),
            Algorithm::Maxmin => {
                let stats = robust_stats(&occ, occ_ref, p)?;
                let ratio = ratio_exact(&occ, occ_ref)?;
                let (pseudo, degenerate) = maxmin_pseudo_reward(&ratio, p, &stats, self.spec.r())?;
                Ok(Evaluation {
                    chi2: stats.chi2,
                    h: stats.h,
                    scale: self.spec.r(),
                    degenerate,
                    ..blank(robust_value(&stats, &self.spec), pseudo)
                })
            }
            Algorithm::Orpo => {
                let chi2 = chi_squared(&occ, occ_ref)?;
                let lambda = self.config.lambda(self.reference.proxy_std);
                let ratio = ratio_exact(&occ, occ_ref)?;
                let (pseudo, degenerate) = orpo_pseudo_reward(&ratio, p, chi2, lambda)?;
                let h = (chi2 - proxy_return * proxy_return).max(0.0);
                Ok(Evaluation { chi2, h, degenerate, ..blank(orpo_objective(proxy_return, chi2, lambda), pseudo) })
            }
            Algorithm::LinearMaxmin => {
                let whitened = self.reference.whitened.as_ref().expect("whitened in exact mode");
                let stats = linear_dual_stats(&occ, occ_ref, whitened, p)?;
                let chi2 = chi_squared(&occ, occ_ref)?;
                self.linear_evaluation(stats, whitened, warm, proxy_return, chi2)
            }
        }
    }

    fn linear_evaluation(
        &self,
        stats: LinearDualStats,
        whitened: &WhitenedFeatures,
        warm: Option<DualVariables>,
        proxy_return: f64,
        chi2: f64,
    ) -> Result<Evaluation> {
        let r = self.spec.r();
        let init = warm.unwrap_or(DEFAULT_DUAL_INIT);
        let (duals, theta) = match solve_linear_duals(&stats, r, init, &self.config.solver) {
            Ok(sol) => (Some(sol.duals), theta_star(&sol.duals, &stats, whitened)?),
            Err(Error::DualNonConvergence { .. }) if stats.dim() <= ENUMERATION_MAX_DIM => {
                let weights = enumerate_theta(&stats, r)?;
                let unwhitened = whitened.transform.transpose().matvec(&weights);
                (None, ThetaWeights { weights, unwhitened })
            }
            Err(e) => return Err(e),
        };
        let value = dot(&stats.v_phi, &theta.weights);
        let pseudo = whitened.features.combine(&theta.weights);
        Ok(Evaluation {
            value,
            proxy_return,
            chi2,
            h: (chi2 - proxy_return * proxy_return).max(0.0),
            pseudo,
            scale: 1.0,
            degenerate: false,
            duals,
            theta: Some(theta),
            note: None,
        })
    }

    fn record(&self, iteration: usize, eval: &Evaluation, step: f64, note: Option<String>) -> IterationRecord {
        IterationRecord {
            iteration,
            objective: eval.value,
            proxy_return: eval.proxy_return,
            chi2: eval.chi2,
            h: eval.h,
            duals: eval.duals.map(|d| d.as_array()),
            theta: eval.theta.as_ref().map(|t| t.weights.clone()),
            degenerate: eval.degenerate,
            step,
            note: note.or_else(|| eval.note.clone()),
        }
    }

    fn run_exact(&mut self) -> Result<TrainOutcome> {
        let mdp = &self.bundle.mdp;
        let mut policy = self.initial_policy()?;
        let mut log = TrainLog::default();
        let mut step = self.config.step_size;
        for it in 0..self.config.iterations {
            let eval = self.evaluate_exact(&policy, self.last_duals).map_err(|e| e.at_iteration(it))?;
            if eval.note.is_none() {
                self.last_duals = eval.duals;
            }
            let grad = occupancy_gradient(mdp, &policy, &eval.pseudo).map_err(|e| e.at_iteration(it))?;
            let direction = match self.config.exact_update {
                ExactUpdate::Natural => advantages(mdp, &policy, &eval.pseudo).map_err(|e| e.at_iteration(it))?,
                ExactUpdate::Gradient => grad.clone(),
            };
            let slope = eval.scale * dot(&grad, &direction);
            let mut accepted = None;
            // at the kink the gradient of the smooth branch is not an ascent direction
            if eval.degenerate {
                accepted = self.escape(&policy, eval.value).map(|(c, v)| (c, v, Some("escaped kink".into())));
            }
            // start a little above the last accepted step so the search can grow again
            let mut t = (2.0 * step).min(self.config.step_size);
            if let Some(cap) = self.config.max_logit_step {
                let peak = direction.iter().fold(0.0f64, |m, d| m.max(d.abs()));
                if peak > 0.0 {
                    t = t.min(cap / peak);
                }
            }
            if accepted.is_none() && slope > 0.0 {
                for _ in 0..self.config.max_backtracks {
                    let cand = policy.stepped(&direction, t);
                    // candidates that fail to evaluate (e.g. leave the support) are rejected
                    if let Ok(ce) = self.evaluate_exact(&cand, self.last_duals) {
                        let gain = ce.value - eval.value;
                        let sufficient = if eval.degenerate { gain > DEGENERATE_GAIN } else { gain >= self.config.armijo * t * slope };
                        if sufficient && ce.note.is_none() {
                            accepted = Some((cand, ce.value, None));
                            break;
                        }
                    }
                    t *= 0.5;
                }
            }
            if accepted.is_none() && !eval.degenerate {
                accepted = self.escape(&policy, eval.value).map(|(c, v)| (c, v, Some("escaped kink".into())));
                t = 0.0;
            }
            match accepted {
                Some((cand, value, note)) => {
                    let escaped = note.is_some();
                    log.records.push(self.record(it, &eval, if escaped { 0.0 } else { t }, note));
                    policy = cand;
                    if !escaped {
                        step = t;
                    }
                    if value - eval.value < self.config.tolerance {
                        break;
                    }
                }
                None => {
                    log.records.push(self.record(it, &eval, 0.0, Some("line search stalled".into())));
                    break;
                }
            }
        }
        Ok(TrainOutcome { policy, log })
    }

    /// Move in occupancy space along the reference-tangent projection of the
    /// proxy. The robust objectives have a kink at the reference occupancy
    /// where every logit direction can lose value while this one still gains.
    fn escape(&self, policy: &SoftmaxPolicy, value: f64) -> Option<(SoftmaxPolicy, f64)> {
        let dir = self.reference.escape.as_ref()?;
        let mdp = &self.bundle.mdp;
        let occ = exact_occupancy(mdp, policy).ok()?;
        let mass = occ.mass();
        // keep every pair at least half of its current mass
        let mut eps = f64::INFINITY;
        for (m, d) in mass.iter().zip(dir) {
            if *d < 0.0 {
                eps = eps.min(0.5 * m / -d);
            }
        }
        if !eps.is_finite() || eps <= 0.0 {
            return None;
        }
        for _ in 0..self.config.max_backtracks {
            let moved: Vec<f64> = mass.iter().zip(dir).map(|(m, d)| m + eps * d).collect();
            if let Ok(cand) = policy_from_occupancy(mdp, &moved, policy) {
                if let Ok(ce) = self.evaluate_exact(&cand, self.last_duals) {
                    if ce.value > value && ce.note.is_none() {
                        return Some((cand, ce.value));
                    }
                }
            }
            eps *= 0.5;
        }
        None
    }

    fn run_sampled(&mut self) -> Result<TrainOutcome> {
        let mdp = &self.bundle.mdp;
        let g = mdp.discount();
        let cfg = &self.config.sampled;
        let horizon = cfg.horizon.unwrap_or_else(|| mdp.default_horizon());
        let mass = truncation_mass(g, horizon);
        let p = self.reference.proxy_norm.clone();
        let mut policy = self.initial_policy()?;
        let mut log = TrainLog::default();
        for it in 0..self.config.iterations {
            let tag = (it as u64) << 8;
            let seed_a = derive_seed(self.config.seed, tag | 1);
            let seed_b = derive_seed(self.config.seed, tag | 2);
            let wrap = |e: Error| e.at_iteration(it);
            let batch = sample_trajectories(mdp, &policy, cfg.trajectories, horizon, seed_a).map_err(wrap)?;
            let eval = self.evaluate_sampled(&policy, &batch, seed_b, tag, mass).map_err(wrap)?;
            if eval.note.is_none() && eval.duals.is_some() {
                self.last_duals = eval.duals;
            }
            let next = surrogate_update(
                &policy,
                &batch,
                &eval.pseudo,
                g,
                self.config.step_size * eval.scale,
                self.config.clip_ratio,
                cfg.epochs.max(1),
            )
            .map_err(wrap)?;
            log.records.push(self.record(it, &eval, self.config.step_size, None));
            let _ = &p;
            policy = next;
        }
        Ok(TrainOutcome { policy, log })
    }

    fn sampled_ratio(&self, batch: &TrajectoryBatch, direction: RatioDirection, tag: u64) -> Result<LogRatioModel> {
        let g = self.bundle.mdp.discount();
        let ref_batch = self.reference.batch.as_ref().expect("sampled mode");
        match self.config.sampled.ratio {
            RatioSource::Empirical => {
                let occ = empirical_occupancy(batch, g)?;
                LogRatioModel::from_estimates(&occ, self.reference.empirical.as_ref().expect("sampled"), direction)
            }
            RatioSource::Discriminator => {
                let dcfg = DiscriminatorConfig {
                    direction,
                    seed: derive_seed(self.config.seed, tag | 3),
                    ..self.config.sampled.discriminator.clone()
                };
                train_ratio_estimator(ref_batch, batch, g, &dcfg)
            }
        }
    }

    fn evaluate_sampled(
        &self,
        policy: &SoftmaxPolicy,
        batch: &TrajectoryBatch,
        seed_b: u64,
        tag: u64,
        mass: f64,
    ) -> Result<Evaluation> {
        let mdp = &self.bundle.mdp;
        let g = mdp.discount();
        let p = &self.reference.proxy_norm;
        let e = sampled_return(batch, p, g)? / mass;
        let base = Evaluation {
            value: e,
            proxy_return: e,
            chi2: 0.0,
            h: 0.0,
            pseudo: p.clone(),
            scale: 1.0,
            degenerate: false,
            duals: None,
            theta: None,
            note: None,
        };
        match self.config.algorithm {
            Algorithm::Proxy => Ok(base),
            Algorithm::Maxmin | Algorithm::Orpo => {
                let ratio = self.sampled_ratio(batch, RatioDirection::Forward, tag)?;
                let chi2 = sampled_chi_squared(batch, &ratio, g)?.max(0.0);
                if self.config.algorithm == Algorithm::Orpo {
                    let lambda = self.config.lambda(self.reference.proxy_std);
                    let (pseudo, degenerate) = orpo_pseudo_reward(&ratio, p, chi2, lambda)?;
                    return Ok(Evaluation {
                        value: orpo_objective(e, chi2, lambda),
                        chi2,
                        h: (chi2 - e * e).max(0.0),
                        pseudo,
                        degenerate,
                        ..base
                    });
                }
                let twin =
                    sample_trajectories(mdp, policy, self.config.sampled.trajectories, batch.horizon(), seed_b)?;
                let e_sq = double_sample_square(batch, &twin, p, g)? / (mass * mass);
                let stats = RobustStats::with_squared_mean(chi2, e, e_sq);
                let (pseudo, degenerate) = maxmin_pseudo_reward(&ratio, p, &stats, self.spec.r())?;
                Ok(Evaluation {
                    value: robust_value(&stats, &self.spec),
                    chi2,
                    h: stats.h,
                    pseudo,
                    scale: self.spec.r(),
                    degenerate,
                    ..base
                })
            }
            Algorithm::LinearMaxmin => {
                let features = self.reference.features.as_ref().expect("checked at construction");
                let ratio = self.sampled_ratio(batch, RatioDirection::Reversed, tag)?;
                let whitened = whiten(&sampled_q(batch, &ratio, features, g)?, features)?;
                let stats = sampled_linear_dual_stats(batch, &ratio, &whitened, p, g)?;
                self.linear_evaluation(stats, &whitened, self.last_duals, e, 0.0)
            }
        }
    }
}

/// Ascent on the (optionally clipped) importance-weighted surrogate
/// `(1−γ)/N Σ_i Σ_t γ^t ρ_t Â_t`, with `Â_t` the discounted pseudo-reward to go
/// minus a per-state average baseline.
pub fn surrogate_update(
    policy: &SoftmaxPolicy,
    batch: &TrajectoryBatch,
    pseudo: &RewardTable,
    discount: f64,
    step_size: f64,
    clip_ratio: Option<f64>,
    epochs: usize,
) -> Result<SoftmaxPolicy> {
    let na = policy.n_actions();
    let ns = policy.n_states();
    if batch.n_pairs() != pseudo.len() || ns * na != pseudo.len() {
        return Err(Error::shape("policy, batch and pseudo-reward disagree"));
    }
    let h = batch.horizon();
    let n = batch.len();
    // reward-to-go per visit and the per-state baseline
    let mut togo = vec![0.0; n * h];
    let mut base_sum = vec![0.0; ns];
    let mut base_w = vec![0.0; ns];
    for (i, traj) in batch.trajectories().enumerate() {
        let mut acc = 0.0;
        for t in (0..h).rev() {
            acc = pseudo.values()[traj[t] as usize] + discount * acc;
            togo[i * h + t] = acc;
            let s = traj[t] as usize / na;
            base_sum[s] += acc;
            base_w[s] += 1.0;
        }
    }
    let baseline: Vec<f64> =
        base_sum.iter().zip(&base_w).map(|(s, w)| if *w > 0.0 { s / w } else { 0.0 }).collect();
    let old = policy.probabilities();
    let mut current = policy.clone();
    let scale = (1.0 - discount) / n as f64;
    for _ in 0..epochs {
        let probs = current.probabilities();
        let mut grad = vec![0.0; ns * na];
        for (i, traj) in batch.trajectories().enumerate() {
            let mut w = scale;
            for t in 0..h {
                let pair = traj[t] as usize;
                let (s, a) = (pair / na, pair % na);
                let adv = togo[i * h + t] - baseline[s];
                let rho = probs[pair] / old[pair];
                let active = match clip_ratio {
                    Some(eps) => !((adv > 0.0 && rho > 1.0 + eps) || (adv < 0.0 && rho < 1.0 - eps)),
                    None => true,
                };
                if active {
                    // ∂ρ/∂logit[s,b] = ρ (1{a=b} − π(b|s))
                    let coeff = w * adv * rho;
                    for b in 0..na {
                        let ind = if b == a { 1.0 } else { 0.0 };
                        grad[s * na + b] += coeff * (ind - probs[s * na + b]);
                    }
                }
                w *= discount;
            }
        }
        if grad.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite surrogate gradient".into()));
        }
        current = current.stepped(&grad, step_size);
    }
    Ok(current)
}

/// Trains with `config.algorithm`.
pub fn train(bundle: &EnvBundle, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(bundle, config)?;
    if config.iterations == 0 {
        return Ok(TrainOutcome { policy: trainer.initial_policy()?, log: TrainLog::default() });
    }
    match config.mode {
        BatchMode::Exact => trainer.run_exact(),
        BatchMode::Sampled => trainer.run_sampled(),
    }
}

pub fn train_maxmin(bundle: &EnvBundle, config: &TrainConfig) -> Result<TrainOutcome> {
    train(bundle, &TrainConfig { algorithm: Algorithm::Maxmin, ..config.clone() })
}

pub fn train_linear_maxmin(bundle: &EnvBundle, config: &TrainConfig) -> Result<TrainOutcome> {
    train(bundle, &TrainConfig { algorithm: Algorithm::LinearMaxmin, ..config.clone() })
}

pub fn train_orpo(bundle: &EnvBundle, config: &TrainConfig) -> Result<TrainOutcome> {
    train(bundle, &TrainConfig { algorithm: Algorithm::Orpo, ..config.clone() })
}

/// Exact objective of `policy` under `config` (algorithm, `r`, `λ`), as used by
/// the line search. Linear Max-Min re-solves its duals from the default start.
pub fn exact_objective(bundle: &EnvBundle, config: &TrainConfig, policy: &SoftmaxPolicy) -> Result<f64> {
    let cfg = TrainConfig { mode: BatchMode::Exact, ..config.clone() };
    let trainer = Trainer::new(bundle, &cfg)?;
    Ok(trainer.evaluate_exact(policy, None)?.value)
}

/// Exact gradient of the objective with respect to the logits, assembled from
/// the pseudo-reward (with `θ*` frozen for Linear Max-Min).
pub fn exact_objective_gradient(bundle: &EnvBundle, config: &TrainConfig, policy: &SoftmaxPolicy) -> Result<Vec<f64>> {
    let cfg = TrainConfig { mode: BatchMode::Exact, ..config.clone() };
    let trainer = Trainer::new(bundle, &cfg)?;
    let eval = trainer.evaluate_exact(policy, None)?;
    let grad = occupancy_gradient(&bundle.mdp, policy, &eval.pseudo)?;
    Ok(grad.into_iter().map(|g| g * eval.scale).collect())
}

/// Exact-mode pseudo-reward at `policy` (with its scale to the true gradient).
pub fn exact_pseudo_reward(
    bundle: &EnvBundle,
    config: &TrainConfig,
    policy: &SoftmaxPolicy,
) -> Result<(RewardTable, f64, Option<ThetaWeights>)> {
    let cfg = TrainConfig { mode: BatchMode::Exact, ..config.clone() };
    let trainer = Trainer::new(bundle, &cfg)?;
    let eval = trainer.evaluate_exact(policy, None)?;
    Ok((eval.pseudo, eval.scale, eval.theta))
}
