//! Randomized oracle suites: every check regenerates its instances from
//! `(seed, check, index)`, so a failure can be serialized and replayed exactly.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use rpo_core::adversary::{
    adversarial_reward, dual_solution, feasibility_check, robust_stats, robust_value, FeasibleSphere,
};
use rpo_core::env::{make_chain, make_tomato, ChainConfig, EnvBundle, TomatoConfig};
use rpo_core::estimators::{
    chi_squared, double_sample_square, empirical_occupancy, sampled_chi_squared,
};
use rpo_core::eval::{reference_frame, verify_lower_bound};
use rpo_core::linalg::Matrix;
use rpo_core::linear::{
    compute_q, linear_dual_gradients, sampled_q, solve_linear_adversary, whiten, FeatureMap, SolverOptions,
    DEFAULT_DUAL_INIT,
};
use rpo_core::mdp::exact_occupancy;
use rpo_core::policy_opt::{exact_objective, exact_objective_gradient, exact_pseudo_reward, Algorithm, TrainConfig};
use rpo_core::ratio::{
    ratio_exact, ratio_exact_reversed, ratio_l1_under, train_ratio_estimator, DiscriminatorConfig,
};
use rpo_core::rng::{derive_seed, seeded, Rng};
use rpo_core::{CorrelationSpec, Error, OccupancyMeasure, RewardTable, SoftmaxPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub seed: u64,
    /// Run only these checks (all when empty).
    pub only: Vec<String>,
    pub duality_instances: usize,
    pub duality_tol: f64,
    pub feasibility_tol: f64,
    pub cs_triples: usize,
    pub cs_tol: f64,
    pub gradient_instances: usize,
    pub gradient_tol: f64,
    pub fd_step: f64,
    pub linear_instances: usize,
    pub whitening_tol: f64,
    pub dual_gradient_tol: f64,
    pub theta_norm_tol: f64,
    pub dominance_tol: f64,
    pub lower_bound_rewards: usize,
    pub estimators: EstimatorSizes,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            seed: 0,
            only: Vec::new(),
            duality_instances: 200,
            duality_tol: 1e-8,
            feasibility_tol: 1e-6,
            cs_triples: 10_000,
            cs_tol: 1e-12,
            gradient_instances: 20,
            gradient_tol: 1e-4,
            fd_step: 1e-6,
            linear_instances: 50,
            whitening_tol: 1e-8,
            dual_gradient_tol: 1e-6,
            theta_norm_tol: 1e-5,
            dominance_tol: 1e-8,
            lower_bound_rewards: 1000,
            estimators: EstimatorSizes::default(),
        }
    }
}

/// Sample sizes and tolerances of the estimator checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSizes {
    pub occupancy_trajectories: usize,
    pub occupancy_tol: f64,
    pub double_sample_replications: usize,
    pub double_sample_batch: usize,
    pub double_sample_z: f64,
    pub chi2_trajectories: usize,
    pub chi2_tol: f64,
    pub q_trajectories: usize,
    pub q_tol: f64,
    pub initial_loss_tol: f64,
    pub ratio_trajectories: usize,
    pub ratio_tol: f64,
}

impl Default for EstimatorSizes {
    fn default() -> Self {
        EstimatorSizes {
            occupancy_trajectories: 100_000,
            occupancy_tol: 0.01,
            double_sample_replications: 1000,
            double_sample_batch: 20,
            double_sample_z: 3.0,
            chi2_trajectories: 50_000,
            chi2_tol: 0.02,
            q_trajectories: 50_000,
            q_tol: 0.02,
            initial_loss_tol: 1e-6,
            ratio_trajectories: 5_000,
            ratio_tol: 0.15,
        }
    }
}

/// A failing case, enough to regenerate and rerun it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub check: String,
    pub master_seed: u64,
    pub index: usize,
    pub seed: u64,
    /// `+∞` when the case errored (stored as `null`).
    #[serde(deserialize_with = "metric_or_infinity")]
    pub metric: f64,
    pub error: Option<String>,
    pub instance: Value,
}

fn metric_or_infinity<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    /// Cases the check applied to.
    pub cases: usize,
    /// Cases where the check does not apply (e.g. an empty linear set).
    pub skipped: usize,
    /// Largest metric over the applicable cases; the check passes when it is `≤ tol`.
    pub worst: f64,
    pub tol: f64,
    pub failure: Option<Failure>,
}

impl CheckReport {
    pub fn line(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        let mut s = format!(
            "{status} {:<22} cases={:<6} worst={:.3e} tol={:.0e}",
            self.name, self.cases, self.worst, self.tol
        );
        if self.skipped > 0 {
            s.push_str(&format!(" skipped={}", self.skipped));
        }
        if let Some(f) = &self.failure {
            s.push_str(&format!(" first-failure=#{}", f.index));
        }
        s
    }
}

/// Metric of one case; `None` when the check does not apply.
type CaseResult = Result<Option<f64>, String>;

const CHECKS: &[&str] = &[
    "strong-duality",
    "feasibility",
    "chi2-bound",
    "gradient-maxmin",
    "gradient-orpo",
    "gradient-linear",
    "whitening",
    "linear-dual-gradient",
    "linear-theta-norm",
    "linear-dominance",
    "lower-bound",
    "occupancy",
    "double-sampling",
    "sampled-chi2",
    "sampled-q",
    "discriminator-init",
    "learned-ratio",
];

pub fn check_names() -> &'static [&'static str] {
    CHECKS
}

fn tag(name: &str) -> u64 {
    // FNV-1a keeps tags stable across builds
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

pub fn case_seed(master: u64, check: &str, index: usize) -> u64 {
    derive_seed(derive_seed(master, tag(check)), index as u64)
}

impl OracleConfig {
    fn cases_and_tol(&self, check: &str) -> (usize, f64) {
        let e = &self.estimators;
        match check {
            "strong-duality" => (self.duality_instances, self.duality_tol),
            "feasibility" => (self.duality_instances, self.feasibility_tol),
            "chi2-bound" => (self.cs_triples, self.cs_tol),
            "gradient-maxmin" | "gradient-orpo" | "gradient-linear" => (self.gradient_instances, self.gradient_tol),
            "whitening" => (self.linear_instances, self.whitening_tol),
            "linear-dual-gradient" => (self.linear_instances, self.dual_gradient_tol),
            "linear-theta-norm" => (self.linear_instances, self.theta_norm_tol),
            "linear-dominance" => (self.linear_instances, self.dominance_tol),
            "lower-bound" => (lower_bound_matrix().len(), 1e-8),
            "occupancy" => (1, e.occupancy_tol),
            "double-sampling" => (1, e.double_sample_z),
            "sampled-chi2" => (1, e.chi2_tol),
            "sampled-q" => (1, e.q_tol),
            "discriminator-init" => (1, e.initial_loss_tol),
            "learned-ratio" => (1, e.ratio_tol),
            _ => (0, 0.0),
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if let Some(bad) = self.only.iter().find(|c| !CHECKS.contains(&c.as_str())) {
            anyhow::bail!("unknown oracle check {bad:?}; known checks: {}", CHECKS.join(", "));
        }
        Ok(())
    }
}

/// Instance and metric for case `index` of `check`.
fn run_case(check: &str, cfg: &OracleConfig, index: usize, seed: u64) -> (Value, CaseResult) {
    fn go<T: Serialize>(inst: T, eval: impl FnOnce(&T) -> CaseResult) -> (Value, CaseResult) {
        let r = eval(&inst);
        (serde_json::to_value(&inst).expect("instances serialize"), r)
    }
    let e = &cfg.estimators;
    match check {
        "strong-duality" => go(duality_instance(seed), |i| duality_gap(i).map(Some)),
        "feasibility" => go(duality_instance(seed), |i| feasibility_residual(i, cfg.feasibility_tol).map(Some)),
        "chi2-bound" => go(duality_instance(seed), |i| cs_violation(i).map(Some)),
        "gradient-maxmin" => go(chain_instance(seed, false), |i| gradient_error(i, Algorithm::Maxmin, cfg.fd_step)),
        "gradient-orpo" => go(chain_instance(seed, false), |i| gradient_error(i, Algorithm::Orpo, cfg.fd_step)),
        "gradient-linear" => {
            go(chain_instance(seed, true), |i| gradient_error(i, Algorithm::LinearMaxmin, cfg.fd_step))
        }
        "whitening" => go(chain_instance(seed, true), whitening_error),
        "linear-dual-gradient" => go(chain_instance(seed, true), |i| linear_metric(i, LinearMetric::DualGradient)),
        "linear-theta-norm" => go(chain_instance(seed, true), |i| linear_metric(i, LinearMetric::ThetaNorm)),
        "linear-dominance" => go(chain_instance(seed, true), |i| linear_metric(i, LinearMetric::Dominance)),
        "lower-bound" => {
            let cell = lower_bound_matrix()[index].clone();
            go(cell, |c| lower_bound_violation(c, cfg.lower_bound_rewards, seed).map(Some))
        }
        "occupancy" => go(estimator_instance(seed, 6, e.occupancy_trajectories), |i| occupancy_error(i).map(Some)),
        "double-sampling" => go(estimator_instance(seed, 6, e.double_sample_batch), |i| {
            double_sampling_z(i, e.double_sample_replications).map(Some)
        }),
        "sampled-chi2" => go(estimator_instance(seed, 6, e.chi2_trajectories), |i| chi2_error(i).map(Some)),
        "sampled-q" => go(estimator_instance(seed, 6, e.q_trajectories), |i| q_error(i).map(Some)),
        "discriminator-init" => go(estimator_instance(seed, 6, 200), |i| initial_loss_error(i).map(Some)),
        "learned-ratio" => go(estimator_instance(seed, 10, e.ratio_trajectories), |i| learned_ratio_error(i).map(Some)),
        other => (Value::Null, Err(format!("unknown check {other:?}"))),
    }
}

pub fn run_check(check: &str, cfg: &OracleConfig) -> CheckReport {
    let (n, tol) = cfg.cases_and_tol(check);
    let results: Vec<(usize, u64, Value, CaseResult)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = case_seed(cfg.seed, check, i);
            let (inst, r) = run_case(check, cfg, i, seed);
            (i, seed, inst, r)
        })
        .collect();
    let mut report =
        CheckReport { name: check.into(), passed: true, cases: 0, skipped: 0, worst: 0.0, tol, failure: None };
    for (index, seed, instance, result) in results {
        let (metric, error) = match result {
            Ok(None) => {
                report.skipped += 1;
                continue;
            }
            Ok(Some(m)) => (m, None),
            Err(e) => (f64::INFINITY, Some(e)),
        };
        report.cases += 1;
        if !(metric <= report.worst) {
            report.worst = metric;
        }
        let ok = error.is_none() && metric <= tol;
        if !ok && report.failure.is_none() {
            report.passed = false;
            report.failure =
                Some(Failure { check: check.into(), master_seed: cfg.seed, index, seed, metric, error, instance });
        }
    }
    report
}

pub fn run_all(cfg: &OracleConfig) -> Vec<CheckReport> {
    CHECKS
        .iter()
        .filter(|c| cfg.only.is_empty() || cfg.only.iter().any(|o| o == *c))
        .map(|c| run_check(c, cfg))
        .collect()
}

/// Reruns a serialized failure. Errors if the regenerated instance differs.
pub fn replay(failure: &Failure, cfg: &OracleConfig) -> anyhow::Result<CheckReport> {
    let seed = case_seed(failure.master_seed, &failure.check, failure.index);
    if seed != failure.seed {
        anyhow::bail!("seed {} does not match the derived seed {seed}", failure.seed);
    }
    let (_, tol) = cfg.cases_and_tol(&failure.check);
    let (instance, result) = run_case(&failure.check, cfg, failure.index, seed);
    if instance != failure.instance {
        anyhow::bail!("regenerated instance differs from the recorded one");
    }
    let (metric, error) = match result {
        Ok(m) => (m.unwrap_or(0.0), None),
        Err(e) => (f64::INFINITY, Some(e)),
    };
    let passed = error.is_none() && metric <= tol;
    Ok(CheckReport {
        name: failure.check.clone(),
        passed,
        cases: 1,
        skipped: 0,
        worst: metric,
        tol,
        failure: (!passed).then(|| Failure { metric, error, instance, ..failure.clone() }),
    })
}

fn err(e: Error) -> String {
    e.to_string()
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

// ---------------------------------------------------------------- closed form

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualityInstance {
    pub occ_ref: Vec<f64>,
    pub occ_pi: Vec<f64>,
    pub proxy: Vec<f64>,
    pub r: f64,
    pub mean_m: f64,
    pub std_v: f64,
}

/// 3–12 supported pairs plus up to two pairs neither measure visits.
pub fn duality_instance(seed: u64) -> DualityInstance {
    let mut rng = seeded(seed);
    let support = rng.random_range(3..=12usize);
    let n = support + rng.random_range(0..=2usize);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut occ_ref = vec![0.0; n];
    let mut occ_pi = vec![0.0; n];
    for &i in &order[..support] {
        occ_ref[i] = 0.05 + rng.random::<f64>();
        // squared uniforms put some pairs close to zero; a few are exactly zero
        let u: f64 = rng.random();
        occ_pi[i] = if rng.random::<f64>() < 0.15 { 0.0 } else { u * u };
    }
    if occ_pi.iter().all(|x| *x == 0.0) {
        occ_pi[order[0]] = 1.0;
    }
    for v in [&mut occ_ref, &mut occ_pi] {
        let t: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= t);
    }
    let raw: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let mean: f64 = raw.iter().zip(&occ_ref).map(|(p, w)| p * w).sum();
    let var: f64 = raw.iter().zip(&occ_ref).map(|(p, w)| w * (p - mean) * (p - mean)).sum();
    let proxy = raw.iter().map(|p| (p - mean) / var.sqrt()).collect();
    DualityInstance {
        occ_ref,
        occ_pi,
        proxy,
        r: rng.random_range(0.02..0.98),
        mean_m: rng.random_range(-2.0..2.0),
        std_v: rng.random_range(0.1..3.0),
    }
}

struct Duality {
    occ_ref: OccupancyMeasure,
    occ_pi: OccupancyMeasure,
    proxy: RewardTable,
    spec: CorrelationSpec,
}

fn duality_parts(i: &DualityInstance) -> Result<Duality, Error> {
    Ok(Duality {
        occ_ref: OccupancyMeasure::new(i.occ_ref.clone())?,
        occ_pi: OccupancyMeasure::new(i.occ_pi.clone())?,
        proxy: RewardTable::new(i.proxy.clone())?,
        spec: CorrelationSpec::new(i.r, i.mean_m, i.std_v)?,
    })
}

/// Largest of `|⟨μ_π,R*⟩ − closed form|` and `|sphere minimum − closed form|`.
fn duality_gap(i: &DualityInstance) -> Result<f64, String> {
    let d = duality_parts(i).map_err(err)?;
    let stats = robust_stats(&d.occ_pi, &d.occ_ref, &d.proxy).map_err(err)?;
    let closed = robust_value(&stats, &d.spec);
    let ratio = ratio_exact(&d.occ_pi, &d.occ_ref).map_err(err)?;
    let rstar = adversarial_reward(&ratio, &d.proxy, &dual_solution(&stats, &d.spec), &d.spec).map_err(err)?;
    let primal = rstar.seen_return(&d.occ_pi);
    let sphere = FeasibleSphere::new(&d.occ_ref, &d.proxy, &d.spec).and_then(|s| s.analytic_min(&d.occ_pi));
    let sphere = sphere.map_err(err)?;
    Ok((primal - closed).abs().max((sphere - closed).abs()))
}

fn feasibility_residual(i: &DualityInstance, tol: f64) -> Result<f64, String> {
    let d = duality_parts(i).map_err(err)?;
    let stats = robust_stats(&d.occ_pi, &d.occ_ref, &d.proxy).map_err(err)?;
    let ratio = ratio_exact(&d.occ_pi, &d.occ_ref).map_err(err)?;
    let rstar = adversarial_reward(&ratio, &d.proxy, &dual_solution(&stats, &d.spec), &d.spec).map_err(err)?;
    let f = feasibility_check(&rstar, &d.occ_ref, &d.proxy, &d.spec, tol).map_err(err)?;
    Ok(f.mean_residual.max(f.second_moment_residual).max(f.correlation_residual))
}

/// `max(0, E² − χ²)`.
fn cs_violation(i: &DualityInstance) -> Result<f64, String> {
    let d = duality_parts(i).map_err(err)?;
    let chi2 = chi_squared(&d.occ_pi, &d.occ_ref).map_err(err)?;
    let e = d.occ_pi.expect(d.proxy.values());
    Ok((e * e - chi2).max(0.0))
}

// ---------------------------------------------------------------- chains

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainInstance {
    pub chain: ChainConfig,
    pub r: f64,
    pub logits: Vec<f64>,
}

pub fn chain_instance(seed: u64, features: bool) -> ChainInstance {
    let mut rng = seeded(seed);
    let chain = ChainConfig {
        n_states: rng.random_range(3..=8),
        n_actions: rng.random_range(2..=3),
        discount: rng.random_range(0.5..0.95),
        correlation: rng.random_range(-0.9..0.9),
        drift: rng.random_range(0.2..0.8),
        n_random_features: if features { rng.random_range(1..=3) } else { 0 },
        seed: rng.random(),
    };
    let scale = rng.random_range(0.3..1.5);
    let logits = (0..chain.n_states * chain.n_actions).map(|_| scale * normal(&mut rng)).collect();
    ChainInstance { chain, r: rng.random_range(0.05..0.95), logits }
}

fn chain_parts(i: &ChainInstance) -> Result<(EnvBundle, SoftmaxPolicy), Error> {
    let bundle = make_chain(&i.chain)?;
    let policy = SoftmaxPolicy::new(i.chain.n_states, i.chain.n_actions, i.logits.clone())?;
    Ok((bundle, policy))
}

/// `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` with central differences. The linear
/// objective is taken with `θ` frozen at the instance policy.
fn gradient_error(i: &ChainInstance, algorithm: Algorithm, h: f64) -> CaseResult {
    let (bundle, policy) = chain_parts(i).map_err(err)?;
    let cfg = TrainConfig { algorithm, r: i.r, ..TrainConfig::default() };
    let grad = exact_objective_gradient(&bundle, &cfg, &policy).map_err(err)?;
    let frozen = match algorithm {
        Algorithm::LinearMaxmin => Some(exact_pseudo_reward(&bundle, &cfg, &policy).map_err(err)?),
        _ => None,
    };
    let objective = |p: &SoftmaxPolicy| -> Result<f64, Error> {
        match &frozen {
            Some((pseudo, scale, _)) => Ok(exact_occupancy(&bundle.mdp, p)?.expect(pseudo.values()) * scale),
            None => exact_objective(&bundle, &cfg, p),
        }
    };
    let mut fd = Vec::with_capacity(grad.len());
    for k in 0..grad.len() {
        let mut e = vec![0.0; grad.len()];
        e[k] = 1.0;
        let up = objective(&policy.stepped(&e, h)).map_err(err)?;
        let down = objective(&policy.stepped(&e, -h)).map_err(err)?;
        fd.push((up - down) / (2.0 * h));
    }
    let diff: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale = norm(&grad).max(norm(&fd));
    Ok(Some(if scale < 1e-10 { diff } else { diff / scale }))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn centered_features(bundle: &EnvBundle, occ_ref: &OccupancyMeasure) -> Result<FeatureMap, Error> {
    bundle.features.as_ref().ok_or_else(|| Error::InvalidArgument("no features".into()))?.centered(occ_ref)
}

fn whitening_error(i: &ChainInstance) -> CaseResult {
    let (bundle, _) = chain_parts(i).map_err(err)?;
    let (occ_ref, _) = reference_frame(&bundle).map_err(err)?;
    let features = centered_features(&bundle, &occ_ref).map_err(err)?;
    let q = compute_q(&occ_ref, &features).map_err(err)?;
    let w = whiten(&q, &features).map_err(err)?.transform;
    let wqw = w.matmul(&q).and_then(|m| m.matmul(&w.transpose())).map_err(err)?;
    Ok(Some(wqw.max_abs_diff(&Matrix::identity(q.rows()))))
}

#[derive(Clone, Copy)]
enum LinearMetric {
    DualGradient,
    ThetaNorm,
    Dominance,
}

fn linear_metric(i: &ChainInstance, metric: LinearMetric) -> CaseResult {
    let (bundle, policy) = chain_parts(i).map_err(err)?;
    let (occ_ref, proxy) = reference_frame(&bundle).map_err(err)?;
    let features = centered_features(&bundle, &occ_ref).map_err(err)?;
    let occ_pi = exact_occupancy(&bundle.mdp, &policy).map_err(err)?;
    let adv = match solve_linear_adversary(
        &occ_pi,
        &occ_ref,
        &features,
        &proxy,
        i.r,
        DEFAULT_DUAL_INIT,
        &SolverOptions::default(),
    ) {
        Ok(a) => a,
        // no nonnegative unit-variance weights reach this correlation: the set is empty
        Err(Error::InvalidArgument(_)) => return Ok(None),
        Err(e) => return Err(err(e)),
    };
    Ok(match metric {
        LinearMetric::DualGradient if adv.enumerated => None,
        LinearMetric::DualGradient => {
            Some(norm(&linear_dual_gradients(&adv.solution.duals, &adv.stats, i.r).map_err(err)?))
        }
        LinearMetric::ThetaNorm => {
            Some((adv.theta.weights.iter().map(|t| t * t).sum::<f64>() - 1.0).abs())
        }
        LinearMetric::Dominance => {
            let stats = robust_stats(&occ_pi, &occ_ref, &proxy).map_err(err)?;
            let general = robust_value(&stats, &CorrelationSpec::standard(i.r).map_err(err)?);
            Some((general - adv.value).max(0.0))
        }
    })
}

// ---------------------------------------------------------------- lower bound

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundCell {
    pub environment: String,
    pub policy: String,
    pub r: f64,
}

/// Environments × policies × evaluation `r`.
pub fn lower_bound_matrix() -> Vec<LowerBoundCell> {
    let mut cells = Vec::new();
    for env in ["tomato", "chain", "chain-wide"] {
        for policy in ["reference", "uniform", "random-0", "random-1", "proxy-greedy"] {
            for r in [0.1, 0.4, 0.9] {
                cells.push(LowerBoundCell { environment: env.into(), policy: policy.into(), r });
            }
        }
    }
    cells
}

fn lower_bound_env(name: &str) -> Result<EnvBundle, Error> {
    match name {
        "tomato" => make_tomato(&TomatoConfig::default()),
        "chain" => make_chain(&ChainConfig::default()),
        "chain-wide" => make_chain(&ChainConfig { n_states: 10, n_actions: 3, seed: 7, ..ChainConfig::default() }),
        other => Err(Error::InvalidArgument(format!("unknown environment {other}"))),
    }
}

fn lower_bound_policy(bundle: &EnvBundle, name: &str) -> Result<SoftmaxPolicy, Error> {
    let (ns, na) = (bundle.mdp.n_states(), bundle.mdp.n_actions());
    match name {
        "reference" => Ok(bundle.reference.clone()),
        "uniform" => Ok(SoftmaxPolicy::uniform(ns, na)),
        "proxy-greedy" => {
            let q = rpo_core::env::optimal_q(&bundle.mdp, &bundle.proxy_raw);
            SoftmaxPolicy::new(ns, na, q.iter().map(|x| 5.0 * x).collect())
        }
        other => {
            let k: u64 = other.trim_start_matches("random-").parse().unwrap_or(0);
            let mut rng = seeded(derive_seed(0x7431, k));
            SoftmaxPolicy::new(ns, na, (0..ns * na).map(|_| 2.0 * normal(&mut rng)).collect())
        }
    }
}

/// `max(0, −min margin)`; a violation is reported as an error by the core check.
fn lower_bound_violation(c: &LowerBoundCell, n: usize, seed: u64) -> Result<f64, String> {
    let bundle = lower_bound_env(&c.environment).map_err(err)?;
    let policy = lower_bound_policy(&bundle, &c.policy).map_err(err)?;
    let spec = CorrelationSpec::standard(c.r).map_err(err)?;
    let report = verify_lower_bound(&bundle, &policy, &spec, n, &mut seeded(seed)).map_err(err)?;
    Ok((-report.min_margin).max(0.0))
}

// ---------------------------------------------------------------- estimators

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorInstance {
    pub chain: ChainConfig,
    pub logits: Vec<f64>,
    pub trajectories: usize,
    pub seed: u64,
}

/// A fixed small chain with a policy moderately far from the uniform reference.
pub fn estimator_instance(seed: u64, n_states: usize, trajectories: usize) -> EstimatorInstance {
    let chain = ChainConfig { n_states, ..ChainConfig::default() };
    let mut rng = seeded(seed);
    let logits = (0..n_states * chain.n_actions).map(|_| 0.5 * normal(&mut rng)).collect();
    EstimatorInstance { chain, logits, trajectories, seed: rng.random() }
}

struct EstimatorParts {
    bundle: EnvBundle,
    policy: SoftmaxPolicy,
    occ_ref: OccupancyMeasure,
    occ_pi: OccupancyMeasure,
    proxy: RewardTable,
}

fn estimator_parts(i: &EstimatorInstance) -> Result<EstimatorParts, Error> {
    let bundle = make_chain(&i.chain)?;
    let policy = SoftmaxPolicy::new(i.chain.n_states, i.chain.n_actions, i.logits.clone())?;
    let (occ_ref, proxy) = reference_frame(&bundle)?;
    let occ_pi = exact_occupancy(&bundle.mdp, &policy)?;
    Ok(EstimatorParts { bundle, policy, occ_ref, occ_pi, proxy })
}

fn sample(p: &EstimatorParts, policy: &SoftmaxPolicy, n: usize, seed: u64) -> Result<rpo_core::TrajectoryBatch, Error> {
    rpo_core::mdp::sample_trajectories(&p.bundle.mdp, policy, n, p.bundle.mdp.default_horizon(), seed)
}

fn occupancy_error(i: &EstimatorInstance) -> Result<f64, String> {
    let p = estimator_parts(i).map_err(err)?;
    let batch = sample(&p, &p.policy, i.trajectories, i.seed).map_err(err)?;
    let emp = empirical_occupancy(&batch, p.bundle.mdp.discount()).map_err(err)?;
    Ok(emp.l1_distance(&p.occ_pi))
}

/// `|mean − E²| / SE` over independent replications.
fn double_sampling_z(i: &EstimatorInstance, replications: usize) -> Result<f64, String> {
    let p = estimator_parts(i).map_err(err)?;
    let gamma = p.bundle.mdp.discount();
    let exact = p.occ_pi.expect(p.proxy.values());
    let draws: Vec<f64> = (0..replications)
        .into_par_iter()
        .map(|k| {
            let a = sample(&p, &p.policy, i.trajectories, derive_seed(i.seed, 2 * k as u64))?;
            let b = sample(&p, &p.policy, i.trajectories, derive_seed(i.seed, 2 * k as u64 + 1))?;
            double_sample_square(&a, &b, &p.proxy, gamma)
        })
        .collect::<Result<_, Error>>()
        .map_err(err)?;
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean - exact * exact).abs() / (var / n).sqrt())
}

fn chi2_error(i: &EstimatorInstance) -> Result<f64, String> {
    let p = estimator_parts(i).map_err(err)?;
    let batch = sample(&p, &p.policy, i.trajectories, i.seed).map_err(err)?;
    let ratio = ratio_exact(&p.occ_pi, &p.occ_ref).map_err(err)?;
    let sampled = sampled_chi_squared(&batch, &ratio, p.bundle.mdp.discount()).map_err(err)?;
    let exact = chi_squared(&p.occ_pi, &p.occ_ref).map_err(err)?;
    Ok((sampled - exact).abs())
}

fn q_error(i: &EstimatorInstance) -> Result<f64, String> {
    let p = estimator_parts(i).map_err(err)?;
    let features = p.bundle.features.as_ref().ok_or("chain has no features")?;
    let batch = sample(&p, &p.policy, i.trajectories, i.seed).map_err(err)?;
    let ratio = ratio_exact_reversed(&p.occ_pi, &p.occ_ref).map_err(err)?;
    let sampled = sampled_q(&batch, &ratio, features, p.bundle.mdp.discount()).map_err(err)?;
    let exact = compute_q(&p.occ_ref, features).map_err(err)?;
    Ok(sampled.frobenius_distance(&exact))
}

fn discriminator_batches(
    p: &EstimatorParts,
    i: &EstimatorInstance,
) -> Result<(rpo_core::TrajectoryBatch, rpo_core::TrajectoryBatch), Error> {
    let reference = sample(p, &p.bundle.reference, i.trajectories, derive_seed(i.seed, 0))?;
    let pi = sample(p, &p.policy, i.trajectories, derive_seed(i.seed, 1))?;
    Ok((reference, pi))
}

fn initial_loss_error(i: &EstimatorInstance) -> Result<f64, String> {
    let p = estimator_parts(i).map_err(err)?;
    let (a, b) = discriminator_batches(&p, i).map_err(err)?;
    let cfg = DiscriminatorConfig { epochs: 0, ..DiscriminatorConfig::default() };
    let model = train_ratio_estimator(&a, &b, p.bundle.mdp.discount(), &cfg).map_err(err)?;
    Ok((model.loss_log()[0] - 2.0 * std::f64::consts::LN_2).abs())
}

/// `E_ref|L̂ − L|` after the default schedule.
fn learned_ratio_error(i: &EstimatorInstance) -> Result<f64, String> {
    let p = estimator_parts(i).map_err(err)?;
    let (a, b) = discriminator_batches(&p, i).map_err(err)?;
    let model = train_ratio_estimator(&a, &b, p.bundle.mdp.discount(), &DiscriminatorConfig::default()).map_err(err)?;
    let exact = ratio_exact(&p.occ_pi, &p.occ_ref).map_err(err)?;
    ratio_l1_under(&p.occ_ref, &model, &exact).map_err(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instances_are_deterministic() {
        assert_eq!(duality_instance(5), duality_instance(5));
        assert_ne!(duality_instance(5), duality_instance(6));
        assert_eq!(chain_instance(3, true), chain_instance(3, true));
        let d = duality_instance(11);
        assert!((3..=14).contains(&d.occ_ref.len()));
        assert!((d.occ_ref.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn case_seeds_depend_on_check_and_index() {
        assert_ne!(case_seed(0, "feasibility", 0), case_seed(0, "strong-duality", 0));
        assert_ne!(case_seed(0, "feasibility", 0), case_seed(0, "feasibility", 1));
        assert_eq!(case_seed(9, "lower-bound", 4), case_seed(9, "lower-bound", 4));
    }

    #[test]
    fn every_check_has_cases() {
        let cfg = OracleConfig::default();
        for c in check_names() {
            assert!(cfg.cases_and_tol(c).0 > 0, "{c}");
        }
    }

    #[test]
    fn failures_replay_identically() {
        // an impossible tolerance forces a failure on the first case
        let cfg = OracleConfig { duality_instances: 3, duality_tol: -1.0, ..OracleConfig::default() };
        let report = run_check("strong-duality", &cfg);
        assert!(!report.passed);
        let failure = report.failure.unwrap();
        assert!(failure.error.is_none(), "{:?}", failure.error);
        let json = serde_json::to_string(&failure).unwrap();
        let back: Failure = serde_json::from_str(&json).unwrap();
        let again = replay(&back, &cfg).unwrap();
        assert!(!again.passed);
        assert_eq!(again.worst, failure.metric);

        let mut tampered = back.clone();
        tampered.instance["r"] = serde_json::json!(0.123);
        assert!(replay(&tampered, &cfg).is_err());
    }
}
