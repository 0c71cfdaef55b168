//! Tabular benchmark environments: a tomato-watering gridworld with a hackable
//! sprinkler bonus, and random chains with proxy/true rewards at a chosen
//! correlation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linear::FeatureMap;
use crate::math::{abs, exp, sqrt};
use crate::mdp::{exact_occupancy, RewardTable, SoftmaxPolicy, TabularMdp};
use crate::rng;

/// Everything an experiment needs: the MDP, the observed proxy, the held-out
/// true reward, optional features and the trusted reference policy.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EnvBundle {
    pub name: String,
    pub mdp: TabularMdp,
    pub proxy_raw: RewardTable,
    pub true_raw: RewardTable,
    pub features: Option<FeatureMap>,
    pub reference: SoftmaxPolicy,
    pub metadata: EnvMetadata,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum EnvMetadata {
    Tomato(TomatoConfig),
    Chain(ChainConfig),
    Custom,
}

impl EnvBundle {
    pub fn new(
        name: impl Into<String>,
        mdp: TabularMdp,
        proxy_raw: RewardTable,
        true_raw: RewardTable,
        features: Option<FeatureMap>,
        reference: SoftmaxPolicy,
    ) -> Result<Self> {
        let bundle = EnvBundle {
            name: name.into(),
            mdp,
            proxy_raw,
            true_raw,
            features,
            reference,
            metadata: EnvMetadata::Custom,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.mdp.n_pairs();
        if self.proxy_raw.len() != n || self.true_raw.len() != n {
            return Err(Error::shape("reward tables do not match the MDP"));
        }
        if self.features.as_ref().is_some_and(|f| f.n_pairs() != n) {
            return Err(Error::shape("feature map does not match the MDP"));
        }
        self.reference.check_shape(&self.mdp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum SprinklerMode {
    /// Proxy at the sprinkler is `wet count + bonus`.
    #[default]
    Additive,
    /// Proxy at the sprinkler is `bonus`, whatever the tomatoes' state.
    Replace,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TomatoConfig {
    pub width: usize,
    pub height: usize,
    /// `(row, col)` cells.
    pub tomatoes: Vec<(usize, usize)>,
    pub sprinkler: (usize, usize),
    pub start: (usize, usize),
    pub start_wet: bool,
    pub dry_prob: f64,
    pub bonus: f64,
    pub sprinkler_mode: SprinklerMode,
    /// Uniform-random mixing rate of the reference policy.
    pub exploration: f64,
    /// Softmax temperature applied to optimal true-reward action values.
    pub temperature: f64,
    pub discount: f64,
    pub max_pairs: usize,
}

impl Default for TomatoConfig {
    fn default() -> Self {
        TomatoConfig {
            width: 3,
            height: 3,
            tomatoes: vec![(0, 0), (0, 2)],
            sprinkler: (2, 2),
            start: (1, 1),
            start_wet: false,
            dry_prob: 0.15,
            bonus: 2.0,
            sprinkler_mode: SprinklerMode::Additive,
            exploration: 0.10,
            temperature: 0.2,
            discount: 0.9,
            max_pairs: 20_000,
        }
    }
}

pub const TOMATO_ACTIONS: [&str; 5] = ["up", "down", "left", "right", "stay"];
const STAY: usize = 4;
const MAX_TOMATOES: usize = 4;

/// Index layout of tomato states: `cell * 2^k + wet_mask`.
#[derive(Debug, Clone, Copy)]
pub struct TomatoLayout {
    width: usize,
    height: usize,
    n_tomatoes: usize,
}

impl TomatoLayout {
    pub fn n_states(&self) -> usize {
        self.width * self.height << self.n_tomatoes
    }

    pub fn state(&self, pos: (usize, usize), mask: usize) -> usize {
        ((pos.0 * self.width + pos.1) << self.n_tomatoes) + mask
    }

    pub fn decode(&self, s: usize) -> ((usize, usize), usize) {
        let cell = s >> self.n_tomatoes;
        ((cell / self.width, cell % self.width), s & ((1 << self.n_tomatoes) - 1))
    }

    fn step(&self, pos: (usize, usize), action: usize) -> (usize, usize) {
        let (r, c) = pos;
        match action {
            0 if r > 0 => (r - 1, c),
            1 if r + 1 < self.height => (r + 1, c),
            2 if c > 0 => (r, c - 1),
            3 if c + 1 < self.width => (r, c + 1),
            _ => pos,
        }
    }
}

impl TomatoConfig {
    pub fn layout(&self) -> TomatoLayout {
        TomatoLayout { width: self.width, height: self.height, n_tomatoes: self.tomatoes.len() }
    }

    pub fn validate(&self) -> Result<()> {
        let inside = |p: (usize, usize)| p.0 < self.height && p.1 < self.width;
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("grid must be nonempty"));
        }
        if self.tomatoes.is_empty() || self.tomatoes.len() > MAX_TOMATOES {
            return Err(Error::invalid(format!("need 1 to {MAX_TOMATOES} tomatoes, got {}", self.tomatoes.len())));
        }
        for (i, t) in self.tomatoes.iter().enumerate() {
            if !inside(*t) {
                return Err(Error::invalid(format!("tomato {t:?} lies outside the grid")));
            }
            if self.tomatoes[..i].contains(t) {
                return Err(Error::invalid(format!("tomato cell {t:?} listed twice")));
            }
        }
        if !inside(self.sprinkler) || !inside(self.start) {
            return Err(Error::invalid("sprinkler and start cells must lie inside the grid"));
        }
        if self.tomatoes.contains(&self.sprinkler) {
            return Err(Error::invalid("the sprinkler cannot share a cell with a tomato"));
        }
        if !(self.dry_prob > 0.0 && self.dry_prob < 1.0) {
            return Err(Error::invalid(format!("dry probability must lie in (0, 1), got {}", self.dry_prob)));
        }
        if !(self.exploration > 0.0 && self.exploration < 1.0) {
            return Err(Error::invalid(format!("exploration rate must lie in (0, 1), got {}", self.exploration)));
        }
        if !(self.temperature > 0.0) || !self.bonus.is_finite() {
            return Err(Error::invalid("temperature must be positive and the bonus finite"));
        }
        let pairs = self.layout().n_states() * TOMATO_ACTIONS.len();
        if pairs > self.max_pairs {
            return Err(Error::TooLarge { pairs, cap: self.max_pairs });
        }
        Ok(())
    }
}

pub fn make_tomato(config: &TomatoConfig) -> Result<EnvBundle> {
    config.validate()?;
    let layout = config.layout();
    let k = config.tomatoes.len();
    let n_states = layout.n_states();
    let n_actions = TOMATO_ACTIONS.len();
    let full = (1usize << k) - 1;

    let mut transitions = vec![0.0; n_states * n_actions * n_states];
    let mut proxy = vec![0.0; n_states * n_actions];
    let mut truth = vec![0.0; n_states * n_actions];
    for s in 0..n_states {
        let (pos, mask) = layout.decode(s);
        let wet = mask.count_ones() as f64;
        let at_sprinkler = pos == config.sprinkler;
        for a in 0..n_actions {
            let pair = s * n_actions + a;
            truth[pair] = wet;
            proxy[pair] = match (at_sprinkler, config.sprinkler_mode) {
                (false, _) => wet,
                (true, SprinklerMode::Additive) => wet + config.bonus,
                (true, SprinklerMode::Replace) => config.bonus,
            };
            let next = layout.step(pos, a);
            let row = &mut transitions[pair * n_states..(pair + 1) * n_states];
            for next_mask in 0..=full {
                let mut p = 1.0;
                for (i, t) in config.tomatoes.iter().enumerate() {
                    let bit = 1 << i;
                    let now_wet = next_mask & bit != 0;
                    p *= if *t == next {
                        if now_wet { 1.0 } else { 0.0 }
                    } else if mask & bit != 0 {
                        if now_wet { 1.0 - config.dry_prob } else { config.dry_prob }
                    } else if now_wet {
                        0.0
                    } else {
                        1.0
                    };
                }
                if p > 0.0 {
                    row[layout.state(next, next_mask)] += p;
                }
            }
        }
    }
    let mut initial = vec![0.0; n_states];
    initial[layout.state(config.start, if config.start_wet { full } else { 0 })] = 1.0;
    let mdp = TabularMdp::new(n_states, n_actions, transitions, initial, config.discount)?;
    let true_raw = RewardTable::new(truth)?;
    let reference = soft_optimal_policy(&mdp, &true_raw, config.temperature, config.exploration)?;
    let mut bundle = EnvBundle::new("tomato", mdp, RewardTable::new(proxy)?, true_raw, None, reference)?;
    bundle.metadata = EnvMetadata::Tomato(config.clone());
    if config.sprinkler_mode == SprinklerMode::Additive {
        bundle.features = Some(tomato_features(&bundle)?);
    }
    Ok(bundle)
}

/// Optimal action values of `reward` by value iteration.
pub fn optimal_q(mdp: &TabularMdp, reward: &RewardTable) -> Vec<f64> {
    let (ns, na, g) = (mdp.n_states(), mdp.n_actions(), mdp.discount());
    let mut v = vec![0.0; ns];
    let mut q = vec![0.0; ns * na];
    for _ in 0..100_000 {
        for s in 0..ns {
            for a in 0..na {
                let i = mdp.pair(s, a);
                q[i] = reward.values()[i] + g * crate::math::dot(mdp.next_state_dist(s, a), &v);
            }
        }
        let mut delta: f64 = 0.0;
        for s in 0..ns {
            let best = q[s * na..(s + 1) * na].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max(abs(best - v[s]));
            v[s] = best;
        }
        if delta < 1e-12 {
            break;
        }
    }
    q
}

/// `(1−ε)·softmax(Q*/τ) + ε·uniform`, stored as log-probabilities.
pub fn soft_optimal_policy(
    mdp: &TabularMdp,
    reward: &RewardTable,
    temperature: f64,
    exploration: f64,
) -> Result<SoftmaxPolicy> {
    let q = optimal_q(mdp, reward);
    let na = mdp.n_actions();
    let mut probs = vec![0.0; q.len()];
    for s in 0..mdp.n_states() {
        let row = &q[s * na..(s + 1) * na];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = row.iter().map(|x| exp((x - max) / temperature)).collect();
        let total: f64 = w.iter().sum();
        for a in 0..na {
            probs[s * na + a] = (1.0 - exploration) * w[a] / total + exploration / na as f64;
        }
    }
    SoftmaxPolicy::from_probabilities(mdp.n_states(), na, &probs)
}

/// Wet-tomato count, sprinkler indicator and movement indicator (action ≠ stay).
///
/// Fails unless the proxy equals `wet + bonus·sprinkler` exactly, which holds for
/// the additive sprinkler mode only.
pub fn tomato_features(bundle: &EnvBundle) -> Result<FeatureMap> {
    let EnvMetadata::Tomato(config) = &bundle.metadata else {
        return Err(Error::invalid(format!("`{}` is not a tomato environment", bundle.name)));
    };
    let layout = config.layout();
    let na = bundle.mdp.n_actions();
    let n = bundle.mdp.n_pairs();
    let (mut wet, mut spr, mut moving) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for pair in 0..n {
        let (pos, mask) = layout.decode(pair / na);
        wet[pair] = mask.count_ones() as f64;
        spr[pair] = if pos == config.sprinkler { 1.0 } else { 0.0 };
        moving[pair] = if pair % na != STAY { 1.0 } else { 0.0 };
    }
    let residual = (0..n)
        .map(|i| abs(wet[i] + config.bonus * spr[i] - bundle.proxy_raw.values()[i]))
        .fold(0.0, f64::max);
    if residual > 1e-10 {
        return Err(Error::FeatureMismatch(residual));
    }
    FeatureMap::from_columns(&[wet, spr, moving])
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ChainConfig {
    pub n_states: usize,
    pub n_actions: usize,
    pub discount: f64,
    /// Correlation of the generated true reward with the proxy under `μ_ref`.
    pub correlation: f64,
    /// Probability that an action moves along the chain; the rest is spread at random.
    pub drift: f64,
    /// Random features appended after the proxy column; 0 means no feature map.
    pub n_random_features: usize,
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            n_states: 6,
            n_actions: 2,
            discount: 0.9,
            correlation: 0.5,
            drift: 0.6,
            n_random_features: 2,
            seed: 0,
        }
    }
}

/// A random chain: action `a` moves `a + 1` states forward (mod n) with
/// probability `drift`, and the remaining mass lands on random states. The
/// reference policy is uniform.
pub fn make_chain(config: &ChainConfig) -> Result<EnvBundle> {
    let (n, na) = (config.n_states, config.n_actions);
    if n < 2 || na == 0 {
        return Err(Error::invalid("a chain needs at least two states and one action"));
    }
    if !(config.correlation >= -1.0 && config.correlation <= 1.0) || !(0.0..=1.0).contains(&config.drift) {
        return Err(Error::invalid("correlation must lie in [-1, 1] and drift in [0, 1]"));
    }
    let mut rng = rng::seeded(config.seed);
    let mut transitions = vec![0.0; n * na * n];
    for s in 0..n {
        for a in 0..na {
            let row = &mut transitions[(s * na + a) * n..(s * na + a + 1) * n];
            let noise: Vec<f64> = (0..n).map(|_| 0.05 + rng.random::<f64>()).collect();
            let total: f64 = noise.iter().sum();
            for (x, w) in row.iter_mut().zip(&noise) {
                *x = (1.0 - config.drift) * w / total;
            }
            row[(s + a + 1) % n] += config.drift;
        }
    }
    let mut initial: Vec<f64> = (0..n).map(|_| 0.05 + rng.random::<f64>()).collect();
    let total: f64 = initial.iter().sum();
    initial.iter_mut().for_each(|x| *x /= total);
    let mdp = TabularMdp::new(n, na, transitions, initial, config.discount)?;
    let reference = SoftmaxPolicy::uniform(n, na);
    let occ = exact_occupancy(&mdp, &reference)?;
    let w = occ.mass();

    let np = n * na;
    let gauss = |rng: &mut rng::Rng| -> Vec<f64> { (0..np).map(|_| StandardNormal.sample(rng)).collect() };
    let raw_p = gauss(&mut rng);
    let raw_z = gauss(&mut rng);
    let centre = |x: &[f64]| -> Vec<f64> {
        let m = crate::math::dot(w, x);
        x.iter().map(|v| v - m).collect()
    };
    let wnorm = |x: &[f64]| sqrt(x.iter().zip(w).map(|(v, m)| m * v * v).sum());
    let p_c = centre(&raw_p);
    let p_hat: Vec<f64> = { let s = wnorm(&p_c); p_c.iter().map(|v| v / s).collect() };
    let z_c = centre(&raw_z);
    let proj: f64 = z_c.iter().zip(&p_hat).zip(w).map(|((z, p), m)| m * z * p).sum();
    let z_o: Vec<f64> = z_c.iter().zip(&p_hat).map(|(z, p)| z - proj * p).collect();
    let z_hat: Vec<f64> = { let s = wnorm(&z_o); z_o.iter().map(|v| v / s).collect() };
    let r = config.correlation;
    let slack = sqrt(1.0 - r * r);
    // keep the raw proxy off the normalized scale so normalization is exercised
    let proxy_raw: Vec<f64> = p_hat.iter().map(|p| 1.0 + 2.0 * p).collect();
    let true_raw: Vec<f64> = p_hat.iter().zip(&z_hat).map(|(p, z)| r * p + slack * z).collect();

    let features = if config.n_random_features > 0 {
        let mut cols = vec![proxy_raw.clone()];
        for _ in 0..config.n_random_features {
            cols.push(gauss(&mut rng));
        }
        Some(FeatureMap::from_columns(&cols)?)
    } else {
        None
    };
    let mut bundle = EnvBundle::new(
        "chain",
        mdp,
        RewardTable::new(proxy_raw)?,
        RewardTable::new(true_raw)?,
        features,
        reference,
    )?;
    bundle.metadata = EnvMetadata::Chain(config.clone());
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{normalize_proxy, ProxyMoments};
    use crate::linear::{compute_q, whiten};
    use crate::mdp::return_value;

    #[test]
    fn default_tomato_sizes() {
        let b = make_tomato(&TomatoConfig::default()).unwrap();
        assert_eq!(b.mdp.n_states(), 36);
        assert_eq!(b.mdp.n_actions(), 5);
    }

    #[test]
    fn zero_bonus_removes_the_hack() {
        let b = make_tomato(&TomatoConfig { bonus: 0.0, ..Default::default() }).unwrap();
        assert_eq!(b.proxy_raw, b.true_raw);
        let b = make_tomato(&TomatoConfig { bonus: 0.0, sprinkler_mode: SprinklerMode::Replace, ..Default::default() })
            .unwrap();
        let cfg = TomatoConfig::default();
        let layout = cfg.layout();
        for pair in 0..b.mdp.n_pairs() {
            let (pos, _) = layout.decode(pair / 5);
            if pos != cfg.sprinkler {
                assert_eq!(b.proxy_raw.values()[pair], b.true_raw.values()[pair]);
            }
        }
    }

    #[test]
    fn proxy_differs_only_at_sprinkler() {
        let cfg = TomatoConfig::default();
        let b = make_tomato(&cfg).unwrap();
        let layout = cfg.layout();
        for pair in 0..b.mdp.n_pairs() {
            let (pos, _) = layout.decode(pair / 5);
            let diff = b.proxy_raw.values()[pair] - b.true_raw.values()[pair];
            assert_eq!(diff != 0.0, pos == cfg.sprinkler);
        }
    }

    #[test]
    fn camping_at_the_sprinkler() {
        let cfg = TomatoConfig { start: (2, 2), start_wet: true, ..Default::default() };
        let b = make_tomato(&cfg).unwrap();
        let mut logits = vec![0.0; b.mdp.n_pairs()];
        for s in 0..b.mdp.n_states() {
            logits[s * 5 + STAY] = 60.0;
        }
        let pol = SoftmaxPolicy::new(b.mdp.n_states(), 5, logits).unwrap();
        let occ = exact_occupancy(&b.mdp, &pol).unwrap();
        let (g, p) = (cfg.discount, cfg.dry_prob);
        // each of the two tomatoes stays wet with probability (1-p)^t
        let want_true = 2.0 * (1.0 - g) / (1.0 - g * (1.0 - p));
        assert!((return_value(&occ, &b.true_raw).unwrap() - want_true).abs() < 1e-10);
        assert!((return_value(&occ, &b.proxy_raw).unwrap() - (cfg.bonus + want_true)).abs() < 1e-10);
        let replace = make_tomato(&TomatoConfig { sprinkler_mode: SprinklerMode::Replace, ..cfg }).unwrap();
        assert!((return_value(&occ, &replace.proxy_raw).unwrap() - 2.0).abs() < 1e-10);
    }

    #[test]
    fn tomato_rejections() {
        let tight = TomatoConfig { max_pairs: 100, ..Default::default() };
        assert_eq!(make_tomato(&tight).unwrap_err(), Error::TooLarge { pairs: 180, cap: 100 });
        let clash = TomatoConfig { sprinkler: (0, 0), ..Default::default() };
        assert!(make_tomato(&clash).is_err());
        let b = make_tomato(&TomatoConfig { sprinkler_mode: SprinklerMode::Replace, ..Default::default() }).unwrap();
        assert!(matches!(tomato_features(&b), Err(Error::FeatureMismatch(_))));
        assert!(b.features.is_none());
    }

    #[test]
    fn tomato_features_span_under_reference() {
        let b = make_tomato(&TomatoConfig::default()).unwrap();
        let f = tomato_features(&b).unwrap();
        assert_eq!(f.dim(), 3);
        assert_eq!(f.column(0), b.true_raw.values());
        let occ = exact_occupancy(&b.mdp, &b.reference).unwrap();
        // states that put the agent on a dry tomato are unreachable; every other
        // state is visited with all five actions
        for s in 0..b.mdp.n_states() {
            let row = &occ.mass()[s * 5..s * 5 + 5];
            assert!(row.iter().all(|m| *m > 0.0) || row.iter().all(|m| *m == 0.0));
        }
        let q = compute_q(&occ, &f).unwrap();
        assert!(whiten(&q, &f).is_ok());
    }

    #[test]
    fn chain_correlation_and_determinism() {
        assert!(make_chain(&ChainConfig { n_states: 1, ..Default::default() }).is_err());
        let cfg = ChainConfig { n_states: 8, correlation: 0.3, seed: 4, ..Default::default() };
        let a = make_chain(&cfg).unwrap();
        assert_eq!(a, make_chain(&cfg).unwrap());
        let occ = exact_occupancy(&a.mdp, &a.reference).unwrap();
        let p = normalize_proxy(&a.proxy_raw, &ProxyMoments::exact(&occ, &a.proxy_raw).unwrap());
        let t = normalize_proxy(&a.true_raw, &ProxyMoments::exact(&occ, &a.true_raw).unwrap());
        let corr: f64 = occ.mass().iter().zip(p.values()).zip(t.values()).map(|((m, x), y)| m * x * y).sum();
        assert!((corr - 0.3).abs() < 1e-10);
    }
}
