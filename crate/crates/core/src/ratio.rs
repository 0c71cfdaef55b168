//! Occupancy-ratio models `d(s,a) ≈ log(μ_π / μ_ref)` (or the reversed ratio).
//!
//! A model is either an exact table computed from known occupancies or a small
//! one-hidden-layer discriminator trained with the logistic loss
//! `E_ref[log(1+e^d)] + E_π[log(1+e^{-d})]`, whose minimizer is the log ratio.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::estimators::{check_support, empirical_occupancy};
use crate::math::{exp, ln, sigmoid, softplus, tanh};
use crate::mdp::{OccupancyMeasure, TrajectoryBatch};
use crate::rng;

/// Outputs are clipped to this range before exponentiation.
pub const LOG_RATIO_CLIP: f64 = 30.0;

/// Which ratio a model represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum RatioDirection {
    /// `μ_π / μ_ref`, used by Max-Min and the χ² baseline.
    #[default]
    Forward,
    /// `μ_ref / μ_π`, used to importance-weight samples from `π` in the linear pipeline.
    Reversed,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DiscriminatorConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub step_size: f64,
    /// Pairs drawn from each side per step; `None` uses the full aggregated batch.
    pub minibatch: Option<usize>,
    pub init_scale: f64,
    pub seed: u64,
    pub direction: RatioDirection,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            hidden: 32,
            epochs: 3000,
            step_size: 1.0,
            minibatch: None,
            init_scale: 1.0,
            seed: 0,
            direction: RatioDirection::Forward,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
struct Discriminator {
    hidden: usize,
    /// `w1[k * n_pairs + pair]`: the one-hot input makes each column an embedding.
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
}

impl Discriminator {
    fn output(&self, n_pairs: usize, pair: usize, h: &mut [f64]) -> f64 {
        let mut d = self.b2;
        for k in 0..self.hidden {
            h[k] = tanh(self.w1[k * n_pairs + pair] + self.b1[k]);
            d += self.w2[k] * h[k];
        }
        d.clamp(-LOG_RATIO_CLIP, LOG_RATIO_CLIP)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
enum Kind {
    /// Ratio values; `None` where the denominator measure has no mass.
    Table(Vec<Option<f64>>),
    Learned(Discriminator),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LogRatioModel {
    n_pairs: usize,
    direction: RatioDirection,
    kind: Kind,
    loss_log: Vec<f64>,
}

impl LogRatioModel {
    pub fn n_pairs(&self) -> usize {
        self.n_pairs
    }

    pub fn direction(&self) -> RatioDirection {
        self.direction
    }

    pub fn is_learned(&self) -> bool {
        matches!(self.kind, Kind::Learned(_))
    }

    /// Training loss per epoch (the entry at index 0 is the loss before any update).
    pub fn loss_log(&self) -> &[f64] {
        &self.loss_log
    }

    /// `exp(d(pair))`, or `None` for a table entry outside the denominator's support.
    pub fn ratio(&self, pair: usize) -> Option<f64> {
        match &self.kind {
            Kind::Table(values) => values[pair],
            Kind::Learned(net) => {
                let mut h = vec![0.0; net.hidden];
                Some(exp(net.output(self.n_pairs, pair, &mut h)))
            }
        }
    }

    pub fn log_ratio(&self, pair: usize) -> Option<f64> {
        match &self.kind {
            Kind::Table(values) => values[pair].map(ln),
            Kind::Learned(net) => {
                let mut h = vec![0.0; net.hidden];
                Some(net.output(self.n_pairs, pair, &mut h))
            }
        }
    }

    /// Ratios for every pair, `None` where undefined.
    pub fn ratios(&self) -> Vec<Option<f64>> {
        (0..self.n_pairs).map(|i| self.ratio(i)).collect()
    }

    /// A table model built from explicit ratio values.
    pub fn from_table(direction: RatioDirection, values: Vec<Option<f64>>) -> Result<Self> {
        if values.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("ratio tables must be finite and nonnegative"));
        }
        Ok(LogRatioModel { n_pairs: values.len(), direction, kind: Kind::Table(values), loss_log: Vec::new() })
    }

    /// Ratio table from estimated occupancies (e.g. empirical visit counts).
    ///
    /// Pairs where the numerator has mass but the denominator does not get the
    /// clipped ratio `e^30`, matching the discriminator's output range.
    pub fn from_estimates(
        occ_pi: &OccupancyMeasure,
        occ_ref: &OccupancyMeasure,
        direction: RatioDirection,
    ) -> Result<Self> {
        if occ_pi.len() != occ_ref.len() {
            return Err(Error::shape("occupancy measures differ in length"));
        }
        let (num, den) = match direction {
            RatioDirection::Forward => (occ_pi, occ_ref),
            RatioDirection::Reversed => (occ_ref, occ_pi),
        };
        let cap = exp(LOG_RATIO_CLIP);
        let floor = exp(-LOG_RATIO_CLIP);
        let values = num
            .mass()
            .iter()
            .zip(den.mass())
            .map(|(n, d)| match (*n > 0.0, *d > 0.0) {
                (_, true) => Some((n / d).clamp(floor, cap)),
                (true, false) => Some(cap),
                (false, false) => None,
            })
            .collect();
        Self::from_table(direction, values)
    }
}

/// Exact forward ratio `L = μ_π / μ_ref` on the support of `μ_ref`.
pub fn ratio_exact(occ_pi: &OccupancyMeasure, occ_ref: &OccupancyMeasure) -> Result<LogRatioModel> {
    check_support(occ_pi, occ_ref)?;
    let values = occ_pi
        .mass()
        .iter()
        .zip(occ_ref.mass())
        .map(|(p, r)| if *r > 0.0 { Some(p / r) } else { None })
        .collect();
    LogRatioModel::from_table(RatioDirection::Forward, values)
}

/// Exact reversed ratio `μ_ref / μ_π` on the support of `μ_π`.
pub fn ratio_exact_reversed(occ_pi: &OccupancyMeasure, occ_ref: &OccupancyMeasure) -> Result<LogRatioModel> {
    check_support(occ_pi, occ_ref)?;
    let values = occ_pi
        .mass()
        .iter()
        .zip(occ_ref.mass())
        .map(|(p, r)| if *p > 0.0 { Some(r / p) } else { None })
        .collect();
    LogRatioModel::from_table(RatioDirection::Reversed, values)
}

fn normalized_weights(batch: &TrajectoryBatch, discount: f64) -> Result<Vec<f64>> {
    let occ = empirical_occupancy(batch, discount)?;
    let total = occ.total();
    Ok(occ.mass().iter().map(|m| m / total).collect())
}

/// Logistic loss of `d` for the given direction and per-pair weights.
fn loss_and_grad(d: f64, w_ref: f64, w_pi: f64, direction: RatioDirection) -> (f64, f64) {
    // the side labelled "positive" is pushed towards large d
    let (w_neg, w_pos) = match direction {
        RatioDirection::Forward => (w_ref, w_pi),
        RatioDirection::Reversed => (w_pi, w_ref),
    };
    let loss = w_neg * softplus(d) + w_pos * softplus(-d);
    let grad = w_neg * sigmoid(d) - w_pos * sigmoid(-d);
    (loss, grad)
}

/// Fits a discriminator on discounted visitation weights from two batches.
pub fn train_ratio_estimator(
    batch_ref: &TrajectoryBatch,
    batch_pi: &TrajectoryBatch,
    discount: f64,
    config: &DiscriminatorConfig,
) -> Result<LogRatioModel> {
    if batch_ref.n_pairs() != batch_pi.n_pairs() {
        return Err(Error::shape("batches come from MDPs of different sizes"));
    }
    if config.hidden == 0 || !(config.step_size > 0.0) {
        return Err(Error::invalid("discriminator needs hidden units and a positive step size"));
    }
    let n_pairs = batch_ref.n_pairs();
    let w_ref = normalized_weights(batch_ref, discount)?;
    let w_pi = normalized_weights(batch_pi, discount)?;
    let active: Vec<usize> = (0..n_pairs).filter(|&i| w_ref[i] + w_pi[i] > 0.0).collect();

    let mut rng = rng::seeded(config.seed);
    let hidden = config.hidden;
    let mut net = Discriminator {
        hidden,
        w1: (0..hidden * n_pairs)
            .map(|_| config.init_scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect(),
        b1: vec![0.0; hidden],
        w2: vec![0.0; hidden],
        b2: 0.0,
    };

    // minibatch sampling tables
    let cdf = |w: &[f64]| -> Vec<f64> {
        let mut acc = 0.0;
        w.iter().map(|x| { acc += x; acc }).collect()
    };
    let (cdf_ref, cdf_pi) = (cdf(&w_ref), cdf(&w_pi));

    let mut h = vec![0.0; hidden];
    let mut g_w1 = vec![0.0; hidden * n_pairs];
    let mut g_b1 = vec![0.0; hidden];
    let mut g_w2 = vec![0.0; hidden];
    let mut loss_log = Vec::with_capacity(config.epochs + 1);
    let mut mb_ref = vec![0.0; n_pairs];
    let mut mb_pi = vec![0.0; n_pairs];

    for epoch in 0..=config.epochs {
        let (wr, wp): (&[f64], &[f64]) = match config.minibatch {
            Some(m) if epoch > 0 => {
                mb_ref.iter_mut().for_each(|x| *x = 0.0);
                mb_pi.iter_mut().for_each(|x| *x = 0.0);
                for _ in 0..m {
                    mb_ref[draw(&cdf_ref, &mut rng)] += 1.0 / m as f64;
                    mb_pi[draw(&cdf_pi, &mut rng)] += 1.0 / m as f64;
                }
                (&mb_ref, &mb_pi)
            }
            _ => (&w_ref, &w_pi),
        };
        g_w1.iter_mut().for_each(|x| *x = 0.0);
        g_b1.iter_mut().for_each(|x| *x = 0.0);
        g_w2.iter_mut().for_each(|x| *x = 0.0);
        let mut g_b2 = 0.0;
        let mut loss = 0.0;
        for &i in &active {
            if wr[i] + wp[i] == 0.0 {
                continue;
            }
            let raw: f64 = net.b2 + (0..hidden).map(|k| {
                h[k] = tanh(net.w1[k * n_pairs + i] + net.b1[k]);
                net.w2[k] * h[k]
            }).sum::<f64>();
            let d = raw.clamp(-LOG_RATIO_CLIP, LOG_RATIO_CLIP);
            let (l, mut g) = loss_and_grad(d, wr[i], wp[i], config.direction);
            loss += l;
            if raw != d {
                g = 0.0;
            }
            g_b2 += g;
            for k in 0..hidden {
                g_w2[k] += g * h[k];
                let ga = g * net.w2[k] * (1.0 - h[k] * h[k]);
                g_w1[k * n_pairs + i] += ga;
                g_b1[k] += ga;
            }
        }
        // the full-batch loss is what gets logged, even when stepping on minibatches
        let logged = if config.minibatch.is_some() && epoch > 0 {
            full_loss(&net, n_pairs, &active, &w_ref, &w_pi, config.direction)
        } else {
            loss
        };
        if !logged.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        loss_log.push(logged);
        if epoch == config.epochs {
            break;
        }
        let eta = config.step_size;
        for (p, g) in net.w1.iter_mut().zip(&g_w1) {
            *p -= eta * g;
        }
        for (p, g) in net.b1.iter_mut().zip(&g_b1) {
            *p -= eta * g;
        }
        for (p, g) in net.w2.iter_mut().zip(&g_w2) {
            *p -= eta * g;
        }
        net.b2 -= eta * g_b2;
        if net.w1.iter().chain(&net.b1).chain(&net.w2).any(|p| !p.is_finite()) || !net.b2.is_finite() {
            return Err(Error::Divergence { epoch: epoch + 1 });
        }
    }
    Ok(LogRatioModel { n_pairs, direction: config.direction, kind: Kind::Learned(net), loss_log })
}

fn full_loss(
    net: &Discriminator,
    n_pairs: usize,
    active: &[usize],
    w_ref: &[f64],
    w_pi: &[f64],
    direction: RatioDirection,
) -> f64 {
    let mut h = vec![0.0; net.hidden];
    active
        .iter()
        .map(|&i| loss_and_grad(net.output(n_pairs, i, &mut h), w_ref[i], w_pi[i], direction).0)
        .sum()
}

fn draw<R: rand::Rng + ?Sized>(cdf: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * cdf.last().copied().unwrap_or(1.0);
    cdf.partition_point(|c| *c <= u).min(cdf.len() - 1)
}

/// `Σ μ_ref |L̂ − L|` between two forward models over the reference support.
pub fn ratio_l1_under(reference: &OccupancyMeasure, a: &LogRatioModel, b: &LogRatioModel) -> Result<f64> {
    if a.n_pairs != reference.len() || b.n_pairs != reference.len() {
        return Err(Error::shape(format!("ratio models do not cover {} pairs", reference.len())));
    }
    let mut acc = 0.0;
    for (i, m) in reference.mass().iter().enumerate() {
        if *m > 0.0 {
            match (a.ratio(i), b.ratio(i)) {
                (Some(x), Some(y)) => acc += m * (x - y).abs(),
                _ => return Err(Error::Support { pairs: vec![i] }),
            }
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn occ(v: &[f64]) -> OccupancyMeasure {
        OccupancyMeasure::new(v.to_vec()).unwrap()
    }

    #[test]
    fn exact_ratio_examples() {
        let m = ratio_exact(&occ(&[0.8, 0.2]), &occ(&[0.5, 0.5])).unwrap();
        assert!((m.ratio(0).unwrap() - 1.6).abs() < 1e-15);
        assert!((m.ratio(1).unwrap() - 0.4).abs() < 1e-15);
        let same = ratio_exact(&occ(&[0.3, 0.7]), &occ(&[0.3, 0.7])).unwrap();
        assert!(same.ratios().iter().all(|l| l.unwrap() == 1.0));
        assert!(same.log_ratio(0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn exact_ratio_marks_unseen_pairs() {
        let m = ratio_exact(&occ(&[0.5, 0.5, 0.0]), &occ(&[0.25, 0.25, 0.5])).unwrap();
        assert_eq!(m.ratio(2), Some(0.0));
        let m = ratio_exact(&occ(&[0.5, 0.5, 0.0]), &occ(&[0.5, 0.5, 0.0])).unwrap();
        assert_eq!(m.ratio(2), None);
        assert!(matches!(ratio_exact(&occ(&[0.5, 0.5]), &occ(&[1.0, 0.0])), Err(Error::Support { .. })));
    }

    #[test]
    fn reversed_direction_inverts() {
        let f = ratio_exact(&occ(&[0.8, 0.2]), &occ(&[0.5, 0.5])).unwrap();
        let r = ratio_exact_reversed(&occ(&[0.8, 0.2]), &occ(&[0.5, 0.5])).unwrap();
        for i in 0..2 {
            assert!((f.ratio(i).unwrap() * r.ratio(i).unwrap() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn initial_loss_is_two_log_two() {
        let a = TrajectoryBatch::from_trajectories(2, 1, 2, 1, &[vec![(0, 0), (1, 0)]]).unwrap();
        let b = TrajectoryBatch::from_trajectories(2, 1, 2, 2, &[vec![(1, 0), (1, 0)]]).unwrap();
        for direction in [RatioDirection::Forward, RatioDirection::Reversed] {
            let cfg = DiscriminatorConfig { epochs: 0, direction, ..Default::default() };
            let m = train_ratio_estimator(&a, &b, 0.5, &cfg).unwrap();
            assert!((m.loss_log()[0] - 2.0 * core::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_step_size_diverges_or_saturates() {
        let a = TrajectoryBatch::from_trajectories(2, 1, 1, 1, &[vec![(0, 0)]]).unwrap();
        let b = TrajectoryBatch::from_trajectories(2, 1, 1, 2, &[vec![(1, 0)]]).unwrap();
        let cfg = DiscriminatorConfig { epochs: 50, step_size: 1e308, ..Default::default() };
        // clipping zeroes the gradient once the output saturates, so either outcome is
        // legitimate; what must never happen is a non-finite loss slipping through
        match train_ratio_estimator(&a, &b, 0.5, &cfg) {
            Err(Error::Divergence { .. }) => {}
            Ok(m) => assert!(m.loss_log().iter().all(|l| l.is_finite())),
            Err(e) => panic!("unexpected error {e}"),
        }
    }
}
