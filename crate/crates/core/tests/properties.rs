//! Randomized invariants of the adversary, estimators and occupancy solver.

use proptest::prelude::*;

use rpo_core::adversary::{
    adversarial_reward, brute_force_inner_min, dual_solution, feasibility_check, improvement_lower_bound,
    robust_stats, robust_value, FeasibleSphere,
};
use rpo_core::estimators::{chi_squared, double_sample_square, normalize_proxy, sampled_return};
use rpo_core::linalg::Matrix;
use rpo_core::linear::{compute_q, whiten, FeatureMap};
use rpo_core::mdp::{exact_occupancy, policy_from_occupancy, sample_trajectories};
use rpo_core::ratio::ratio_exact;
use rpo_core::rng::seeded;
use rpo_core::{CorrelationSpec, OccupancyMeasure, ProxyMoments, RewardTable, SoftmaxPolicy, TabularMdp};

fn normalized(w: &[f64]) -> OccupancyMeasure {
    let total: f64 = w.iter().sum();
    OccupancyMeasure::new(w.iter().map(|x| x / total).collect()).unwrap()
}

/// Reference and policy occupancies on full support, plus a normalized proxy.
#[derive(Debug, Clone)]
struct Instance {
    occ_ref: OccupancyMeasure,
    occ_pi: OccupancyMeasure,
    proxy: RewardTable,
}

fn instance() -> impl Strategy<Value = Instance> {
    (3usize..10).prop_flat_map(|n| {
        (
            prop::collection::vec(0.05f64..1.0, n),
            prop::collection::vec(0.0f64..1.0, n),
            prop::collection::vec(-3.0f64..3.0, n),
        )
            .prop_filter_map("degenerate proxy", |(wr, wp, raw)| {
                let occ_ref = normalized(&wr);
                if wp.iter().sum::<f64>() < 1e-3 {
                    return None;
                }
                let raw = RewardTable::new(raw).unwrap();
                let moments = ProxyMoments::exact(&occ_ref, &raw).ok()?;
                (moments.std > 1e-3).then(|| Instance {
                    proxy: normalize_proxy(&raw, &moments),
                    occ_pi: normalized(&wp),
                    occ_ref,
                })
            })
    })
}

fn spec() -> impl Strategy<Value = CorrelationSpec> {
    (0.02f64..0.98, -2.0f64..2.0, 0.1f64..3.0).prop_map(|(r, m, v)| CorrelationSpec::new(r, m, v).unwrap())
}

/// Random MDP with a strictly positive initial distribution and random logits.
fn mdp_and_policy() -> impl Strategy<Value = (TabularMdp, SoftmaxPolicy)> {
    (1usize..6, 1usize..4, 0.0f64..0.95).prop_flat_map(|(ns, na, g)| {
        (
            prop::collection::vec(0.0f64..1.0, ns * na * ns),
            prop::collection::vec(0.1f64..1.0, ns),
            prop::collection::vec(-2.0f64..2.0, ns * na),
        )
            .prop_map(move |(kernel, init, logits)| {
                let mut t = Vec::with_capacity(kernel.len());
                for row in kernel.chunks(ns) {
                    let s: f64 = row.iter().sum::<f64>() + 1e-3;
                    t.extend(row.iter().enumerate().map(|(j, x)| (x + if j == 0 { 1e-3 } else { 0.0 }) / s));
                }
                let total: f64 = init.iter().sum();
                let init = init.iter().map(|x| x / total).collect();
                (TabularMdp::new(ns, na, t, init, g).unwrap(), SoftmaxPolicy::new(ns, na, logits).unwrap())
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn closed_form_value_matches_sphere_minimum(inst in instance(), spec in spec()) {
        let stats = robust_stats(&inst.occ_pi, &inst.occ_ref, &inst.proxy).unwrap();
        let sphere = FeasibleSphere::new(&inst.occ_ref, &inst.proxy, &spec).unwrap();
        let exact = sphere.analytic_min(&inst.occ_pi).unwrap();
        let closed = robust_value(&stats, &spec);
        prop_assert!((exact - closed).abs() <= 1e-8 * (1.0 + closed.abs()), "{exact} vs {closed}");
    }

    #[test]
    fn adversarial_reward_is_feasible_and_attains_the_value(inst in instance(), spec in spec()) {
        let stats = robust_stats(&inst.occ_pi, &inst.occ_ref, &inst.proxy).unwrap();
        prop_assume!(!stats.is_degenerate());
        let ratio = ratio_exact(&inst.occ_pi, &inst.occ_ref).unwrap();
        let rstar = adversarial_reward(&ratio, &inst.proxy, &dual_solution(&stats, &spec), &spec).unwrap();
        let report = feasibility_check(&rstar, &inst.occ_ref, &inst.proxy, &spec, 1e-6).unwrap();
        prop_assert!(report.passed, "{report:?}");
        let value = robust_value(&stats, &spec);
        prop_assert!((rstar.seen_return(&inst.occ_pi) - value).abs() <= 1e-8 * (1.0 + value.abs()));
    }

    #[test]
    fn sphere_points_never_beat_the_closed_form(inst in instance(), spec in spec(), seed in any::<u64>()) {
        let stats = robust_stats(&inst.occ_pi, &inst.occ_ref, &inst.proxy).unwrap();
        let mut rng = seeded(seed);
        let b = brute_force_inner_min(&inst.occ_pi, &inst.occ_ref, &inst.proxy, &spec, 200, &mut rng).unwrap();
        prop_assert!(b.sampled >= robust_value(&stats, &spec) - 1e-9);
    }

    #[test]
    fn chi_squared_dominates_squared_proxy_mean(inst in instance()) {
        let stats = robust_stats(&inst.occ_pi, &inst.occ_ref, &inst.proxy).unwrap();
        let e = inst.occ_pi.expect(inst.proxy.values());
        prop_assert!(stats.chi2 >= e * e - 1e-12);
        prop_assert!(stats.h >= 0.0);
    }

    #[test]
    fn exact_ratio_has_unit_mean_and_chi_squared_second_moment(inst in instance()) {
        let ratio = ratio_exact(&inst.occ_pi, &inst.occ_ref).unwrap();
        let l: Vec<f64> = (0..inst.occ_ref.len()).map(|i| ratio.ratio(i).unwrap()).collect();
        let mean = inst.occ_ref.expect(&l);
        let second: f64 = inst.occ_ref.mass().iter().zip(&l).map(|(w, x)| w * x * x).sum();
        prop_assert!((mean - 1.0).abs() < 1e-12);
        let chi2 = chi_squared(&inst.occ_pi, &inst.occ_ref).unwrap();
        prop_assert!((second - 1.0 - chi2).abs() < 1e-10);
    }

    #[test]
    fn normalized_proxy_has_zero_mean_and_unit_variance(inst in instance()) {
        let mean = inst.occ_ref.expect(inst.proxy.values());
        let second: f64 = inst.occ_ref.mass().iter().zip(inst.proxy.values()).map(|(w, p)| w * p * p).sum();
        prop_assert!(mean.abs() < 1e-10);
        prop_assert!((second - 1.0).abs() < 1e-10);
    }

    #[test]
    fn lower_bound_grows_with_correlation_when_proxy_improves(inst in instance(), r1 in 0.01f64..0.99, r2 in 0.01f64..0.99) {
        let stats = robust_stats(&inst.occ_pi, &inst.occ_ref, &inst.proxy).unwrap();
        prop_assume!(stats.proxy_mean_pi > 0.0);
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let at = |r: f64| improvement_lower_bound(&stats, &CorrelationSpec::standard(r).unwrap());
        prop_assert!(at(hi) >= at(lo) - 1e-12);
    }

    #[test]
    fn whitening_gives_identity_second_moment(
        inst in instance(),
        dim in 1usize..4,
        raw in prop::collection::vec(-2.0f64..2.0, 27),
    ) {
        let n = inst.occ_ref.len();
        prop_assume!(dim < n);
        let features = FeatureMap::new(n, dim, raw[..n * dim].to_vec()).unwrap();
        let q = compute_q(&inst.occ_ref, &features).unwrap();
        // nearly collinear draws are rejected by `whiten` itself
        let Ok(w) = whiten(&q, &features) else { return Ok(()) };
        let qw = compute_q(&inst.occ_ref, &w.features).unwrap();
        let eye = Matrix::identity(dim);
        for i in 0..dim {
            for j in 0..dim {
                prop_assert!((qw[(i, j)] - eye[(i, j)]).abs() < 1e-8, "{i},{j}: {}", qw[(i, j)]);
            }
        }
    }

    #[test]
    fn occupancy_is_a_distribution_and_recovers_the_policy((mdp, policy) in mdp_and_policy()) {
        let occ = exact_occupancy(&mdp, &policy).unwrap();
        prop_assert!((occ.total() - 1.0).abs() < 1e-10);
        prop_assert!(occ.mass().iter().all(|m| *m >= 0.0));
        let back = policy_from_occupancy(&mdp, occ.mass(), &SoftmaxPolicy::uniform(mdp.n_states(), mdp.n_actions())).unwrap();
        for (a, b) in back.probabilities().iter().zip(policy.probabilities()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn double_sampling_a_constant_reward_is_exact((mdp, policy) in mdp_and_policy(), c in -5.0f64..5.0, seed in any::<u64>()) {
        let a = sample_trajectories(&mdp, &policy, 8, 30, seed).unwrap();
        let b = sample_trajectories(&mdp, &policy, 8, 30, seed.wrapping_add(1)).unwrap();
        let reward = RewardTable::constant(mdp.n_pairs(), c);
        let g = mdp.discount();
        let ra = sampled_return(&a, &reward, g).unwrap();
        let rb = sampled_return(&b, &reward, g).unwrap();
        // both batches cover the same truncated mass, so each return is c·(1 − γ^H)
        prop_assert!((ra - rb).abs() < 1e-12);
        let square = double_sample_square(&a, &b, &reward, g).unwrap();
        prop_assert!((square - ra * rb).abs() < 1e-12);
        prop_assert!((square - (c * (1.0 - g.powi(30))).powi(2)).abs() < 1e-9);
    }
}
