use privsched_core::model::{Decision, Instance, ScenarioSet, PRIVACY_EPS};
use privsched_core::oracle::{random_instance, RandomLimits};
use privsched_core::scenario::{
    base_loads, candidate_scenarios, feasible_region_shrinks, find_worst_scenario, solve_with_scenarios, ScenarioOptions,
    StopRule,
};
use privsched_core::table::{backward_recursion, SolveConfig};
use privsched_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn f1(cfg: &SolveConfig) -> Option<f64> {
    let table = backward_recursion(cfg).ok()?;
    let idx = table.space().index_of(&cfg.instance, &cfg.instance.initial_state())?;
    Some(table.value(1, idx))
}

fn with_ns() -> RandomLimits {
    RandomLimits {
        max_non_schedulable: 2,
        ..RandomLimits::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn cost_does_not_increase_with_lambda(seed in any::<u64>(), extra in 1u32..40) {
        let cfg = random_instance(seed, RandomLimits::default());
        let mut looser = cfg.clone();
        looser.instance.policy.lambda_w += 5.0 * f64::from(extra);
        if let Some(tight) = f1(&cfg) {
            let loose = f1(&looser);
            prop_assert!(loose.is_some());
            prop_assert!(loose.unwrap() <= tight + 1e-9);
        }
    }

    #[test]
    fn cost_does_not_increase_with_capacity(seed in any::<u64>(), extra_levels in 1u32..4) {
        let cfg = random_instance(seed, RandomLimits { max_battery_levels: 4, ..RandomLimits::default() });
        let mut bigger = cfg.clone();
        let b = &cfg.instance.battery;
        bigger.instance.battery = b.with_capacity(b.b_max_wh + b.grid_step_wh * f64::from(extra_levels)).unwrap();
        if let Some(small) = f1(&cfg) {
            let big = f1(&bigger);
            prop_assert!(big.is_some());
            prop_assert!(big.unwrap() <= small + 1e-9);
        }
    }

    #[test]
    fn guaranteed_mode_trace_is_well_formed(seed in any::<u64>()) {
        let cfg = random_instance(seed, with_ns());
        let inst = &cfg.instance;
        let opts = ScenarioOptions { include_inactive: seed % 2 == 0, ..ScenarioOptions::default() };
        let candidates = candidate_scenarios(&inst.non_schedulable, opts.include_inactive);
        match solve_with_scenarios(inst, &opts) {
            Ok(out) => {
                let recs = &out.trace.records;
                prop_assert!(recs.len() <= candidates.len() + 1);
                // Scenario sets are nested from the first non-empty one on; the
                // scenario-free start is only nested when "inactive" seeds it.
                let nested_from = usize::from(!opts.include_inactive);
                for w in recs[nested_from.min(recs.len())..].windows(2) {
                    prop_assert!(w[1].f1_cost >= w[0].f1_cost - 1e-9);
                }
                for w in recs.windows(2) {
                    prop_assert!(w[1].omega_size >= w[0].omega_size);
                }
                for r in &recs[..recs.len().saturating_sub(1)] {
                    // Every non-final iteration added a new placement.
                    prop_assert!(r.violation_w > PRIVACY_EPS);
                }
                if let Some(last) = recs.last() {
                    if last.violation_w <= PRIVACY_EPS {
                        let (_, worst) = find_worst_scenario(&out.solution, &candidates, inst, opts.metric).unwrap();
                        prop_assert!(worst <= PRIVACY_EPS);
                    }
                }
                for phi in out.config.scenarios.iter() {
                    for (i, base) in out.solution.base_load_w.iter().enumerate() {
                        prop_assert!(inst.policy.admits(base + phi.ns_load_w(&inst.non_schedulable, i + 1)));
                    }
                }
            }
            Err(Error::PrivacyUnattainable { .. } | Error::Infeasible { .. }) => {}
            Err(e) => prop_assert!(false, "unexpected error {}", e),
        }
    }

    #[test]
    fn literal_stop_rules_terminate(seed in any::<u64>()) {
        let cfg = random_instance(seed, with_ns());
        for rule in [StopRule::PaperStrict, StopRule::PaperMembership] {
            let opts = ScenarioOptions { stop_rule: rule, include_inactive: true, ..ScenarioOptions::default() };
            let candidates = candidate_scenarios(&cfg.instance.non_schedulable, true).len();
            if let Ok(out) = solve_with_scenarios(&cfg.instance, &opts) {
                prop_assert!(out.trace.len() <= 2 * candidates + 2);
            }
        }
    }

    #[test]
    fn adding_scenarios_shrinks_the_feasible_region(seed in any::<u64>(), picks in prop::collection::vec(any::<bool>(), 0..12)) {
        let cfg = random_instance(seed, with_ns());
        let inst = &cfg.instance;
        let cands = candidate_scenarios(&inst.non_schedulable, true);
        let prev: ScenarioSet = cands.iter().zip(&picks).filter(|(_, p)| **p).map(|(c, _)| c.clone()).collect();
        let mut next = prev.clone();
        if let Some(extra) = cands.iter().find(|c| !prev.contains(c)) {
            next.insert(extra.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<Vec<Decision>> = (0..40).map(|_| valid_trajectory(inst, &mut rng)).collect();
        prop_assert!(samples.iter().all(|d| base_loads(inst, d).is_some()));
        prop_assert!(feasible_region_shrinks(inst, &prev, &next, &samples));
    }
}

/// One start per appliance inside its deadline and a battery walk that
/// stays on the grid and within the rate limits.
fn valid_trajectory(inst: &Instance, rng: &mut ChaCha8Rng) -> Vec<Decision> {
    let tau = inst.tau();
    let starts: Vec<usize> = inst
        .durations()
        .iter()
        .map(|d| rng.gen_range(1..=tau + 1 - *d as usize))
        .collect();
    let b = &inst.battery;
    let top = b.level_count() as i64 - 1;
    let down = (b.z_discharge_max_wh / b.grid_step_wh).round() as i64;
    let up = (b.z_charge_max_wh / b.grid_step_wh).round() as i64;
    let mut level = (b.b_init_wh / b.grid_step_wh).round() as i64;
    (1..=tau)
        .map(|t| {
            let next = rng.gen_range((level - down).max(0)..=(level + up).min(top));
            let d = Decision {
                starts: starts.iter().map(|s| *s == t).collect(),
                battery_delta_wh: (next - level) as f64 * b.grid_step_wh,
            };
            level = next;
            d
        })
        .collect()
}

/// Random instances with at most six slots, two schedulable appliances, one
/// non-schedulable appliance and six battery levels.
#[test]
fn fifty_instances_converge_within_candidate_count() {
    for seed in 1000..1050 {
        let cfg = random_instance(seed, RandomLimits::default());
        let inst = &cfg.instance;
        let opts = ScenarioOptions {
            include_inactive: true,
            ..ScenarioOptions::default()
        };
        let Ok(out) = solve_with_scenarios(inst, &opts) else {
            continue;
        };
        let phi = candidate_scenarios(&inst.non_schedulable, true).len();
        assert!(out.trace.len() <= phi + 1, "seed {seed}");
    }
}
