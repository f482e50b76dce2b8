use privsched_core::model::{privacy_gap, Decision, PrivacyScenario, SystemState};
use privsched_core::oracle::{brute_force_solve, random_instance, OracleTrajectory, RandomLimits};
use privsched_core::scenario::base_loads;
use privsched_core::table::{backward_recursion, extract_schedule, SolveConfig};
use privsched_core::Error;
use proptest::prelude::*;

fn dp_cost(cfg: &SolveConfig) -> Option<f64> {
    match backward_recursion(cfg) {
        Ok(table) => {
            let inst = &cfg.instance;
            let inactive = PrivacyScenario::inactive(inst.non_schedulable.len());
            Some(extract_schedule(&table, cfg, &inst.initial_state(), &inactive).unwrap().expected_cost)
        }
        Err(Error::Infeasible { .. }) => None,
        Err(e) => panic!("unexpected error {e}"),
    }
}

/// Rebuilds the decision sequence of an oracle trajectory.
fn decisions_of(cfg: &SolveConfig, traj: &OracleTrajectory) -> Vec<Decision> {
    (1..=cfg.instance.tau())
        .map(|t| Decision {
            starts: traj.starts.iter().map(|s| *s == t).collect(),
            battery_delta_wh: traj.battery_wh[t] - traj.battery_wh[t - 1],
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    #[test]
    fn table_builder_matches_exhaustive_search(seed in any::<u64>()) {
        let cfg = random_instance(seed, RandomLimits::default());
        let oracle = brute_force_solve(&cfg).unwrap();
        match dp_cost(&cfg) {
            Some(c) => {
                prop_assert!(oracle.is_feasible(), "table feasible, oracle not");
                prop_assert!((c - oracle.optimal_cost).abs() <= 1e-9 * c.abs().max(1.0), "{} vs {}", c, oracle.optimal_cost);
            }
            None => prop_assert!(!oracle.is_feasible(), "oracle feasible, table not"),
        }
    }

    #[test]
    fn oracle_optima_satisfy_the_model(seed in any::<u64>()) {
        let cfg = random_instance(seed, RandomLimits { max_schedulable: 3, ..RandomLimits::default() });
        let inst = &cfg.instance;
        let oracle = brute_force_solve(&cfg).unwrap();
        for traj in &oracle.optimal_trajectories {
            let decisions = decisions_of(&cfg, traj);
            let loads = base_loads(inst, &decisions);
            prop_assert!(loads.is_some(), "oracle trajectory breaks a structural rule");
            let loads = loads.unwrap();
            let mut state: SystemState = inst.initial_state();
            for d in &decisions {
                state = SystemState {
                    battery_wh: state.battery_wh + d.battery_delta_wh,
                    remaining: inst.next_remaining(&state, d),
                };
            }
            prop_assert!(state.remaining.iter().all(|r| *r == 0));
            let scenarios: Vec<PrivacyScenario> = if cfg.scenarios.is_empty() {
                vec![PrivacyScenario::inactive(inst.non_schedulable.len())]
            } else {
                cfg.scenarios.iter().cloned().collect()
            };
            for phi in &scenarios {
                for (i, base) in loads.iter().enumerate() {
                    let gap = privacy_gap(base + phi.ns_load_w(&inst.non_schedulable, i + 1), &inst.policy);
                    prop_assert!(gap.abs() <= inst.policy.lambda_w + 1e-9);
                }
            }
        }
    }
}

#[test]
fn hundred_fixed_seeds_agree() {
    let mut feasible = 0;
    for seed in 0..100 {
        let cfg = random_instance(seed, RandomLimits::default());
        let oracle = brute_force_solve(&cfg).unwrap();
        let dp = dp_cost(&cfg);
        assert_eq!(dp.is_some(), oracle.is_feasible(), "seed {seed}");
        if let Some(c) = dp {
            feasible += 1;
            assert!((c - oracle.optimal_cost).abs() <= 1e-9 * c.abs().max(1.0), "seed {seed}");
        }
    }
    // The generator should not collapse into all-infeasible instances.
    assert!(feasible >= 30, "only {feasible} feasible instances");
}
