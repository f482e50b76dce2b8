//! Exhaustive reference solver for small instances.
//!
//! Enumerates every deadline-respecting start assignment times every battery
//! path on the grid and filters them with a straight-line evaluation of the
//! load, battery, privacy and cost rules. Shares nothing with the table
//! builder beyond the parsed instance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Battery, Instance, LoadReferenceSource, NonSchedulableAppliance, PriceSignal, PrivacyPolicy,
    SchedulableAppliance, ScenarioSet, TimeGrid,
};
use crate::scenario::candidate_scenarios;
use crate::table::{ObjectiveMode, SolveConfig};

pub const MAX_SLOTS: usize = 8;
pub const MAX_APPLIANCES: usize = 3;
pub const MAX_BATTERY_LEVELS: usize = 8;
pub const MAX_SCENARIOS: usize = 40;

const TIE_TOL: f64 = 1e-9;
const BAND_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTrajectory {
    /// 1-based start slot per schedulable appliance.
    pub starts: Vec<usize>,
    /// Battery level at slots 1..=tau+1.
    pub battery_wh: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// Minimum total expected cost; `+inf` when nothing is feasible.
    pub optimal_cost: f64,
    pub optimal_trajectories: Vec<OracleTrajectory>,
    /// Start assignments x battery paths that were scored.
    pub enumerated_count: u64,
}

impl OracleResult {
    pub fn is_feasible(&self) -> bool {
        !self.optimal_trajectories.is_empty()
    }
}

pub fn brute_force_solve(cfg: &SolveConfig) -> Result<OracleResult> {
    let inst = &cfg.instance;
    let tau = inst.grid.tau;
    let n = inst.schedulable.len();
    let step = inst.battery.grid_step_wh;
    let levels = (inst.battery.b_max_wh / step).round() as usize + 1;
    if tau > MAX_SLOTS || n > MAX_APPLIANCES || levels > MAX_BATTERY_LEVELS || cfg.scenarios.len() > MAX_SCENARIOS {
        return Err(Error::GuardRail(format!(
            "tau={tau} (max {MAX_SLOTS}), appliances={n} (max {MAX_APPLIANCES}), \
             battery levels={levels} (max {MAX_BATTERY_LEVELS}), scenarios={} (max {MAX_SCENARIOS})",
            cfg.scenarios.len()
        )));
    }

    let h = inst.grid.slot_hours;
    let lo = inst.policy.l_bar_w - inst.policy.lambda_w;
    let hi = inst.policy.l_bar_w + inst.policy.lambda_w;

    // w(t, phi) for every slot and scenario; a lone zero row when the set is empty.
    let ns_rows: Vec<Vec<f64>> = if cfg.scenarios.is_empty() {
        vec![vec![0.0; tau]]
    } else {
        cfg.scenarios
            .iter()
            .map(|phi| {
                (1..=tau)
                    .map(|t| {
                        let mut w = 0.0;
                        for (app, start) in inst.non_schedulable.iter().zip(&phi.starts_ns) {
                            if let Some(s) = *start {
                                if t >= s && t < s + app.runtime_slots as usize {
                                    w += app.power_w;
                                }
                            }
                        }
                        w
                    })
                    .collect()
            })
            .collect()
    };

    let init_level = (inst.battery.b_init_wh / step).round() as usize;
    let mut paths = Vec::new();
    let mut prefix = vec![init_level];
    battery_paths(&mut prefix, tau + 1, levels, step, &inst.battery, &mut paths);

    let durations: Vec<usize> = inst.schedulable.iter().map(|a| a.duration_slots as usize).collect();
    let combos = start_combinations(&durations, tau);

    let mut best = f64::INFINITY;
    let mut argmin: Vec<OracleTrajectory> = Vec::new();
    let mut enumerated = 0u64;
    for starts in &combos {
        let y: Vec<f64> = (1..=tau)
            .map(|t| {
                inst.schedulable
                    .iter()
                    .zip(starts)
                    .filter(|(a, s)| t >= **s && t < **s + a.duration_slots as usize)
                    .map(|(a, _)| a.power_w)
                    .sum()
            })
            .collect();
        for path in &paths {
            enumerated += 1;
            let mut cost = 0.0;
            let mut ok = true;
            for t in 0..tau {
                let z = (path[t + 1] as f64 - path[t] as f64) * step;
                let mut base = y[t] + z / h;
                if inst.clip_negative_load {
                    base = base.max(0.0);
                }
                if ns_rows.iter().any(|w| base + w[t] < lo - BAND_TOL || base + w[t] > hi + BAND_TOL) {
                    ok = false;
                    break;
                }
                cost += inst.price.values()[t] * base * h;
            }
            if !ok {
                continue;
            }
            let traj = || OracleTrajectory {
                starts: starts.clone(),
                battery_wh: path.iter().map(|k| *k as f64 * step).collect(),
            };
            if argmin.is_empty() || cost < best - TIE_TOL * best.abs().max(1.0) {
                best = cost;
                argmin.clear();
                argmin.push(traj());
            } else if (cost - best).abs() <= TIE_TOL * best.abs().max(1.0) {
                argmin.push(traj());
            }
        }
    }

    let optimal_cost = if argmin.is_empty() { f64::INFINITY } else { best + ns_cost(cfg) };
    Ok(OracleResult {
        optimal_cost,
        optimal_trajectories: argmin,
        enumerated_count: enumerated,
    })
}

fn battery_paths(
    prefix: &mut Vec<usize>,
    len: usize,
    levels: usize,
    step: f64,
    battery: &crate::model::Battery,
    out: &mut Vec<Vec<usize>>,
) {
    if prefix.len() == len {
        out.push(prefix.clone());
        return;
    }
    let from = *prefix.last().expect("non-empty prefix");
    for to in 0..levels {
        let z = (to as f64 - from as f64) * step;
        if z < -battery.z_discharge_max_wh - 1e-9 || z > battery.z_charge_max_wh + 1e-9 {
            continue;
        }
        prefix.push(to);
        battery_paths(prefix, len, levels, step, battery, out);
        prefix.pop();
    }
}

fn start_combinations(durations: &[usize], tau: usize) -> Vec<Vec<usize>> {
    let mut combos = vec![Vec::new()];
    for &d in durations {
        let mut next = Vec::new();
        for c in &combos {
            for s in 1..=(tau + 1).saturating_sub(d) {
                let mut e = c.clone();
                e.push(s);
                next.push(e);
            }
        }
        combos = next;
    }
    combos
}

fn ns_cost(cfg: &SolveConfig) -> f64 {
    let inst = &cfg.instance;
    let mut total = 0.0;
    for app in &inst.non_schedulable {
        let d = app.runtime_slots as usize;
        let mut expected = 0.0;
        let mut worst: f64 = 0.0;
        for (k, weight) in app.start_prob.iter().enumerate() {
            let s = app.zone_lo + k;
            let c: f64 = (s..s + d).map(|t| inst.price.values()[t - 1] * app.power_w * inst.grid.slot_hours).sum();
            expected += weight * c;
            worst = worst.max(c);
        }
        total += match cfg.objective {
            ObjectiveMode::Expected => expected,
            ObjectiveMode::WorstCaseCost => worst,
        };
    }
    total
}

/// Size limits for [`random_instance`].
#[derive(Debug, Clone, Copy)]
pub struct RandomLimits {
    pub max_tau: usize,
    pub max_schedulable: usize,
    pub max_non_schedulable: usize,
    pub max_battery_levels: usize,
}

impl Default for RandomLimits {
    fn default() -> Self {
        Self {
            max_tau: 6,
            max_schedulable: 2,
            max_non_schedulable: 1,
            max_battery_levels: 6,
        }
    }
}

/// A seeded random instance inside the oracle's guard rails, with a random
/// scenario set (empty, every candidate, or a subset) and objective.
pub fn random_instance(seed: u64, limits: RandomLimits) -> SolveConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = rng.gen_range(1..=limits.max_tau.clamp(1, MAX_SLOTS));
    let grid = TimeGrid::new(tau, 1.0).expect("tau >= 1");

    let n = rng.gen_range(1..=limits.max_schedulable.clamp(1, MAX_APPLIANCES));
    let schedulable = (0..n)
        .map(|i| {
            let d = rng.gen_range(1..=tau) as f64;
            let p = 5.0 * rng.gen_range(1..=12) as f64;
            let e = p * (d - rng.gen_range(0.0..0.9));
            SchedulableAppliance::new(format!("s{}", i + 1), p, e, &grid).expect("valid appliance")
        })
        .collect();

    let w = rng.gen_range(0..=limits.max_non_schedulable);
    let non_schedulable = (0..w)
        .map(|j| {
            let runtime = rng.gen_range(1..=tau.min(2)) as u32;
            let lo = rng.gen_range(1..=tau + 1 - runtime as usize);
            let hi = rng.gen_range(lo + runtime as usize - 1..=tau);
            let p = 5.0 * rng.gen_range(1..=8) as f64;
            NonSchedulableAppliance::new(format!("n{}", j + 1), p, runtime, (lo, hi), None, &grid)
                .expect("valid appliance")
        })
        .collect::<Vec<_>>();

    let levels = rng.gen_range(1..=limits.max_battery_levels.clamp(1, MAX_BATTERY_LEVELS));
    let step = 10.0;
    let cap = (levels - 1) as f64 * step;
    let init = rng.gen_range(0..levels) as f64 * step;
    let rate = |rng: &mut ChaCha8Rng| if levels == 1 { 0.0 } else { step * rng.gen_range(1..levels) as f64 };
    let (down, up) = (rate(&mut rng), rate(&mut rng));
    let battery = Battery::new(cap, init, down, up, step).expect("valid battery");

    let price = (0..tau).map(|_| f64::from(rng.gen_range(1..=100u32)) / 100.0).collect();
    let price = PriceSignal::new(price, tau).expect("tau prices");
    let l_bar = 5.0 * rng.gen_range(0..=12) as f64;
    let lambda = 5.0 * rng.gen_range(2..=16) as f64;
    let policy = PrivacyPolicy::new(lambda, l_bar, LoadReferenceSource::ConfigConstant).expect("valid policy");

    let instance = Instance {
        name: format!("random-{seed}"),
        grid,
        schedulable,
        non_schedulable,
        battery,
        price,
        policy,
        clip_negative_load: rng.gen_bool(0.2),
    };
    let candidates = candidate_scenarios(&instance.non_schedulable, rng.gen_bool(0.5));
    let scenarios: ScenarioSet = match rng.gen_range(0..3) {
        0 => ScenarioSet::new(),
        1 => candidates.into_iter().collect(),
        _ => candidates.into_iter().filter(|_| rng.gen_bool(0.5)).collect(),
    };
    let mut cfg = SolveConfig::new(instance, scenarios);
    if rng.gen_bool(0.3) {
        cfg.objective = ObjectiveMode::WorstCaseCost;
    }
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(tau: usize, apps: &[(f64, f64)], lambda: f64, l_bar: f64, price: Vec<f64>) -> Instance {
        let grid = TimeGrid::new(tau, 1.0).unwrap();
        Instance {
            name: "o".into(),
            schedulable: apps
                .iter()
                .map(|(p, e)| SchedulableAppliance::new("a", *p, *e, &grid).unwrap())
                .collect(),
            non_schedulable: vec![],
            battery: Battery::new(0.0, 0.0, 0.0, 0.0, 1.0).unwrap(),
            price: PriceSignal::new(price, tau).unwrap(),
            policy: PrivacyPolicy::new(lambda, l_bar, LoadReferenceSource::ConfigConstant).unwrap(),
            clip_negative_load: false,
            grid,
        }
    }

    #[test]
    fn single_point_instance() {
        let cfg = SolveConfig::new(inst(1, &[(12.0, 12.0)], f64::INFINITY, 0.0, vec![0.25]), ScenarioSet::new());
        let r = brute_force_solve(&cfg).unwrap();
        assert_eq!(r.enumerated_count, 1);
        assert_eq!(r.optimal_trajectories.len(), 1);
        assert_eq!(r.optimal_cost, 3.0);
    }

    #[test]
    fn zero_lambda_with_load_is_infeasible() {
        let cfg = SolveConfig::new(inst(3, &[(12.0, 12.0)], 0.0, 0.0, vec![1.0; 3]), ScenarioSet::new());
        let r = brute_force_solve(&cfg).unwrap();
        assert!(!r.is_feasible());
        assert!(r.optimal_cost.is_infinite());
        assert_eq!(r.enumerated_count, 3);
    }

    #[test]
    fn guard_rails_refuse() {
        let cfg = SolveConfig::new(inst(9, &[], 1.0, 0.0, vec![1.0; 9]), ScenarioSet::new());
        assert!(matches!(brute_force_solve(&cfg), Err(Error::GuardRail(_))));
    }

    #[test]
    fn ties_are_all_reported() {
        let cfg = SolveConfig::new(inst(3, &[(1.0, 1.0)], f64::INFINITY, 0.0, vec![1.0; 3]), ScenarioSet::new());
        let r = brute_force_solve(&cfg).unwrap();
        assert_eq!(r.optimal_trajectories.len(), 3);
    }

    #[test]
    fn random_instances_stay_inside_guard_rails() {
        for seed in 0..200 {
            let cfg = random_instance(seed, RandomLimits::default());
            assert_eq!(cfg, random_instance(seed, RandomLimits::default()));
            assert!(brute_force_solve(&cfg).is_ok(), "seed {seed}");
        }
    }
}
