//! Worst-scenario iteration: solve, find the placement of non-schedulable
//! activity that stretches the privacy band the most, add it to the
//! scenario set and re-solve until the worst placement stops changing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Decision, Instance, NonSchedulableAppliance, PrivacyScenario, ScenarioSet, SystemState, PRIVACY_EPS};
use crate::table::{self, ObjectiveMode, ScheduleSolution, ScheduleTable, SolveConfig, DEFAULT_MAX_STATES};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopRule {
    /// Stop once no candidate placement breaches the band; after the
    /// iteration cap, also stop when the worst placement repeats.
    #[default]
    Guaranteed,
    /// Stop when the worst placement equals the previous one.
    PaperStrict,
    /// Stop when the worst placement is already in the scenario set.
    PaperMembership,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationMetric {
    /// max_t |l(t) - l_bar|
    #[default]
    TwoSided,
    /// max_t (l(t) - l_bar)
    UpperOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOptions {
    /// Adds a "does not run" option per non-schedulable appliance.
    pub include_inactive: bool,
    pub stop_rule: StopRule,
    pub metric: ViolationMetric,
    /// Defaults to `|candidates| + 1`.
    pub iteration_cap: Option<usize>,
    pub objective: ObjectiveMode,
    pub max_states: usize,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        Self {
            include_inactive: false,
            stop_rule: StopRule::Guaranteed,
            metric: ViolationMetric::TwoSided,
            iteration_cap: None,
            objective: ObjectiveMode::Expected,
            max_states: DEFAULT_MAX_STATES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub phi: PrivacyScenario,
    /// Worst gap minus lambda; `<= 0` means no breach.
    pub violation_w: f64,
    /// F_1 of the schedule on which `phi` was found.
    pub f1_cost: f64,
    /// Scenario-set size after this iteration's update.
    pub omega_size: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub solution: ScheduleSolution,
    pub table: ScheduleTable,
    /// The configuration the final table was built from.
    pub config: SolveConfig,
    pub trace: IterationTrace,
    pub candidate_count: usize,
}

/// Every joint placement: one feasible start per appliance (plus "inactive"
/// when enabled), in lexicographic order of the start vector with appliances
/// in configuration order and "inactive" sorting after every start.
pub fn candidate_scenarios(appliances: &[NonSchedulableAppliance], include_inactive: bool) -> Vec<PrivacyScenario> {
    if appliances.is_empty() {
        return Vec::new();
    }
    let mut out = vec![Vec::new()];
    for app in appliances {
        let options: Vec<Option<usize>> = app
            .feasible_starts()
            .map(Some)
            .chain(include_inactive.then_some(None))
            .collect();
        out = out
            .into_iter()
            .flat_map(|prefix: Vec<Option<usize>>| {
                options.iter().map(move |o| {
                    let mut v = prefix.clone();
                    v.push(*o);
                    v
                })
            })
            .collect();
    }
    out.into_iter().map(|starts_ns| PrivacyScenario { starts_ns }).collect()
}

fn worst_gap(base_load_w: &[f64], phi: &PrivacyScenario, instance: &Instance, metric: ViolationMetric) -> f64 {
    base_load_w
        .iter()
        .enumerate()
        .map(|(i, base)| {
            let g = base + phi.ns_load_w(&instance.non_schedulable, i + 1) - instance.policy.l_bar_w;
            match metric {
                ViolationMetric::TwoSided => g.abs(),
                ViolationMetric::UpperOnly => g,
            }
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// The candidate maximizing the worst per-slot gap against `solution`'s
/// controllable load, with `violation = gap - lambda`. Ties go to the
/// earliest candidate in `candidates` order.
pub fn find_worst_scenario(
    solution: &ScheduleSolution,
    candidates: &[PrivacyScenario],
    instance: &Instance,
    metric: ViolationMetric,
) -> Result<(PrivacyScenario, f64)> {
    let mut best: Option<(&PrivacyScenario, f64)> = None;
    for phi in candidates {
        let gap = worst_gap(&solution.base_load_w, phi, instance, metric);
        if best.is_none_or(|(_, g)| gap > g) {
            best = Some((phi, gap));
        }
    }
    best.map(|(phi, gap)| (phi.clone(), gap - instance.policy.lambda_w))
        .ok_or(Error::NoScenarios)
}

fn config_for(instance: &Instance, scenarios: ScenarioSet, opts: &ScenarioOptions) -> SolveConfig {
    SolveConfig {
        instance: instance.clone(),
        scenarios,
        objective: opts.objective,
        max_states: opts.max_states,
    }
}

fn solve_or_probe(cfg: &SolveConfig) -> Result<(ScheduleTable, ScheduleSolution)> {
    table::solve(cfg).map_err(|e| match e {
        Error::Infeasible { .. } => Error::PrivacyUnattainable {
            lambda_w: cfg.instance.policy.lambda_w,
            smallest_feasible_w: probe_min_lambda(cfg),
        },
        other => other,
    })
}

/// Bisection on lambda for the smallest bound under which the same scenario
/// set admits a schedule. Diagnostic only.
pub fn probe_min_lambda(cfg: &SolveConfig) -> Option<f64> {
    let feasible = |lambda: f64| {
        let mut c = cfg.clone();
        c.instance.policy.lambda_w = lambda;
        table::backward_recursion(&c).is_ok()
    };
    let mut lo = cfg.instance.policy.lambda_w.max(0.0);
    let mut hi = lo.max(1.0) * 2.0;
    let mut grow = 0;
    while !feasible(hi) {
        lo = hi;
        hi *= 2.0;
        grow += 1;
        if grow > 40 {
            return None;
        }
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// Runs the worst-scenario iteration to completion.
pub fn solve_with_scenarios(instance: &Instance, opts: &ScenarioOptions) -> Result<ScenarioOutcome> {
    let candidates = candidate_scenarios(&instance.non_schedulable, opts.include_inactive);
    let inactive = PrivacyScenario::inactive(instance.non_schedulable.len());

    // The initial solve ignores non-schedulable activity, which is exactly
    // the all-inactive placement; keep it in the set when it is a candidate.
    let mut omega = ScenarioSet::new();
    if candidates.contains(&inactive) {
        omega.insert(inactive);
    }
    let mut cfg = config_for(instance, omega.clone(), opts);
    let (mut table, mut solution) = solve_or_probe(&cfg)?;
    let mut trace = IterationTrace::default();
    if candidates.is_empty() {
        return Ok(ScenarioOutcome {
            solution,
            table,
            config: cfg,
            trace,
            candidate_count: 0,
        });
    }

    let cap = opts.iteration_cap.unwrap_or(candidates.len() + 1);
    let mut previous: Option<PrivacyScenario> = None;
    for k in 0.. {
        let (phi, violation) = find_worst_scenario(&solution, &candidates, instance, opts.metric)?;
        let repeated = previous.as_ref() == Some(&phi);
        let known = omega.contains(&phi);
        let stop = match opts.stop_rule {
            StopRule::Guaranteed => violation <= PRIVACY_EPS || known || (k + 1 >= cap && repeated),
            StopRule::PaperStrict => repeated,
            StopRule::PaperMembership => known,
        };
        let f1_cost = solution.controllable_cost;
        if !stop {
            omega.insert(phi.clone());
        }
        trace.records.push(IterationRecord {
            k,
            phi: phi.clone(),
            violation_w: violation,
            f1_cost,
            omega_size: omega.len(),
        });
        if stop {
            break;
        }
        if !known {
            cfg = config_for(instance, omega.clone(), opts);
            (table, solution) = solve_or_probe(&cfg)?;
        }
        previous = Some(phi);
    }
    Ok(ScenarioOutcome {
        solution,
        table,
        config: cfg,
        trace,
        candidate_count: candidates.len(),
    })
}

/// Lemma-1 check on samples: every trajectory feasible under `omega_next`
/// must be feasible under `omega_prev`. An empty set imposes no privacy
/// constraint. Structurally invalid trajectories count as infeasible.
pub fn feasible_region_shrinks(
    instance: &Instance,
    omega_prev: &ScenarioSet,
    omega_next: &ScenarioSet,
    samples: &[Vec<Decision>],
) -> bool {
    samples.iter().all(|traj| match base_loads(instance, traj) {
        Some(loads) => !within_band(instance, omega_next, &loads) || within_band(instance, omega_prev, &loads),
        None => true,
    })
}

fn within_band(instance: &Instance, omega: &ScenarioSet, loads: &[f64]) -> bool {
    omega.iter().all(|phi| {
        loads
            .iter()
            .enumerate()
            .all(|(i, base)| instance.policy.admits(base + phi.ns_load_w(&instance.non_schedulable, i + 1)))
    })
}

/// Controllable load per slot of a decision sequence, or `None` if the
/// sequence breaks a structural rule.
pub fn base_loads(instance: &Instance, decisions: &[Decision]) -> Option<Vec<f64>> {
    if decisions.len() != instance.tau() {
        return None;
    }
    let mut state: SystemState = instance.initial_state();
    let mut out = Vec::with_capacity(decisions.len());
    for d in decisions {
        instance.validate_decision(&state, d).ok()?;
        out.push(instance.base_load_w(&state, d));
        state = SystemState {
            battery_wh: state.battery_wh + d.battery_delta_wh,
            remaining: instance.next_remaining(&state, d),
        };
    }
    state.remaining.iter().all(|r| *r == 0).then_some(out)
}
