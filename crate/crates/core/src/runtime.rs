//! Online operation: per-slot table lookup, household replay with scripted
//! or sampled non-schedulable events, and the battery-capacity sweep.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{privacy_gap, Decision, Instance, PrivacyScenario, SystemState, PRIVACY_EPS};
use crate::scenario::{solve_with_scenarios, ScenarioOptions};
use crate::table::{Entry, ScheduleTable, SolveConfig};

/// The stored decision for `state` at slot `t`.
///
/// The caller is responsible for having checked the table's model hash
/// against the live configuration. States off the battery grid or outside
/// the table are reported, never rounded.
pub fn runtime_lookup(table: &ScheduleTable, instance: &Instance, state: &SystemState, t: usize) -> Result<Decision> {
    if t == 0 || t > table.tau() {
        return Err(Error::OffTable {
            slot: t,
            detail: format!("slot outside 1..={}", table.tau()),
        });
    }
    let space = table.space();
    let idx = space.index_of(instance, state).ok_or_else(|| Error::OffTable {
        slot: t,
        detail: format!("{}; nearest table state is {}", describe(state), nearest(table, state)),
    })?;
    let entry = table.entry(t, idx).copied().unwrap_or(Entry::DEAD);
    if !entry.is_feasible() {
        return Err(Error::OffTable {
            slot: t,
            detail: format!("{} has no feasible continuation", describe(state)),
        });
    }
    Ok(table.decision_of(&entry, idx % space.levels))
}

fn describe(state: &SystemState) -> String {
    format!("state (B={} Wh, r={:?})", state.battery_wh, state.remaining)
}

fn nearest(table: &ScheduleTable, state: &SystemState) -> String {
    let space = table.space();
    let level = (state.battery_wh / space.step_wh).round().clamp(0.0, (space.levels - 1) as f64);
    let remaining: Vec<u32> = space
        .durations
        .iter()
        .enumerate()
        .map(|(i, s)| state.remaining.get(i).copied().unwrap_or(*s).min(*s))
        .collect();
    let near = SystemState {
        battery_wh: level * space.step_wh,
        remaining,
    };
    describe(&near)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventAction {
    Start,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedEvent {
    pub slot: usize,
    pub appliance: String,
    pub action: EventAction,
}

fn yes() -> bool {
    true
}

/// Non-schedulable activity for one simulated day.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EventScript {
    Events(Vec<ScriptedEvent>),
    /// One start per appliance drawn from its start distribution (or
    /// uniformly over its zone when `use_start_prob` is false).
    Sample {
        seed: u64,
        #[serde(default = "yes")]
        use_start_prob: bool,
    },
}

impl Default for EventScript {
    fn default() -> Self {
        EventScript::Events(Vec::new())
    }
}

impl EventScript {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| Error::config(crate::config::json_pointer(e.path()), e.into_inner().to_string()))
    }

    /// Resolves the script into a concrete placement, validating zones,
    /// runtimes and the one-run-per-appliance rule.
    pub fn scenario(&self, instance: &Instance) -> Result<PrivacyScenario> {
        let apps = &instance.non_schedulable;
        let mut starts = vec![None; apps.len()];
        match self {
            EventScript::Events(events) => {
                for (k, ev) in events.iter().enumerate() {
                    let at = format!("/events/{k}");
                    let i = apps
                        .iter()
                        .position(|a| a.id == ev.appliance)
                        .ok_or_else(|| Error::config(&at, format!("unknown appliance '{}'", ev.appliance)))?;
                    if starts[i].is_some() {
                        return Err(Error::config(&at, format!("appliance '{}' starts twice", ev.appliance)));
                    }
                    let app = &apps[i];
                    if !app.feasible_starts().any(|s| s == ev.slot) {
                        return Err(Error::config(
                            &at,
                            format!(
                                "start slot {} does not fit {} slot(s) inside zone [{}, {}]",
                                ev.slot, app.runtime_slots, app.zone_lo, app.zone_hi
                            ),
                        ));
                    }
                    starts[i] = Some(ev.slot);
                }
            }
            EventScript::Sample { seed, use_start_prob } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                for (i, app) in apps.iter().enumerate() {
                    let options: Vec<usize> = app.feasible_starts().collect();
                    let weights: Vec<f64> = if *use_start_prob {
                        options.iter().map(|s| app.start_probability(*s)).collect()
                    } else {
                        vec![1.0; options.len()]
                    };
                    let dist = WeightedIndex::new(&weights)
                        .map_err(|e| Error::Model(format!("start distribution of '{}': {e}", app.id)))?;
                    starts[i] = Some(options[dist.sample(&mut rng)]);
                }
            }
        }
        Ok(PrivacyScenario { starts_ns: starts })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRow {
    pub t: usize,
    /// Battery level at the start of the slot.
    pub battery_wh: f64,
    pub battery_delta_wh: f64,
    /// Ids of schedulable appliances started in this slot.
    pub starts: Vec<String>,
    /// Ids of non-schedulable appliances drawing power in this slot.
    pub ns_active: Vec<String>,
    pub base_load_w: f64,
    pub ns_load_w: f64,
    pub load_w: f64,
    pub price: f64,
    pub cost: f64,
    pub privacy_gap_w: f64,
    pub breach: bool,
    pub negative_load: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTotals {
    pub cost: f64,
    pub max_abs_gap_w: f64,
    pub breach_count: usize,
    pub final_battery_wh: f64,
}

impl SimulationTotals {
    pub fn from_rows(rows: &[SimulationRow], final_battery_wh: f64) -> Self {
        Self {
            cost: rows.iter().fold(0.0, |a, r| a + r.cost),
            max_abs_gap_w: rows.iter().fold(0.0, |m, r| m.max(r.privacy_gap_w.abs())),
            breach_count: rows.iter().filter(|r| r.breach).count(),
            final_battery_wh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    pub slot: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub scenario: PrivacyScenario,
    pub rows: Vec<SimulationRow>,
    pub totals: SimulationTotals,
    /// Set when the run left the table; rows stop before that slot.
    pub drift: Option<Drift>,
}

impl SimulationReport {
    /// Turns a drifted run into an error.
    pub fn check(&self) -> Result<()> {
        match &self.drift {
            Some(d) => Err(Error::OffTable {
                slot: d.slot,
                detail: d.message.clone(),
            }),
            None => Ok(()),
        }
    }
}

/// Replays one day: table lookups for the controllable part, the script for
/// the non-schedulable part.
pub fn simulate(table: &ScheduleTable, cfg: &SolveConfig, script: &EventScript) -> Result<SimulationReport> {
    table.check_hash(cfg)?;
    let inst = &cfg.instance;
    let scenario = script.scenario(inst)?;
    let mut state = inst.initial_state();
    let mut rows = Vec::with_capacity(inst.tau());
    let mut drift = None;
    for t in 1..=inst.tau() {
        let decision = match runtime_lookup(table, inst, &state, t) {
            Ok(d) => d,
            Err(e) => {
                drift = Some(Drift {
                    slot: t,
                    message: e.to_string(),
                });
                break;
            }
        };
        let raw_base = {
            let next = inst.next_remaining(&state, &decision);
            let y = crate::model::appliance_load(&state.remaining, &next, &inst.powers()).unwrap_or(0.0);
            y + decision.battery_delta_wh / inst.grid.slot_hours
        };
        let base = inst.base_load_w(&state, &decision);
        let w = scenario.ns_load_w(&inst.non_schedulable, t);
        let load = base + w;
        let gap = privacy_gap(load, &inst.policy);
        rows.push(SimulationRow {
            t,
            battery_wh: state.battery_wh,
            battery_delta_wh: decision.battery_delta_wh,
            starts: inst
                .schedulable
                .iter()
                .zip(&decision.starts)
                .filter(|(_, s)| **s)
                .map(|(a, _)| a.id.clone())
                .collect(),
            ns_active: inst
                .non_schedulable
                .iter()
                .enumerate()
                .filter(|(j, _)| scenario.is_active(&inst.non_schedulable, *j, t))
                .map(|(_, a)| a.id.clone())
                .collect(),
            base_load_w: base,
            ns_load_w: w,
            load_w: load,
            price: inst.price.at(t),
            cost: inst.slot_cost(load, t),
            privacy_gap_w: gap,
            breach: gap.abs() > inst.policy.lambda_w + PRIVACY_EPS,
            negative_load: raw_base + w < 0.0,
        });
        let step = inst.battery.grid_step_wh;
        let level = inst.battery.level_index(state.battery_wh).expect("lookup accepted the state") as f64;
        state = SystemState {
            battery_wh: step * (level + (decision.battery_delta_wh / step).round()),
            remaining: inst.next_remaining(&state, &decision),
        };
    }
    let totals = SimulationTotals::from_rows(&rows, state.battery_wh);
    Ok(SimulationReport {
        scenario,
        rows,
        totals,
        drift,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub capacity_wh: f64,
    /// Total expected cost; `None` when the capacity admits no schedule.
    pub expected_cost: Option<f64>,
    pub controllable_cost: Option<f64>,
    pub iterations: usize,
    /// The error message for an infeasible point.
    pub error: Option<String>,
}

/// Runs the full scenario pipeline once per capacity. Infeasible points are
/// recorded and the sweep continues.
pub fn sweep_battery(instance: &Instance, opts: &ScenarioOptions, capacities_wh: &[f64]) -> Result<Vec<SweepPoint>> {
    if capacities_wh.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::config("/capacities", "capacities must be ascending"));
    }
    let instances = capacities_wh
        .iter()
        .map(|c| {
            let battery = instance
                .battery
                .with_capacity(*c)
                .map_err(|e| Error::config("/capacities", format!("capacity {c} Wh: {e}")))?;
            Ok(Instance {
                battery,
                ..instance.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let point = |(inst, c): (&Instance, &f64)| -> Result<SweepPoint> {
        match solve_with_scenarios(inst, opts) {
            Ok(o) => Ok(SweepPoint {
                capacity_wh: *c,
                expected_cost: Some(o.solution.expected_cost),
                controllable_cost: Some(o.solution.controllable_cost),
                iterations: o.trace.len(),
                error: None,
            }),
            Err(e @ (Error::Infeasible { .. } | Error::PrivacyUnattainable { .. })) => Ok(SweepPoint {
                capacity_wh: *c,
                expected_cost: None,
                controllable_cost: None,
                iterations: 0,
                error: Some(e.to_string()),
            }),
            Err(e) => Err(e),
        }
    };

    #[cfg(feature = "parallel")]
    let points: Vec<Result<SweepPoint>> = {
        use rayon::prelude::*;
        instances.par_iter().zip(capacities_wh.par_iter()).map(point).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let points: Vec<Result<SweepPoint>> = instances.iter().zip(capacities_wh.iter()).map(point).collect();

    points.into_iter().collect()
}
