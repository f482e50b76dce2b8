//! Schedule-table construction by backward recursion over the discretized
//! state set (battery level x remaining durations), and forward extraction
//! of the optimal trajectory.
//!
//! The recursion minimizes the controllable cost `sum_t c(t) (y(t) + z(t))`.
//! With the scenario set fixed, the non-schedulable part of the expected bill
//! does not depend on any decision, so it is carried as a constant
//! (`ScheduleTable::ns_cost`) and added to `F_1` when a total is reported.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{
    slot_cost, Decision, Instance, PrivacyScenario, ScenarioSet, SystemState, GRID_EPS,
    PRIVACY_EPS,
};

/// Default cap on the number of table rows per slot.
pub const DEFAULT_MAX_STATES: usize = 2_000_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveMode {
    /// Non-schedulable cost is its expectation under the start weights.
    #[default]
    Expected,
    /// Non-schedulable cost is the costliest placement per appliance.
    WorstCaseCost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub instance: Instance,
    pub scenarios: ScenarioSet,
    pub objective: ObjectiveMode,
    pub max_states: usize,
}

impl SolveConfig {
    pub fn new(instance: Instance, scenarios: ScenarioSet) -> Self {
        Self {
            instance,
            scenarios,
            objective: ObjectiveMode::Expected,
            max_states: DEFAULT_MAX_STATES,
        }
    }

    /// SHA-256 over the canonical JSON of everything the table depends on.
    pub fn model_hash(&self) -> String {
        #[derive(Serialize)]
        struct Keyed<'a> {
            instance: &'a Instance,
            scenarios: &'a ScenarioSet,
            objective: ObjectiveMode,
        }
        let json = serde_json::to_vec(&Keyed {
            instance: &self.instance,
            scenarios: &self.scenarios,
            objective: self.objective,
        })
        .expect("instance serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Decision-independent non-schedulable cost over the horizon.
    pub fn ns_cost(&self) -> f64 {
        let inst = &self.instance;
        inst.non_schedulable
            .iter()
            .map(|app| {
                let placements = app.feasible_starts().map(|s| {
                    let cost: f64 = (s..s + app.runtime_slots as usize)
                        .map(|t| slot_cost(app.power_w, inst.price.at(t), inst.grid.slot_hours))
                        .sum();
                    (app.start_probability(s), cost)
                });
                match self.objective {
                    ObjectiveMode::Expected => placements.map(|(p, c)| p * c).sum(),
                    ObjectiveMode::WorstCaseCost => placements.map(|(_, c)| c).fold(0.0, f64::max),
                }
            })
            .sum()
    }
}

/// Mixed-radix indexing of `(battery level, r_1, ..., r_N)`; the battery
/// level is the fastest-varying digit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpace {
    pub levels: usize,
    pub step_wh: f64,
    pub durations: Vec<u32>,
    len: usize,
}

impl StateSpace {
    pub fn new(instance: &Instance, max_states: usize) -> Result<Self> {
        let levels = instance.battery.level_count();
        let durations = instance.durations();
        let count = durations
            .iter()
            .fold(levels as u128, |acc, s| acc.saturating_mul(u128::from(*s) + 1));
        if count > max_states as u128 {
            return Err(Error::StateExplosion {
                count,
                cap: max_states,
            });
        }
        Ok(Self {
            levels,
            step_wh: instance.battery.grid_step_wh,
            durations,
            len: count as usize,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn encode(&self, level: usize, remaining: &[u32]) -> usize {
        let mut idx = 0usize;
        for (r, s) in remaining.iter().zip(&self.durations).rev() {
            idx = idx * (*s as usize + 1) + *r as usize;
        }
        idx * self.levels + level
    }

    pub fn decode(&self, mut idx: usize) -> (usize, Vec<u32>) {
        let level = idx % self.levels;
        idx /= self.levels;
        let remaining = self
            .durations
            .iter()
            .map(|s| {
                let radix = *s as usize + 1;
                let r = idx % radix;
                idx /= radix;
                r as u32
            })
            .collect();
        (level, remaining)
    }

    pub fn state(&self, idx: usize) -> SystemState {
        let (level, remaining) = self.decode(idx);
        SystemState {
            battery_wh: level as f64 * self.step_wh,
            remaining,
        }
    }

    pub fn index_of(&self, instance: &Instance, state: &SystemState) -> Option<usize> {
        let level = instance.battery.level_index(state.battery_wh)?;
        if state.remaining.len() != self.durations.len()
            || state.remaining.iter().zip(&self.durations).any(|(r, s)| r > s)
        {
            return None;
        }
        Some(self.encode(level, &state.remaining))
    }
}

/// Every `(B, r_1, ..., r_N)` combination, `M * prod(S_i + 1)` states.
pub fn enumerate_states(instance: &Instance, max_states: usize) -> Result<Vec<SystemState>> {
    let space = StateSpace::new(instance, max_states)?;
    Ok((0..space.len()).map(|i| space.state(i)).collect())
}

/// One row of one sub-table. `value` is `+inf` for dead ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub starts: u32,
    pub next_level: u32,
    #[serde(with = "inf_as_null")]
    pub value: f64,
}

impl Entry {
    pub const DEAD: Entry = Entry {
        starts: 0,
        next_level: 0,
        value: f64::INFINITY,
    };

    pub fn is_feasible(&self) -> bool {
        self.value.is_finite()
    }
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableHeader {
    pub format_version: u32,
    pub model_hash: String,
    pub tau: usize,
    pub battery_levels: usize,
    pub battery_step_wh: f64,
    pub durations: Vec<u32>,
    pub omega: ScenarioSet,
    pub objective: ObjectiveMode,
    pub ns_cost: f64,
}

pub const TABLE_FORMAT_VERSION: u32 = 1;

/// tau sub-tables mapping state index to the optimal entry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleTable {
    pub header: TableHeader,
    pub(crate) space: StateSpace,
    /// `slots[t - 1][state index]`.
    pub(crate) slots: Vec<Vec<Entry>>,
}

impl ScheduleTable {
    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn tau(&self) -> usize {
        self.header.tau
    }

    pub fn entry(&self, t: usize, idx: usize) -> Option<&Entry> {
        self.slots.get(t.checked_sub(1)?)?.get(idx)
    }

    /// F_t(G) for the state with index `idx`.
    pub fn value(&self, t: usize, idx: usize) -> f64 {
        self.entry(t, idx).map_or(f64::INFINITY, |e| e.value)
    }

    pub fn ns_cost(&self) -> f64 {
        self.header.ns_cost
    }

    pub fn decision_of(&self, entry: &Entry, level: usize) -> Decision {
        Decision {
            starts: (0..self.space.durations.len())
                .map(|i| entry.starts & (1 << i) != 0)
                .collect(),
            battery_delta_wh: (entry.next_level as f64 - level as f64) * self.space.step_wh,
        }
    }

    pub fn check_hash(&self, cfg: &SolveConfig) -> Result<()> {
        let live = cfg.model_hash();
        if live != self.header.model_hash {
            return Err(Error::Integrity(format!(
                "table model-hash {} does not match the live config {}",
                self.header.model_hash, live
            )));
        }
        Ok(())
    }

    /// Reassembles a table read from disk, checking that the pieces agree.
    pub(crate) fn from_parts(header: TableHeader, mut space: StateSpace, slots: Vec<Vec<Entry>>) -> Result<Self> {
        if header.format_version != TABLE_FORMAT_VERSION {
            return Err(Error::Integrity(format!(
                "table format version {} is not supported (expected {TABLE_FORMAT_VERSION})",
                header.format_version
            )));
        }
        let len = space
            .durations
            .iter()
            .try_fold(space.levels, |acc, s| acc.checked_mul(*s as usize + 1));
        let shape_ok = space.levels > 0
            && space.step_wh > 0.0
            && len.is_some()
            && header.battery_levels == space.levels
            && header.battery_step_wh == space.step_wh
            && header.durations == space.durations
            && slots.len() == header.tau;
        if !shape_ok {
            return Err(Error::Integrity("table header and state space disagree".into()));
        }
        space.len = len.unwrap_or_default();
        if slots.iter().any(|s| s.len() != space.len) {
            return Err(Error::Integrity("table shape does not match its header".into()));
        }
        let max_level = space.levels as u32 - 1;
        let max_starts = 1u32.checked_shl(space.durations.len() as u32).unwrap_or(0).wrapping_sub(1);
        if slots
            .iter()
            .flatten()
            .any(|e| e.is_feasible() && (e.next_level > max_level || e.starts & !max_starts != 0))
        {
            return Err(Error::Integrity("table entry points outside the state space".into()));
        }
        Ok(Self { header, space, slots })
    }
}

/// Per-slot constants shared by every state at slot `t`.
struct SlotContext {
    t: usize,
    tau: usize,
    price: f64,
    slot_hours: f64,
    w_min: f64,
    w_max: f64,
    lo: f64,
    hi: f64,
    clip: bool,
    rate_down: usize,
    rate_up: usize,
}

impl SlotContext {
    fn new(cfg: &SolveConfig, t: usize) -> Self {
        let inst = &cfg.instance;
        let (w_min, w_max) = if cfg.scenarios.is_empty() {
            (0.0, 0.0)
        } else {
            cfg.scenarios
                .iter()
                .map(|phi| phi.ns_load_w(&inst.non_schedulable, t))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), w| (lo.min(w), hi.max(w)))
        };
        let (lo, hi) = inst.policy.band();
        let step = inst.battery.grid_step_wh;
        let steps = |limit: f64| ((limit + GRID_EPS * step.max(1.0)) / step).floor() as usize;
        Self {
            t,
            tau: inst.grid.tau,
            price: inst.price.at(t),
            slot_hours: inst.grid.slot_hours,
            w_min,
            w_max,
            lo,
            hi,
            clip: inst.clip_negative_load,
            rate_down: steps(inst.battery.z_discharge_max_wh),
            rate_up: steps(inst.battery.z_charge_max_wh),
        }
    }

    fn level_range(&self, level: usize, levels: usize) -> std::ops::RangeInclusive<usize> {
        level.saturating_sub(self.rate_down)..=(level + self.rate_up).min(levels - 1)
    }
}

/// Candidate moves out of one state at one slot, each with its slot cost
/// and successor, filtered by start rules, battery limits and the privacy
/// band for every scenario in the set.
struct Candidate {
    starts: u32,
    next_level: usize,
    next_remaining: Vec<u32>,
    cost: f64,
}

fn candidates(
    cfg: &SolveConfig,
    space: &StateSpace,
    ctx: &SlotContext,
    level: usize,
    remaining: &[u32],
) -> Vec<Candidate> {
    let powers: Vec<f64> = cfg.instance.schedulable.iter().map(|a| a.power_w).collect();
    let startable: u32 = space
        .durations
        .iter()
        .zip(remaining)
        .enumerate()
        .filter(|(_, (s, r))| **r == **s && ctx.t + **s as usize - 1 <= ctx.tau)
        .fold(0, |m, (i, _)| m | (1 << i));

    let mut out = Vec::new();
    let mut mask = startable;
    loop {
        // Walk every subset of `startable`, including the empty one.
        let subset = startable & !mask;
        let mut y = 0.0;
        let next_remaining: Vec<u32> = space
            .durations
            .iter()
            .zip(remaining)
            .enumerate()
            .map(|(i, (s, r))| {
                let start = subset & (1 << i) != 0;
                if start || (*r > 0 && r < s) {
                    y += powers[i];
                    r - 1
                } else {
                    *r
                }
            })
            .collect();
        for next_level in ctx.level_range(level, space.levels) {
            let z = (next_level as f64 - level as f64) * space.step_wh;
            let mut base = y + z / ctx.slot_hours;
            if ctx.clip {
                base = base.max(0.0);
            }
            if base + ctx.w_min < ctx.lo - PRIVACY_EPS || base + ctx.w_max > ctx.hi + PRIVACY_EPS {
                continue;
            }
            out.push(Candidate {
                starts: subset,
                next_level,
                next_remaining: next_remaining.clone(),
                cost: slot_cost(base, ctx.price, ctx.slot_hours),
            });
        }
        if mask == 0 {
            break;
        }
        mask = (mask - 1) & startable;
    }
    out
}

/// Tie-break order among equal-value moves: fewer starts, smaller |z|,
/// lexicographically smaller start vector, then the lower battery level.
fn tie_key(starts: u32, level: usize, next_level: usize, n: usize) -> (u32, usize, u32, usize) {
    let lex = (0..n).fold(0u32, |acc, i| (acc << 1) | ((starts >> i) & 1));
    (starts.count_ones(), level.abs_diff(next_level), lex, next_level)
}

fn values_tie(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

fn best_entry(
    cfg: &SolveConfig,
    space: &StateSpace,
    ctx: &SlotContext,
    idx: usize,
    next_values: Option<&[Entry]>,
) -> Entry {
    let (level, remaining) = space.decode(idx);
    let n = space.durations.len();
    let mut best = Entry::DEAD;
    let mut best_key = None;
    for c in candidates(cfg, space, ctx, level, &remaining) {
        let tail = match next_values {
            Some(next) => next[space.encode(c.next_level, &c.next_remaining)].value,
            None if c.next_remaining.iter().all(|r| *r == 0) => 0.0,
            None => f64::INFINITY,
        };
        let value = c.cost + tail;
        if !value.is_finite() {
            continue;
        }
        let key = tie_key(c.starts, level, c.next_level, n);
        let better = match best_key {
            None => true,
            Some(k) if values_tie(value, best.value) => key < k,
            Some(_) => value < best.value,
        };
        if better {
            best = Entry {
                starts: c.starts,
                next_level: c.next_level as u32,
                value,
            };
            best_key = Some(key);
        }
    }
    best
}

fn check_state(cfg: &SolveConfig, state: &SystemState, t: usize) -> Result<(StateSpace, usize)> {
    let inst = &cfg.instance;
    if !(1..=inst.grid.tau).contains(&t) {
        return Err(Error::Model(format!("slot {t} outside [1, {}]", inst.grid.tau)));
    }
    inst.validate_state(state)?;
    let space = StateSpace::new(inst, cfg.max_states)?;
    let idx = space.index_of(inst, state).expect("validated state has an index");
    Ok((space, idx))
}

/// Every decision allowed at `(state, t)` under the start-once and deadline
/// rules, the battery limits and the privacy band for every scenario in the
/// set. An empty list means the state is a dead end at `t`.
pub fn feasible_decisions(state: &SystemState, t: usize, cfg: &SolveConfig) -> Result<Vec<Decision>> {
    let (space, idx) = check_state(cfg, state, t)?;
    let (level, remaining) = space.decode(idx);
    let ctx = SlotContext::new(cfg, t);
    Ok(candidates(cfg, &space, &ctx, level, &remaining)
        .into_iter()
        .map(|c| Decision {
            starts: (0..remaining.len()).map(|i| c.starts & (1 << i) != 0).collect(),
            battery_delta_wh: (c.next_level as f64 - level as f64) * space.step_wh,
        })
        .collect())
}

/// F_tau(G): cheapest last-slot move that leaves every appliance finished.
/// Returns `(+inf, None)` when no such move exists.
pub fn terminal_value(state: &SystemState, cfg: &SolveConfig) -> Result<(f64, Option<Decision>)> {
    let tau = cfg.instance.grid.tau;
    let (space, idx) = check_state(cfg, state, tau)?;
    let ctx = SlotContext::new(cfg, tau);
    let e = best_entry(cfg, &space, &ctx, idx, None);
    if !e.is_feasible() {
        return Ok((f64::INFINITY, None));
    }
    let level = idx % space.levels;
    let decision = Decision {
        starts: (0..space.durations.len()).map(|i| e.starts & (1 << i) != 0).collect(),
        battery_delta_wh: (e.next_level as f64 - level as f64) * space.step_wh,
    };
    Ok((e.value, Some(decision)))
}

/// Builds the full schedule table, slot tau down to slot 1.
pub fn backward_recursion(cfg: &SolveConfig) -> Result<ScheduleTable> {
    let inst = &cfg.instance;
    let space = StateSpace::new(inst, cfg.max_states)?;
    for phi in cfg.scenarios.iter() {
        phi.validate(&inst.non_schedulable)?;
    }
    let tau = inst.grid.tau;
    let mut slots: Vec<Vec<Entry>> = vec![Vec::new(); tau];
    for t in (1..=tau).rev() {
        let ctx = SlotContext::new(cfg, t);
        let next = (t < tau).then(|| slots[t].as_slice());
        slots[t - 1] = build_slot(cfg, &space, &ctx, next);
    }

    let init = space
        .index_of(inst, &inst.initial_state())
        .ok_or_else(|| Error::Model("initial state is off the grid".into()))?;
    if !slots[0][init].is_feasible() {
        return Err(Error::Infeasible {
            slot: earliest_dead_slot(cfg, &space, init),
        });
    }

    let header = TableHeader {
        format_version: TABLE_FORMAT_VERSION,
        model_hash: cfg.model_hash(),
        tau,
        battery_levels: space.levels,
        battery_step_wh: space.step_wh,
        durations: space.durations.clone(),
        omega: cfg.scenarios.clone(),
        objective: cfg.objective,
        ns_cost: cfg.ns_cost(),
    };
    Ok(ScheduleTable { header, space, slots })
}

#[cfg(feature = "parallel")]
fn build_slot(cfg: &SolveConfig, space: &StateSpace, ctx: &SlotContext, next: Option<&[Entry]>) -> Vec<Entry> {
    use rayon::prelude::*;
    (0..space.len())
        .into_par_iter()
        .map(|idx| best_entry(cfg, space, ctx, idx, next))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn build_slot(cfg: &SolveConfig, space: &StateSpace, ctx: &SlotContext, next: Option<&[Entry]>) -> Vec<Entry> {
    (0..space.len())
        .map(|idx| best_entry(cfg, space, ctx, idx, next))
        .collect()
}

/// Forward reachability from the initial state using only locally feasible
/// moves; the first slot with an empty frontier is where every branch dies.
fn earliest_dead_slot(cfg: &SolveConfig, space: &StateSpace, init: usize) -> usize {
    let tau = cfg.instance.grid.tau;
    let mut frontier = vec![false; space.len()];
    frontier[init] = true;
    for t in 1..=tau {
        let ctx = SlotContext::new(cfg, t);
        let mut next = vec![false; space.len()];
        let mut any = false;
        for idx in (0..space.len()).filter(|i| frontier[*i]) {
            let (level, remaining) = space.decode(idx);
            for c in candidates(cfg, space, &ctx, level, &remaining) {
                next[space.encode(c.next_level, &c.next_remaining)] = true;
                any = true;
            }
        }
        if !any {
            return t;
        }
        frontier = next;
    }
    tau + 1
}

/// The realized trajectory of a table walk under one non-schedulable
/// placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSolution {
    pub scenario: PrivacyScenario,
    /// `tau + 1` states, from the initial state to the post-horizon state.
    pub states: Vec<SystemState>,
    pub decisions: Vec<Decision>,
    /// y(t) + z(t)/h, the load with no non-schedulable activity.
    pub base_load_w: Vec<f64>,
    pub ns_load_w: Vec<f64>,
    pub load_w: Vec<f64>,
    pub privacy_gap_w: Vec<f64>,
    pub slot_cost: Vec<f64>,
    /// Sum of `slot_cost` under `scenario`.
    pub realized_cost: f64,
    /// F_1(G_1): the optimized controllable cost.
    pub controllable_cost: f64,
    pub ns_expected_cost: f64,
    /// `controllable_cost + ns_expected_cost`.
    pub expected_cost: f64,
}

impl ScheduleSolution {
    /// Per appliance, whether it draws power in each slot.
    pub fn run_pattern(&self) -> Vec<Vec<bool>> {
        let n = self.decisions.first().map_or(0, |d| d.starts.len());
        (0..n)
            .map(|i| {
                self.states
                    .windows(2)
                    .map(|w| w[0].remaining[i] != w[1].remaining[i])
                    .collect()
            })
            .collect()
    }

    pub fn battery_trace_wh(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.battery_wh).collect()
    }

    pub fn max_abs_gap_w(&self) -> f64 {
        self.privacy_gap_w.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Walks the table forward from `initial` and evaluates the resulting loads
/// under `scenario`.
pub fn extract_schedule(
    table: &ScheduleTable,
    cfg: &SolveConfig,
    initial: &SystemState,
    scenario: &PrivacyScenario,
) -> Result<ScheduleSolution> {
    table.check_hash(cfg)?;
    let inst = &cfg.instance;
    scenario.validate(&inst.non_schedulable)?;
    let space = &table.space;
    let mut state = initial.clone();
    let controllable_cost = space
        .index_of(inst, initial)
        .map(|i| table.value(1, i))
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::OffTable {
            slot: 1,
            detail: "initial state is infeasible or off the table".into(),
        })?;

    let tau = inst.grid.tau;
    let mut sol = ScheduleSolution {
        scenario: scenario.clone(),
        states: vec![state.clone()],
        decisions: Vec::with_capacity(tau),
        base_load_w: Vec::with_capacity(tau),
        ns_load_w: Vec::with_capacity(tau),
        load_w: Vec::with_capacity(tau),
        privacy_gap_w: Vec::with_capacity(tau),
        slot_cost: Vec::with_capacity(tau),
        realized_cost: 0.0,
        controllable_cost,
        ns_expected_cost: table.ns_cost(),
        expected_cost: controllable_cost + table.ns_cost(),
    };
    for t in 1..=tau {
        let idx = space.index_of(inst, &state).ok_or_else(|| Error::Integrity(format!(
            "trajectory drifted off the table at slot {t}"
        )))?;
        let entry = table.entry(t, idx).copied().unwrap_or(Entry::DEAD);
        if !entry.is_feasible() {
            return Err(Error::Integrity(format!("trajectory reached a dead entry at slot {t}")));
        }
        let decision = table.decision_of(&entry, idx % space.levels);
        let base = inst.base_load_w(&state, &decision);
        let w = scenario.ns_load_w(&inst.non_schedulable, t);
        let load = base + w;
        let cost = inst.slot_cost(load, t);
        sol.base_load_w.push(base);
        sol.ns_load_w.push(w);
        sol.load_w.push(load);
        sol.privacy_gap_w.push(crate::model::privacy_gap(load, &inst.policy));
        sol.slot_cost.push(cost);
        sol.realized_cost += cost;
        state = SystemState {
            battery_wh: space.step_wh * entry.next_level as f64,
            remaining: inst.next_remaining(&state, &decision),
        };
        sol.decisions.push(decision);
        sol.states.push(state.clone());
    }
    Ok(sol)
}

/// Table build plus extraction for the all-inactive placement.
pub fn solve(cfg: &SolveConfig) -> Result<(ScheduleTable, ScheduleSolution)> {
    let table = backward_recursion(cfg)?;
    let inst = &cfg.instance;
    let sol = extract_schedule(
        &table,
        cfg,
        &inst.initial_state(),
        &PrivacyScenario::inactive(inst.non_schedulable.len()),
    )?;
    Ok((table, sol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::*;

    fn instance(
        tau: usize,
        apps: &[(f64, f64)],
        battery: Battery,
        price: Vec<f64>,
        lambda: f64,
        l_bar: f64,
    ) -> Instance {
        let grid = TimeGrid::new(tau, 1.0).unwrap();
        Instance {
            name: "test".into(),
            schedulable: apps
                .iter()
                .enumerate()
                .map(|(i, (p, e))| SchedulableAppliance::new(format!("a{i}"), *p, *e, &grid).unwrap())
                .collect(),
            non_schedulable: vec![],
            battery,
            price: PriceSignal::new(price, tau).unwrap(),
            policy: PrivacyPolicy::new(lambda, l_bar, LoadReferenceSource::ConfigConstant).unwrap(),
            clip_negative_load: false,
            grid,
        }
    }

    fn fixed_battery() -> Battery {
        Battery::new(0.0, 0.0, 0.0, 0.0, 1.0).unwrap()
    }

    #[test]
    fn state_counts() {
        let one = instance(3, &[(1.0, 2.0)], Battery::new(20.0, 0.0, 10.0, 10.0, 10.0).unwrap(), vec![1.0; 3], 1e9, 0.0);
        assert_eq!(enumerate_states(&one, 1000).unwrap().len(), 9);
        let none = instance(3, &[], Battery::new(30.0, 0.0, 10.0, 10.0, 10.0).unwrap(), vec![1.0; 3], 1e9, 0.0);
        assert_eq!(enumerate_states(&none, 1000).unwrap().len(), 4);
        let err = enumerate_states(&one, 5).unwrap_err();
        assert!(matches!(err, Error::StateExplosion { count: 9, cap: 5 }), "{err}");
    }

    #[test]
    fn section_iv_a_state_count() {
        let apps = [(35.38, 70.7), (156.59, 313.2), (76.73, 230.2)];
        let b = Battery::new(750.0, 0.0, 250.0, 250.0, 250.0).unwrap();
        let inst = instance(12, &apps, b, vec![1.0; 12], 80.0, 80.0);
        assert_eq!(inst.durations(), vec![2, 3, 4]);
        let states = enumerate_states(&inst, 10_000).unwrap();
        // Direct count: 4 battery levels x 3 x 4 x 5 remaining combinations.
        let mut direct = 0;
        for _b in [0, 250, 500, 750] {
            for _r1 in 0..=2 {
                for _r2 in 0..=3 {
                    for _r3 in 0..=4 {
                        direct += 1;
                    }
                }
            }
        }
        assert_eq!(states.len(), direct);
        assert_eq!(states.len(), 240);
        let five_levels = Battery::new(750.0, 0.0, 250.0, 250.0, 187.5).unwrap();
        let inst5 = instance(12, &apps, five_levels, vec![1.0; 12], 80.0, 80.0);
        assert_eq!(enumerate_states(&inst5, 10_000).unwrap().len(), 300);
        // Every state is distinct and round-trips through the index.
        let space = StateSpace::new(&inst, 10_000).unwrap();
        for (i, s) in states.iter().enumerate() {
            assert_eq!(space.index_of(&inst, s), Some(i));
        }
    }

    #[test]
    fn null_action_feasible_without_privacy_bound() {
        let inst = instance(4, &[(10.0, 20.0)], Battery::new(20.0, 10.0, 10.0, 10.0, 10.0).unwrap(), vec![1.0; 4], f64::INFINITY, 0.0);
        let cfg = SolveConfig::new(inst.clone(), ScenarioSet::new());
        let ds = feasible_decisions(&inst.initial_state(), 2, &cfg).unwrap();
        assert!(ds.contains(&Decision::idle(1)));
        assert_eq!(ds.len(), 2 * 3);
    }

    #[test]
    fn deadline_blocks_late_start() {
        // S = 3 = tau - t + 2 at t = 3 with tau = 4.
        let inst = instance(4, &[(10.0, 30.0)], fixed_battery(), vec![1.0; 4], f64::INFINITY, 0.0);
        let cfg = SolveConfig::new(inst.clone(), ScenarioSet::new());
        let ds = feasible_decisions(&inst.initial_state(), 3, &cfg).unwrap();
        assert!(ds.iter().all(|d| !d.starts[0]));
        let ds2 = feasible_decisions(&inst.initial_state(), 2, &cfg).unwrap();
        assert!(ds2.iter().any(|d| d.starts[0]));
    }

    #[test]
    fn terminal_prefers_max_discharge() {
        let inst = instance(2, &[], Battery::new(40.0, 0.0, 20.0, 20.0, 10.0).unwrap(), vec![1.0, 2.0], f64::INFINITY, 0.0);
        let cfg = SolveConfig::new(inst, ScenarioSet::new());
        let s = SystemState { battery_wh: 40.0, remaining: vec![] };
        let (v, d) = terminal_value(&s, &cfg).unwrap();
        assert_eq!(d.unwrap().battery_delta_wh, -20.0);
        assert_eq!(v, -40.0);
    }

    #[test]
    fn terminal_unstarted_long_appliance_is_infeasible() {
        let inst = instance(3, &[(10.0, 20.0)], fixed_battery(), vec![1.0; 3], f64::INFINITY, 0.0);
        let cfg = SolveConfig::new(inst.clone(), ScenarioSet::new());
        let (v, d) = terminal_value(&inst.initial_state(), &cfg).unwrap();
        assert!(v.is_infinite() && d.is_none());
    }

    #[test]
    fn terminal_single_slot_appliance_must_start() {
        // z grid {-10, 0, +10} from B = 10: enumerate by hand, cost = 3 (10 + z).
        let inst = instance(2, &[(10.0, 10.0)], Battery::new(20.0, 10.0, 10.0, 10.0, 10.0).unwrap(), vec![1.0, 3.0], f64::INFINITY, 0.0);
        let cfg = SolveConfig::new(inst.clone(), ScenarioSet::new());
        let (v, d) = terminal_value(&inst.initial_state(), &cfg).unwrap();
        let by_hand = [-10.0, 0.0, 10.0].iter().map(|z| 3.0 * (10.0 + z)).fold(f64::INFINITY, f64::min);
        assert_eq!(v, by_hand);
        let d = d.unwrap();
        assert!(d.starts[0]);
        assert_eq!(d.battery_delta_wh, -10.0);
    }

    #[test]
    fn single_slot_table_is_terminal_value() {
        let inst = instance(1, &[(10.0, 10.0)], fixed_battery(), vec![0.5], f64::INFINITY, 0.0);
        let cfg = SolveConfig::new(inst.clone(), ScenarioSet::new());
        let table = backward_recursion(&cfg).unwrap();
        let (v, _) = terminal_value(&inst.initial_state(), &cfg).unwrap();
        let idx = table.space().index_of(&inst, &inst.initial_state()).unwrap();
        assert_eq!(table.value(1, idx), v);
        assert_eq!(v, 5.0);
    }

    #[test]
    fn constant_price_no_arbitrage() {
        let inst = instance(4, &[], Battery::new(30.0, 0.0, 10.0, 10.0, 10.0).unwrap(), vec![2.0; 4], f64::INFINITY, 0.0);
        let cfg = SolveConfig::new(inst, ScenarioSet::new());
        let (_, sol) = solve(&cfg).unwrap();
        assert_eq!(sol.controllable_cost, 0.0);
        assert!(sol.decisions.iter().all(|d| d.battery_delta_wh == 0.0));
    }

    #[test]
    fn extracted_solution_is_consistent() {
        let inst = instance(
            5,
            &[(10.0, 20.0), (7.0, 7.0)],
            Battery::new(30.0, 0.0, 10.0, 10.0, 10.0).unwrap(),
            vec![3.0, 1.0, 2.0, 5.0, 4.0],
            15.0,
            10.0,
        );
        let cfg = SolveConfig::new(inst.clone(), ScenarioSet::new());
        let (table, sol) = solve(&cfg).unwrap();
        let recomputed: f64 = sol.load_w.iter().enumerate().map(|(i, l)| slot_cost(*l, inst.price.at(i + 1), 1.0)).sum();
        assert!((recomputed - sol.realized_cost).abs() < 1e-9);
        assert!((sol.realized_cost - sol.controllable_cost).abs() < 1e-9);
        assert!(sol.privacy_gap_w.iter().all(|g| g.abs() <= 15.0 + 1e-9));
        for (i, pattern) in sol.run_pattern().iter().enumerate() {
            let on: Vec<usize> = pattern.iter().enumerate().filter(|(_, b)| **b).map(|(t, _)| t).collect();
            assert_eq!(on.len() as u32, inst.schedulable[i].duration_slots);
            assert!(on.windows(2).all(|w| w[1] == w[0] + 1));
        }
        // Bellman identity on every feasible entry.
        let space = table.space();
        for t in 1..=inst.tau() {
            for idx in 0..space.len() {
                let e = table.entry(t, idx).unwrap();
                if !e.is_feasible() {
                    continue;
                }
                let state = space.state(idx);
                let d = table.decision_of(e, idx % space.levels);
                let c = inst.slot_cost(inst.base_load_w(&state, &d), t);
                let next = SystemState {
                    battery_wh: e.next_level as f64 * space.step_wh,
                    remaining: inst.next_remaining(&state, &d),
                };
                let tail = if t == inst.tau() { 0.0 } else { table.value(t + 1, space.index_of(&inst, &next).unwrap()) };
                assert!((e.value - (c + tail)).abs() <= 1e-9 * e.value.abs().max(1.0));
            }
        }
    }

    #[test]
    fn infeasible_reports_dead_slot() {
        // Privacy band [0, 5] but the only appliance draws 10 W.
        let inst = instance(3, &[(10.0, 10.0)], fixed_battery(), vec![1.0; 3], 2.5, 2.5);
        let cfg = SolveConfig::new(inst, ScenarioSet::new());
        match backward_recursion(&cfg) {
            Err(Error::Infeasible { slot }) => assert_eq!(slot, 4),
            other => panic!("expected infeasible, got {other:?}"),
        }
        // Band excludes zero load: slot 1 already has no admissible move.
        let inst = instance(3, &[(10.0, 10.0)], fixed_battery(), vec![1.0; 3], 1.0, 20.0);
        let cfg = SolveConfig::new(inst, ScenarioSet::new());
        assert!(matches!(backward_recursion(&cfg), Err(Error::Infeasible { slot: 1 })));
    }

    #[test]
    fn hash_mismatch_is_refused() {
        let inst = instance(2, &[], fixed_battery(), vec![1.0; 2], 10.0, 0.0);
        let cfg = SolveConfig::new(inst.clone(), ScenarioSet::new());
        let (table, _) = solve(&cfg).unwrap();
        let mut other = inst;
        other.policy.lambda_w = 11.0;
        let cfg2 = SolveConfig::new(other.clone(), ScenarioSet::new());
        let err = extract_schedule(&table, &cfg2, &other.initial_state(), &PrivacyScenario::inactive(0)).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }
}
