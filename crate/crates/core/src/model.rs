//! Household model: appliances, battery, prices, privacy policy and the
//! per-slot load, privacy and cost evaluations everything else builds on.
//!
//! Slots are 1-based in every public signature (`t` in `1..=tau`). Energy is
//! carried in Wh, power in W; a slot of `slot_hours` hours converts between
//! them.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance for "is this value on the battery grid".
pub const GRID_EPS: f64 = 1e-9;

/// Absolute slack (W) granted to privacy-bound comparisons so that rounding
/// in `y + z + w` never flips a boundary case.
pub const PRIVACY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub tau: usize,
    pub slot_hours: f64,
}

impl TimeGrid {
    pub fn new(tau: usize, slot_hours: f64) -> Result<Self> {
        if tau < 1 {
            return Err(Error::config("/horizon/tau", "tau must be at least 1"));
        }
        if !(slot_hours > 0.0 && slot_hours.is_finite()) {
            return Err(Error::config(
                "/horizon/slot_hours",
                "slot_hours must be positive",
            ));
        }
        Ok(Self { tau, slot_hours })
    }

    pub fn slots(&self) -> RangeInclusive<usize> {
        1..=self.tau
    }
}

/// An appliance whose single start slot is chosen by the scheduler. Once
/// started it runs for `duration_slots` contiguous slots at `power_w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulableAppliance {
    pub id: String,
    pub power_w: f64,
    pub workload_wh: f64,
    pub duration_slots: u32,
}

impl SchedulableAppliance {
    pub fn new(id: impl Into<String>, power_w: f64, workload_wh: f64, grid: &TimeGrid) -> Result<Self> {
        let id = id.into();
        if !(power_w > 0.0 && power_w.is_finite()) {
            return Err(Error::config(format!("/schedulable/{id}/power"), "power must be positive"));
        }
        if !(workload_wh > 0.0 && workload_wh.is_finite()) {
            return Err(Error::config(
                format!("/schedulable/{id}/workload"),
                "workload must be positive",
            ));
        }
        let duration_slots = duration_for(workload_wh, power_w, grid.slot_hours);
        if duration_slots < 1 || duration_slots as usize > grid.tau {
            return Err(Error::config(
                format!("/schedulable/{id}"),
                format!(
                    "duration of {duration_slots} slots does not fit the horizon of {} slots",
                    grid.tau
                ),
            ));
        }
        Ok(Self {
            id,
            power_w,
            workload_wh,
            duration_slots,
        })
    }
}

/// `ceil(E / (p * h))`, ignoring floating-point dust just above an integer.
pub fn duration_for(workload_wh: f64, power_w: f64, slot_hours: f64) -> u32 {
    let ratio = workload_wh / (power_w * slot_hours);
    (ratio - 1e-9).ceil().max(0.0) as u32
}

/// A user-driven appliance that runs `runtime_slots` contiguous slots
/// starting somewhere inside its activity zone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonSchedulableAppliance {
    pub id: String,
    pub power_w: f64,
    pub runtime_slots: u32,
    pub zone_lo: usize,
    pub zone_hi: usize,
    /// One weight per feasible start, `zone_lo..=zone_hi - runtime + 1`.
    pub start_prob: Vec<f64>,
}

impl NonSchedulableAppliance {
    pub fn new(
        id: impl Into<String>,
        power_w: f64,
        runtime_slots: u32,
        zone: (usize, usize),
        start_prob: Option<Vec<f64>>,
        grid: &TimeGrid,
    ) -> Result<Self> {
        let id = id.into();
        let at = |field: &str| format!("/non_schedulable/{id}/{field}");
        if !(power_w > 0.0 && power_w.is_finite()) {
            return Err(Error::config(at("power"), "power must be positive"));
        }
        let (zone_lo, zone_hi) = zone;
        if zone_lo < 1 || zone_hi > grid.tau || zone_lo > zone_hi {
            return Err(Error::config(
                at("zone"),
                format!("zone [{zone_lo}, {zone_hi}] must lie inside [1, {}]", grid.tau),
            ));
        }
        let zone_len = zone_hi - zone_lo + 1;
        if runtime_slots < 1 || runtime_slots as usize > zone_len {
            return Err(Error::config(
                at("runtime_slots"),
                format!("runtime must be in [1, {zone_len}]"),
            ));
        }
        let starts = zone_len - runtime_slots as usize + 1;
        let start_prob = match start_prob {
            None => vec![1.0 / starts as f64; starts],
            Some(p) => {
                if p.len() != starts {
                    return Err(Error::config(
                        at("start_prob"),
                        format!("expected {starts} weights, got {}", p.len()),
                    ));
                }
                if p.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
                    return Err(Error::config(at("start_prob"), "weights must be non-negative"));
                }
                let sum: f64 = p.iter().sum();
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::config(
                        at("start_prob"),
                        format!("weights must sum to 1, got {sum}"),
                    ));
                }
                p
            }
        };
        Ok(Self {
            id,
            power_w,
            runtime_slots,
            zone_lo,
            zone_hi,
            start_prob,
        })
    }

    pub fn feasible_starts(&self) -> RangeInclusive<usize> {
        self.zone_lo..=(self.zone_hi + 1 - self.runtime_slots as usize)
    }

    pub fn start_probability(&self, start: usize) -> f64 {
        if self.feasible_starts().contains(&start) {
            self.start_prob[start - self.zone_lo]
        } else {
            0.0
        }
    }

    /// Indicator h_j(t) for an appliance started at `start`.
    pub fn is_active(&self, start: usize, t: usize) -> bool {
        start <= t && t < start + self.runtime_slots as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Battery {
    pub b_max_wh: f64,
    pub b_init_wh: f64,
    pub z_discharge_max_wh: f64,
    pub z_charge_max_wh: f64,
    pub grid_step_wh: f64,
}

impl Battery {
    pub fn new(
        b_max_wh: f64,
        b_init_wh: f64,
        z_discharge_max_wh: f64,
        z_charge_max_wh: f64,
        grid_step_wh: f64,
    ) -> Result<Self> {
        if !(grid_step_wh > 0.0 && grid_step_wh.is_finite()) {
            return Err(Error::config("/battery/grid_step", "grid step must be positive"));
        }
        if !(b_max_wh >= 0.0 && b_max_wh.is_finite()) {
            return Err(Error::config("/battery/capacity", "capacity must be non-negative"));
        }
        if on_grid(b_max_wh, grid_step_wh).is_none() {
            return Err(Error::config(
                "/battery/capacity",
                format!("capacity {b_max_wh} is not a multiple of the grid step {grid_step_wh}"),
            ));
        }
        if !(0.0..=b_max_wh).contains(&b_init_wh) {
            return Err(Error::config(
                "/battery/initial",
                format!("initial level {b_init_wh} outside [0, {b_max_wh}]"),
            ));
        }
        if on_grid(b_init_wh, grid_step_wh).is_none() {
            return Err(Error::config(
                "/battery/initial",
                format!("initial level {b_init_wh} is not on the {grid_step_wh} Wh grid"),
            ));
        }
        if !(z_discharge_max_wh >= 0.0) || !(z_charge_max_wh >= 0.0) {
            return Err(Error::config(
                "/battery",
                "charge and discharge limits must be non-negative",
            ));
        }
        Ok(Self {
            b_max_wh,
            b_init_wh,
            z_discharge_max_wh,
            z_charge_max_wh,
            grid_step_wh,
        })
    }

    /// Number of grid levels M = b_max / step + 1.
    pub fn level_count(&self) -> usize {
        on_grid(self.b_max_wh, self.grid_step_wh).unwrap_or(0) + 1
    }

    pub fn level_wh(&self, index: usize) -> f64 {
        index as f64 * self.grid_step_wh
    }

    /// Grid index of `wh`, or `None` when it is off-grid or out of range.
    pub fn level_index(&self, wh: f64) -> Option<usize> {
        on_grid(wh, self.grid_step_wh).filter(|&k| k < self.level_count())
    }

    pub fn initial_level(&self) -> usize {
        self.level_index(self.b_init_wh).unwrap_or(0)
    }

    pub fn with_capacity(&self, b_max_wh: f64) -> Result<Self> {
        Battery::new(
            b_max_wh,
            self.b_init_wh.min(b_max_wh),
            self.z_discharge_max_wh,
            self.z_charge_max_wh,
            self.grid_step_wh,
        )
    }
}

fn on_grid(wh: f64, step: f64) -> Option<usize> {
    if !(wh.is_finite()) || wh < -GRID_EPS {
        return None;
    }
    let k = (wh / step).round();
    ((wh - k * step).abs() <= GRID_EPS * step.max(1.0)).then_some(k as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSignal {
    c: Vec<f64>,
}

impl PriceSignal {
    pub fn new(c: Vec<f64>, tau: usize) -> Result<Self> {
        if c.len() != tau {
            return Err(Error::config(
                "/price",
                format!("expected {tau} prices, got {}", c.len()),
            ));
        }
        if let Some(i) = c.iter().position(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::config(format!("/price/{i}"), "price must be non-negative"));
        }
        Ok(Self { c })
    }

    /// Price at 1-based slot `t`.
    pub fn at(&self, t: usize) -> f64 {
        self.c[t - 1]
    }

    pub fn values(&self) -> &[f64] {
        &self.c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoadReferenceSource {
    ConfigConstant,
    HistoricalMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyPolicy {
    pub lambda_w: f64,
    pub l_bar_w: f64,
    pub l_bar_source: LoadReferenceSource,
}

impl PrivacyPolicy {
    pub fn new(lambda_w: f64, l_bar_w: f64, l_bar_source: LoadReferenceSource) -> Result<Self> {
        if !(lambda_w >= 0.0) {
            return Err(Error::config("/privacy/lambda", "lambda must be non-negative"));
        }
        if !(l_bar_w >= 0.0 && l_bar_w.is_finite()) {
            return Err(Error::config("/privacy/reference", "reference load must be non-negative"));
        }
        Ok(Self {
            lambda_w,
            l_bar_w,
            l_bar_source,
        })
    }

    /// Inclusive load band `[l_bar - lambda, l_bar + lambda]`.
    pub fn band(&self) -> (f64, f64) {
        (self.l_bar_w - self.lambda_w, self.l_bar_w + self.lambda_w)
    }

    pub fn admits(&self, load_w: f64) -> bool {
        privacy_gap(load_w, self).abs() <= self.lambda_w + PRIVACY_EPS
    }
}

/// Row key of the schedule table: battery level plus remaining slots per
/// schedulable appliance. `remaining[i] == S_i` means "not yet started".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub battery_wh: f64,
    pub remaining: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub starts: Vec<bool>,
    /// Signed battery move z(t); positive charges.
    pub battery_delta_wh: f64,
}

impl Decision {
    pub fn idle(appliances: usize) -> Self {
        Self {
            starts: vec![false; appliances],
            battery_delta_wh: 0.0,
        }
    }

    pub fn start_count(&self) -> usize {
        self.starts.iter().filter(|s| **s).count()
    }
}

/// One joint placement of non-schedulable activity: a start slot (or
/// `None` for "does not run") per non-schedulable appliance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PrivacyScenario {
    pub starts_ns: Vec<Option<usize>>,
}

impl PrivacyScenario {
    pub fn inactive(appliances: usize) -> Self {
        Self {
            starts_ns: vec![None; appliances],
        }
    }

    pub fn is_inactive(&self) -> bool {
        self.starts_ns.iter().all(Option::is_none)
    }

    /// h_j(t, phi).
    pub fn is_active(&self, appliances: &[NonSchedulableAppliance], j: usize, t: usize) -> bool {
        self.starts_ns
            .get(j)
            .copied()
            .flatten()
            .is_some_and(|s| appliances[j].is_active(s, t))
    }

    /// w(t, phi) = sum_j h_j(t, phi) p_j.
    pub fn ns_load_w(&self, appliances: &[NonSchedulableAppliance], t: usize) -> f64 {
        (0..appliances.len())
            .filter(|&j| self.is_active(appliances, j, t))
            .map(|j| appliances[j].power_w)
            .fold(0.0, |a, b| a + b)
    }

    pub fn validate(&self, appliances: &[NonSchedulableAppliance]) -> Result<()> {
        if self.starts_ns.len() != appliances.len() {
            return Err(Error::Model(format!(
                "scenario has {} entries for {} non-schedulable appliances",
                self.starts_ns.len(),
                appliances.len()
            )));
        }
        for (start, app) in self.starts_ns.iter().zip(appliances) {
            if let Some(s) = start {
                if !app.feasible_starts().contains(s) {
                    return Err(Error::Model(format!(
                        "start {s} of '{}' outside its feasible starts {:?}",
                        app.id,
                        app.feasible_starts()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Accumulated scenario set Omega; insertion order is kept, duplicates are
/// ignored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    scenarios: Vec<PrivacyScenario>,
}

impl ScenarioSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns `true` if the scenario was not already present.
    pub fn insert(&mut self, scenario: PrivacyScenario) -> bool {
        if self.contains(&scenario) {
            return false;
        }
        self.scenarios.push(scenario);
        true
    }

    pub fn contains(&self, scenario: &PrivacyScenario) -> bool {
        self.scenarios.contains(scenario)
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PrivacyScenario> {
        self.scenarios.iter()
    }

    pub fn is_subset_of(&self, other: &ScenarioSet) -> bool {
        self.scenarios.iter().all(|s| other.contains(s))
    }
}

impl FromIterator<PrivacyScenario> for ScenarioSet {
    fn from_iter<I: IntoIterator<Item = PrivacyScenario>>(iter: I) -> Self {
        let mut set = ScenarioSet::new();
        for s in iter {
            set.insert(s);
        }
        set
    }
}

/// A fully validated problem instance in internal units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub name: String,
    pub grid: TimeGrid,
    pub schedulable: Vec<SchedulableAppliance>,
    pub non_schedulable: Vec<NonSchedulableAppliance>,
    pub battery: Battery,
    pub price: PriceSignal,
    pub policy: PrivacyPolicy,
    /// Meter reads `max(y + z, 0)` for the controllable part of the load.
    pub clip_negative_load: bool,
}

impl Instance {
    pub fn tau(&self) -> usize {
        self.grid.tau
    }

    pub fn durations(&self) -> Vec<u32> {
        self.schedulable.iter().map(|a| a.duration_slots).collect()
    }

    pub fn powers(&self) -> Vec<f64> {
        self.schedulable.iter().map(|a| a.power_w).collect()
    }

    pub fn initial_state(&self) -> SystemState {
        SystemState {
            battery_wh: self.battery.b_init_wh,
            remaining: self.durations(),
        }
    }

    pub fn without_non_schedulable(&self) -> Self {
        Self {
            non_schedulable: Vec::new(),
            ..self.clone()
        }
    }

    pub fn validate_state(&self, state: &SystemState) -> Result<()> {
        if state.remaining.len() != self.schedulable.len() {
            return Err(Error::Model(format!(
                "state has {} remaining entries for {} appliances",
                state.remaining.len(),
                self.schedulable.len()
            )));
        }
        if self.battery.level_index(state.battery_wh).is_none() {
            return Err(Error::Model(format!(
                "battery level {} Wh is off the {} Wh grid or outside [0, {}]",
                state.battery_wh, self.battery.grid_step_wh, self.battery.b_max_wh
            )));
        }
        for (r, a) in state.remaining.iter().zip(&self.schedulable) {
            if *r > a.duration_slots {
                return Err(Error::Model(format!(
                    "remaining {r} of '{}' exceeds its duration {}",
                    a.id, a.duration_slots
                )));
            }
        }
        Ok(())
    }

    /// Structural validity of `decision` in `state`: start-once rule,
    /// rate limits, and a successor battery level on the grid.
    pub fn validate_decision(&self, state: &SystemState, decision: &Decision) -> Result<()> {
        if decision.starts.len() != self.schedulable.len() {
            return Err(Error::Model("decision start vector has the wrong length".into()));
        }
        for ((start, r), a) in decision.starts.iter().zip(&state.remaining).zip(&self.schedulable) {
            if *start && *r != a.duration_slots {
                return Err(Error::Model(format!("'{}' cannot start twice", a.id)));
            }
        }
        let z = decision.battery_delta_wh;
        if z < -self.battery.z_discharge_max_wh - GRID_EPS || z > self.battery.z_charge_max_wh + GRID_EPS {
            return Err(Error::Model(format!("battery move {z} Wh exceeds the rate limits")));
        }
        step_battery(&self.battery, state.battery_wh, z)
            .map(|_| ())
            .map_err(|e| Error::Model(e.to_string()))
    }

    pub fn next_remaining(&self, state: &SystemState, decision: &Decision) -> Vec<u32> {
        step_remaining(&self.durations(), &state.remaining, &decision.starts)
    }

    /// y(t) + z(t)/h: the metered load with no non-schedulable activity.
    pub fn base_load_w(&self, state: &SystemState, decision: &Decision) -> f64 {
        let next = self.next_remaining(state, decision);
        let y = appliance_load(&state.remaining, &next, &self.powers()).unwrap_or(0.0);
        let base = y + decision.battery_delta_wh / self.grid.slot_hours;
        if self.clip_negative_load {
            base.max(0.0)
        } else {
            base
        }
    }

    /// l(t) = y(t) + z(t)/h + w(t, phi).
    pub fn aggregated_load(
        &self,
        state: &SystemState,
        decision: &Decision,
        scenario: &PrivacyScenario,
        t: usize,
    ) -> f64 {
        self.base_load_w(state, decision) + scenario.ns_load_w(&self.non_schedulable, t)
    }

    pub fn slot_cost(&self, load_w: f64, t: usize) -> f64 {
        slot_cost(load_w, self.price.at(t), self.grid.slot_hours)
    }
}

/// y(t) = sum_i p_i (r_i(t) - r_i(t+1)).
pub fn appliance_load(remaining_now: &[u32], remaining_next: &[u32], powers_w: &[f64]) -> Result<f64> {
    if remaining_now.len() != powers_w.len() || remaining_next.len() != powers_w.len() {
        return Err(Error::Model(format!(
            "dimension mismatch: {} / {} remaining entries for {} powers",
            remaining_now.len(),
            remaining_next.len(),
            powers_w.len()
        )));
    }
    Ok(remaining_now
        .iter()
        .zip(remaining_next)
        .zip(powers_w)
        .map(|((now, next), p)| p * (f64::from(*now) - f64::from(*next)))
        .fold(0.0, |a, b| a + b))
}

/// Remaining-duration transition: a start or an in-progress run consumes one
/// slot; unstarted and finished appliances keep their value.
pub fn step_remaining(durations: &[u32], remaining: &[u32], starts: &[bool]) -> Vec<u32> {
    remaining
        .iter()
        .zip(durations)
        .zip(starts)
        .map(|((&r, &s), &start)| {
            if start || (r > 0 && r < s) {
                r.saturating_sub(1)
            } else {
                r
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("battery transition {from_wh} + {delta_wh} Wh leaves [0, {b_max_wh}] or the grid")]
pub struct InfeasibleTransition {
    pub from_wh: f64,
    pub delta_wh: f64,
    pub b_max_wh: f64,
}

/// B(t+1) = B(t) + z(t), which must stay on the grid inside [0, B_max].
pub fn step_battery(battery: &Battery, battery_wh: f64, delta_wh: f64) -> Result<f64, InfeasibleTransition> {
    let next = battery_wh + delta_wh;
    match battery.level_index(next) {
        Some(k) => Ok(battery.level_wh(k)),
        None => Err(InfeasibleTransition {
            from_wh: battery_wh,
            delta_wh,
            b_max_wh: battery.b_max_wh,
        }),
    }
}

/// g = l(t) - l_bar; the bound holds when |g| <= lambda.
pub fn privacy_gap(load_w: f64, policy: &PrivacyPolicy) -> f64 {
    load_w - policy.l_bar_w
}

/// c(t) * l(t) * h. Negative load (export) yields negative cost.
pub fn slot_cost(load_w: f64, price: f64, slot_hours: f64) -> f64 {
    price * load_w * slot_hours
}
