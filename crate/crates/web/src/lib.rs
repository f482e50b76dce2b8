//! Browser bindings. Every call takes and returns JSON strings; the page in
//! `www/` draws them.

use std::path::Path;

use privsched_core::config::{preset, InstanceConfig, PRESET_NAMES};
use privsched_core::io::SolutionDocument;
use privsched_core::runtime::{simulate, sweep_battery, EventScript};
use privsched_core::scenario::{candidate_scenarios, solve_with_scenarios, ScenarioOutcome};
use privsched_core::Result;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Loads a preset and overrides the privacy tolerance and the battery
/// capacity, both in the preset's own units.
pub fn configure(name: &str, lambda: f64, capacity: f64) -> Result<InstanceConfig> {
    let mut file = preset(name).ok_or_else(|| privsched_core::Error::config("/preset", format!("unknown preset {name}")))?;
    file.privacy.lambda = lambda;
    file.battery.capacity = capacity;
    file.battery.initial = file.battery.initial.min(capacity);
    file.validate(Path::new("."))
}

/// A solved preset kept alive between calls so placements can be replayed
/// against its table.
pub struct Session {
    pub cfg: InstanceConfig,
    pub outcome: ScenarioOutcome,
}

impl Session {
    pub fn solve(name: &str, lambda: f64, capacity: f64) -> Result<Self> {
        let cfg = configure(name, lambda, capacity)?;
        let outcome = solve_with_scenarios(&cfg.instance, &cfg.scenario_options)?;
        Ok(Self { cfg, outcome })
    }

    pub fn solution_json(&self) -> String {
        let inst = &self.cfg.instance;
        let doc = SolutionDocument::new(inst, &self.outcome);
        let appliances: Vec<_> = inst
            .non_schedulable
            .iter()
            .map(|a| json!({"id": a.id, "power_w": a.power_w, "zone": [a.zone_lo, a.zone_hi], "runtime_slots": a.runtime_slots}))
            .collect();
        json!({
            "solution": doc,
            "trace": self.outcome.trace.records,
            "non_schedulable": appliances,
            "candidates": candidate_scenarios(&inst.non_schedulable, self.cfg.scenario_options.include_inactive).len(),
        })
        .to_string()
    }

    /// `script` uses the event script format of the command line tool.
    pub fn simulate_json(&self, script: &str) -> Result<String> {
        let script = EventScript::from_json(script)?;
        let report = simulate(&self.outcome.table, &self.outcome.config, &script)?;
        Ok(serde_json::to_string(&report).expect("report serializes"))
    }
}

/// Costs over `capacities`, given in the preset's energy unit.
pub fn sweep_json(name: &str, lambda: f64, capacities: &[f64]) -> Result<String> {
    let top = capacities.iter().copied().fold(0.0, f64::max);
    let cfg = configure(name, lambda, top)?;
    let scale = cfg.file.units.energy_scale();
    let wh: Vec<f64> = capacities.iter().map(|c| c * scale).collect();
    let with = sweep_battery(&cfg.instance, &cfg.scenario_options, &wh)?;
    let without = sweep_battery(&cfg.instance.without_non_schedulable(), &cfg.scenario_options, &wh)?;
    Ok(json!({"with_ns": with, "without_ns": without}).to_string())
}

fn js(e: privsched_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn presets() -> String {
    let list: Vec<_> = PRESET_NAMES
        .iter()
        .map(|n| {
            let f = preset(n).expect("listed preset exists");
            json!({"name": n, "units": f.units, "lambda": f.privacy.lambda, "capacity": f.battery.capacity, "grid_step": f.battery.grid_step})
        })
        .collect();
    serde_json::Value::from(list).to_string()
}

#[wasm_bindgen]
pub struct Planner(Session);

#[wasm_bindgen]
impl Planner {
    #[wasm_bindgen(constructor)]
    pub fn new(preset: &str, lambda: f64, capacity: f64) -> std::result::Result<Planner, JsError> {
        Session::solve(preset, lambda, capacity).map(Planner).map_err(js)
    }

    pub fn solution(&self) -> String {
        self.0.solution_json()
    }

    pub fn simulate(&self, script: &str) -> std::result::Result<String, JsError> {
        self.0.simulate_json(script).map_err(js)
    }
}

#[wasm_bindgen]
pub fn sweep(preset: &str, lambda: f64, capacities: Vec<f64>) -> std::result::Result<String, JsError> {
    sweep_json(preset, lambda, &capacities).map_err(js)
}
