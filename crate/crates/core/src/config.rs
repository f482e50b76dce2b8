//! Instance files, built-in presets and CSV ingestion.
//!
//! An instance file is JSON with an explicit `units` block; values are
//! converted to W / Wh / currency-per-Wh when the file is validated. Unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Battery, Instance, LoadReferenceSource, NonSchedulableAppliance, PriceSignal, PrivacyPolicy,
    SchedulableAppliance, TimeGrid,
};
use crate::scenario::{ScenarioOptions, StopRule, ViolationMetric};
use crate::table::{ObjectiveMode, DEFAULT_MAX_STATES};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PowerUnit {
    #[default]
    W,
    #[serde(rename = "kW")]
    KW,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnergyUnit {
    #[default]
    Wh,
    #[serde(rename = "kWh")]
    KWh,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriceUnit {
    #[default]
    PerWh,
    PerKwh,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Units {
    #[serde(default)]
    pub power: PowerUnit,
    #[serde(default)]
    pub energy: EnergyUnit,
    #[serde(default)]
    pub price: PriceUnit,
}

impl Units {
    /// Multiplier into internal units.
    pub fn power_scale(&self) -> f64 {
        match self.power {
            PowerUnit::W => 1.0,
            PowerUnit::KW => 1000.0,
        }
    }

    pub fn energy_scale(&self) -> f64 {
        match self.energy {
            EnergyUnit::Wh => 1.0,
            EnergyUnit::KWh => 1000.0,
        }
    }

    /// Currency per Wh.
    pub fn price_per_wh(&self, price: f64) -> f64 {
        match self.price {
            PriceUnit::PerWh => price,
            PriceUnit::PerKwh => price / 1000.0,
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonFile {
    pub tau: usize,
    #[serde(default = "one")]
    pub slot_hours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulableFile {
    pub id: String,
    pub power: f64,
    pub workload: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonSchedulableFile {
    pub id: String,
    pub power: f64,
    pub runtime_slots: u32,
    pub zone: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_prob: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryFile {
    pub capacity: f64,
    pub initial: f64,
    pub max_discharge: f64,
    pub max_charge: f64,
    pub grid_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PriceFile {
    Values(Vec<f64>),
    /// CSV with header `slot,price`, relative to the instance file.
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceFile {
    Constant(f64),
    /// CSV with header `timestamp,load_w`, relative to the instance file.
    HistoricalCsv(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyFile {
    pub lambda: f64,
    pub reference: ReferenceFile,
    #[serde(default)]
    pub clip_negative_load: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenariosFile {
    #[serde(default)]
    pub include_inactive: bool,
    #[serde(default)]
    pub stop_rule: StopRule,
    #[serde(default)]
    pub metric: ViolationMetric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration_cap: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    #[default]
    Json,
    Binary,
}

fn default_max_states() -> usize {
    DEFAULT_MAX_STATES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverFile {
    #[serde(default = "default_max_states")]
    pub max_states: usize,
    #[serde(default)]
    pub table_format: TableFormat,
}

impl Default for SolverFile {
    fn default() -> Self {
        Self {
            max_states: DEFAULT_MAX_STATES,
            table_format: TableFormat::Json,
        }
    }
}

/// The serialized problem instance, exactly as written on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceFile {
    pub name: String,
    #[serde(default)]
    pub units: Units,
    pub horizon: HorizonFile,
    #[serde(default)]
    pub schedulable: Vec<SchedulableFile>,
    #[serde(default)]
    pub non_schedulable: Vec<NonSchedulableFile>,
    pub battery: BatteryFile,
    pub price: PriceFile,
    pub privacy: PrivacyFile,
    #[serde(default)]
    pub scenarios: ScenariosFile,
    #[serde(default)]
    pub objective: ObjectiveMode,
    #[serde(default)]
    pub solver: SolverFile,
    #[serde(default)]
    pub seed: u64,
}

/// A validated instance together with its run options.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceConfig {
    pub file: InstanceFile,
    pub instance: Instance,
    pub scenario_options: ScenarioOptions,
    pub table_format: TableFormat,
    pub seed: u64,
}

impl InstanceConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.file).expect("instance file serializes")
    }
}

impl InstanceFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = json_pointer(e.path());
            Error::config(pointer, e.into_inner().to_string())
        })
    }

    /// Converts units and checks every type invariant. Relative CSV paths
    /// resolve against `base_dir`.
    pub fn validate(&self, base_dir: &Path) -> Result<InstanceConfig> {
        let u = self.units;
        let grid = TimeGrid::new(self.horizon.tau, self.horizon.slot_hours)?;
        let schedulable = self
            .schedulable
            .iter()
            .map(|a| SchedulableAppliance::new(&a.id, a.power * u.power_scale(), a.workload * u.energy_scale(), &grid))
            .collect::<Result<Vec<_>>>()?;
        let non_schedulable = self
            .non_schedulable
            .iter()
            .map(|a| {
                NonSchedulableAppliance::new(
                    &a.id,
                    a.power * u.power_scale(),
                    a.runtime_slots,
                    (a.zone[0], a.zone[1]),
                    a.start_prob.clone(),
                    &grid,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        if schedulable.len() > 16 {
            return Err(Error::config("/schedulable", "at most 16 schedulable appliances are supported"));
        }
        unique_ids("/schedulable", self.schedulable.iter().map(|a| a.id.as_str()))?;
        unique_ids("/non_schedulable", self.non_schedulable.iter().map(|a| a.id.as_str()))?;

        let e = u.energy_scale();
        let b = &self.battery;
        let battery = Battery::new(
            b.capacity * e,
            b.initial * e,
            b.max_discharge * e,
            b.max_charge * e,
            b.grid_step * e,
        )?;

        let raw_prices = match &self.price {
            PriceFile::Values(v) => v.clone(),
            PriceFile::Csv(p) => load_price_csv(&base_dir.join(p), grid.tau)?.values().to_vec(),
        };
        let price = PriceSignal::new(raw_prices.iter().map(|c| u.price_per_wh(*c)).collect(), grid.tau)?;

        let (l_bar, source) = match &self.privacy.reference {
            ReferenceFile::Constant(v) => (v * u.power_scale(), LoadReferenceSource::ConfigConstant),
            ReferenceFile::HistoricalCsv(p) => {
                (load_historical_load_csv(&base_dir.join(p))?, LoadReferenceSource::HistoricalMean)
            }
        };
        let policy = PrivacyPolicy::new(self.privacy.lambda * u.power_scale(), l_bar, source)?;

        if self.solver.max_states == 0 {
            return Err(Error::config("/solver/max_states", "must be positive"));
        }
        let instance = Instance {
            name: self.name.clone(),
            grid,
            schedulable,
            non_schedulable,
            battery,
            price,
            policy,
            clip_negative_load: self.privacy.clip_negative_load,
        };
        let s = &self.scenarios;
        Ok(InstanceConfig {
            file: self.clone(),
            instance,
            scenario_options: ScenarioOptions {
                include_inactive: s.include_inactive,
                stop_rule: s.stop_rule,
                metric: s.metric,
                iteration_cap: s.iteration_cap,
                objective: self.objective,
                max_states: self.solver.max_states,
            },
            table_format: self.solver.table_format,
            seed: self.seed,
        })
    }
}

fn unique_ids<'a>(at: &str, ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::config(at, format!("duplicate id '{id}'")));
        }
    }
    Ok(())
}

pub(crate) fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

/// Loads a preset by name, or a JSON instance file by path.
pub fn load_config(path_or_preset: &str) -> Result<InstanceConfig> {
    if let Some(file) = preset(path_or_preset) {
        return file.validate(Path::new("."));
    }
    let path = Path::new(path_or_preset);
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file = InstanceFile::from_json(&text)?;
    file.validate(path.parent().unwrap_or(Path::new(".")))
}

pub const PRESET_NAMES: [&str; 3] = ["section-iv-a", "table-ii", "motivating-example"];

/// Hourly day-ahead style tariff (currency per kWh) with its cheapest hours
/// early in the day.
const HOURLY_TARIFF_PER_KWH: [f64; 12] = [
    0.031, 0.027, 0.024, 0.021, 0.023, 0.028, 0.036, 0.045, 0.052, 0.049, 0.043, 0.038,
];

fn household_appliances() -> (Vec<SchedulableFile>, Vec<NonSchedulableFile>) {
    let s = |id: &str, power, workload| SchedulableFile {
        id: id.into(),
        power,
        workload,
    };
    let ns = |id: &str, power, zone| NonSchedulableFile {
        id: id.into(),
        power,
        runtime_slots: 1,
        zone,
        start_prob: None,
    };
    (
        vec![s("app1", 35.38, 70.7), s("app2", 156.59, 313.2), s("app3", 76.73, 230.2)],
        vec![ns("app4", 106.97, [7, 12]), ns("app5", 33.73, [1, 6])],
    )
}

pub fn preset(name: &str) -> Option<InstanceFile> {
    let guaranteed = ScenariosFile {
        include_inactive: true,
        ..ScenariosFile::default()
    };
    match name {
        "section-iv-a" => {
            let (schedulable, non_schedulable) = household_appliances();
            Some(InstanceFile {
                name: name.into(),
                units: Units {
                    price: PriceUnit::PerKwh,
                    ..Units::default()
                },
                horizon: HorizonFile { tau: 12, slot_hours: 1.0 },
                schedulable,
                non_schedulable,
                battery: BatteryFile {
                    capacity: 750.0,
                    initial: 0.0,
                    max_discharge: 250.0,
                    max_charge: 250.0,
                    grid_step: 10.0,
                },
                price: PriceFile::Values(HOURLY_TARIFF_PER_KWH.to_vec()),
                privacy: PrivacyFile {
                    lambda: 80.0,
                    reference: ReferenceFile::Constant(80.0),
                    clip_negative_load: false,
                },
                scenarios: guaranteed,
                objective: ObjectiveMode::Expected,
                solver: SolverFile::default(),
                seed: 7,
            })
        }
        "table-ii" => {
            let mut f = preset("section-iv-a")?;
            f.name = name.into();
            f.units.energy = EnergyUnit::KWh;
            f.schedulable.iter_mut().for_each(|a| a.workload /= 1000.0);
            f.battery = BatteryFile {
                capacity: 0.2,
                initial: 0.0,
                max_discharge: 0.1,
                max_charge: 0.1,
                grid_step: 0.01,
            };
            Some(f)
        }
        "motivating-example" => Some(InstanceFile {
            name: name.into(),
            units: Units {
                power: PowerUnit::KW,
                energy: EnergyUnit::KWh,
                price: PriceUnit::PerKwh,
            },
            horizon: HorizonFile { tau: 4, slot_hours: 1.0 },
            schedulable: vec![
                SchedulableFile {
                    id: "alpha1".into(),
                    power: 40.0,
                    workload: 60.0,
                },
                SchedulableFile {
                    id: "alpha2".into(),
                    power: 30.0,
                    workload: 80.0,
                },
            ],
            non_schedulable: vec![NonSchedulableFile {
                id: "beta".into(),
                power: 30.0,
                runtime_slots: 2,
                zone: [2, 3],
                start_prob: None,
            }],
            battery: BatteryFile {
                capacity: 40.0,
                initial: 0.0,
                max_discharge: 40.0,
                max_charge: 40.0,
                grid_step: 10.0,
            },
            price: PriceFile::Values(vec![0.30, 0.10, 0.12, 0.25]),
            privacy: PrivacyFile {
                lambda: 40.0,
                reference: ReferenceFile::Constant(50.0),
                clip_negative_load: false,
            },
            scenarios: guaranteed,
            objective: ObjectiveMode::Expected,
            solver: SolverFile::default(),
            seed: 7,
        }),
        _ => None,
    }
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn open_csv(path: &Path, header: &[&str]) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let found = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?;
    if found.iter().collect::<Vec<_>>() != header {
        return Err(parse_err(
            path,
            1,
            format!("expected header '{}', found '{}'", header.join(","), found.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    Ok(rdr)
}

fn number(path: &Path, line: u64, field: Option<&str>, name: &str) -> Result<f64> {
    let raw = field.ok_or_else(|| parse_err(path, line, format!("missing {name}")))?;
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| parse_err(path, line, format!("{name} '{raw}' is not a number")))
}

/// Reads a `slot,price` CSV with exactly `tau` rows numbered 1..=tau.
pub fn load_price_csv(path: &Path, tau: usize) -> Result<PriceSignal> {
    let mut rdr = open_csv(path, &["slot", "price"])?;
    let mut prices = Vec::with_capacity(tau);
    let mut last_line = 1;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        last_line = line;
        let slot = number(path, line, rec.get(0), "slot")?;
        if slot != (prices.len() + 1) as f64 {
            return Err(parse_err(path, line, format!("expected slot {}, found {slot}", prices.len() + 1)));
        }
        let price = number(path, line, rec.get(1), "price")?;
        if price < 0.0 {
            return Err(parse_err(path, line, format!("negative price {price}")));
        }
        if prices.len() == tau {
            return Err(parse_err(path, line, format!("more than {tau} price rows")));
        }
        prices.push(price);
    }
    if prices.len() != tau {
        return Err(parse_err(
            path,
            last_line + 1,
            format!("end of file after {} price rows, expected {tau}", prices.len()),
        ));
    }
    PriceSignal::new(prices, tau)
}

/// Mean of the `load_w` column of a `timestamp,load_w` CSV.
pub fn load_historical_load_csv(path: &Path) -> Result<f64> {
    let mut rdr = open_csv(path, &["timestamp", "load_w"])?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        sum += number(path, line, rec.get(1), "load_w")?;
        n += 1;
    }
    if n == 0 {
        return Err(parse_err(path, 2, "no load rows"));
    }
    Ok(sum / n as f64)
}
