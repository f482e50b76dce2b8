//! On-disk artifacts: schedule tables, solutions, iteration traces,
//! simulation reports and sweep curves.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TableFormat;
use crate::error::{Error, Result};
use crate::model::{Instance, PrivacyScenario};
use crate::runtime::{SimulationReport, SweepPoint};
use crate::scenario::{IterationRecord, ScenarioOutcome};
use crate::table::{Entry, ObjectiveMode, ScheduleSolution, ScheduleTable, StateSpace, TableHeader};

/// First four bytes of a binary table dump.
pub const TABLE_MAGIC: &[u8; 4] = b"PSTB";
const ENTRY_BYTES: usize = 16;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(io_err(path))
}

#[derive(Serialize)]
struct TablePrefix<'a> {
    header: &'a TableHeader,
    space: &'a StateSpace,
}

#[derive(Deserialize)]
struct OwnedPrefix {
    header: TableHeader,
    space: StateSpace,
}

#[derive(Deserialize)]
struct JsonTable {
    header: TableHeader,
    space: StateSpace,
    slots: Vec<Vec<Entry>>,
}

pub fn table_to_bytes(table: &ScheduleTable, format: TableFormat) -> Vec<u8> {
    match format {
        TableFormat::Json => {
            let mut out = serde_json::to_vec(table).expect("table serializes");
            out.push(b'\n');
            out
        }
        TableFormat::Binary => {
            let prefix = serde_json::to_vec(&TablePrefix {
                header: &table.header,
                space: table.space(),
            })
            .expect("table header serializes");
            let mut out = Vec::with_capacity(12 + prefix.len() + table.tau() * table.space().len() * ENTRY_BYTES);
            out.extend_from_slice(TABLE_MAGIC);
            out.extend_from_slice(&table.header.format_version.to_le_bytes());
            out.extend_from_slice(&(prefix.len() as u32).to_le_bytes());
            out.extend_from_slice(&prefix);
            for t in 1..=table.tau() {
                for idx in 0..table.space().len() {
                    let e = table.entry(t, idx).expect("entry in range");
                    out.extend_from_slice(&e.starts.to_le_bytes());
                    out.extend_from_slice(&e.next_level.to_le_bytes());
                    out.extend_from_slice(&e.value.to_le_bytes());
                }
            }
            out
        }
    }
}

/// Parses either dump format; the binary one is recognized by its magic.
pub fn table_from_bytes(bytes: &[u8]) -> Result<ScheduleTable> {
    let corrupt = |what: &str| Error::Integrity(format!("table dump is corrupt: {what}"));
    if !bytes.starts_with(TABLE_MAGIC) {
        let t: JsonTable = serde_json::from_slice(bytes).map_err(|e| corrupt(&e.to_string()))?;
        return ScheduleTable::from_parts(t.header, t.space, t.slots);
    }
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| corrupt("truncated header"))
    };
    let version = word(4)?;
    let prefix_len = word(8)? as usize;
    let body = 12 + prefix_len;
    let prefix: OwnedPrefix =
        serde_json::from_slice(bytes.get(12..body).ok_or_else(|| corrupt("truncated header"))?)
            .map_err(|e| corrupt(&e.to_string()))?;
    if version != prefix.header.format_version {
        return Err(corrupt("version word disagrees with header"));
    }
    let per_slot = prefix
        .space
        .durations
        .iter()
        .try_fold(prefix.space.levels, |acc, s| acc.checked_mul(*s as usize + 1))
        .ok_or_else(|| corrupt("state space overflows"))?;
    let expected = per_slot
        .checked_mul(prefix.header.tau)
        .and_then(|n| n.checked_mul(ENTRY_BYTES))
        .ok_or_else(|| corrupt("state space overflows"))?;
    let data = &bytes[body.min(bytes.len())..];
    if data.len() != expected {
        return Err(corrupt(&format!("expected {expected} entry bytes, found {}", data.len())));
    }
    let slots = data
        .chunks_exact(ENTRY_BYTES * per_slot.max(1))
        .map(|slot| {
            slot.chunks_exact(ENTRY_BYTES)
                .map(|e| Entry {
                    starts: u32::from_le_bytes(e[0..4].try_into().expect("4 bytes")),
                    next_level: u32::from_le_bytes(e[4..8].try_into().expect("4 bytes")),
                    value: f64::from_le_bytes(e[8..16].try_into().expect("8 bytes")),
                })
                .collect()
        })
        .collect();
    ScheduleTable::from_parts(prefix.header, prefix.space, slots)
}

pub fn save_table(table: &ScheduleTable, path: &Path, format: TableFormat) -> Result<()> {
    write_bytes(path, &table_to_bytes(table, format))
}

pub fn load_table(path: &Path) -> Result<ScheduleTable> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    table_from_bytes(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionSlot {
    pub t: usize,
    pub battery_wh: f64,
    pub battery_delta_wh: f64,
    /// Schedulable appliances started in this slot.
    pub starts: Vec<String>,
    /// Schedulable appliances drawing power in this slot.
    pub running: Vec<String>,
    pub base_load_w: f64,
    pub price: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionDocument {
    pub instance: String,
    pub model_hash: String,
    pub objective: ObjectiveMode,
    pub expected_cost: f64,
    pub controllable_cost: f64,
    pub ns_expected_cost: f64,
    pub lambda_w: f64,
    pub l_bar_w: f64,
    pub iterations: usize,
    pub candidate_count: usize,
    pub omega: Vec<PrivacyScenario>,
    pub slots: Vec<SolutionSlot>,
    pub final_battery_wh: f64,
}

impl SolutionDocument {
    pub fn new(instance: &Instance, outcome: &ScenarioOutcome) -> Self {
        let sol: &ScheduleSolution = &outcome.solution;
        let runs = sol.run_pattern();
        let ids = |pick: &dyn Fn(usize) -> bool| -> Vec<String> {
            instance
                .schedulable
                .iter()
                .enumerate()
                .filter(|(i, _)| pick(*i))
                .map(|(_, a)| a.id.clone())
                .collect()
        };
        let slots = sol
            .decisions
            .iter()
            .enumerate()
            .map(|(k, d)| SolutionSlot {
                t: k + 1,
                battery_wh: sol.states[k].battery_wh,
                battery_delta_wh: d.battery_delta_wh,
                starts: ids(&|i| d.starts[i]),
                running: ids(&|i| runs[i][k]),
                base_load_w: sol.base_load_w[k],
                price: instance.price.at(k + 1),
            })
            .collect();
        Self {
            instance: instance.name.clone(),
            model_hash: outcome.table.header.model_hash.clone(),
            objective: outcome.config.objective,
            expected_cost: sol.expected_cost,
            controllable_cost: sol.controllable_cost,
            ns_expected_cost: sol.ns_expected_cost,
            lambda_w: instance.policy.lambda_w,
            l_bar_w: instance.policy.l_bar_w,
            iterations: outcome.trace.len(),
            candidate_count: outcome.candidate_count,
            omega: outcome.config.scenarios.iter().cloned().collect(),
            slots,
            final_battery_wh: sol.states.last().map_or(0.0, |s| s.battery_wh),
        }
    }
}

pub fn to_pretty_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("value serializes");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, &to_pretty_json(value))
}

pub fn write_trace(path: &Path, records: &[IterationRecord]) -> Result<()> {
    write_json(path, &records)
}

pub const REPORT_HEADER: [&str; 13] = [
    "t",
    "battery_wh",
    "battery_delta_wh",
    "starts",
    "ns_active",
    "base_load_w",
    "ns_load_w",
    "load_w",
    "price",
    "cost",
    "privacy_gap_w",
    "breach",
    "negative_load",
];

/// One row per simulated slot; id lists are `;`-separated.
pub fn report_csv(report: &SimulationReport) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER).expect("in-memory write");
    for r in &report.rows {
        w.write_record([
            r.t.to_string(),
            r.battery_wh.to_string(),
            r.battery_delta_wh.to_string(),
            r.starts.join(";"),
            r.ns_active.join(";"),
            r.base_load_w.to_string(),
            r.ns_load_w.to_string(),
            r.load_w.to_string(),
            r.price.to_string(),
            r.cost.to_string(),
            r.privacy_gap_w.to_string(),
            u8::from(r.breach).to_string(),
            u8::from(r.negative_load).to_string(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn write_report_csv(path: &Path, report: &SimulationReport) -> Result<()> {
    write_bytes(path, &report_csv(report))
}

/// Two-column `capacity_wh,cost` plot data; infeasible points are left out.
pub fn sweep_csv(points: &[SweepPoint]) -> Vec<u8> {
    let mut out = Vec::new();
    writeln!(out, "capacity_wh,cost").expect("in-memory write");
    for p in points {
        if let Some(c) = p.expected_cost {
            writeln!(out, "{},{}", p.capacity_wh, c).expect("in-memory write");
        }
    }
    out
}

pub fn write_sweep_csv(path: &Path, points: &[SweepPoint]) -> Result<()> {
    write_bytes(path, &sweep_csv(points))
}
