use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use privsched_core::config::{load_config, preset, InstanceConfig, TableFormat, PRESET_NAMES};
use privsched_core::io::{self, SolutionDocument};
use privsched_core::model::{PrivacyScenario, ScenarioSet};
use privsched_core::oracle::{brute_force_solve, random_instance, RandomLimits};
use privsched_core::runtime::{simulate, sweep_battery, EventScript};
use privsched_core::scenario::{candidate_scenarios, solve_with_scenarios, StopRule, ViolationMetric};
use privsched_core::table::{backward_recursion, extract_schedule, SolveConfig};
use privsched_core::Error;

#[derive(Parser)]
#[command(name = "privsched", version, about = "Privacy-aware appliance and battery scheduler")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List the built-in instances.
    Presets,
    /// Build the schedule table for a fixed scenario set.
    BuildTable {
        /// Preset name or path to an instance JSON file.
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: PathBuf,
        /// `empty`, `all`, or a JSON file holding a list of placements.
        #[arg(long, default_value = "empty")]
        omega: String,
        /// Overrides the instance's table format.
        #[arg(long)]
        format: Option<Format>,
    },
    /// Run the worst-scenario iteration and write solution, trace, report
    /// and table into a directory.
    Solve {
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        stop_rule: Option<Rule>,
        #[arg(long)]
        metric: Option<Metric>,
    },
    /// Replay one day against a stored table.
    Simulate {
        #[arg(long)]
        config: String,
        #[arg(long)]
        table: PathBuf,
        /// Event script JSON; without it no non-schedulable appliance runs.
        #[arg(long, conflicts_with = "sample")]
        script: Option<PathBuf>,
        /// Sample one start per non-schedulable appliance (seed defaults to
        /// the instance seed).
        #[arg(long)]
        sample: Option<Option<u64>>,
        /// Report CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Cost versus battery capacity.
    Sweep {
        #[arg(long)]
        config: String,
        /// Comma-separated capacities in the instance's energy unit.
        #[arg(long, value_delimiter = ',')]
        capacities: Vec<f64>,
        /// Drop the non-schedulable appliances first.
        #[arg(long)]
        without_ns: bool,
        /// Two-column plot CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Compare the table builder against exhaustive search on random small
    /// instances.
    Verify {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        count: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Binary,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    Guaranteed,
    PaperStrict,
    PaperMembership,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    TwoSided,
    UpperOnly,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => match e.downcast_ref::<Error>() {
            Some(err) => {
                eprintln!("error: {err}");
                ExitCode::from(err.exit_code() as u8)
            }
            None => {
                eprintln!("error: {e:#}");
                ExitCode::FAILURE
            }
        },
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("PACES_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .with_context(|| format!("PACES_THREADS must be a positive integer, got '{raw}'"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Presets => presets(),
        Command::BuildTable {
            config,
            out,
            omega,
            format,
        } => build_table(&config, &out, &omega, format),
        Command::Solve {
            config,
            out,
            stop_rule,
            metric,
        } => solve(&config, &out, stop_rule, metric),
        Command::Simulate {
            config,
            table,
            script,
            sample,
            out,
            json,
        } => run_simulation(&config, &table, script.as_deref(), sample, out.as_deref(), json.as_deref()),
        Command::Sweep {
            config,
            capacities,
            without_ns,
            out,
            json,
        } => sweep(&config, &capacities, without_ns, out.as_deref(), json.as_deref()),
        Command::Verify { seed, count } => verify(seed, count),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn presets() -> anyhow::Result<()> {
    for name in PRESET_NAMES {
        let cfg = load_config(name)?;
        let inst = &cfg.instance;
        let units = preset(name).map(|f| f.units).unwrap_or_default();
        println!(
            "{name}: tau={} schedulable={} non-schedulable={} battery={} Wh lambda={} W (file units: {}, {})",
            inst.tau(),
            inst.schedulable.len(),
            inst.non_schedulable.len(),
            inst.battery.b_max_wh,
            inst.policy.lambda_w,
            serde_json::to_string(&units.power)?.trim_matches('"'),
            serde_json::to_string(&units.energy)?.trim_matches('"'),
        );
    }
    Ok(())
}

fn table_format(cfg: &InstanceConfig, over: Option<Format>) -> TableFormat {
    match over {
        Some(Format::Json) => TableFormat::Json,
        Some(Format::Binary) => TableFormat::Binary,
        None => cfg.table_format,
    }
}

fn table_file_name(format: TableFormat) -> &'static str {
    match format {
        TableFormat::Json => "table.json",
        TableFormat::Binary => "table.bin",
    }
}

fn build_table(config: &str, out: &Path, omega: &str, format: Option<Format>) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    let inst = &cfg.instance;
    let scenarios: ScenarioSet = match omega {
        "empty" => ScenarioSet::new(),
        "all" => candidate_scenarios(&inst.non_schedulable, cfg.scenario_options.include_inactive)
            .into_iter()
            .collect(),
        path => {
            let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.into(),
                source,
            })?;
            let list: Vec<PrivacyScenario> = serde_json::from_str(&text)
                .map_err(|e| Error::Config {
                    path: "/".into(),
                    message: format!("{path}: {e}"),
                })?;
            for phi in &list {
                phi.validate(&inst.non_schedulable)?;
            }
            list.into_iter().collect()
        }
    };
    let mut solve_cfg = SolveConfig::new(inst.clone(), scenarios);
    solve_cfg.objective = cfg.scenario_options.objective;
    solve_cfg.max_states = cfg.scenario_options.max_states;
    let table = backward_recursion(&solve_cfg)?;
    io::save_table(&table, out, table_format(&cfg, format))?;
    let f1 = table
        .space()
        .index_of(inst, &inst.initial_state())
        .map_or(f64::INFINITY, |i| table.value(1, i));
    println!("states {} slots {} omega {}", table.space().len(), table.tau(), solve_cfg.scenarios.len());
    println!("model-hash {}", table.header.model_hash);
    println!("expected cost {}", f1 + table.ns_cost());
    println!("wrote {}", out.display());
    Ok(())
}

fn solve(config: &str, out: &Path, rule: Option<Rule>, metric: Option<Metric>) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    let mut opts = cfg.scenario_options.clone();
    if let Some(r) = rule {
        opts.stop_rule = match r {
            Rule::Guaranteed => StopRule::Guaranteed,
            Rule::PaperStrict => StopRule::PaperStrict,
            Rule::PaperMembership => StopRule::PaperMembership,
        };
    }
    if let Some(m) = metric {
        opts.metric = match m {
            Metric::TwoSided => ViolationMetric::TwoSided,
            Metric::UpperOnly => ViolationMetric::UpperOnly,
        };
    }
    let outcome = solve_with_scenarios(&cfg.instance, &opts)?;
    std::fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let report = simulate(&outcome.table, &outcome.config, &EventScript::default())?;
    report.check()?;
    let format = cfg.table_format;
    io::write_json(&out.join("solution.json"), &SolutionDocument::new(&cfg.instance, &outcome))?;
    io::write_trace(&out.join("trace.json"), &outcome.trace.records)?;
    io::write_report_csv(&out.join("report.csv"), &report)?;
    io::save_table(&outcome.table, &out.join(table_file_name(format)), format)?;

    let sol = &outcome.solution;
    println!("instance {}", cfg.instance.name);
    println!(
        "iterations {} (candidates {}, omega {})",
        outcome.trace.len(),
        outcome.candidate_count,
        outcome.config.scenarios.len()
    );
    println!("expected cost {}", sol.expected_cost);
    println!("battery {:?}", sol.battery_trace_wh());
    println!("wrote solution.json trace.json report.csv {}", table_file_name(format));
    Ok(())
}

fn run_simulation(
    config: &str,
    table_path: &Path,
    script: Option<&Path>,
    sample: Option<Option<u64>>,
    out: Option<&Path>,
    json: Option<&Path>,
) -> anyhow::Result<()> {
    let table = io::load_table(table_path)?;
    let cfg = load_config(config)?;
    let script = match (script, sample) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).map_err(|source| Error::Io {
                path: p.to_path_buf(),
                source,
            })?;
            EventScript::from_json(&text)?
        }
        (None, Some(seed)) => EventScript::Sample {
            seed: seed.unwrap_or(cfg.seed),
            use_start_prob: true,
        },
        (None, None) => EventScript::default(),
    };
    let mut solve_cfg = SolveConfig::new(cfg.instance.clone(), table.header.omega.clone());
    solve_cfg.objective = table.header.objective;
    solve_cfg.max_states = cfg.scenario_options.max_states;
    let report = simulate(&table, &solve_cfg, &script)?;
    match out {
        Some(p) => io::write_report_csv(p, &report)?,
        None => print!("{}", String::from_utf8(io::report_csv(&report))?),
    }
    if let Some(p) = json {
        io::write_json(p, &report)?;
    }
    eprintln!(
        "cost {} max |gap| {} W breaches {}",
        report.totals.cost, report.totals.max_abs_gap_w, report.totals.breach_count
    );
    report.check()?;
    Ok(())
}

fn sweep(
    config: &str,
    capacities: &[f64],
    without_ns: bool,
    out: Option<&Path>,
    json: Option<&Path>,
) -> anyhow::Result<()> {
    if capacities.is_empty() {
        bail!(Error::Config {
            path: "/capacities".into(),
            message: "give at least one capacity with --capacities".into(),
        });
    }
    let cfg = load_config(config)?;
    let wh: Vec<f64> = capacities.iter().map(|c| c * cfg.file.units.energy_scale()).collect();
    let inst = if without_ns {
        cfg.instance.without_non_schedulable()
    } else {
        cfg.instance.clone()
    };
    let points = sweep_battery(&inst, &cfg.scenario_options, &wh)?;
    match out {
        Some(p) => io::write_sweep_csv(p, &points)?,
        None => print!("{}", String::from_utf8(io::sweep_csv(&points))?),
    }
    if let Some(p) = json {
        io::write_json(p, &points)?;
    }
    for p in points.iter().filter(|p| p.error.is_some()) {
        eprintln!("capacity {} Wh: {}", p.capacity_wh, p.error.as_deref().unwrap_or_default());
    }
    Ok(())
}

fn verify(seed: u64, count: u64) -> anyhow::Result<()> {
    let mut mismatches = 0;
    for s in seed..seed.saturating_add(count) {
        let cfg = random_instance(s, RandomLimits::default());
        let oracle = brute_force_solve(&cfg)?;
        let dp = match backward_recursion(&cfg) {
            Ok(table) => {
                let inst = &cfg.instance;
                let initial = inst.initial_state();
                let inactive = PrivacyScenario::inactive(inst.non_schedulable.len());
                Some(extract_schedule(&table, &cfg, &initial, &inactive)?.expected_cost)
            }
            Err(Error::Infeasible { .. }) => None,
            Err(e) => return Err(e.into()),
        };
        let agree = match (dp, oracle.is_feasible()) {
            (Some(c), true) => (c - oracle.optimal_cost).abs() <= 1e-9 * c.abs().max(1.0),
            (None, false) => true,
            _ => false,
        };
        let show = |v: Option<f64>| v.map_or("infeasible".to_string(), |c| c.to_string());
        println!(
            "seed {s}: table {} oracle {} ({} trajectories scored)",
            show(dp),
            show(oracle.is_feasible().then_some(oracle.optimal_cost)),
            oracle.enumerated_count
        );
        if !agree {
            mismatches += 1;
        }
    }
    if mismatches > 0 {
        println!("MISMATCH ({mismatches} of {count})");
        bail!("table builder and exhaustive search disagree");
    }
    println!("MATCH");
    Ok(())
}
