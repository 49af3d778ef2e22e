use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use voltcoord::fixture;
use voltcoord::flex::{allocate_setpoints, decompose_by_level, flex_range_oracle, flex_range_sensitivity, ConstraintSet, FlexRange, DEFAULT_RESOLUTION};
use voltcoord::grid::{interface_of, load_network, validate, GridError, Network};
use voltcoord::scenario::{self, emit_results, load_scenario, run_scenario, OutputFormat};

#[derive(Parser)]
#[command(name = "voltcoord", version, about = "Multi-level voltage and reactive power coordination simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a grid file and list every problem found.
    Validate { grid: PathBuf },
    /// Reactive power flexibility at an interface transformer.
    Flex {
        grid: PathBuf,
        #[arg(long)]
        interface: String,
        #[arg(long, value_enum, default_value_t = Method::Sensitivity)]
        method: Method,
        /// Grid points per asset for the oracle.
        #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
        resolution: usize,
        /// Compute per-level ranges and aggregate them (sensitivity method).
        #[arg(long)]
        hierarchical: bool,
    },
    /// Setpoints and taps that realise a target interface flow.
    Allocate {
        grid: PathBuf,
        #[arg(long)]
        interface: String,
        /// Target reactive power in MVar, positive from HV to LV.
        #[arg(long, allow_negative_numbers = true)]
        target: f64,
    },
    /// Run a scenario and write the result files.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "csv")]
        format: OutputFormat,
    },
    /// Write a built-in grid.
    Fixture {
        #[arg(value_enum)]
        name: FixtureName,
        #[arg(long)]
        out: PathBuf,
        /// Also write a one-day profile CSV for the grid.
        #[arg(long)]
        profiles: Option<PathBuf>,
        /// Profile length in steps.
        #[arg(long, default_value_t = 96)]
        steps: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Oracle,
    Sensitivity,
}

#[derive(Clone, Copy, ValueEnum)]
enum FixtureName {
    Feeder15,
    Feeder15HighPv,
    TwoBus,
}

fn print_range(net: &Network, r: &FlexRange) {
    let mvar = |q: f64| q * net.s_base;
    println!(
        "{}",
        serde_json::json!({
            "feasible": r.feasible,
            "q_min_mvar": mvar(r.q_min),
            "q_max_mvar": mvar(r.q_max),
            "q_base_mvar": mvar(r.q_base),
            "evaluations": r.evaluations,
            "failed_points": r.failed_points,
            "grid_step_mvar": mvar(r.grid_step),
        })
    );
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Validate { grid } => match load_network(&grid) {
            Ok(net) => {
                let rep = validate(&net);
                for w in &rep.warnings {
                    println!("warning: {w}");
                }
                println!(
                    "ok: {} buses, {} lines, {} transformers, {} assets",
                    net.buses.len(),
                    net.lines.len(),
                    net.transformers.len(),
                    net.assets.len()
                );
                Ok(ExitCode::SUCCESS)
            }
            Err(GridError::Invalid(errors)) => {
                for e in &errors {
                    println!("error: {e}");
                }
                println!("{} error(s)", errors.len());
                Ok(ExitCode::from(1))
            }
            Err(e) => Err(e.into()),
        },
        Command::Flex {
            grid,
            interface,
            method,
            resolution,
            hierarchical,
        } => {
            let net = load_network(&grid)?;
            let ifc = interface_of(&net, &interface)?;
            let cs = ConstraintSet::from_network(&net);
            let range = match (method, hierarchical) {
                (Method::Oracle, true) => bail!("--hierarchical needs the sensitivity method"),
                (Method::Oracle, false) => flex_range_oracle(&net, &ifc, &cs, resolution)?,
                (Method::Sensitivity, false) => flex_range_sensitivity(&net, &ifc, &cs)?,
                (Method::Sensitivity, true) => {
                    let mut dec = decompose_by_level(&net, &ifc, &cs)?;
                    dec.compute_ranges(&BTreeSet::new())?;
                    dec.flex_range(&net, &ifc, &cs)?
                }
            };
            print_range(&net, &range);
            Ok(ExitCode::SUCCESS)
        }
        Command::Allocate { grid, interface, target } => {
            let net = load_network(&grid)?;
            let ifc = interface_of(&net, &interface)?;
            let cs = ConstraintSet::from_network(&net);
            let b = allocate_setpoints(&net, &ifc, &cs, target / net.s_base)?;
            let mvar = |q: f64| q * net.s_base;
            let setpoints: serde_json::Map<String, serde_json::Value> =
                b.q_setpoints.iter().map(|(id, &q)| (id.clone(), mvar(q).into())).collect();
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({
                    "target_mvar": target,
                    "achieved_mvar": mvar(b.achieved_q_if),
                    "deviation_mvar": mvar(b.deviation),
                    "taps": b.taps.0,
                    "q_setpoints_mvar": setpoints,
                }))?
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Run {
            scenario,
            out,
            seed,
            format,
        } => {
            let sc = load_scenario(&scenario).with_context(|| format!("loading {}", scenario.display()))?;
            let log = run_scenario(&sc, seed)?;
            let files = emit_results(&log, format, &out)?;
            let s = log.summary();
            for f in &files {
                eprintln!("wrote {}", f.display());
            }
            println!(
                "{} steps, {} violations, {} non-converged, max deviation {} MVar",
                s.steps,
                s.violation_count,
                s.nonconverged_steps,
                s.max_abs_deviation_mvar.map_or("-".to_string(), |d| format!("{d:.6}"))
            );
            Ok(if s.violation_count > 0 { ExitCode::from(2) } else { ExitCode::SUCCESS })
        }
        Command::Fixture {
            name,
            out,
            profiles,
            steps,
        } => {
            let file = match name {
                FixtureName::Feeder15 => scenario::build_fixture_feeder(),
                FixtureName::Feeder15HighPv => fixture::feeder15_high_pv(3.5),
                FixtureName::TwoBus => voltcoord::grid::GridFile::from_network(&fixture::two_bus(0.0, 0.1, -0.5, -0.2)),
            };
            std::fs::write(&out, serde_json::to_string_pretty(&file)? + "\n").with_context(|| format!("writing {}", out.display()))?;
            if let Some(p) = profiles {
                let f = std::fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?;
                scenario::day_profiles(&file, steps).write_csv(f)?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
