use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tilesim::engine::SimTime;
use tilesim::metrics::{compute_metrics, MetricsSummary};
use tilesim::scenario::{load_scenario, parse_assignment, Scenario, ScenarioError};
use tilesim::sweep::{parse_axis, sweep, Axis};
use tilesim::system::{run, RunOptions, RunResult};
use tilesim::trace::read_jsonl;

#[derive(Parser)]
#[command(name = "tilesim", version, about = "Software lockstep fault-tolerance simulator for tiled MPSoCs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ScenarioArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Override a scenario field, e.g. `supervisor.transient_threshold=2`.
    #[arg(long = "set", value_parser = parse_assignment)]
    set: Vec<(String, String)>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop simulated time early.
    #[arg(long)]
    until: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a scenario.
    Run {
        #[command(flatten)]
        s: ScenarioArgs,
        #[arg(long)]
        trace_out: Option<PathBuf>,
        #[arg(long)]
        metrics_out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
        /// Exit with status 1 when the run ends in loss of mission.
        #[arg(long)]
        fail_on_loss: bool,
    },
    /// Run a parameter grid over several seeds.
    Sweep {
        #[command(flatten)]
        s: ScenarioArgs,
        /// `path=v1,v2,...`; repeat for more axes.
        #[arg(long = "grid", value_parser = parse_axis, required = true)]
        grid: Vec<Axis>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
        /// `.csv` or `.json`; CSV on stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Recompute metrics from a trace file.
    Metrics {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        metrics_out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Check a scenario and report every problem.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long = "set", value_parser = parse_assignment)]
        set: Vec<(String, String)>,
        #[arg(long)]
        quiet: bool,
    },
    /// Run a scenario repeatedly and compare trace and metrics byte for byte.
    ReplayCheck {
        #[command(flatten)]
        s: ScenarioArgs,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        #[arg(long)]
        quiet: bool,
    },
}

/// Failure that maps to exit status 2: bad input rather than a failed check.
#[derive(Debug)]
struct InputError(String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn load(args: &ScenarioArgs) -> Result<Scenario> {
    let mut overrides = args.set.clone();
    if let Some(seed) = args.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    load_scenario(&args.scenario, &overrides).map_err(|e: ScenarioError| {
        anyhow::Error::new(InputError(format!("{}: {e}", args.scenario.display())))
    })
}

fn options(args: &ScenarioArgs) -> RunOptions {
    RunOptions {
        until: args.until.map(SimTime),
    }
}

fn simulate(args: &ScenarioArgs) -> Result<RunResult> {
    let scenario = load(args)?;
    run(&scenario, &options(args)).context("simulation failed")
}

fn metrics_json(m: &MetricsSummary) -> String {
    serde_json::to_string_pretty(m).expect("metrics serialize") + "\n"
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn execute(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Run {
            s,
            trace_out,
            metrics_out,
            quiet,
            fail_on_loss,
        } => {
            let r = simulate(&s)?;
            if let Some(p) = &trace_out {
                let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
                let mut w = BufWriter::new(f);
                r.trace.write_jsonl(&mut w)?;
                w.flush()?;
            }
            let json = metrics_json(&r.metrics);
            if let Some(p) = &metrics_out {
                write_file(p, json.as_bytes())?;
            }
            if !quiet {
                print!("{json}");
            }
            if fail_on_loss && r.metrics.loss_of_mission {
                eprintln!("loss of mission");
                return Ok(ExitCode::from(1));
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sweep {
            s,
            grid,
            seeds,
            out,
            quiet,
        } => {
            let scenario = load(&s)?;
            let table = sweep(&scenario, &grid, &seeds).map_err(InputError)?;
            match out {
                Some(p) if p.extension().is_some_and(|e| e == "json") => {
                    write_file(&p, serde_json::to_string_pretty(&table)?.as_bytes())?;
                }
                Some(p) => table.write_csv(File::create(&p)?)?,
                None if !quiet => table.write_csv(io::stdout().lock())?,
                None => {}
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Metrics {
            trace,
            metrics_out,
            quiet,
        } => {
            let f = File::open(&trace).map_err(|e| InputError(format!("{}: {e}", trace.display())))?;
            let records = read_jsonl(BufReader::new(f)).map_err(|e| InputError(format!("{}: {e}", trace.display())))?;
            let m = compute_metrics(&records);
            let json = metrics_json(&m);
            if let Some(p) = &metrics_out {
                write_file(p, json.as_bytes())?;
            }
            if !quiet {
                print!("{json}");
            }
            if m.partial {
                eprintln!("warning: trace has no run-end record; metrics are partial");
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Validate { scenario, set, quiet } => match load_scenario(&scenario, &set) {
            Ok(_) => {
                if !quiet {
                    println!("{}: ok", scenario.display());
                }
                Ok(ExitCode::SUCCESS)
            }
            Err(e) => {
                eprint!("{}: {e}", scenario.display());
                if !e.to_string().ends_with('\n') {
                    eprintln!();
                }
                Ok(ExitCode::from(2))
            }
        },
        Cmd::ReplayCheck { s, runs, quiet } => {
            if runs < 2 {
                bail!(InputError("--runs must be at least 2".into()));
            }
            let scenario = load(&s)?;
            let opts = options(&s);
            let mut reference: Option<(String, String)> = None;
            for i in 0..runs {
                let r = run(&scenario, &opts).context("simulation failed")?;
                let got = (r.trace.to_jsonl(), metrics_json(&r.metrics));
                match &reference {
                    None => reference = Some(got),
                    Some(want) if *want == got => {}
                    Some(want) => {
                        let what = if want.0 != got.0 { "trace" } else { "metrics" };
                        eprintln!("{}: run {} {what} differs from run 1", s.scenario.display(), i + 1);
                        return Ok(ExitCode::from(1));
                    }
                }
            }
            let (trace, _) = reference.expect("at least one run");
            if !quiet {
                println!(
                    "{}: {runs} runs identical ({} records)",
                    s.scenario.display(),
                    trace.lines().count()
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<InputError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
