use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mss_core::plot::render_svg;
use mss_core::report::RunReport;
use mss_core::scenario::Scenario;
use mss_core::swarm::runner::{run_scenario, RunMode};

const EXIT_INVALID: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "mss", version, about = "Multi-drone marker-map simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write map.json, trajectories.csv, report.json and metrics.json.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "lockstep")]
        mode: RunMode,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Render a top-down SVG (map.svg) from a report.json.
    Plot {
        report: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn cmd_run(path: &Path, seed: Option<u64>, mode: RunMode, out: &Path) -> ExitCode {
    let scenario = match Scenario::load(path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(EXIT_INVALID);
        }
    };
    let seed = seed.unwrap_or(scenario.seed);
    let report = match run_scenario(&scenario, seed, mode) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: run failed: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    };
    if let Err(e) = report.write_artifacts(out) {
        eprintln!("error: writing artifacts to {}: {e}", out.display());
        return ExitCode::from(EXIT_RUNTIME);
    }
    let m = &report.metrics;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    // a closed stdout (e.g. piped into head) must not turn a finished run into a panic
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(
        stdout,
        "{}: {} markers in {} frame(s), {} merges, marker RMSE {} m / {} rad, {} BA runs",
        report.scenario_name,
        m.marker_count,
        m.frames_remaining,
        m.merge_count,
        fmt(m.marker_position_rmse),
        fmt(m.marker_orientation_rmse),
        m.ba_runs
    );
    for d in &m.drones {
        let _ = writeln!(stdout, "  drone {}: ATE {} m", d.drone_id.0, fmt(d.ate));
    }
    ExitCode::SUCCESS
}

fn cmd_plot(path: &Path, out: &Path) -> ExitCode {
    let report = match std::fs::read_to_string(path)
        .map_err(|e| e.to_string())
        .and_then(|t| RunReport::from_json(&t).map_err(|e| e.to_string()))
    {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(EXIT_INVALID);
        }
    };
    let target = out.join("map.svg");
    if let Err(e) =
        std::fs::create_dir_all(out).and_then(|_| std::fs::write(&target, render_svg(&report)))
    {
        eprintln!("error: writing {}: {e}", target.display());
        return ExitCode::from(EXIT_RUNTIME);
    }
    let _ = writeln!(std::io::stdout(), "wrote {}", target.display());
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MSS_LOG", "warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenario,
            seed,
            mode,
            out,
        } => cmd_run(&scenario, seed, mode, &out),
        Command::Plot { report, out } => cmd_plot(&report, &out),
    }
}
