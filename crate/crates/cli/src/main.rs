//! Command-line front end for the consensus toolkit: validate switching
//! schedules, synthesize protocol gains, and simulate the closed loop from
//! JSON scenario files.

use clap::{Parser, Subcommand, ValueEnum};
use consensus_cli::commands::{self, SimulateArgs};
use consensus_cli::scenario::LoadError;
use consensus_core::sim::SimMode;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "consensus-cli",
    version,
    about = "Leader-following consensus under switching topologies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check interval lengths, dwell times, and joint connectivity.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
        /// Longest admissible interval; defaults to the scenario's bound or
        /// the schedule's own longest interval.
        #[arg(long)]
        t_max: Option<f64>,
        /// Shortest admissible dwell; defaults like --t-max.
        #[arg(long)]
        tau_min: Option<f64>,
    },
    /// Sample the averaged coupling margin and synthesize gains.
    Synth {
        #[arg(long)]
        scenario: PathBuf,
        /// Coupling margin override; defaults to a third of the sampled
        /// estimate.
        #[arg(long)]
        delta_bar: Option<f64>,
        /// Riccati margin override.
        #[arg(long)]
        margin: Option<f64>,
        /// Where to write the gain file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Integrate the closed loop and report consensus decay.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Gain file from a previous synth run; synthesized on the fly when
        /// absent.
        #[arg(long)]
        gains: Option<PathBuf>,
        #[arg(long)]
        step: Option<f64>,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Replaces the scenario's initial condition with a seeded draw.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for trajectory.csv and summary.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write plot.csv with per-agent error norms.
        #[arg(long)]
        plot_data: bool,
    },
    /// Print model, graph, and schedule diagnostics.
    Analyze {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Probe dwell compression factors and report terminal errors.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        gains: Option<PathBuf>,
        /// Comma-separated compression factors, e.g. 1,2,4.
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ModeArg {
    StateFeedback,
    Observer,
}

impl From<ModeArg> for SimMode {
    fn from(m: ModeArg) -> SimMode {
        match m {
            ModeArg::StateFeedback => SimMode::StateFeedback,
            ModeArg::Observer => SimMode::Observer,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Validate {
            scenario,
            t_max,
            tau_min,
        } => commands::run_validate(scenario, *t_max, *tau_min),
        Command::Synth {
            scenario,
            delta_bar,
            margin,
            out,
        } => commands::run_synth(scenario, *delta_bar, *margin, out.as_deref()),
        Command::Simulate {
            scenario,
            gains,
            step,
            horizon,
            mode,
            seed,
            out,
            plot_data,
        } => commands::run_simulate(&SimulateArgs {
            scenario,
            gains: gains.as_deref(),
            step: *step,
            horizon: *horizon,
            mode: mode.map(SimMode::from),
            seed: *seed,
            out: out.as_deref(),
            plot_data: *plot_data,
        }),
        Command::Analyze { scenario } => commands::run_analyze(scenario),
        Command::Sweep {
            scenario,
            gains,
            alphas,
        } => commands::run_sweep(scenario, gains.as_deref(), alphas),
    };
    // Exit codes: 0 success, 1 domain failure (validation, assumptions,
    // divergence), 2 unusable input. Clap handles its own usage errors with 2.
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            let unusable = err
                .chain()
                .any(|cause| cause.downcast_ref::<LoadError>().is_some());
            ExitCode::from(if unusable { 2 } else { 1 })
        }
    }
}
