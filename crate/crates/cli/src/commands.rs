//! Command implementations. Each returns `Ok(true)` for a clean pass,
//! `Ok(false)` when the run finished but the verdict is negative (failed
//! validation, diverging simulation), and `Err` for anything that stopped
//! the run outright.

use crate::scenario::{Certificates, GainFile, InitialSpec, ScenarioFile};
use anyhow::{bail, Context, Result};
use consensus_core::graph::{self, LeaderGraph};
use consensus_core::linalg::{self, Matrix};
use consensus_core::schedule::{SamplingStrategy, SwitchingSchedule};
use consensus_core::sim::{self, SimMode, SimOptions};
use consensus_core::synthesis::{self, AgentModel, GainSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub struct SynthOutcome {
    pub gains: GainSet,
    pub mode: SimMode,
    pub decay: Option<f64>,
    pub estimate: Option<f64>,
    pub strategy: Option<SamplingStrategy>,
    pub certificates: Certificates,
}

/// Runs the synthesis pipeline: estimate the coupling margin, solve the
/// design equations, and collect the certificates.
pub fn synthesize(
    scenario: &ScenarioFile,
    model: &AgentModel,
    schedule: &SwitchingSchedule,
    mode: SimMode,
    delta_override: Option<f64>,
    margin_override: Option<f64>,
) -> Result<SynthOutcome> {
    let strategy = scenario.synthesis.strategy.clone();
    let estimate = schedule
        .estimate_delta_bar(&strategy)
        .context("sampling the averaged structure matrices")?;
    let explicit = delta_override.or(scenario.synthesis.delta_bar);
    let delta_bar = match explicit {
        Some(d) => d,
        None => {
            if estimate.value <= 0.0 {
                bail!(
                    "sampled coupling margin {} is not positive; the schedule \
                     cannot support synthesis without an explicit delta_bar",
                    estimate.value
                );
            }
            estimate.value / 3.0
        }
    };
    let margin = margin_override.unwrap_or(scenario.synthesis.margin);

    let (p, k) = synthesis::synth_feedback(model, delta_bar, margin).context("state feedback")?;
    let n = model.state_dim();
    let residual = &synthesis::feedback_residual(model, &p, delta_bar)
        + &Matrix::identity(n).scale(margin);
    let feedback_residual_norm = residual.frobenius_norm();
    let p_min_eigenvalue = min_symmetric_eig(&p);

    let mut gains = GainSet {
        p,
        k,
        p_o: None,
        k_o: None,
        f: None,
        delta_bar,
        margin,
    };
    let mut certificates = Certificates {
        feedback_residual_norm,
        p_min_eigenvalue,
        observer_residual_norm: None,
        p_o_min_eigenvalue: None,
        stabilizer_abscissa: None,
        averaged_abscissas: Vec::new(),
    };
    let mut decay = None;

    if mode == SimMode::Observer {
        let (p_o, k_o) =
            synthesis::synth_observer(model, delta_bar, margin).context("observer gain")?;
        let obs_residual = &synthesis::observer_residual(model, &p_o, delta_bar)
            + &Matrix::identity(n).scale(margin);
        certificates.observer_residual_norm = Some(obs_residual.frobenius_norm());
        certificates.p_o_min_eigenvalue = Some(min_symmetric_eig(&p_o));
        let f = synthesis::synth_stabilizer(model, scenario.synthesis.decay)
            .context("local stabilizer")?;
        let loop_matrix = model.a() + &(model.b() * &f);
        certificates.stabilizer_abscissa = Some(linalg::spectral_abscissa(&loop_matrix)?);
        gains.p_o = Some(p_o);
        gains.k_o = Some(k_o);
        gains.f = Some(f);
        decay = Some(scenario.synthesis.decay);
    }

    for idx in 0..schedule.intervals().len() {
        let m = match mode {
            SimMode::StateFeedback => {
                sim::averaged_system_matrix(model, &gains.k, schedule, idx)?
            }
            SimMode::Observer => {
                let h_bar = schedule.averaged_structure(idx)?;
                sim::observer_system_matrix(model, &gains, &h_bar)?
            }
        };
        certificates.averaged_abscissas.push(linalg::spectral_abscissa(&m)?);
    }

    Ok(SynthOutcome {
        gains,
        mode,
        decay,
        estimate: Some(estimate.value),
        strategy: Some(strategy),
        certificates,
    })
}

fn min_symmetric_eig(p: &Matrix) -> f64 {
    p.symmetric_eigenvalues()
        .first()
        .copied()
        .unwrap_or(f64::NAN)
}

pub fn run_validate(
    scenario_path: &Path,
    t_max: Option<f64>,
    tau_min: Option<f64>,
) -> Result<bool> {
    let scenario = ScenarioFile::load(scenario_path)?;
    let schedule = scenario.schedule()?;
    let bounds = scenario.validation;
    let t_max = t_max
        .or(bounds.map(|b| b.t_max))
        .unwrap_or_else(|| schedule.max_interval_length());
    let tau_min = tau_min
        .or(bounds.map(|b| b.tau_min))
        .unwrap_or_else(|| schedule.min_dwell());
    if !(t_max > 0.0 && tau_min > 0.0) {
        bail!("validation bounds must be positive (t_max {t_max}, tau_min {tau_min})");
    }
    let report = schedule.validate(t_max, tau_min);
    print!("{report}");
    let pass = report.pass();
    println!("schedule check: {}", if pass { "PASS" } else { "FAIL" });
    Ok(pass)
}

pub fn run_synth(
    scenario_path: &Path,
    delta_bar: Option<f64>,
    margin: Option<f64>,
    out: Option<&Path>,
) -> Result<bool> {
    let scenario = ScenarioFile::load(scenario_path)?;
    let model = scenario.model()?;
    let schedule = scenario.schedule()?;
    let outcome = synthesize(
        &scenario,
        &model,
        &schedule,
        scenario.synthesis.mode,
        delta_bar,
        margin,
    )?;
    print_synth(&outcome);
    if let Some(path) = out {
        let file = GainFile::from_gain_set(
            &outcome.gains,
            outcome.mode,
            outcome.decay,
            outcome.estimate,
            outcome.strategy.clone(),
            outcome.certificates.clone(),
        );
        write_json(path, &file)?;
        println!("gains written to {}", path.display());
    }
    Ok(true)
}

fn print_synth(outcome: &SynthOutcome) {
    if let Some(est) = outcome.estimate {
        println!("sampled coupling margin: {est:.6}");
    }
    println!(
        "synthesis delta_bar: {:.6} (margin {:.3})",
        outcome.gains.delta_bar, outcome.gains.margin
    );
    println!(
        "feedback certificate: |residual| = {:.3e}, min eig(P) = {:.6}",
        outcome.certificates.feedback_residual_norm, outcome.certificates.p_min_eigenvalue
    );
    if let (Some(norm), Some(eig)) = (
        outcome.certificates.observer_residual_norm,
        outcome.certificates.p_o_min_eigenvalue,
    ) {
        println!("observer certificate: |residual| = {norm:.3e}, min eig(P_o) = {eig:.6}");
    }
    if let Some(abscissa) = outcome.certificates.stabilizer_abscissa {
        println!("local stabilizer loop abscissa: {abscissa:.6}");
    }
    for (idx, a) in outcome.certificates.averaged_abscissas.iter().enumerate() {
        println!("interval {idx} averaged closed-loop abscissa: {a:.6}");
    }
}

pub struct SimulateArgs<'a> {
    pub scenario: &'a Path,
    pub gains: Option<&'a Path>,
    pub step: Option<f64>,
    pub horizon: Option<f64>,
    pub mode: Option<SimMode>,
    pub seed: Option<u64>,
    pub out: Option<&'a Path>,
    pub plot_data: bool,
}

pub fn run_simulate(args: &SimulateArgs) -> Result<bool> {
    let scenario = ScenarioFile::load(args.scenario)?;
    let model = scenario.model()?;
    let schedule = scenario.schedule()?;
    let mode = args.mode.unwrap_or(scenario.synthesis.mode);

    let gains = match args.gains {
        Some(path) => {
            let file = GainFile::load(path)?;
            let set = file.to_gain_set()?;
            if mode == SimMode::Observer && (set.k_o.is_none() || set.f.is_none()) {
                bail!(
                    "gain file {} lacks observer gains needed for observer mode",
                    path.display()
                );
            }
            set
        }
        None => synthesize(&scenario, &model, &schedule, mode, None, None)?.gains,
    };

    let sim_section = &scenario.simulation;
    let initial_spec = match args.seed {
        Some(seed) => InitialSpec::Random {
            seed,
            scale: match &sim_section.initial {
                InitialSpec::Random { scale, .. } => *scale,
                InitialSpec::Explicit { .. } => 1.0,
            },
        },
        None => sim_section.initial.clone(),
    };
    let initial = initial_spec.build(model.state_dim(), schedule.n_followers());
    let opts = SimOptions {
        step: args.step.unwrap_or(sim_section.step),
        horizon: args.horizon.unwrap_or(sim_section.horizon),
        mode,
        max_samples: sim_section.max_samples,
        overflow_limit: sim_section.overflow_limit,
    };

    let log = sim::simulate(&model, &gains, &schedule, &initial, &opts)?;
    let summary = sim::run_summary(&model, &gains, &schedule, &log)?;

    println!(
        "simulated {} followers for {}s at step {}",
        summary.n_followers, summary.horizon, summary.step
    );
    if let Some(seed) = initial_spec.seed() {
        println!("initial condition seed: {seed}");
    }
    println!(
        "consensus error: initial {:.6e}, terminal {:.6e}, ratio {:.6e}",
        summary.initial_consensus_error,
        summary.terminal_consensus_error,
        summary.decay_ratio
    );
    if let Some(e) = summary.terminal_estimation_error {
        println!("terminal estimation error: {e:.6e}");
    }
    for (idx, a) in summary.averaged_abscissas.iter().enumerate() {
        println!("interval {idx} averaged closed-loop abscissa: {a:.6}");
    }
    println!(
        "verdict: {}",
        if summary.diverged { "DIVERGED" } else { "converged" }
    );

    if let Some(dir) = args.out {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        let traj = dir.join("trajectory.csv");
        write_csv(&traj, |w| sim::write_trajectory_csv(&log, w))?;
        println!("trajectory written to {}", traj.display());
        if args.plot_data {
            let plot = dir.join("plot.csv");
            write_csv(&plot, |w| sim::write_plot_csv(&log, w))?;
            println!("plot data written to {}", plot.display());
        }
        let summary_path = dir.join("summary.json");
        write_json(&summary_path, &summary)?;
        println!("summary written to {}", summary_path.display());
    }

    Ok(!summary.diverged)
}

pub fn run_analyze(scenario_path: &Path) -> Result<bool> {
    let scenario = ScenarioFile::load(scenario_path)?;
    let model = scenario.model()?;
    let schedule = scenario.schedule()?;

    println!(
        "model: {} states, {} inputs{}",
        model.state_dim(),
        model.input_dim(),
        match model.output_dim() {
            Some(p) => format!(", {p} outputs"),
            None => String::new(),
        }
    );
    println!(
        "open-loop abscissa: {:.6}",
        linalg::spectral_abscissa(model.a())?
    );
    println!(
        "stabilizable: {}",
        if synthesis::check_stabilizable(&model)? { "yes" } else { "no" }
    );
    if model.c().is_some() {
        println!(
            "detectable: {}",
            if synthesis::check_detectable(&model)? { "yes" } else { "no" }
        );
    }

    let graphs = schedule.graphs();
    for (idx, g) in graphs.iter().enumerate() {
        describe_graph(idx, g)?;
    }
    println!(
        "collection jointly connected: {}",
        if graph::jointly_connected(graphs)? { "yes" } else { "no" }
    );

    let report = schedule.validate(
        scenario
            .validation
            .map(|b| b.t_max)
            .unwrap_or_else(|| schedule.max_interval_length()),
        scenario
            .validation
            .map(|b| b.tau_min)
            .unwrap_or_else(|| schedule.min_dwell()),
    );
    print!("{report}");

    let strategy = scenario.synthesis.strategy.clone();
    let est = schedule.estimate_delta_bar(&strategy)?;
    println!(
        "sampled coupling margin: {:.6} over {} samples (per interval: {})",
        est.value,
        est.total_samples,
        est.per_interval
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(", ")
    );

    if let Some(avg) = scenario.averaging {
        let params = avg.to_params()?;
        let alpha = synthesis::solve_alpha_star(&params);
        println!("averaging threshold alpha*: {alpha:.6}");
    }
    Ok(true)
}

fn describe_graph(idx: usize, g: &LeaderGraph) -> Result<()> {
    let h = g.structure_matrices().h;
    let min_eig = graph::min_real_eig(&h)?;
    println!(
        "graph {}: {} edges, {} leader links, connected alone: {}, min Re eig(H): {:.6}",
        idx,
        g.edges().count(),
        g.leader_links().count(),
        if g.is_connected() { "yes" } else { "no" },
        min_eig
    );
    Ok(())
}

pub fn run_sweep(
    scenario_path: &Path,
    gains_path: Option<&Path>,
    alphas: &[f64],
) -> Result<bool> {
    if alphas.is_empty() {
        bail!("sweep needs at least one compression factor");
    }
    let scenario = ScenarioFile::load(scenario_path)?;
    let model = scenario.model()?;
    let schedule = scenario.schedule()?;
    let mode = scenario.synthesis.mode;
    let gains = match gains_path {
        Some(path) => GainFile::load(path)?.to_gain_set()?,
        None => synthesize(&scenario, &model, &schedule, mode, None, None)?.gains,
    };
    let sim_section = &scenario.simulation;
    let initial = sim_section
        .initial
        .build(model.state_dim(), schedule.n_followers());
    let opts = SimOptions {
        step: sim_section.step,
        horizon: sim_section.horizon,
        mode,
        max_samples: sim_section.max_samples,
        overflow_limit: sim_section.overflow_limit,
    };
    println!("alpha, terminal_consensus, ratio");
    for &alpha in alphas {
        let log = sim::fast_switching_probe(&model, &gains, &schedule, alpha, &initial, &opts)?;
        let initial_err = log.samples[0].consensus_error();
        let terminal = log.terminal().consensus_error();
        println!(
            "{}, {:.6e}, {:.6e}",
            alpha,
            terminal,
            terminal / initial_err.max(1e-300)
        );
    }
    Ok(true)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).context("serializing output")?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_csv(
    path: &PathBuf,
    emit: impl FnOnce(&mut std::io::BufWriter<fs::File>) -> std::io::Result<()>,
) -> Result<()> {
    let file =
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut writer = std::io::BufWriter::new(file);
    emit(&mut writer).with_context(|| format!("writing {}", path.display()))?;
    writer.flush().context("flushing output")?;
    Ok(())
}
