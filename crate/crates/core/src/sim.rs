//! Closed-loop assembly and fixed-step simulation of the switched network.
//!
//! The state-feedback protocol drives the stacked tracking errors
//! `delta_i = x_i - x0` through
//!
//! ```text
//! delta' = [ I (x) A - H_sigma(t) (x) B K ] delta
//! ```
//!
//! while the observer-based protocol integrates the block-triangular pair
//! `(delta, e)` with `e_i` the local estimate error `zhat_i - delta_i`:
//!
//! ```text
//! delta' = I (x) (A + B F) delta + I (x) (B F) e
//! e'     = [ I (x) A - H_sigma(t) (x) (K_o C) ] e
//! ```
//!
//! The equivalent coupled form in `(delta, zhat)` coordinates is also
//! exposed, as are direct per-agent integrators that evaluate the protocol
//! sums over graph neighborhoods instead of Kronecker matrices. Those serve
//! as independent cross-checks of the assembled system matrices.
//!
//! Integration is classical fourth-order Runge-Kutta with a fixed step.
//! Switch instants must land exactly on the step grid: segment boundaries
//! are converted to step indices up front and verified, so a step never
//! straddles a switch and the active graph is right-continuous without any
//! floating-point fuzz at the boundaries. The fast-switching probe reuses
//! the same machinery with all dwells compressed by `alpha`, which makes an
//! `alpha = 1` probe bit-identical to a plain simulation.

use crate::linalg::{self, kron, Matrix, MatrixError};
use crate::schedule::{ScheduleError, SwitchingSchedule};
use crate::synthesis::{AgentModel, GainSet};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("gain {name} has shape {got}, expected {expected}")]
    GainShape {
        name: &'static str,
        expected: String,
        got: String,
    },
    #[error("structure matrix has shape {got}, expected {expected} followers")]
    StructureShape { expected: usize, got: String },
    #[error("{what} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("observer simulation needs C in the model and F, K_o in the gain set")]
    MissingObserverParts,
    #[error("step must be positive and finite, got {step}")]
    BadStep { step: f64 },
    #[error("horizon must be positive, finite, and an integer multiple of the step, got {horizon}")]
    BadHorizon { horizon: f64 },
    #[error("time compression factor must be positive and finite, got {alpha}")]
    BadAlpha { alpha: f64 },
    #[error("switch boundary at t = {boundary} does not land on the step grid (step {step})")]
    StepMisaligned { boundary: f64, step: f64 },
    #[error("segment starting at t = {start} is shorter than one step after compression")]
    SegmentBelowStep { start: f64 },
    #[error("state magnitude {magnitude:.3e} exceeded {limit:.3e} at t = {t}")]
    Overflow { t: f64, magnitude: f64, limit: f64 },
    #[error("probe state matrix is not Hurwitz (abscissa {abscissa:.6e})")]
    ProbeNotStable { abscissa: f64 },
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// Which protocol the simulation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    StateFeedback,
    Observer,
}

/// Integration options.
#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub step: f64,
    pub horizon: f64,
    pub mode: SimMode,
    /// Upper bound on retained samples; the trajectory is strided to fit and
    /// the terminal state is always retained exactly.
    pub max_samples: usize,
    /// Magnitude at which integration aborts with an overflow error.
    pub overflow_limit: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            step: 1e-3,
            horizon: 30.0,
            mode: SimMode::StateFeedback,
            max_samples: 100_000,
            overflow_limit: 1e12,
        }
    }
}

/// Initial conditions. Follower states are absolute; tracking errors are
/// derived against the leader. Observer estimates default to zero when not
/// given, so the initial estimate error is `-delta_i(0)`.
#[derive(Debug, Clone)]
pub struct InitialState {
    pub leader: Vec<f64>,
    pub followers: Vec<Vec<f64>>,
    pub estimates: Option<Vec<Vec<f64>>>,
}

impl InitialState {
    /// Seeded initial condition with every component uniform in
    /// `[-scale, scale]`. Observer estimates stay at their zero default.
    pub fn random(state_dim: usize, n_followers: usize, scale: f64, seed: u64) -> InitialState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.random_range(-scale..=scale)).collect()
        };
        InitialState {
            leader: draw(state_dim),
            followers: (0..n_followers).map(|_| draw(state_dim)).collect(),
            estimates: None,
        }
    }
}

/// One retained sample of the closed-loop state.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub t: f64,
    pub leader: Vec<f64>,
    /// Tracking errors `delta_i = x_i - x0`, agent-major.
    pub errors: Vec<Vec<f64>>,
    /// Observer estimate errors `e_i = zhat_i - delta_i`, observer mode only.
    pub est_errors: Option<Vec<Vec<f64>>>,
}

impl SimState {
    pub fn follower(&self, i: usize) -> Vec<f64> {
        self.errors[i]
            .iter()
            .zip(&self.leader)
            .map(|(d, x0)| d + x0)
            .collect()
    }

    /// Observer estimate `zhat_i = delta_i + e_i` of the tracking error.
    pub fn estimate(&self, i: usize) -> Option<Vec<f64>> {
        self.est_errors.as_ref().map(|es| {
            es[i]
                .iter()
                .zip(&self.errors[i])
                .map(|(e, d)| e + d)
                .collect()
        })
    }

    /// Largest tracking error magnitude over agents.
    pub fn consensus_error(&self) -> f64 {
        self.errors
            .iter()
            .map(|d| d.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Largest estimate error magnitude over agents, observer mode only.
    pub fn estimation_error(&self) -> Option<f64> {
        self.est_errors.as_ref().map(|es| {
            es.iter()
                .map(|e| e.iter().map(|v| v * v).sum::<f64>().sqrt())
                .fold(0.0, f64::max)
        })
    }
}

/// Retained simulation output.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub mode: SimMode,
    pub step: f64,
    pub n_followers: usize,
    pub state_dim: usize,
    pub samples: Vec<SimState>,
    /// Active graph index at each retained sample time. The terminal sample
    /// reports the graph of the final integration step.
    pub schedule_trace: Vec<usize>,
}

impl TrajectoryLog {
    pub fn terminal(&self) -> &SimState {
        self.samples.last().expect("log holds at least one sample")
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }
}

/// Per-sample consensus error `max_i |delta_i|`, recomputed from the log.
pub fn consensus_error(log: &TrajectoryLog) -> Vec<f64> {
    log.samples.iter().map(SimState::consensus_error).collect()
}

/// State-feedback error system `I (x) A - H (x) B K` for one graph.
pub fn error_system_matrix(
    model: &AgentModel,
    k: &Matrix,
    h: &Matrix,
) -> Result<Matrix, SimError> {
    check_gain(k, model.input_dim(), model.state_dim(), "K")?;
    let n_followers = check_structure(h)?;
    let eye = Matrix::identity(n_followers);
    let bk = model.b() * k;
    Ok(&kron(&eye, model.a()) - &kron(h, &bk))
}

/// Averaged closed loop of one schedule interval, using its dwell-fraction
/// averaged structure matrix.
pub fn averaged_system_matrix(
    model: &AgentModel,
    k: &Matrix,
    schedule: &SwitchingSchedule,
    interval: usize,
) -> Result<Matrix, SimError> {
    let h_bar = schedule.averaged_structure(interval)?;
    error_system_matrix(model, k, &h_bar)
}

/// Block-triangular observer closed loop on `(delta, e)` for one graph.
pub fn observer_system_matrix(
    model: &AgentModel,
    gains: &GainSet,
    h: &Matrix,
) -> Result<Matrix, SimError> {
    let (f, k_o, c) = observer_parts(model, gains)?;
    let n_followers = check_structure(h)?;
    let eye = Matrix::identity(n_followers);
    let bf = model.b() * f;
    let a_bf = model.a() + &bf;
    let koc = k_o * c;
    let upper_left = kron(&eye, &a_bf);
    let upper_right = kron(&eye, &bf);
    let lower_right = &kron(&eye, model.a()) - &kron(h, &koc);
    let zero = Matrix::zeros(upper_left.rows(), upper_left.cols());
    Ok(Matrix::block2x2(
        &upper_left,
        &upper_right,
        &zero,
        &lower_right,
    ))
}

/// Coupled observer closed loop on `(delta, zhat)` for one graph. Similar to
/// [`observer_system_matrix`] under `[delta; e] = [[I, 0], [-I, I]] [delta; zhat]`,
/// so both share a spectrum.
pub fn coupled_observer_matrix(
    model: &AgentModel,
    gains: &GainSet,
    h: &Matrix,
) -> Result<Matrix, SimError> {
    let (f, k_o, c) = observer_parts(model, gains)?;
    let n_followers = check_structure(h)?;
    let eye = Matrix::identity(n_followers);
    let bf = model.b() * f;
    let a_bf = model.a() + &bf;
    let koc = k_o * c;
    let upper_left = kron(&eye, model.a());
    let upper_right = kron(&eye, &bf);
    let lower_left = kron(h, &koc);
    let lower_right = &kron(&eye, &a_bf) - &kron(h, &koc);
    Ok(Matrix::block2x2(
        &upper_left,
        &upper_right,
        &lower_left,
        &lower_right,
    ))
}

fn observer_parts<'a>(
    model: &'a AgentModel,
    gains: &'a GainSet,
) -> Result<(&'a Matrix, &'a Matrix, &'a Matrix), SimError> {
    let (Some(f), Some(k_o), Some(c)) = (gains.f.as_ref(), gains.k_o.as_ref(), model.c()) else {
        return Err(SimError::MissingObserverParts);
    };
    check_gain(f, model.input_dim(), model.state_dim(), "F")?;
    check_gain(k_o, model.state_dim(), c.rows(), "K_o")?;
    Ok((f, k_o, c))
}

fn check_gain(
    g: &Matrix,
    rows: usize,
    cols: usize,
    name: &'static str,
) -> Result<(), SimError> {
    if g.rows() != rows || g.cols() != cols {
        return Err(SimError::GainShape {
            name,
            expected: format!("{rows}x{cols}"),
            got: format!("{}x{}", g.rows(), g.cols()),
        });
    }
    Ok(())
}

fn check_structure(h: &Matrix) -> Result<usize, SimError> {
    if !h.is_square() {
        return Err(SimError::StructureShape {
            expected: h.rows(),
            got: format!("{}x{}", h.rows(), h.cols()),
        });
    }
    Ok(h.rows())
}

/// Runs the closed loop under the schedule. The step must divide every dwell
/// and the horizon; for aperiodic schedules the horizon must not pass the
/// schedule end.
pub fn simulate(
    model: &AgentModel,
    gains: &GainSet,
    schedule: &SwitchingSchedule,
    init: &InitialState,
    opts: &SimOptions,
) -> Result<TrajectoryLog, SimError> {
    integrate_switched(model, gains, schedule, 1.0, init, opts)
}

/// Runs the same closed loop with every dwell compressed by `alpha`, i.e.
/// the active graph at integrator time `t` is the scheduled one at
/// `alpha t`. With `alpha = 1` this is exactly [`simulate`].
pub fn fast_switching_probe(
    model: &AgentModel,
    gains: &GainSet,
    schedule: &SwitchingSchedule,
    alpha: f64,
    init: &InitialState,
    opts: &SimOptions,
) -> Result<TrajectoryLog, SimError> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(SimError::BadAlpha { alpha });
    }
    integrate_switched(model, gains, schedule, alpha, init, opts)
}

fn integrate_switched(
    model: &AgentModel,
    gains: &GainSet,
    schedule: &SwitchingSchedule,
    alpha: f64,
    init: &InitialState,
    opts: &SimOptions,
) -> Result<TrajectoryLog, SimError> {
    let n = model.state_dim();
    let n_followers = schedule.n_followers();
    let n_steps = checked_steps(opts)?;
    check_init(init, n, n_followers, opts.mode)?;

    let table = step_graph_table(schedule, alpha, opts.step, n_steps)?;

    // One composite matrix per graph that actually appears: the leader block
    // rides along so the whole state advances through one multiplication.
    let mut used: Vec<usize> = table.clone();
    used.sort_unstable();
    used.dedup();
    let mut systems: Vec<Option<DMatrix<f64>>> = vec![None; schedule.graphs().len()];
    for &g in &used {
        let h = schedule.graphs()[g].structure_matrices().h;
        let net = match opts.mode {
            SimMode::StateFeedback => error_system_matrix(model, &gains.k, &h)?,
            SimMode::Observer => observer_system_matrix(model, gains, &h)?,
        };
        let composite = Matrix::block2x2(
            model.a(),
            &Matrix::zeros(n, net.cols()),
            &Matrix::zeros(net.rows(), n),
            &net,
        );
        systems[g] = Some(composite.as_dmatrix().clone());
    }

    let mut state = pack_state(init, n, n_followers, opts.mode);
    let stride = (n_steps / opts.max_samples.max(1)) + 1;
    let mut samples = Vec::new();
    let mut trace = Vec::new();
    samples.push(unpack_state(0.0, &state, n, n_followers, opts.mode));
    trace.push(table[0]);

    for step_idx in 0..n_steps {
        let m = systems[table[step_idx]]
            .as_ref()
            .expect("system built for every active graph");
        state = rk4_step(m, &state, opts.step);
        let t = (step_idx + 1) as f64 * opts.step;
        let magnitude = state.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if !magnitude.is_finite() || magnitude > opts.overflow_limit {
            return Err(SimError::Overflow {
                t,
                magnitude,
                limit: opts.overflow_limit,
            });
        }
        let is_last = step_idx + 1 == n_steps;
        if (step_idx + 1) % stride == 0 && !is_last {
            samples.push(unpack_state(t, &state, n, n_followers, opts.mode));
            trace.push(table[step_idx + 1]);
        }
        if is_last {
            samples.push(unpack_state(t, &state, n, n_followers, opts.mode));
            trace.push(table[step_idx]);
        }
    }

    Ok(TrajectoryLog {
        mode: opts.mode,
        step: opts.step,
        n_followers,
        state_dim: n,
        samples,
        schedule_trace: trace,
    })
}

fn checked_steps(opts: &SimOptions) -> Result<usize, SimError> {
    if !(opts.step.is_finite() && opts.step > 0.0) {
        return Err(SimError::BadStep { step: opts.step });
    }
    if !(opts.horizon.is_finite() && opts.horizon > 0.0) {
        return Err(SimError::BadHorizon {
            horizon: opts.horizon,
        });
    }
    let n_steps = (opts.horizon / opts.step).round();
    if n_steps < 1.0 || (n_steps * opts.step - opts.horizon).abs() > 1e-9 * opts.horizon {
        return Err(SimError::BadHorizon {
            horizon: opts.horizon,
        });
    }
    Ok(n_steps as usize)
}

fn check_init(
    init: &InitialState,
    n: usize,
    n_followers: usize,
    mode: SimMode,
) -> Result<(), SimError> {
    if init.leader.len() != n {
        return Err(SimError::DimensionMismatch {
            what: "leader initial state",
            expected: n,
            got: init.leader.len(),
        });
    }
    if init.followers.len() != n_followers {
        return Err(SimError::DimensionMismatch {
            what: "follower count",
            expected: n_followers,
            got: init.followers.len(),
        });
    }
    for f in &init.followers {
        if f.len() != n {
            return Err(SimError::DimensionMismatch {
                what: "follower initial state",
                expected: n,
                got: f.len(),
            });
        }
    }
    if let Some(est) = &init.estimates {
        if mode != SimMode::Observer {
            return Err(SimError::DimensionMismatch {
                what: "estimates given outside observer mode",
                expected: 0,
                got: est.len(),
            });
        }
        if est.len() != n_followers {
            return Err(SimError::DimensionMismatch {
                what: "estimate count",
                expected: n_followers,
                got: est.len(),
            });
        }
        for e in est {
            if e.len() != n {
                return Err(SimError::DimensionMismatch {
                    what: "estimate initial state",
                    expected: n,
                    got: e.len(),
                });
            }
        }
    }
    Ok(())
}

/// Active graph per integration step, by integer boundary indices. The
/// compressed segment boundaries `start / alpha` must land on the step grid
/// and every compressed segment must span at least one step.
fn step_graph_table(
    schedule: &SwitchingSchedule,
    alpha: f64,
    step: f64,
    n_steps: usize,
) -> Result<Vec<usize>, SimError> {
    let horizon_sched = n_steps as f64 * step * alpha;
    let segs = schedule.segments_until(horizon_sched)?;
    let mut table = vec![usize::MAX; n_steps];
    let mut boundaries = Vec::with_capacity(segs.len() + 1);
    for &(start, _dwell, graph) in &segs {
        let compressed = start / alpha;
        let idx = (compressed / step).round();
        if (idx * step - compressed).abs() > 1e-9 * compressed.max(1.0) {
            return Err(SimError::StepMisaligned {
                boundary: compressed,
                step,
            });
        }
        boundaries.push((idx as usize, graph, start));
    }
    boundaries.push((n_steps, usize::MAX, f64::NAN));
    for w in boundaries.windows(2) {
        let (from, graph, start) = w[0];
        let to = w[1].0.min(n_steps);
        if from >= to {
            if from >= n_steps {
                break;
            }
            return Err(SimError::SegmentBelowStep { start });
        }
        for slot in table.iter_mut().take(to).skip(from) {
            *slot = graph;
        }
    }
    debug_assert!(table.iter().all(|&g| g != usize::MAX));
    Ok(table)
}

fn pack_state(init: &InitialState, n: usize, n_followers: usize, mode: SimMode) -> DVector<f64> {
    let total = match mode {
        SimMode::StateFeedback => n * (n_followers + 1),
        SimMode::Observer => n * (2 * n_followers + 1),
    };
    let mut v = DVector::zeros(total);
    for (j, &x) in init.leader.iter().enumerate() {
        v[j] = x;
    }
    for (i, f) in init.followers.iter().enumerate() {
        for (j, &x) in f.iter().enumerate() {
            v[n + i * n + j] = x - init.leader[j];
        }
    }
    if mode == SimMode::Observer {
        let base = n * (n_followers + 1);
        for i in 0..n_followers {
            for j in 0..n {
                let delta = v[n + i * n + j];
                let zhat = init
                    .estimates
                    .as_ref()
                    .map(|est| est[i][j])
                    .unwrap_or(0.0);
                v[base + i * n + j] = zhat - delta;
            }
        }
    }
    v
}

fn unpack_state(
    t: f64,
    state: &DVector<f64>,
    n: usize,
    n_followers: usize,
    mode: SimMode,
) -> SimState {
    let leader: Vec<f64> = (0..n).map(|j| state[j]).collect();
    let errors: Vec<Vec<f64>> = (0..n_followers)
        .map(|i| (0..n).map(|j| state[n + i * n + j]).collect())
        .collect();
    let est_errors = (mode == SimMode::Observer).then(|| {
        let base = n * (n_followers + 1);
        (0..n_followers)
            .map(|i| (0..n).map(|j| state[base + i * n + j]).collect())
            .collect()
    });
    SimState {
        t,
        leader,
        errors,
        est_errors,
    }
}

fn rk4_step(m: &DMatrix<f64>, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let k1 = m * x;
    let k2 = m * &(x + &k1 * (h / 2.0));
    let k3 = m * &(x + &k2 * (h / 2.0));
    let k4 = m * &(x + &k3 * h);
    x + &(k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Per-agent re-implementation of the state-feedback protocol, evaluating
/// `u_i = K [ sum_j w_ij (x_j - x_i) + d_i (x0 - x_i) ]` over the active
/// graph's neighborhoods. Exists to cross-check the Kronecker assembly; it
/// integrates absolute follower states and reports the same log layout.
pub fn simulate_protocol_form(
    model: &AgentModel,
    gains: &GainSet,
    schedule: &SwitchingSchedule,
    init: &InitialState,
    opts: &SimOptions,
) -> Result<TrajectoryLog, SimError> {
    if opts.mode != SimMode::StateFeedback {
        return Err(SimError::MissingObserverParts);
    }
    let n = model.state_dim();
    let n_followers = schedule.n_followers();
    check_gain(&gains.k, model.input_dim(), n, "K")?;
    let n_steps = checked_steps(opts)?;
    check_init(init, n, n_followers, opts.mode)?;
    let table = step_graph_table(schedule, 1.0, opts.step, n_steps)?;

    let a = model.a().as_dmatrix().clone();
    let bk = (model.b() * &gains.k).as_dmatrix().clone();

    // Absolute coordinates: [x0; x_1; ...; x_N].
    let mut state = DVector::zeros(n * (n_followers + 1));
    for (j, &x) in init.leader.iter().enumerate() {
        state[j] = x;
    }
    for (i, f) in init.followers.iter().enumerate() {
        for (j, &x) in f.iter().enumerate() {
            state[n + i * n + j] = x;
        }
    }

    let rhs = |graph: &crate::graph::LeaderGraph, x: &DVector<f64>| -> DVector<f64> {
        let mut dx = DVector::zeros(x.len());
        let x0 = x.rows(0, n);
        let dx0 = &a * &x0;
        dx.rows_mut(0, n).copy_from(&dx0);
        let mut coupling = vec![DVector::<f64>::zeros(n); n_followers];
        for (from, to, w) in graph.edges() {
            let xi = x.rows(n + (to - 1) * n, n);
            let xj = x.rows(n + (from - 1) * n, n);
            coupling[to - 1] += (xj - xi) * w;
        }
        for (to, w) in graph.leader_links() {
            let xi = x.rows(n + (to - 1) * n, n);
            coupling[to - 1] += (&x0 - xi) * w;
        }
        for i in 0..n_followers {
            let xi = x.rows(n + i * n, n);
            let dxi = &a * &xi + &bk * &coupling[i];
            dx.rows_mut(n + i * n, n).copy_from(&dxi);
        }
        dx
    };

    let stride = (n_steps / opts.max_samples.max(1)) + 1;
    let mut samples = Vec::new();
    let mut trace = Vec::new();
    let snapshot = |t: f64, state: &DVector<f64>| -> SimState {
        let leader: Vec<f64> = (0..n).map(|j| state[j]).collect();
        let errors = (0..n_followers)
            .map(|i| (0..n).map(|j| state[n + i * n + j] - state[j]).collect())
            .collect();
        SimState {
            t,
            leader,
            errors,
            est_errors: None,
        }
    };
    samples.push(snapshot(0.0, &state));
    trace.push(table[0]);

    for step_idx in 0..n_steps {
        let graph = &schedule.graphs()[table[step_idx]];
        let f = |x: &DVector<f64>| rhs(graph, x);
        let h = opts.step;
        let k1 = f(&state);
        let k2 = f(&(&state + &k1 * (h / 2.0)));
        let k3 = f(&(&state + &k2 * (h / 2.0)));
        let k4 = f(&(&state + &k3 * h));
        state += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let t = (step_idx + 1) as f64 * h;
        let magnitude = state.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if !magnitude.is_finite() || magnitude > opts.overflow_limit {
            return Err(SimError::Overflow {
                t,
                magnitude,
                limit: opts.overflow_limit,
            });
        }
        let is_last = step_idx + 1 == n_steps;
        if (step_idx + 1) % stride == 0 && !is_last {
            samples.push(snapshot(t, &state));
            trace.push(table[step_idx + 1]);
        }
        if is_last {
            samples.push(snapshot(t, &state));
            trace.push(table[step_idx]);
        }
    }

    Ok(TrajectoryLog {
        mode: opts.mode,
        step: opts.step,
        n_followers,
        state_dim: n,
        samples,
        schedule_trace: trace,
    })
}

/// Exponentially decaying input `amplitude * exp(-rate t)` for the cascade
/// probe.
#[derive(Debug, Clone)]
pub struct DecayingInput {
    pub amplitude: Vec<f64>,
    pub rate: f64,
}

/// Outcome of [`cascade_decay_probe`].
#[derive(Debug, Clone)]
pub struct CascadeProbe {
    pub terminal: Vec<f64>,
    pub terminal_norm: f64,
    pub threshold: f64,
    pub decayed: bool,
}

/// Integrates `x' = A x + u(t)` for a Hurwitz `A` under a decaying input and
/// reports whether the terminal norm fell below `threshold`. This is the
/// cascade argument in miniature: a stable block driven by a vanishing
/// signal vanishes itself.
pub fn cascade_decay_probe(
    a: &Matrix,
    input: &DecayingInput,
    x0: &[f64],
    step: f64,
    horizon: f64,
    threshold: f64,
) -> Result<CascadeProbe, SimError> {
    let n = a.rows();
    if !a.is_square() || x0.len() != n || input.amplitude.len() != n {
        return Err(SimError::DimensionMismatch {
            what: "cascade probe shapes",
            expected: n,
            got: x0.len(),
        });
    }
    if !(input.rate.is_finite() && input.rate >= 0.0) {
        return Err(SimError::BadAlpha { alpha: input.rate });
    }
    if !linalg::is_hurwitz(a, 0.0)? {
        return Err(SimError::ProbeNotStable {
            abscissa: linalg::spectral_abscissa(a)?,
        });
    }
    let opts = SimOptions {
        step,
        horizon,
        ..SimOptions::default()
    };
    let n_steps = checked_steps(&opts)?;

    let am = a.as_dmatrix();
    let amp = DVector::from_column_slice(&input.amplitude);
    let rhs = |t: f64, x: &DVector<f64>| -> DVector<f64> { am * x + &amp * (-input.rate * t).exp() };
    let mut x = DVector::from_column_slice(x0);
    for k in 0..n_steps {
        let t = k as f64 * step;
        let k1 = rhs(t, &x);
        let k2 = rhs(t + step / 2.0, &(&x + &k1 * (step / 2.0)));
        let k3 = rhs(t + step / 2.0, &(&x + &k2 * (step / 2.0)));
        let k4 = rhs(t + step, &(&x + &k3 * step));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (step / 6.0);
        let magnitude = x.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if !magnitude.is_finite() || magnitude > opts.overflow_limit {
            return Err(SimError::Overflow {
                t: (k + 1) as f64 * step,
                magnitude,
                limit: opts.overflow_limit,
            });
        }
    }
    let terminal_norm = x.norm();
    Ok(CascadeProbe {
        terminal: x.iter().copied().collect(),
        terminal_norm,
        threshold,
        decayed: terminal_norm < threshold,
    })
}

/// Writes the retained trajectory as `t,series,index,value` rows. Leader
/// components use series `leader` with the component as index; follower
/// quantities use `agent.component` indices with agents numbered from 1.
pub fn write_trajectory_csv<W: Write>(log: &TrajectoryLog, out: &mut W) -> io::Result<()> {
    writeln!(out, "t,series,index,value")?;
    for s in &log.samples {
        for (j, v) in s.leader.iter().enumerate() {
            writeln!(out, "{},leader,{},{}", s.t, j, v)?;
        }
        for (i, d) in s.errors.iter().enumerate() {
            let follower = s.follower(i);
            for (j, v) in follower.iter().enumerate() {
                writeln!(out, "{},follower,{}.{},{}", s.t, i + 1, j, v)?;
            }
            for (j, v) in d.iter().enumerate() {
                writeln!(out, "{},error,{}.{},{}", s.t, i + 1, j, v)?;
            }
        }
        if let Some(est_errors) = &s.est_errors {
            for i in 0..est_errors.len() {
                let estimate = s.estimate(i).expect("observer log has estimates");
                for (j, v) in estimate.iter().enumerate() {
                    writeln!(out, "{},estimate,{}.{},{}", s.t, i + 1, j, v)?;
                }
                for (j, v) in est_errors[i].iter().enumerate() {
                    writeln!(out, "{},estimation_error,{}.{},{}", s.t, i + 1, j, v)?;
                }
            }
        }
    }
    Ok(())
}

/// Writes plot-oriented norms: the consensus error and per-agent error
/// magnitudes, one row per retained sample and series.
pub fn write_plot_csv<W: Write>(log: &TrajectoryLog, out: &mut W) -> io::Result<()> {
    writeln!(out, "t,series,index,value")?;
    for s in &log.samples {
        writeln!(out, "{},consensus,max,{}", s.t, s.consensus_error())?;
        for (i, d) in s.errors.iter().enumerate() {
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            writeln!(out, "{},error_norm,{},{}", s.t, i + 1, norm)?;
        }
        if let Some(e) = s.estimation_error() {
            writeln!(out, "{},estimation_error_norm,max,{}", s.t, e)?;
        }
    }
    Ok(())
}

/// Transition of the schedule trace, for summaries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleSpan {
    pub t: f64,
    pub graph: usize,
}

/// Digest of a simulation run.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub mode: SimMode,
    pub n_followers: usize,
    pub state_dim: usize,
    pub step: f64,
    pub horizon: f64,
    pub initial_consensus_error: f64,
    pub terminal_consensus_error: f64,
    /// Terminal over initial consensus error, with a floor on the
    /// denominator to stay finite.
    pub decay_ratio: f64,
    pub diverged: bool,
    pub terminal_estimation_error: Option<f64>,
    /// Spectral abscissa of each interval's averaged closed loop.
    pub averaged_abscissas: Vec<f64>,
    /// Graph switches among retained samples.
    pub schedule_trace: Vec<ScheduleSpan>,
}

/// Divergence flag threshold on the consensus decay ratio.
pub const DIVERGENCE_RATIO: f64 = 10.0;

/// Builds the run digest: terminal consensus figures, per-interval averaged
/// closed-loop abscissas, and the switch trace.
pub fn run_summary(
    model: &AgentModel,
    gains: &GainSet,
    schedule: &SwitchingSchedule,
    log: &TrajectoryLog,
) -> Result<RunSummary, SimError> {
    let initial = log.samples.first().expect("non-empty log").consensus_error();
    let terminal = log.terminal().consensus_error();
    let ratio = terminal / initial.max(1e-300);
    let mut abscissas = Vec::with_capacity(schedule.intervals().len());
    for k in 0..schedule.intervals().len() {
        let m = match log.mode {
            SimMode::StateFeedback => averaged_system_matrix(model, &gains.k, schedule, k)?,
            SimMode::Observer => {
                let h_bar = schedule.averaged_structure(k)?;
                observer_system_matrix(model, gains, &h_bar)?
            }
        };
        abscissas.push(linalg::spectral_abscissa(&m)?);
    }
    let mut trace = Vec::new();
    let mut last: Option<usize> = None;
    for (s, &g) in log.samples.iter().zip(&log.schedule_trace) {
        if last != Some(g) {
            trace.push(ScheduleSpan { t: s.t, graph: g });
            last = Some(g);
        }
    }
    let horizon = log.terminal().t;
    Ok(RunSummary {
        mode: log.mode,
        n_followers: log.n_followers,
        state_dim: log.state_dim,
        step: log.step,
        horizon,
        initial_consensus_error: initial,
        terminal_consensus_error: terminal,
        decay_ratio: ratio,
        diverged: ratio >= DIVERGENCE_RATIO,
        terminal_estimation_error: log.terminal().estimation_error(),
        averaged_abscissas: abscissas,
        schedule_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::LeaderGraph;
    use crate::mat;
    use crate::schedule::Segment;
    use approx::assert_relative_eq;

    fn single_follower_schedule() -> SwitchingSchedule {
        let mut g = LeaderGraph::new(1).unwrap();
        g.add_leader_link(1, 1.0).unwrap();
        SwitchingSchedule::new(
            vec![g],
            vec![vec![Segment {
                graph: 0,
                dwell: 1.0,
            }]],
            true,
        )
        .unwrap()
    }

    fn scalar_model() -> AgentModel {
        AgentModel::new(mat![[0]], mat![[1]], Some(mat![[1]])).unwrap()
    }

    fn scalar_gains(k: f64) -> GainSet {
        GainSet {
            p: mat![[1]],
            k: mat![[k]],
            p_o: None,
            k_o: None,
            f: None,
            delta_bar: 1.0,
            margin: 0.0,
        }
    }

    #[test]
    fn error_system_matrix_oracles() {
        let m = scalar_model();
        let k = mat![[1.1]];
        let single = error_system_matrix(&m, &k, &mat![[1]]).unwrap();
        assert_eq!(single, mat![[-1.1]]);

        let chain = mat![[1, 0], [-1, 1]];
        let two = error_system_matrix(&m, &k, &chain).unwrap();
        assert_eq!(two, mat![[-1.1, 0.0], [1.1, -1.1]]);
    }

    #[test]
    fn observer_matrices_scalar_oracles() {
        let m = scalar_model();
        let gains = GainSet {
            p: mat![[1]],
            k: mat![[1.1]],
            p_o: Some(mat![[1.1]]),
            k_o: Some(mat![[1.1]]),
            f: Some(mat![[-1]]),
            delta_bar: 1.0,
            margin: 0.0,
        };
        let h = mat![[1]];
        let tri = observer_system_matrix(&m, &gains, &h).unwrap();
        assert_eq!(tri, mat![[-1, -1], [0, -1.1]]);
        let coupled = coupled_observer_matrix(&m, &gains, &h).unwrap();
        assert_eq!(coupled, mat![[0.0, -1.0], [1.1, -2.1]]);

        // Both forms are similar, so they share a spectrum.
        let st = linalg::eigenvalues(&tri).unwrap();
        let sc = linalg::eigenvalues(&coupled).unwrap();
        assert!(st.multiset_eq(&sc, 1e-9));
    }

    #[test]
    fn scalar_decay_matches_exponential() {
        let log = simulate(
            &scalar_model(),
            &scalar_gains(1.1),
            &single_follower_schedule(),
            &InitialState {
                leader: vec![0.0],
                followers: vec![vec![1.0]],
                estimates: None,
            },
            &SimOptions {
                step: 1e-3,
                horizon: 1.0,
                ..SimOptions::default()
            },
        )
        .unwrap();
        let terminal = log.terminal();
        assert_relative_eq!(terminal.t, 1.0, max_relative = 1e-12);
        assert_relative_eq!(
            terminal.errors[0][0],
            (-1.1f64).exp(),
            max_relative = 1e-9
        );
    }

    #[test]
    fn leader_follows_its_own_dynamics() {
        let model = AgentModel::new(mat![[0, 1], [-1, 0]], mat![[0], [1]], None).unwrap();
        let mut g = LeaderGraph::new(1).unwrap();
        g.add_leader_link(1, 1.0).unwrap();
        let schedule = SwitchingSchedule::new(
            vec![g],
            vec![vec![Segment {
                graph: 0,
                dwell: 1.0,
            }]],
            true,
        )
        .unwrap();
        let gains = GainSet {
            p: Matrix::identity(2),
            k: mat![[1, 1]],
            p_o: None,
            k_o: None,
            f: None,
            delta_bar: 1.0,
            margin: 0.0,
        };
        let log = simulate(
            &model,
            &gains,
            &schedule,
            &InitialState {
                leader: vec![1.0, 0.0],
                followers: vec![vec![1.0, 0.0]],
                estimates: None,
            },
            &SimOptions {
                step: 1e-3,
                horizon: 1.0,
                ..SimOptions::default()
            },
        )
        .unwrap();
        let x0 = &log.terminal().leader;
        assert_relative_eq!(x0[0], 1.0f64.cos(), max_relative = 1e-10);
        assert_relative_eq!(x0[1], -(1.0f64.sin()), max_relative = 1e-10);
        // Follower started on the leader and stays there.
        assert!(log.terminal().consensus_error() < 1e-12);
    }

    #[test]
    fn observer_scalar_closed_form() {
        let gains = GainSet {
            p: mat![[1]],
            k: mat![[1.1]],
            p_o: Some(mat![[1.1]]),
            k_o: Some(mat![[1.1]]),
            f: Some(mat![[-1]]),
            delta_bar: 1.0,
            margin: 0.0,
        };
        let log = simulate(
            &scalar_model(),
            &gains,
            &single_follower_schedule(),
            &InitialState {
                leader: vec![0.0],
                followers: vec![vec![1.0]],
                estimates: None,
            },
            &SimOptions {
                step: 1e-3,
                horizon: 1.0,
                mode: SimMode::Observer,
                ..SimOptions::default()
            },
        )
        .unwrap();
        let terminal = log.terminal();
        // e(0) = -1, e' = -1.1 e; delta' = -delta - e.
        let t = 1.0f64;
        let e_expected = -(-1.1 * t).exp();
        let delta_expected = (-t).exp() * (1.0 + (1.0 - (-0.1 * t).exp()) / 0.1);
        assert_relative_eq!(
            terminal.est_errors.as_ref().unwrap()[0][0],
            e_expected,
            max_relative = 1e-9
        );
        assert_relative_eq!(terminal.errors[0][0], delta_expected, max_relative = 1e-8);
        // The estimate recombines as zhat = delta + e.
        let est = terminal.estimate(0).unwrap();
        assert_relative_eq!(
            est[0],
            delta_expected + e_expected,
            max_relative = 1e-7
        );
    }

    #[test]
    fn probe_at_unit_alpha_is_bitwise_identical() {
        let model = scalar_model();
        let gains = scalar_gains(0.9);
        let mut g1 = LeaderGraph::new(1).unwrap();
        g1.add_leader_link(1, 1.0).unwrap();
        let mut g2 = LeaderGraph::new(1).unwrap();
        g2.add_leader_link(1, 2.0).unwrap();
        let schedule = SwitchingSchedule::new(
            vec![g1, g2],
            vec![vec![
                Segment {
                    graph: 0,
                    dwell: 0.5,
                },
                Segment {
                    graph: 1,
                    dwell: 0.5,
                },
            ]],
            true,
        )
        .unwrap();
        let init = InitialState {
            leader: vec![0.0],
            followers: vec![vec![1.0]],
            estimates: None,
        };
        let opts = SimOptions {
            step: 1e-2,
            horizon: 3.0,
            ..SimOptions::default()
        };
        let direct = simulate(&model, &gains, &schedule, &init, &opts).unwrap();
        let probed = fast_switching_probe(&model, &gains, &schedule, 1.0, &init, &opts).unwrap();
        assert_eq!(direct.samples.len(), probed.samples.len());
        for (a, b) in direct.samples.iter().zip(&probed.samples) {
            assert_eq!(a.errors[0][0].to_bits(), b.errors[0][0].to_bits());
        }

        // alpha = 2 halves the pattern period.
        let fast = fast_switching_probe(&model, &gains, &schedule, 2.0, &init, &opts).unwrap();
        assert_eq!(fast.schedule_trace[25], 1);
        assert_eq!(direct.schedule_trace[25], 0);
    }

    #[test]
    fn misaligned_step_is_rejected() {
        let model = scalar_model();
        let gains = scalar_gains(1.0);
        let mut g1 = LeaderGraph::new(1).unwrap();
        g1.add_leader_link(1, 1.0).unwrap();
        let mut g2 = LeaderGraph::new(1).unwrap();
        g2.add_leader_link(1, 2.0).unwrap();
        let schedule = SwitchingSchedule::new(
            vec![g1, g2],
            vec![vec![
                Segment {
                    graph: 0,
                    dwell: 0.5,
                },
                Segment {
                    graph: 1,
                    dwell: 0.5,
                },
            ]],
            true,
        )
        .unwrap();
        let init = InitialState {
            leader: vec![0.0],
            followers: vec![vec![1.0]],
            estimates: None,
        };
        let opts = SimOptions {
            step: 0.3,
            horizon: 3.0,
            ..SimOptions::default()
        };
        assert!(matches!(
            simulate(&model, &gains, &schedule, &init, &opts),
            Err(SimError::StepMisaligned { .. })
        ));
    }

    #[test]
    fn overflow_reports_first_offending_time() {
        let model = AgentModel::new(mat![[1]], mat![[1]], None).unwrap();
        let gains = scalar_gains(1.0);
        let g = LeaderGraph::new(1).unwrap();
        let schedule = SwitchingSchedule::new(
            vec![g],
            vec![vec![Segment {
                graph: 0,
                dwell: 1.0,
            }]],
            true,
        )
        .unwrap();
        let err = simulate(
            &model,
            &gains,
            &schedule,
            &InitialState {
                leader: vec![0.0],
                followers: vec![vec![1.0]],
                estimates: None,
            },
            &SimOptions {
                step: 1e-2,
                horizon: 20.0,
                overflow_limit: 1e3,
                ..SimOptions::default()
            },
        )
        .unwrap_err();
        match err {
            SimError::Overflow { t, magnitude, .. } => {
                // e^t crosses 1e3 just before t = 7.
                assert!(t > 6.8 && t < 7.0, "t = {t}");
                assert!(magnitude > 1e3);
            }
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn downsampling_keeps_terminal_sample() {
        let log = simulate(
            &scalar_model(),
            &scalar_gains(1.1),
            &single_follower_schedule(),
            &InitialState {
                leader: vec![0.0],
                followers: vec![vec![1.0]],
                estimates: None,
            },
            &SimOptions {
                step: 1e-3,
                horizon: 1.0,
                max_samples: 10,
                ..SimOptions::default()
            },
        )
        .unwrap();
        assert!(log.samples.len() <= 11);
        assert_relative_eq!(log.terminal().t, 1.0, max_relative = 1e-12);
        assert_relative_eq!(
            log.terminal().errors[0][0],
            (-1.1f64).exp(),
            max_relative = 1e-9
        );
    }

    #[test]
    fn protocol_form_matches_kronecker_form() {
        let model = AgentModel::new(mat![[0, 1], [-1, 0]], mat![[0], [1]], None).unwrap();
        let gains = GainSet {
            p: Matrix::identity(2),
            k: mat![[0.3, 0.4]],
            p_o: None,
            k_o: None,
            f: None,
            delta_bar: 1.0,
            margin: 0.0,
        };
        let mut g1 = LeaderGraph::new(3).unwrap();
        g1.add_leader_link(1, 1.0).unwrap();
        g1.add_edge(1, 2, 2.0).unwrap();
        let mut g2 = LeaderGraph::new(3).unwrap();
        g2.add_edge(2, 3, 1.0).unwrap();
        g2.add_edge(3, 1, 0.5).unwrap();
        let schedule = SwitchingSchedule::new(
            vec![g1, g2],
            vec![vec![
                Segment {
                    graph: 0,
                    dwell: 0.25,
                },
                Segment {
                    graph: 1,
                    dwell: 0.25,
                },
            ]],
            true,
        )
        .unwrap();
        let init = InitialState {
            leader: vec![1.0, -0.5],
            followers: vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![-2.0, 0.5]],
            estimates: None,
        };
        let opts = SimOptions {
            step: 5e-3,
            horizon: 4.0,
            ..SimOptions::default()
        };
        let kron_log = simulate(&model, &gains, &schedule, &init, &opts).unwrap();
        let proto_log = simulate_protocol_form(&model, &gains, &schedule, &init, &opts).unwrap();
        assert_eq!(kron_log.samples.len(), proto_log.samples.len());
        for (a, b) in kron_log.samples.iter().zip(&proto_log.samples) {
            for i in 0..3 {
                for j in 0..2 {
                    assert_relative_eq!(
                        a.errors[i][j],
                        b.errors[i][j],
                        epsilon = 1e-9,
                        max_relative = 1e-9
                    );
                }
            }
        }
    }

    #[test]
    fn cascade_probe_matches_closed_form() {
        // x' = -x + e^{-t}, x(0) = 1 has solution (1 + t) e^{-t}.
        let probe = cascade_decay_probe(
            &mat![[-1]],
            &DecayingInput {
                amplitude: vec![1.0],
                rate: 1.0,
            },
            &[1.0],
            1e-3,
            10.0,
            1e-2,
        )
        .unwrap();
        let expected = 11.0 * (-10.0f64).exp();
        assert_relative_eq!(probe.terminal[0], expected, max_relative = 1e-9);
        assert!(probe.decayed);

        let unstable = cascade_decay_probe(
            &mat![[1]],
            &DecayingInput {
                amplitude: vec![1.0],
                rate: 1.0,
            },
            &[1.0],
            1e-3,
            1.0,
            1e-2,
        );
        assert!(matches!(unstable, Err(SimError::ProbeNotStable { .. })));
    }

    #[test]
    fn trajectory_csv_golden() {
        let log = simulate(
            &scalar_model(),
            &scalar_gains(1.1),
            &single_follower_schedule(),
            &InitialState {
                leader: vec![0.0],
                followers: vec![vec![1.0]],
                estimates: None,
            },
            &SimOptions {
                step: 0.5,
                horizon: 1.0,
                ..SimOptions::default()
            },
        )
        .unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,series,index,value"));
        assert_eq!(lines.next(), Some("0,leader,0,0"));
        assert_eq!(lines.next(), Some("0,follower,1.0,1"));
        assert_eq!(lines.next(), Some("0,error,1.0,1"));
        // Two more samples follow, at t = 0.5 and t = 1.
        assert_eq!(text.lines().count(), 1 + 3 * 3);

        // Determinism: a rerun produces identical bytes.
        let mut buf2 = Vec::new();
        write_trajectory_csv(&log, &mut buf2).unwrap();
        assert_eq!(text.as_bytes(), buf2);
    }

    #[test]
    fn summary_flags_divergence() {
        let model = AgentModel::new(mat![[0.2]], mat![[1]], None).unwrap();
        let gains = scalar_gains(1.0);
        let empty = LeaderGraph::new(1).unwrap();
        let schedule = SwitchingSchedule::new(
            vec![empty],
            vec![vec![Segment {
                graph: 0,
                dwell: 1.0,
            }]],
            true,
        )
        .unwrap();
        let log = simulate(
            &model,
            &gains,
            &schedule,
            &InitialState {
                leader: vec![0.0],
                followers: vec![vec![1.0]],
                estimates: None,
            },
            &SimOptions {
                step: 1e-2,
                horizon: 20.0,
                ..SimOptions::default()
            },
        )
        .unwrap();
        let summary = run_summary(&model, &gains, &schedule, &log).unwrap();
        assert!(summary.diverged);
        assert!(summary.decay_ratio > 10.0);
        // With no communication the averaged loop inherits the open-loop
        // abscissa.
        assert_relative_eq!(summary.averaged_abscissas[0], 0.2, max_relative = 1e-9);
        assert_eq!(summary.schedule_trace, vec![ScheduleSpan { t: 0.0, graph: 0 }]);
    }
}
