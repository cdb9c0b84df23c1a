//! Consensus gain synthesis.
//!
//! The consensus feedback gain is `K = B^T P` where `P` is the stabilizing
//! solution of
//!
//! ```text
//! A^T P + P A - 2 delta_bar P B B^T P + (1 + margin) I = 0
//! ```
//!
//! so that `P A + A^T P - 2 delta_bar P B B^T P + I = -margin I` certifies
//! the strict Riccati inequality the averaging argument needs. `delta_bar`
//! is the smallest eigenvalue real part the averaged structure matrices are
//! trusted to have; any positive value at or below the schedule estimate is
//! admissible, and smaller values simply yield more conservative gains. The
//! observer gain solves the dual equation with `C` in place of `B^T`, and
//! the local stabilizer solves a unit-weight Riccati equation for the
//! decay-shifted state matrix.
//!
//! The Riccati solver is a Newton iteration (Kleinman's scheme): each step
//! solves a Lyapunov equation for the current closed loop, starting from a
//! stabilizing initial feedback built by Bass's eigenvalue-shift method.
//! Stabilizability and detectability are checked up front by
//! Popov-Belevitch-Hautus rank tests, with complex eigenvalues handled
//! through the real block embedding.

use crate::linalg::{self, Matrix, MatrixError, RANK_TOL, SIGN_TOL};
use thiserror::Error;

/// Relative bound on the final Riccati residual, in Frobenius norm against
/// `max(1, ||P||)`.
pub const RESIDUAL_TOL: f64 = 1e-8;

/// Newton iteration cap. The iteration is quadratically convergent, so
/// hitting this cap means breakdown, not slowness.
pub const MAX_NEWTON_ITERS: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("state matrix must be square, got {rows}x{cols}")]
    StateNotSquare { rows: usize, cols: usize },
    #[error("input matrix has {got} rows, state dimension is {expected}")]
    InputRowMismatch { expected: usize, got: usize },
    #[error("output matrix has {got} columns, state dimension is {expected}")]
    OutputColMismatch { expected: usize, got: usize },
    #[error("model has no output matrix, observer synthesis needs C")]
    NoOutputMap,
    #[error("coupling strength delta_bar must be positive, got {delta_bar}")]
    NonPositiveDelta { delta_bar: f64 },
    #[error("margin must be non-negative and finite, got {margin}")]
    BadMargin { margin: f64 },
    #[error("decay rate must be non-negative and finite, got {decay}")]
    BadDecay { decay: f64 },
    #[error("pair (A, B) is not stabilizable")]
    NotStabilizable,
    #[error("pair (A, C) is not detectable")]
    NotDetectable,
    #[error("pair (A + {decay} I, B) is not stabilizable, the decay demand is too aggressive")]
    ShiftNotStabilizable { decay: f64 },
    #[error("could not build a stabilizing initial feedback")]
    InitializationFailed,
    #[error("Newton iteration did not converge within {iterations} steps (last residual {residual:.3e})")]
    IterationDiverged { iterations: usize, residual: f64 },
    #[error("Riccati residual {residual:.3e} exceeds bound {bound:.3e}")]
    ResidualTooLarge { residual: f64, bound: f64 },
    #[error("Riccati solution is not positive definite (min eigenvalue {min_eig:.3e})")]
    NotPositiveDefinite { min_eig: f64 },
    #[error("closed loop misses the required decay {decay} (abscissa {abscissa:.6e})")]
    DecayNotMet { decay: f64, abscissa: f64 },
    #[error("averaging parameter {name} must be positive and finite, got {value}")]
    BadAveragingParam { name: &'static str, value: f64 },
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// Identical-agent model `x' = A x + B u`, optionally with outputs `y = C x`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentModel {
    a: Matrix,
    b: Matrix,
    c: Option<Matrix>,
}

impl AgentModel {
    pub fn new(a: Matrix, b: Matrix, c: Option<Matrix>) -> Result<Self, SynthError> {
        if !a.is_square() {
            return Err(SynthError::StateNotSquare {
                rows: a.rows(),
                cols: a.cols(),
            });
        }
        if b.rows() != a.rows() {
            return Err(SynthError::InputRowMismatch {
                expected: a.rows(),
                got: b.rows(),
            });
        }
        if let Some(c) = &c {
            if c.cols() != a.rows() {
                return Err(SynthError::OutputColMismatch {
                    expected: a.rows(),
                    got: c.cols(),
                });
            }
        }
        Ok(AgentModel { a, b, c })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn c(&self) -> Option<&Matrix> {
        self.c.as_ref()
    }

    pub fn state_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.cols()
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.c.as_ref().map(Matrix::rows)
    }
}

/// Synthesized gains and their certificates' parameters.
#[derive(Debug, Clone)]
pub struct GainSet {
    pub p: Matrix,
    pub k: Matrix,
    pub p_o: Option<Matrix>,
    pub k_o: Option<Matrix>,
    pub f: Option<Matrix>,
    pub delta_bar: f64,
    pub margin: f64,
}

/// PBH test: `(A, B)` is stabilizable when `[A - lambda I, B]` has full row
/// rank at every eigenvalue with non-negative real part. Complex test points
/// go through the real embedding, whose rank is twice the complex rank.
pub fn check_stabilizable(model: &AgentModel) -> Result<bool, SynthError> {
    pbh_full_rank(model.a(), model.b())
}

/// PBH test on the dual pair `(A^T, C^T)`.
pub fn check_detectable(model: &AgentModel) -> Result<bool, SynthError> {
    let c = model.c().ok_or(SynthError::NoOutputMap)?;
    pbh_full_rank(&model.a().transpose(), &c.transpose())
}

fn pbh_full_rank(a: &Matrix, b: &Matrix) -> Result<bool, SynthError> {
    let n = a.rows();
    let spectrum = linalg::eigenvalues(a)?;
    for z in spectrum.values() {
        if z.re < -SIGN_TOL {
            continue;
        }
        let shifted = a - &Matrix::identity(n).scale(z.re);
        let full_rank = if z.im.abs() <= SIGN_TOL {
            let m = shifted.hstack(b);
            linalg::rank(&m, RANK_TOL)? == n
        } else {
            let x = shifted.hstack(b);
            let y = Matrix::identity(n)
                .scale(-z.im)
                .hstack(&Matrix::zeros(n, b.cols()));
            let m = linalg::realify_complex(&x, &y);
            linalg::rank(&m, RANK_TOL)? == 2 * n
        };
        if !full_rank {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Residual of the consensus Riccati certificate,
/// `P A + A^T P - 2 delta_bar P B B^T P + I`.
pub fn feedback_residual(model: &AgentModel, p: &Matrix, delta_bar: f64) -> Matrix {
    let a = model.a();
    let b = model.b();
    let n = model.state_dim();
    let pbbp = &(&(p * b) * &b.transpose()) * p;
    &(&(&(p * a) + &(&a.transpose() * p)) - &pbbp.scale(2.0 * delta_bar)) + &Matrix::identity(n)
}

/// Residual of the observer certificate,
/// `P A^T + A P - 2 delta_bar P C^T C P + I`.
pub fn observer_residual(model: &AgentModel, p_o: &Matrix, delta_bar: f64) -> Matrix {
    let a = model.a();
    let c = model.c().expect("observer residual needs C");
    let n = model.state_dim();
    let pccp = &(&(p_o * &c.transpose()) * c) * p_o;
    &(&(&(p_o * &a.transpose()) + &(a * p_o)) - &pccp.scale(2.0 * delta_bar))
        + &Matrix::identity(n)
}

/// Solves the consensus Riccati equation and returns `(P, K)` with
/// `K = B^T P`. Fails when the pair is not stabilizable, when the Newton
/// iteration breaks down, or when the computed solution misses its
/// certificate (positive definiteness and residual bound).
pub fn synth_feedback(
    model: &AgentModel,
    delta_bar: f64,
    margin: f64,
) -> Result<(Matrix, Matrix), SynthError> {
    synth_feedback_with_progress(model, delta_bar, margin, &mut |_| {})
}

/// Progress report for one Newton step.
#[derive(Debug, Clone, Copy)]
pub struct NewtonProgress {
    pub iteration: usize,
    pub residual: f64,
    pub step: f64,
}

/// As [`synth_feedback`], reporting each Newton step to `progress`.
pub fn synth_feedback_with_progress(
    model: &AgentModel,
    delta_bar: f64,
    margin: f64,
    progress: &mut dyn FnMut(NewtonProgress),
) -> Result<(Matrix, Matrix), SynthError> {
    check_delta_margin(delta_bar, margin)?;
    if !check_stabilizable(model)? {
        return Err(SynthError::NotStabilizable);
    }
    let a = model.a();
    let b = model.b();
    let n = model.state_dim();
    let s = &(b * &b.transpose()).scale(2.0 * delta_bar);
    let q = Matrix::identity(n).scale(1.0 + margin);
    let p = solve_are(a, s, &q, progress)?;
    certify(&p, &feedback_residual(model, &p, delta_bar), margin)?;
    let k = &b.transpose() * &p;
    Ok((p, k))
}

/// Solves the dual Riccati equation and returns `(P_o, K_o)` with
/// `K_o = P_o C^T`.
pub fn synth_observer(
    model: &AgentModel,
    delta_bar: f64,
    margin: f64,
) -> Result<(Matrix, Matrix), SynthError> {
    check_delta_margin(delta_bar, margin)?;
    let c = model.c().ok_or(SynthError::NoOutputMap)?;
    if !check_detectable(model)? {
        return Err(SynthError::NotDetectable);
    }
    let at = model.a().transpose();
    let n = model.state_dim();
    let s = &(&c.transpose() * c).scale(2.0 * delta_bar);
    let q = Matrix::identity(n).scale(1.0 + margin);
    let p_o = solve_are(&at, s, &q, &mut |_| {})?;
    certify(&p_o, &observer_residual(model, &p_o, delta_bar), margin)?;
    let k_o = &p_o * &c.transpose();
    Ok((p_o, k_o))
}

/// Synthesizes a local stabilizer `F = -B^T X` whose closed loop
/// `A + B F` decays faster than `decay`, from the unit-weight Riccati
/// equation for `A + decay I`.
pub fn synth_stabilizer(model: &AgentModel, decay: f64) -> Result<Matrix, SynthError> {
    if !(decay.is_finite() && decay >= 0.0) {
        return Err(SynthError::BadDecay { decay });
    }
    let a = model.a();
    let b = model.b();
    let n = model.state_dim();
    let shifted = a + &Matrix::identity(n).scale(decay);
    if !pbh_full_rank(&shifted, b)? {
        return Err(SynthError::ShiftNotStabilizable { decay });
    }
    let s = &(b * &b.transpose()).scale(2.0);
    let x = solve_are(&shifted, s, &Matrix::identity(n), &mut |_| {})?;
    let f = (&b.transpose() * &x).scale(-1.0);
    let closed = a + &(b * &f);
    if !linalg::is_hurwitz(&closed, decay)? {
        let abscissa = linalg::spectral_abscissa(&closed)?;
        return Err(SynthError::DecayNotMet { decay, abscissa });
    }
    Ok(f)
}

fn check_delta_margin(delta_bar: f64, margin: f64) -> Result<(), SynthError> {
    if !(delta_bar.is_finite() && delta_bar > 0.0) {
        return Err(SynthError::NonPositiveDelta { delta_bar });
    }
    if !(margin.is_finite() && margin >= 0.0) {
        return Err(SynthError::BadMargin { margin });
    }
    Ok(())
}

fn certify(p: &Matrix, residual: &Matrix, margin: f64) -> Result<(), SynthError> {
    let eigs = p.symmetric_eigenvalues();
    let min_eig = eigs.first().copied().unwrap_or(f64::NEG_INFINITY);
    if min_eig <= SIGN_TOL * eigs.last().copied().unwrap_or(1.0).max(1.0) {
        return Err(SynthError::NotPositiveDefinite { min_eig });
    }
    let n = p.rows();
    let shifted = residual + &Matrix::identity(n).scale(margin);
    let bound = RESIDUAL_TOL * p.frobenius_norm().max(1.0);
    let res_norm = shifted.frobenius_norm();
    if res_norm > bound {
        return Err(SynthError::ResidualTooLarge {
            residual: res_norm,
            bound,
        });
    }
    Ok(())
}

/// Newton-Kleinman solve of `A^T X + X A - X S X + Q = 0` for the
/// stabilizing solution, with `S, Q` symmetric positive semidefinite.
fn solve_are(
    a: &Matrix,
    s: &Matrix,
    q: &Matrix,
    progress: &mut dyn FnMut(NewtonProgress),
) -> Result<Matrix, SynthError> {
    let mut x = initial_stabilizing(a, s)?;
    let mut residual = are_residual_norm(a, s, q, &x);
    for iteration in 0..MAX_NEWTON_ITERS {
        let a_cl = a - &(s * &x);
        // X S X is symmetric exactly; the two GEMMs computing it are not.
        let rhs = (&(&(&x * s) * &x) + q).symmetrized();
        let x_next = linalg::solve_lyapunov(&a_cl, &rhs)?;
        let step = (&x_next - &x).max_abs();
        x = x_next.symmetrized();
        residual = are_residual_norm(a, s, q, &x);
        progress(NewtonProgress {
            iteration,
            residual,
            step,
        });
        let scale = x.max_abs().max(1.0);
        if step <= 1e-13 * scale || residual <= 1e-13 * scale {
            return Ok(x);
        }
    }
    if residual <= RESIDUAL_TOL * x.frobenius_norm().max(1.0) {
        return Ok(x);
    }
    Err(SynthError::IterationDiverged {
        iterations: MAX_NEWTON_ITERS,
        residual,
    })
}

fn are_residual_norm(a: &Matrix, s: &Matrix, q: &Matrix, x: &Matrix) -> f64 {
    let r = &(&(&(&a.transpose() * x) + &(x * a)) - &(&(x * s) * x)) + q;
    r.frobenius_norm()
}

/// Builds `X0` such that `A - S X0` is Hurwitz. A Hurwitz `A` needs no
/// feedback at all. Otherwise Bass's shift: with `beta` beyond the spectral
/// radius, solve `(A + beta I) W + W (A + beta I)^T = 2 S` and take
/// `X0 = W^{-1}`, which places the closed-loop abscissa at `-beta` for
/// controllable pairs. For stabilizable pairs with an uncontrollable stable
/// part, `W` is singular; a small ridge on `W` is then tried over a ladder
/// of strengths and verified by an explicit Hurwitz check.
fn initial_stabilizing(a: &Matrix, s: &Matrix) -> Result<Matrix, SynthError> {
    let n = a.rows();
    if linalg::is_hurwitz(a, 0.0)? {
        return Ok(Matrix::zeros(n, n));
    }
    let beta = a.frobenius_norm() + 1.0;
    let minus_shifted_t = (&(a + &Matrix::identity(n).scale(beta))).transpose().scale(-1.0);
    let w = linalg::solve_lyapunov(&minus_shifted_t, &s.scale(2.0))?;
    let scale = 1.0 + w.max_abs();
    let mut candidates: Vec<Matrix> = Vec::new();
    if let Some(inv) = w.try_inverse() {
        candidates.push(inv.symmetrized());
    }
    for exp in [-12.0f64, -10.0, -8.0, -6.0, -4.0, -2.0] {
        let ridge = &w + &Matrix::identity(n).scale(scale * 10.0f64.powf(exp));
        if let Some(inv) = ridge.try_inverse() {
            candidates.push(inv.symmetrized());
        }
    }
    for x0 in candidates {
        let closed = a - &(s * &x0);
        if linalg::is_hurwitz(&closed, 0.0)? {
            return Ok(x0);
        }
    }
    Err(SynthError::InitializationFailed)
}

/// Parameters of the averaging rate condition: interval length bound `T`,
/// Lipschitz-type constants `kappa_g` and `kappa_v`, and decay reserve `nu`.
/// All must be positive and finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AveragingParams {
    pub t_bound: f64,
    pub kappa_g: f64,
    pub kappa_v: f64,
    pub nu: f64,
}

impl AveragingParams {
    pub fn new(t_bound: f64, kappa_g: f64, kappa_v: f64, nu: f64) -> Result<Self, SynthError> {
        for (name, value) in [
            ("t_bound", t_bound),
            ("kappa_g", kappa_g),
            ("kappa_v", kappa_v),
            ("nu", nu),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(SynthError::BadAveragingParam { name, value });
            }
        }
        Ok(AveragingParams {
            t_bound,
            kappa_g,
            kappa_v,
            nu,
        })
    }
}

/// Solves the switching-rate root equation
///
/// ```text
/// exp(kappa_g T / alpha) (T / alpha) = (1 / kappa_g) (-1 + sqrt(1 + nu / (kappa_v kappa_g T)))
/// ```
///
/// for its unique positive root. Schedules compressed faster than `alpha`
/// times the nominal rate satisfy the averaging bound. The left side is
/// strictly decreasing in `alpha`, so the root is found by bisection on its
/// logarithm, which cannot overflow for small `alpha`.
pub fn solve_alpha_star(params: &AveragingParams) -> f64 {
    let AveragingParams {
        t_bound: t,
        kappa_g,
        kappa_v,
        nu,
    } = *params;
    let rhs = (-1.0 + (1.0 + nu / (kappa_v * kappa_g * t)).sqrt()) / kappa_g;
    let log_gap = |alpha: f64| kappa_g * t / alpha + (t / alpha).ln() - rhs.ln();

    let mut lo = t.min(1.0);
    while log_gap(lo) < 0.0 {
        lo *= 0.5;
    }
    let mut hi = t.max(1.0);
    while log_gap(hi) > 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if log_gap(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    let alpha = 0.5 * (lo + hi);
    let residual = ((kappa_g * t / alpha).exp() * (t / alpha) - rhs).abs();
    assert!(
        residual <= 1e-8 * rhs.max(1e-300),
        "root equation residual {residual} too large"
    );
    alpha
}
