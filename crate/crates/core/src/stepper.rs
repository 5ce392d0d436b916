//! Adaptive explicit and implicit time stepping for `M U' = -A U + M U^p`.
//!
//! The step length follows `tau_j = lambda / (w^j)^p` with
//! `w^j = sum_k m_k u_k^j`. Runs end on a `w` threshold, a step cap, an
//! overflow guard or steady behaviour; every ending is a [`Termination`]
//! value, never a panic.

use std::collections::VecDeque;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::phi_h;
use crate::discretize::DiscreteSystem;
use crate::spectral::{eta_estimate, gershgorin_bound, ShiftedSolver, SpectralError};
use crate::sum::NeumaierSum;

/// Safety factor applied to the computed spectral bound in the Lyapunov
/// restriction.
pub const ETA_INFLATION: f64 = 1.01;

/// Relative change below which a step counts towards steady detection.
pub const STEADY_REL_TOL: f64 = 1e-14;
/// Consecutive quiet steps required for a steady verdict.
pub const STEADY_STEPS: usize = 10;

/// Strided snapshots kept before the stride doubles.
pub const MAX_STRIDED_SNAPSHOTS: usize = 1000;
/// Number of final states always kept.
pub const TAIL_SNAPSHOTS: usize = 200;
/// Ratio between consecutive geometric snapshot indices.
pub const GEOMETRIC_SNAPSHOT_RATIO: f64 = 1.02;

const MAX_HALVINGS: u32 = 2100;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("initial data: {0}")]
    InitialData(String),
    #[error("lambda = {lambda} violates the initial restriction lambda < {bound}")]
    InitialLambda { lambda: f64, bound: f64 },
    #[error("state lost positivity at step {step}, node {node} (value {value})")]
    LostPositivity { step: u64, node: usize, value: f64 },
    #[error("step restriction could not be met at step {step} after {halvings} halvings")]
    RestrictionUnsatisfiable { step: u64, halvings: u32 },
    #[error("linear solve failed at step {step}")]
    Solve {
        step: u64,
        #[source]
        source: SpectralError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Explicit,
    Implicit,
}

impl std::str::FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "explicit" => Ok(Scheme::Explicit),
            "implicit" => Ok(Scheme::Implicit),
            other => Err(format!("unknown scheme '{other}'")),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Explicit => "explicit",
            Scheme::Implicit => "implicit",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub p: f64,
    pub lambda: f64,
    pub scheme: Scheme,
    pub w_stop: f64,
    pub max_steps: u64,
    /// Halve the explicit step until `tau < min_i m_i / a_ii`.
    pub enforce_comparison_restriction: bool,
    /// Check `tau_j < 2 / (p (w^{j+1})^{p-1} + 1.01 eta)` after each explicit
    /// step and halve on violation.
    pub enforce_lyapunov_restriction: bool,
    /// Refuse explicit runs whose `lambda` fails the initial restriction.
    pub require_initial_lambda_bound: bool,
    /// Largest admissible `u_k^p`.
    pub overflow_guard: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            p: 2.0,
            lambda: 1e-3,
            scheme: Scheme::Explicit,
            w_stop: 1e4,
            max_steps: 10_000_000,
            enforce_comparison_restriction: true,
            enforce_lyapunov_restriction: true,
            require_initial_lambda_bound: true,
            overflow_guard: 1e300,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::InvalidConfig(m));
        if !(self.p > 1.0 && self.p.is_finite()) {
            return bad(format!("p = {} (need p > 1)", self.p));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda = {} (need lambda > 0)", self.lambda));
        }
        if !(self.w_stop > 0.0) {
            return bad(format!("w_stop = {} (need w_stop > 0)", self.w_stop));
        }
        if self.max_steps < 1 {
            return bad("max_steps must be at least 1".into());
        }
        if !(self.overflow_guard > 1.0) {
            return bad(format!("overflow_guard = {}", self.overflow_guard));
        }
        Ok(())
    }
}

/// `x^p` with exact multiplication for small integer exponents.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Power {
    Two,
    Three,
    General(f64),
}

impl Power {
    pub(crate) fn new(p: f64) -> Self {
        if p == 2.0 {
            Power::Two
        } else if p == 3.0 {
            Power::Three
        } else {
            Power::General(p)
        }
    }

    #[inline]
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Power::Two => x * x,
            Power::Three => x * x * x,
            Power::General(p) => x.powf(p),
        }
    }
}

/// `w = sum_k m_k u_k`, accumulated in ascending index order.
pub fn w_norm(sys: &DiscreteSystem, u: &[f64]) -> f64 {
    let mut w = 0.0;
    for (m, x) in sys.mass().iter().zip(u) {
        w += m * x;
    }
    w
}

/// `tau = lambda / w^p`.
pub fn step_size(cfg: &SolverConfig, w: f64) -> f64 {
    debug_assert!(w > 0.0, "step_size needs w > 0, got {w}");
    cfg.lambda / Power::new(cfg.p).apply(w)
}

/// Result of [`check_initial_lambda`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InitialLambdaCheck {
    pub pass: bool,
    /// `min_i (m_i / a_ii) * (w^0)^p`.
    pub bound: f64,
}

/// Evaluates `lambda < min_i (m_i / a_ii) (w^0)^p`.
pub fn check_initial_lambda(
    sys: &DiscreteSystem,
    cfg: &SolverConfig,
    u0: &[f64],
) -> InitialLambdaCheck {
    let bound = sys.min_mass_over_diag() * Power::new(cfg.p).apply(w_norm(sys, u0));
    InitialLambdaCheck {
        pass: cfg.lambda < bound,
        bound,
    }
}

/// Some `u_k^p` would exceed the overflow guard.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverflowSignal {
    pub node: usize,
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error("u^p exceeds the overflow guard at node {}", .0.node)]
    Overflow(OverflowSignal),
    #[error(transparent)]
    Solve(#[from] SpectralError),
}

fn overflow_limit(cfg: &SolverConfig) -> f64 {
    cfg.overflow_guard.powf(1.0 / cfg.p)
}

fn check_overflow(u: &[f64], limit: f64) -> Result<(), OverflowSignal> {
    match u.iter().position(|&x| x > limit) {
        Some(node) => Err(OverflowSignal { node }),
        None => Ok(()),
    }
}

fn explicit_into(sys: &DiscreteSystem, pow: Power, u: &[f64], tau: f64, out: &mut [f64]) {
    let a = sys.stiffness();
    let m = sys.mass();
    for i in 0..u.len() {
        let (cols, vals) = a.row(i);
        let mut au = 0.0;
        for (&c, &v) in cols.iter().zip(vals) {
            au += v * u[c];
        }
        out[i] = u[i] + tau * (-au / m[i] + pow.apply(u[i]));
    }
}

fn implicit_into(
    sys: &DiscreteSystem,
    pow: Power,
    solver: &mut ShiftedSolver,
    u: &[f64],
    tau: f64,
    rhs: &mut [f64],
    out: &mut [f64],
) -> Result<(), SpectralError> {
    let m = sys.mass();
    for i in 0..u.len() {
        rhs[i] = m[i] * (u[i] + tau * pow.apply(u[i]));
    }
    solver.solve(sys, tau, rhs, out)
}

/// One explicit step: `U + tau (-M^{-1} A U + U^p)`.
pub fn step_explicit(
    sys: &DiscreteSystem,
    cfg: &SolverConfig,
    u: &[f64],
    tau: f64,
) -> Result<Vec<f64>, StepError> {
    check_overflow(u, overflow_limit(cfg)).map_err(StepError::Overflow)?;
    let mut out = vec![0.0; u.len()];
    explicit_into(sys, Power::new(cfg.p), u, tau, &mut out);
    Ok(out)
}

/// One implicit step: solves `(M + tau A) X = M U + tau M U^p`.
pub fn step_implicit(
    sys: &DiscreteSystem,
    cfg: &SolverConfig,
    u: &[f64],
    tau: f64,
) -> Result<Vec<f64>, StepError> {
    check_overflow(u, overflow_limit(cfg)).map_err(StepError::Overflow)?;
    let mut out = vec![0.0; u.len()];
    let mut rhs = vec![0.0; u.len()];
    let mut solver = ShiftedSolver::new(sys);
    implicit_into(
        sys,
        Power::new(cfg.p),
        &mut solver,
        u,
        tau,
        &mut rhs,
        &mut out,
    )?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    WThreshold,
    MaxSteps,
    /// Steady detection fired, or the state collapsed onto zero.
    Steady,
    OverflowGuard,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Termination::WThreshold => "w_threshold",
            Termination::MaxSteps => "max_steps",
            Termination::Steady => "steady",
            Termination::OverflowGuard => "overflow_guard",
        };
        f.write_str(s)
    }
}

/// Where the spectral bound in the Lyapunov restriction came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaSource {
    PowerIteration,
    Gershgorin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaInfo {
    pub estimate: f64,
    /// `estimate * 1.01`, the value entering the restriction.
    pub used: f64,
    pub source: EtaSource,
}

/// Computes the restriction's spectral bound, falling back to Gershgorin.
pub fn eta_for_restriction(sys: &DiscreteSystem) -> EtaInfo {
    match eta_estimate(sys, 1e-8, 200_000) {
        Ok(e) => EtaInfo {
            estimate: e.eta,
            used: e.eta * ETA_INFLATION,
            source: EtaSource::PowerIteration,
        },
        Err(_) => {
            let g = gershgorin_bound(sys);
            EtaInfo {
                estimate: g,
                used: g * ETA_INFLATION,
                source: EtaSource::Gershgorin,
            }
        }
    }
}

/// Per-step scalars of a run. Record `j` describes `U^j`; `tau` and
/// `halvings` describe the step from `j` to `j + 1` (for the last record,
/// the nominal next step).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScalars {
    pub j: u64,
    pub t: f64,
    pub tau: f64,
    pub w: f64,
    pub phi: f64,
    pub max_u: f64,
    pub argmax: u32,
    pub halvings: u32,
}

/// Full state at step `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub j: u64,
    pub t: f64,
    pub u: Vec<f64>,
}

/// Outcome of a single [`Stepper::step`] call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Advanced { tau: f64, halvings: u32 },
    Terminated(Termination),
}

/// Step-by-step driver; [`run`] wraps it with recording.
pub struct Stepper<'a> {
    sys: &'a DiscreteSystem,
    cfg: SolverConfig,
    pow: Power,
    u: Vec<f64>,
    next: Vec<f64>,
    rhs: Vec<f64>,
    solver: Option<ShiftedSolver>,
    t: NeumaierSum,
    j: u64,
    w: f64,
    eta: Option<EtaInfo>,
    min_m_over_a: f64,
    u_limit: f64,
    quiet_steps: usize,
    last_halvings: u32,
    total_halvings: u64,
}

impl<'a> Stepper<'a> {
    pub fn new(sys: &'a DiscreteSystem, cfg: &SolverConfig, u0: &[f64]) -> Result<Self, RunError> {
        cfg.validate()?;
        if u0.len() != sys.n() {
            return Err(RunError::InitialData(format!(
                "{} values for {} nodes",
                u0.len(),
                sys.n()
            )));
        }
        if let Some(k) = u0.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(RunError::InitialData(format!(
                "u0[{k}] = {} is not positive",
                u0[k]
            )));
        }
        let explicit = cfg.scheme == Scheme::Explicit;
        if explicit && cfg.require_initial_lambda_bound {
            let chk = check_initial_lambda(sys, cfg, u0);
            if !chk.pass {
                return Err(RunError::InitialLambda {
                    lambda: cfg.lambda,
                    bound: chk.bound,
                });
            }
        }
        let eta = (explicit && cfg.enforce_lyapunov_restriction).then(|| eta_for_restriction(sys));
        let solver = (!explicit).then(|| ShiftedSolver::new(sys));
        let n = sys.n();
        Ok(Self {
            sys,
            cfg: *cfg,
            pow: Power::new(cfg.p),
            u: u0.to_vec(),
            next: vec![0.0; n],
            rhs: vec![0.0; n],
            solver,
            t: NeumaierSum::default(),
            j: 0,
            w: w_norm(sys, u0),
            eta,
            min_m_over_a: sys.min_mass_over_diag(),
            u_limit: overflow_limit(cfg),
            quiet_steps: 0,
            last_halvings: 0,
            total_halvings: 0,
        })
    }

    pub fn state(&self) -> &[f64] {
        &self.u
    }
    pub fn t(&self) -> f64 {
        self.t.value()
    }
    pub fn j(&self) -> u64 {
        self.j
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn eta(&self) -> Option<EtaInfo> {
        self.eta
    }
    pub fn total_halvings(&self) -> u64 {
        self.total_halvings
    }
    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    /// Nominal `tau = lambda / w^p` for the current state.
    pub fn nominal_tau(&self) -> f64 {
        self.cfg.lambda / self.pow.apply(self.w)
    }

    /// Checks the stopping rules, then advances one step.
    pub fn step(&mut self) -> Result<StepOutcome, RunError> {
        if self.w >= self.cfg.w_stop {
            return Ok(StepOutcome::Terminated(Termination::WThreshold));
        }
        if self.quiet_steps >= STEADY_STEPS {
            return Ok(StepOutcome::Terminated(Termination::Steady));
        }
        if self.j >= self.cfg.max_steps {
            return Ok(StepOutcome::Terminated(Termination::MaxSteps));
        }
        if check_overflow(&self.u, self.u_limit).is_err() {
            return Ok(StepOutcome::Terminated(Termination::OverflowGuard));
        }
        let mut tau = self.nominal_tau();
        if !(self.w > 0.0) || !tau.is_finite() {
            // Collapse onto the zero steady state.
            return Ok(StepOutcome::Terminated(Termination::Steady));
        }
        let explicit = self.cfg.scheme == Scheme::Explicit;
        let mut halvings = 0u32;
        if explicit && self.cfg.enforce_comparison_restriction {
            while tau >= self.min_m_over_a {
                tau *= 0.5;
                halvings += 1;
            }
        }
        loop {
            if halvings > MAX_HALVINGS || tau == 0.0 {
                return Err(RunError::RestrictionUnsatisfiable {
                    step: self.j,
                    halvings,
                });
            }
            if explicit {
                explicit_into(self.sys, self.pow, &self.u, tau, &mut self.next);
            } else {
                let solver = self.solver.as_mut().expect("implicit runs own a solver");
                implicit_into(
                    self.sys,
                    self.pow,
                    solver,
                    &self.u,
                    tau,
                    &mut self.rhs,
                    &mut self.next,
                )
                .map_err(|source| RunError::Solve {
                    step: self.j,
                    source,
                })?;
            }
            match self.eta {
                Some(eta) if explicit => {
                    let w_next = w_norm(self.sys, &self.next);
                    let bound = 2.0 / (self.cfg.p * w_next.powf(self.cfg.p - 1.0) + eta.used);
                    if tau < bound {
                        break;
                    }
                    tau *= 0.5;
                    halvings += 1;
                }
                _ => break,
            }
        }
        if let Some(node) = self.next.iter().position(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(RunError::LostPositivity {
                step: self.j + 1,
                node,
                value: self.next[node],
            });
        }

        let mut diff = 0.0f64;
        let mut size = 0.0f64;
        for (a, b) in self.u.iter().zip(&self.next) {
            diff = diff.max((a - b).abs());
            size = size.max(a.abs());
        }
        if diff < STEADY_REL_TOL * size {
            self.quiet_steps += 1;
        } else {
            self.quiet_steps = 0;
        }
        std::mem::swap(&mut self.u, &mut self.next);
        self.w = w_norm(self.sys, &self.u);
        self.t += tau;
        self.j += 1;
        self.last_halvings = halvings;
        self.total_halvings += u64::from(halvings);
        Ok(StepOutcome::Advanced { tau, halvings })
    }
}

/// Lowest index attaining the maximum.
fn max_argmax(u: &[f64]) -> (f64, u32) {
    let mut best = (f64::NEG_INFINITY, 0u32);
    for (k, &v) in u.iter().enumerate() {
        if v > best.0 {
            best = (v, k as u32);
        }
    }
    best
}

/// How much per-step history [`run_with`] keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarHistory {
    /// One record per step.
    Full,
    /// One record per step for the last `n` steps, strided before that
    /// (at most [`MAX_STRIDED_SCALARS`] older records).
    Tail(usize),
}

/// Strided scalar records kept in [`ScalarHistory::Tail`] mode.
pub const MAX_STRIDED_SCALARS: usize = 100_000;

/// Recording options of [`run_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordOptions {
    pub scalars: ScalarHistory,
}

impl Default for RecordOptions {
    fn default() -> Self {
        Self {
            scalars: ScalarHistory::Full,
        }
    }
}

/// Step-to-step behaviour of the functional, checked on every step of a run
/// whatever the recording policy.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LyapunovStats {
    pub steps_checked: u64,
    /// Steps with `phi_{j+1} > phi_j + 1e-10 |phi_j|`.
    pub relative_violations: u64,
    /// Steps with `phi_{j+1} > phi_j (1 + 1e-10) + 1e-12`.
    pub affine_violations: u64,
    /// Largest `(phi_{j+1} - phi_j) / max(|phi_j|, 1e-300)`.
    pub worst_relative_increase: f64,
}

impl LyapunovStats {
    fn observe(&mut self, prev: f64, next: f64) {
        self.steps_checked += 1;
        if next > prev + 1e-10 * prev.abs() {
            self.relative_violations += 1;
        }
        if next > prev * (1.0 + 1e-10) + 1e-12 {
            self.affine_violations += 1;
        }
        let inc = (next - prev) / prev.abs().max(1e-300);
        if self.steps_checked == 1 || inc > self.worst_relative_increase {
            self.worst_relative_increase = inc;
        }
    }
}

/// First step with a negative functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirstNegative {
    pub j: u64,
    pub t: f64,
}

/// Recorded run: per-step scalars (possibly thinned), thinned full states
/// and statistics gathered on every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub config: SolverConfig,
    pub n: usize,
    /// Sorted by `j`, unique; always ends with the final state.
    pub scalars: Vec<StepScalars>,
    /// Sorted by `j`, unique.
    pub snapshots: Vec<Snapshot>,
    pub termination: Termination,
    pub eta: Option<EtaInfo>,
    pub total_halvings: u64,
    pub first_negative_phi: Option<FirstNegative>,
    pub lyapunov: LyapunovStats,
}

impl Trajectory {
    /// Index `J` of the last recorded state.
    pub fn final_index(&self) -> u64 {
        self.scalars.last().map(|s| s.j).unwrap_or(0)
    }

    pub fn final_scalars(&self) -> &StepScalars {
        self.scalars
            .last()
            .expect("trajectory has at least one record")
    }

    pub fn final_state(&self) -> &[f64] {
        &self.snapshots.last().expect("final state is always kept").u
    }

    pub fn phi_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.scalars.iter().map(|s| s.phi)
    }

    /// Scalar record of step `j`, if kept.
    pub fn scalars_at(&self, j: u64) -> Option<&StepScalars> {
        self.scalars
            .binary_search_by_key(&j, |s| s.j)
            .ok()
            .map(|k| &self.scalars[k])
    }

    /// Whether every step from 0 to `J` has a scalar record.
    pub fn has_full_scalars(&self) -> bool {
        self.scalars.len() as u64 == self.final_index() + 1
    }
}

/// Records whose index `j` is a multiple of a stride that doubles whenever
/// more than `cap` are held.
struct Strided<T> {
    stride: u64,
    cap: usize,
    items: Vec<(u64, T)>,
}

impl<T> Strided<T> {
    fn new(cap: usize) -> Self {
        Self {
            stride: 1,
            cap,
            items: Vec::new(),
        }
    }

    fn wants(&self, j: u64) -> bool {
        j.is_multiple_of(self.stride)
    }

    fn push(&mut self, j: u64, item: T) {
        self.items.push((j, item));
        if self.items.len() > self.cap {
            self.stride *= 2;
            let s = self.stride;
            self.items.retain(|x| x.0 % s == 0);
        }
    }
}

/// Keeps strided, geometric and tail snapshots during a run.
struct SnapshotKeeper {
    strided: Strided<Snapshot>,
    geometric: Vec<Snapshot>,
    next_geometric: f64,
    tail: VecDeque<Snapshot>,
}

impl SnapshotKeeper {
    fn new() -> Self {
        Self {
            strided: Strided::new(MAX_STRIDED_SNAPSHOTS),
            geometric: Vec::new(),
            next_geometric: 1.0,
            tail: VecDeque::with_capacity(TAIL_SNAPSHOTS + 1),
        }
    }

    fn offer(&mut self, j: u64, t: f64, u: &[f64]) {
        let snap = || Snapshot {
            j,
            t,
            u: u.to_vec(),
        };
        if self.strided.wants(j) {
            self.strided.push(j, snap());
        }
        if j as f64 >= self.next_geometric {
            self.geometric.push(snap());
            while self.next_geometric <= j as f64 {
                self.next_geometric = (self.next_geometric * GEOMETRIC_SNAPSHOT_RATIO).ceil();
            }
        }
        if self.tail.len() == TAIL_SNAPSHOTS {
            self.tail.pop_front();
        }
        self.tail.push_back(snap());
    }

    fn finish(self) -> Vec<Snapshot> {
        let mut all: Vec<Snapshot> = self
            .strided
            .items
            .into_iter()
            .map(|x| x.1)
            .chain(self.geometric)
            .chain(self.tail)
            .collect();
        all.sort_by_key(|s| s.j);
        all.dedup_by_key(|s| s.j);
        all
    }
}

enum ScalarKeeper {
    Full(Vec<StepScalars>),
    Tail {
        keep: usize,
        strided: Strided<StepScalars>,
        tail: VecDeque<StepScalars>,
    },
}

impl ScalarKeeper {
    fn new(history: ScalarHistory) -> Self {
        match history {
            ScalarHistory::Full => ScalarKeeper::Full(Vec::new()),
            ScalarHistory::Tail(keep) => ScalarKeeper::Tail {
                keep: keep.max(1),
                strided: Strided::new(MAX_STRIDED_SCALARS),
                tail: VecDeque::new(),
            },
        }
    }

    fn push(&mut self, s: StepScalars) {
        match self {
            ScalarKeeper::Full(v) => v.push(s),
            ScalarKeeper::Tail {
                keep,
                strided,
                tail,
            } => {
                if tail.len() == *keep {
                    let old = tail.pop_front().expect("nonempty tail");
                    if strided.wants(old.j) {
                        strided.push(old.j, old);
                    }
                }
                tail.push_back(s);
            }
        }
    }

    fn finish(self) -> Vec<StepScalars> {
        match self {
            ScalarKeeper::Full(v) => v,
            ScalarKeeper::Tail { strided, tail, .. } => {
                strided.items.into_iter().map(|x| x.1).chain(tail).collect()
            }
        }
    }
}

/// Runs the scheme from `u0` until a stopping rule fires, keeping one scalar
/// record per step.
pub fn run(sys: &DiscreteSystem, cfg: &SolverConfig, u0: &[f64]) -> Result<Trajectory, RunError> {
    run_with(sys, cfg, u0, &RecordOptions::default())
}

/// [`run`] with a choice of recording policy.
pub fn run_with(
    sys: &DiscreteSystem,
    cfg: &SolverConfig,
    u0: &[f64],
    opts: &RecordOptions,
) -> Result<Trajectory, RunError> {
    let mut stepper = Stepper::new(sys, cfg, u0)?;
    let mut snaps = SnapshotKeeper::new();
    let mut scalars = ScalarKeeper::new(opts.scalars);
    let mut lyapunov = LyapunovStats::default();
    let mut first_negative = None;
    let record = |st: &Stepper, tau: f64, halvings: u32| {
        let (max_u, argmax) = max_argmax(st.state());
        StepScalars {
            j: st.j(),
            t: st.t(),
            tau,
            w: st.w(),
            phi: phi_h(sys, st.state(), cfg.p),
            max_u,
            argmax,
            halvings,
        }
    };
    let mut pending = record(&stepper, stepper.nominal_tau(), 0);
    if pending.phi < 0.0 {
        first_negative = Some(FirstNegative { j: 0, t: 0.0 });
    }
    snaps.offer(0, 0.0, stepper.state());
    let termination = loop {
        match stepper.step()? {
            StepOutcome::Advanced { tau, halvings } => {
                pending.tau = tau;
                pending.halvings = halvings;
                let next = record(&stepper, stepper.nominal_tau(), 0);
                lyapunov.observe(pending.phi, next.phi);
                if first_negative.is_none() && next.phi < 0.0 {
                    first_negative = Some(FirstNegative {
                        j: next.j,
                        t: next.t,
                    });
                }
                scalars.push(pending);
                pending = next;
                snaps.offer(stepper.j(), stepper.t(), stepper.state());
            }
            StepOutcome::Terminated(reason) => break reason,
        }
    };
    scalars.push(pending);
    Ok(Trajectory {
        config: *cfg,
        n: sys.n(),
        scalars: scalars.finish(),
        snapshots: snaps.finish(),
        termination,
        eta: stepper.eta(),
        total_halvings: stepper.total_halvings(),
        first_negative_phi: first_negative,
        lyapunov,
    })
}

/// Result of [`replay`].
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    /// `states[j]` is `U^j`; `states[0]` is the initial data.
    pub states: Vec<Vec<f64>>,
    /// Set when the overflow guard stopped the replay early.
    pub overflow: bool,
}

/// Applies the configured scheme with a prescribed step sequence.
pub fn replay(
    sys: &DiscreteSystem,
    cfg: &SolverConfig,
    u0: &[f64],
    taus: &[f64],
) -> Result<Replay, StepError> {
    let pow = Power::new(cfg.p);
    let limit = overflow_limit(cfg);
    let mut solver = ShiftedSolver::new(sys);
    let mut rhs = vec![0.0; sys.n()];
    let mut states = vec![u0.to_vec()];
    for &tau in taus {
        let u = states.last().expect("nonempty");
        if check_overflow(u, limit).is_err() {
            return Ok(Replay {
                states,
                overflow: true,
            });
        }
        let mut out = vec![0.0; sys.n()];
        match cfg.scheme {
            Scheme::Explicit => explicit_into(sys, pow, u, tau, &mut out),
            Scheme::Implicit => implicit_into(sys, pow, &mut solver, u, tau, &mut rhs, &mut out)?,
        }
        states.push(out);
    }
    Ok(Replay {
        states,
        overflow: false,
    })
}

/// Column header of the trajectory CSV.
pub const CSV_HEADER: &str = "j,t,tau,w,phi,max_u,argmax";

/// Writes per-step scalars; floats carry 17 significant digits.
pub fn write_csv<W: Write>(traj: &Trajectory, mut out: W) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for s in &traj.scalars {
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            s.j, s.t, s.tau, s.w, s.phi, s.max_u, s.argmax
        )?;
    }
    Ok(())
}

/// Reads a trajectory CSV written by [`write_csv`]. Halving counts are not
/// part of the format and come back as zero.
pub fn read_csv<R: BufRead>(input: R) -> io::Result<Vec<StepScalars>> {
    let bad = |line: usize, msg: &str| {
        io::Error::new(io::ErrorKind::InvalidData, format!("line {line}: {msg}"))
    };
    let mut lines = input.lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == CSV_HEADER => {}
        _ => return Err(bad(1, "missing or unexpected header")),
    }
    let mut out = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(idx + 2, "expected 7 fields"));
        }
        let num = |k: usize| f[k].trim().parse::<f64>().map_err(|_| bad(idx + 2, f[k]));
        out.push(StepScalars {
            j: f[0].trim().parse().map_err(|_| bad(idx + 2, f[0]))?,
            t: num(1)?,
            tau: num(2)?,
            w: num(3)?,
            phi: num(4)?,
            max_u: num(5)?,
            argmax: f[6].trim().parse().map_err(|_| bad(idx + 2, f[6]))?,
            halvings: 0,
        });
    }
    Ok(out)
}

/// One JSON object per snapshot: `{"j": .., "t": .., "u": [..]}`.
pub fn write_snapshots_jsonl<W: Write>(traj: &Trajectory, mut out: W) -> io::Result<()> {
    for s in &traj.snapshots {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_snapshots_jsonl<R: BufRead>(input: R) -> io::Result<Vec<Snapshot>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
