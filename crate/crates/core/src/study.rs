//! Convergence-order study against the RK4 oracle and a deterministic
//! parallel map for parameter sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::phi_h;
use crate::discretize::{build_fd_interval, sample_initial, DiscretizeError, Profile};
use crate::oracle::{OracleError, Rk4, Source, SELF_CONVERGENCE_TOL};
use crate::stepper::{RunError, SolverConfig, StepOutcome, Stepper};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("configuration rejected: {0}")]
    Rejected(String),
    #[error(transparent)]
    Discretize(#[from] DiscretizeError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("oracle failure")]
    Oracle(#[from] OracleError),
}

impl StudyError {
    pub fn is_oracle(&self) -> bool {
        matches!(self, StudyError::Oracle(_))
    }
}

/// One rung of the order ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub n_interior: usize,
    pub h: f64,
    pub lambda: f64,
    /// `max_j max_i |u_i^j - U_i(t^j)|` over steps with `t^j <= t_end`.
    pub max_error: f64,
    /// `log(e_prev / e) / log(h_prev / h)`; absent on the first rung.
    pub order: Option<f64>,
    pub steps: u64,
    /// Oracle change when its substep is halved.
    pub oracle_rel_change: f64,
}

/// Parameters of [`order_study`].
#[derive(Debug, Clone, PartialEq)]
pub struct OrderStudy {
    /// Interior node counts of the FD interval ladder.
    pub ladder: Vec<usize>,
    pub profile: Profile,
    /// Solver settings; `lambda` is replaced by `h^2` on each rung.
    pub solver: SolverConfig,
    pub t_end: f64,
    /// Oracle substep as a fraction of `h^2`.
    pub oracle_dt_factor: f64,
}

/// Runs the scheme on each rung with `lambda = h^2` and measures the nodewise
/// error against the RK4 oracle advanced in lockstep on the same mesh.
///
/// The oracle is advanced twice, with substeps `dt` and `dt/2`; the rung is
/// rejected as an oracle failure if the two disagree by more than
/// [`SELF_CONVERGENCE_TOL`] relative.
pub fn order_study(study: &OrderStudy) -> Result<Vec<OrderRow>, StudyError> {
    if study.ladder.is_empty() {
        return Err(StudyError::Rejected("empty ladder".into()));
    }
    if !(study.t_end > 0.0) {
        return Err(StudyError::Rejected(format!("t_end = {}", study.t_end)));
    }
    let mut rows: Vec<OrderRow> = Vec::with_capacity(study.ladder.len());
    for &n in &study.ladder {
        let sys = build_fd_interval(n)?;
        let u0 = sample_initial(&sys, &study.profile)?;
        let p = study.solver.p;
        let phi0 = phi_h(&sys, u0.values(), p);
        if phi0 < 0.0 {
            return Err(StudyError::Rejected(format!(
                "initial functional is negative ({phi0:e}); the data blows up, \
                 so there is no smooth solution to converge to"
            )));
        }
        let h = 1.0 / (n as f64 + 1.0);
        let cfg = SolverConfig {
            lambda: h * h,
            max_steps: u64::MAX,
            w_stop: f64::INFINITY,
            ..study.solver
        };
        let dt = study.oracle_dt_factor * h * h;
        let mut stepper = Stepper::new(&sys, &cfg, u0.values())?;
        let mut coarse = u0.values().to_vec();
        let mut fine = u0.values().to_vec();
        let mut rk_c = Rk4::new(&sys, Source::Power(p));
        let mut rk_f = Rk4::new(&sys, Source::Power(p));
        let mut t_prev = 0.0;
        let mut max_error = 0.0f64;
        let mut oracle_rel_change = 0.0f64;
        loop {
            match stepper.step()? {
                StepOutcome::Advanced { .. } => {}
                StepOutcome::Terminated(reason) => {
                    return Err(StudyError::Rejected(format!(
                        "run ended ({reason}) before t_end"
                    )))
                }
            }
            let t = stepper.t();
            if t > study.t_end {
                break;
            }
            rk_c.advance(&mut coarse, t_prev, t - t_prev, dt)?;
            rk_f.advance(&mut fine, t_prev, t - t_prev, 0.5 * dt)?;
            t_prev = t;
            let scale = fine.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let mut change = 0.0f64;
            for (i, &u) in stepper.state().iter().enumerate() {
                max_error = max_error.max((u - fine[i]).abs());
                change = change.max((coarse[i] - fine[i]).abs());
            }
            oracle_rel_change = oracle_rel_change.max(change / scale);
        }
        if !(oracle_rel_change < SELF_CONVERGENCE_TOL) {
            return Err(OracleError::NotSelfConverged {
                rel_change: oracle_rel_change,
            }
            .into());
        }
        let order = rows
            .last()
            .map(|prev| (prev.max_error / max_error).ln() / (prev.h / h).ln());
        rows.push(OrderRow {
            n_interior: n,
            h,
            lambda: h * h,
            max_error,
            order,
            steps: stepper.j(),
            oracle_rel_change,
        });
    }
    Ok(rows)
}

/// Maps `f` over `items` on a pool of `threads` workers (0 means rayon's
/// default); results keep the input order.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool");
    pool.install(|| items.par_iter().map(&f).collect())
}
