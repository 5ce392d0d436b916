//! Independent reference computations: fixed-step RK4 for the semidiscrete
//! system, closed-form ODE blow-up, dense eigenvalues and solves, and
//! manufactured-solution consistency residuals.

use std::f64::consts::PI;

use thiserror::Error;

use crate::discretize::DiscreteSystem;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("reference state left the admissible range at t = {t} (node {node}, value {value})")]
    InvalidState { t: f64, node: usize, value: f64 },
    #[error("reference run not self-converged: relative change {rel_change:e} on step doubling")]
    NotSelfConverged { rel_change: f64 },
    #[error("dense oracle limited to {max} unknowns, got {n}")]
    TooLarge { n: usize, max: usize },
    #[error("singular matrix in dense solve")]
    Singular,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Reaction term of the reference ODE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Source {
    /// `u^p`.
    Power(f64),
    /// No reaction: the linear heat semigroup.
    None,
}

/// Output of a fixed-step reference integration.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSolution {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Largest substep used.
    pub step: f64,
    pub method: &'static str,
}

/// Relative endpoint change on step doubling accepted for oracle runs.
pub const SELF_CONVERGENCE_TOL: f64 = 1e-10;

/// Classical four-stage Runge-Kutta for `U' = -M^{-1} A U + s(U)`.
pub struct Rk4<'a> {
    sys: &'a DiscreteSystem,
    source: Source,
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl<'a> Rk4<'a> {
    pub fn new(sys: &'a DiscreteSystem, source: Source) -> Self {
        let n = sys.n();
        Self {
            sys,
            source,
            k: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            tmp: vec![0.0; n],
        }
    }

    fn rhs(sys: &DiscreteSystem, source: Source, u: &[f64], out: &mut [f64]) {
        sys.stiffness().apply(u, out);
        let m = sys.mass();
        for i in 0..u.len() {
            let r = match source {
                Source::Power(p) => u[i].powf(p),
                Source::None => 0.0,
            };
            out[i] = -out[i] / m[i] + r;
        }
    }

    /// One step of length `dt`, in place.
    pub fn step(&mut self, u: &mut [f64], dt: f64) {
        let n = u.len();
        let (sys, src) = (self.sys, self.source);
        let [k1, k2, k3, k4] = &mut self.k;
        Self::rhs(sys, src, u, k1);
        for i in 0..n {
            self.tmp[i] = u[i] + 0.5 * dt * k1[i];
        }
        Self::rhs(sys, src, &self.tmp, k2);
        for i in 0..n {
            self.tmp[i] = u[i] + 0.5 * dt * k2[i];
        }
        Self::rhs(sys, src, &self.tmp, k3);
        for i in 0..n {
            self.tmp[i] = u[i] + dt * k3[i];
        }
        Self::rhs(sys, src, &self.tmp, k4);
        for i in 0..n {
            u[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }

    /// Advances by `span` using `ceil(span / max_dt)` equal substeps; `t` is
    /// the start time, used only in error reports.
    pub fn advance(
        &mut self,
        u: &mut [f64],
        t: f64,
        span: f64,
        max_dt: f64,
    ) -> Result<(), OracleError> {
        if span <= 0.0 {
            return Ok(());
        }
        let steps = (span / max_dt).ceil().max(1.0) as u64;
        let dt = span / steps as f64;
        for s in 0..steps {
            self.step(u, dt);
            if let Some(node) = u.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(OracleError::InvalidState {
                    t: t + (s + 1) as f64 * dt,
                    node,
                    value: u[node],
                });
            }
        }
        Ok(())
    }
}

/// Integrates to `t_end` with `n_steps` fixed steps; records start and end.
pub fn reference_integrate(
    sys: &DiscreteSystem,
    source: Source,
    u0: &[f64],
    t_end: f64,
    n_steps: u64,
) -> Result<ReferenceSolution, OracleError> {
    if !(t_end > 0.0) || n_steps == 0 {
        return Err(OracleError::InvalidArgument(format!(
            "t_end = {t_end}, n_steps = {n_steps}"
        )));
    }
    let dt = t_end / n_steps as f64;
    let mut u = u0.to_vec();
    let mut rk = Rk4::new(sys, source);
    for s in 0..n_steps {
        rk.step(&mut u, dt);
        if let Some(node) = u.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(OracleError::InvalidState {
                t: (s + 1) as f64 * dt,
                node,
                value: u[node],
            });
        }
    }
    Ok(ReferenceSolution {
        times: vec![0.0, t_end],
        states: vec![u0.to_vec(), u],
        step: dt,
        method: "rk4",
    })
}

/// Integrates through sorted `checkpoints`, landing on each exactly with
/// substeps no longer than `max_dt`.
pub fn reference_integrate_at(
    sys: &DiscreteSystem,
    source: Source,
    u0: &[f64],
    checkpoints: &[f64],
    max_dt: f64,
) -> Result<ReferenceSolution, OracleError> {
    if checkpoints.windows(2).any(|w| !(w[1] > w[0]))
        || checkpoints.first().is_some_and(|&t| t < 0.0)
    {
        return Err(OracleError::InvalidArgument(
            "checkpoints must be nonnegative and strictly increasing".into(),
        ));
    }
    let mut u = u0.to_vec();
    let mut rk = Rk4::new(sys, source);
    let mut t = 0.0;
    let mut states = Vec::with_capacity(checkpoints.len());
    for &c in checkpoints {
        rk.advance(&mut u, t, c - t, max_dt)?;
        t = c;
        states.push(u.clone());
    }
    Ok(ReferenceSolution {
        times: checkpoints.to_vec(),
        states,
        step: max_dt,
        method: "rk4",
    })
}

fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

/// Runs with `n_steps` and `2 n_steps` and accepts the finer endpoint only
/// if the two agree to [`SELF_CONVERGENCE_TOL`].
pub fn self_converged(
    sys: &DiscreteSystem,
    source: Source,
    u0: &[f64],
    t_end: f64,
    n_steps: u64,
) -> Result<(ReferenceSolution, f64), OracleError> {
    let coarse = reference_integrate(sys, source, u0, t_end, n_steps)?;
    let fine = reference_integrate(sys, source, u0, t_end, 2 * n_steps)?;
    let rel = max_rel_diff(&coarse.states[1], &fine.states[1]);
    if rel < SELF_CONVERGENCE_TOL {
        Ok((fine, rel))
    } else {
        Err(OracleError::NotSelfConverged { rel_change: rel })
    }
}

/// Closed-form blow-up of `u' = u^p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeBlowup {
    pub u0: f64,
    pub p: f64,
    /// `u0^{1-p} / (p - 1)`.
    pub t_blowup: f64,
}

impl OdeBlowup {
    /// `((p - 1)(T - t))^{-1/(p-1)}`, with `u(0) = u0` returned exactly.
    pub fn eval(&self, t: f64) -> f64 {
        if t == 0.0 {
            return self.u0;
        }
        ((self.p - 1.0) * (self.t_blowup - t)).powf(-1.0 / (self.p - 1.0))
    }
}

pub fn exact_ode_blowup(u0: f64, p: f64) -> Result<OdeBlowup, OracleError> {
    if !(u0 > 0.0 && p > 1.0) {
        return Err(OracleError::InvalidArgument(format!("u0 = {u0}, p = {p}")));
    }
    Ok(OdeBlowup {
        u0,
        p,
        t_blowup: u0.powf(1.0 - p) / (p - 1.0),
    })
}

/// Largest system handled by the dense oracles.
pub const DENSE_MAX_N: usize = 200;

/// All eigenvalues of `A phi = lambda M phi`, ascending, by cyclic Jacobi
/// sweeps on `M^{-1/2} A M^{-1/2}`.
pub fn dense_generalized_eigs(sys: &DiscreteSystem) -> Result<Vec<f64>, OracleError> {
    let n = sys.n();
    if n > DENSE_MAX_N {
        return Err(OracleError::TooLarge {
            n,
            max: DENSE_MAX_N,
        });
    }
    let s: Vec<f64> = sys.mass().iter().map(|m| 1.0 / m.sqrt()).collect();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        let (cols, vals) = sys.stiffness().row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            a[i * n + j] = s[i] * v * s[j];
        }
    }
    let frob: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * frob {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - sn * akq;
                    a[k * n + q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - sn * aqk;
                    a[q * n + k] = sn * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(|x, y| x.total_cmp(y));
    Ok(eig)
}

/// Gaussian elimination with partial pivoting on a row-major `n x n` matrix.
pub fn dense_solve(matrix: &[f64], rhs: &[f64]) -> Result<Vec<f64>, OracleError> {
    let n = rhs.len();
    if matrix.len() != n * n {
        return Err(OracleError::InvalidArgument(format!(
            "matrix has {} entries for {n} unknowns",
            matrix.len()
        )));
    }
    let mut a = matrix.to_vec();
    let mut b = rhs.to_vec();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs()))
            .expect("nonempty range");
        if a[piv * n + col] == 0.0 {
            return Err(OracleError::Singular);
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            b.swap(piv, col);
        }
        for r in col + 1..n {
            let f = a[r * n + col] / a[col * n + col];
            if f != 0.0 {
                for k in col..n {
                    a[r * n + k] -= f * a[col * n + k];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a[i * n + k] * x[k];
        }
        x[i] = s / a[i * n + i];
    }
    Ok(x)
}

/// `M + tau A` as a dense row-major matrix.
pub fn dense_shifted(sys: &DiscreteSystem, tau: f64) -> Vec<f64> {
    let n = sys.n();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        let (cols, vals) = sys.stiffness().row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            a[i * n + j] = tau * v;
        }
        a[i * n + i] += sys.mass()[i];
    }
    a
}

/// Manufactured solutions with closed-form source `f = w_t - Laplacian w`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Manufactured {
    /// `prod_a sin(pi x_a) e^{-t}`.
    SineExp,
    /// `prod_a sin(pi x_a) (1 + t^2)`.
    SinePoly,
    /// `x_1`; violates the boundary condition at `x_1 = 1`.
    Affine,
}

impl Manufactured {
    fn sines(x: &[f64]) -> f64 {
        x.iter().map(|&xi| (PI * xi).sin()).product()
    }

    pub fn w(&self, x: &[f64], t: f64) -> f64 {
        match self {
            Manufactured::SineExp => Self::sines(x) * (-t).exp(),
            Manufactured::SinePoly => Self::sines(x) * (1.0 + t * t),
            Manufactured::Affine => x[0],
        }
    }

    pub fn w_t(&self, x: &[f64], t: f64) -> f64 {
        match self {
            Manufactured::SineExp => -Self::sines(x) * (-t).exp(),
            Manufactured::SinePoly => Self::sines(x) * 2.0 * t,
            Manufactured::Affine => 0.0,
        }
    }

    pub fn source(&self, x: &[f64], t: f64) -> f64 {
        let d = x.len() as f64;
        match self {
            Manufactured::SineExp | Manufactured::SinePoly => {
                self.w_t(x, t) + d * PI * PI * self.w(x, t)
            }
            Manufactured::Affine => 0.0,
        }
    }
}

/// Scaled residuals `rho_i / m_i` and their maximum magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct Consistency {
    pub scaled: Vec<f64>,
    pub max: f64,
}

/// `rho_i = m_i w_t(x_i) + sum_k a_ik w(x_k) - m_i f(x_i)` at time `t`.
pub fn consistency_residual(sys: &DiscreteSystem, w: Manufactured, t: f64) -> Consistency {
    let vals: Vec<f64> = sys.nodes().map(|x| w.w(x, t)).collect();
    let mut aw = vec![0.0; sys.n()];
    sys.stiffness().apply(&vals, &mut aw);
    let scaled: Vec<f64> = sys
        .nodes()
        .enumerate()
        .map(|(i, x)| {
            let m = sys.mass()[i];
            (m * w.w_t(x, t) + aw[i] - m * w.source(x, t)) / m
        })
        .collect();
    let max = scaled.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Consistency { scaled, max }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::{
        build_fd_cube, build_fd_interval, build_fem_interval, sample_initial, Profile,
    };
    use crate::spectral::{eta_estimate, solve_shifted};

    #[test]
    fn steady_state_is_fixed() {
        let s = build_fd_interval(1).unwrap();
        let r = reference_integrate(&s, Source::Power(2.0), &[8.0], 1.0, 10_000).unwrap();
        assert!((r.states[1][0] - 8.0).abs() < 1e-10 * 8.0);
    }

    #[test]
    fn linear_probe_decays() {
        let s = build_fd_interval(6).unwrap();
        let u0 = sample_initial(
            &s,
            &Profile::Bump {
                amplitude: 1.0,
                width: 0.3,
            },
        )
        .unwrap();
        let cps: Vec<f64> = (1..=10).map(|k| 0.02 * k as f64).collect();
        let r = reference_integrate_at(&s, Source::None, u0.values(), &cps, 1e-3).unwrap();
        let mut prev = u0.values().iter().fold(0.0f64, |a, &v| a.max(v));
        for st in &r.states {
            let m = st.iter().fold(0.0f64, |a, &v| a.max(v));
            assert!(m < prev);
            prev = m;
        }
    }

    #[test]
    fn decay_oracle_self_converges() {
        let s = build_fd_interval(5).unwrap();
        let u0 = sample_initial(&s, &Profile::Sine { amplitude: 0.1 }).unwrap();
        let (r, rel) = self_converged(&s, Source::Power(2.0), u0.values(), 1.0, 10_000).unwrap();
        assert!(rel < SELF_CONVERGENCE_TOL);
        // Dominated by the slowest mode e^{-mu t}, mu = 36 * 4 sin^2(pi/12).
        let mu = 4.0 * 36.0 * (PI / 12.0).sin().powi(2);
        let ratio = r.states[1][2] / u0.values()[2];
        assert!((ratio / (-mu).exp() - 1.0).abs() < 0.02);
    }

    #[test]
    fn not_self_converged_is_reported() {
        let s = build_fd_interval(5).unwrap();
        let u0 = sample_initial(&s, &Profile::Sine { amplitude: 0.1 }).unwrap();
        assert!(matches!(
            self_converged(&s, Source::Power(2.0), u0.values(), 1.0, 50),
            Err(OracleError::NotSelfConverged { .. }) | Err(OracleError::InvalidState { .. })
        ));
    }

    #[test]
    fn overflow_aborts() {
        let s = build_fd_interval(1).unwrap();
        assert!(matches!(
            reference_integrate(&s, Source::Power(2.0), &[50.0], 1.0, 1000),
            Err(OracleError::InvalidState { .. })
        ));
    }

    #[test]
    fn ode_closed_form() {
        let b = exact_ode_blowup(1.0, 2.0).unwrap();
        assert_eq!(b.t_blowup, 1.0);
        assert!((b.eval(0.5) - 2.0).abs() < 1e-15);
        let b = exact_ode_blowup(1.0, 3.0).unwrap();
        assert_eq!(b.t_blowup, 0.5);
        assert!((b.eval(0.375) - 2.0).abs() < 1e-14);
        for (u0, p) in [(0.3, 1.7), (12.0, 2.5), (1e-3, 4.0)] {
            assert_eq!(exact_ode_blowup(u0, p).unwrap().eval(0.0), u0);
        }
        assert!(exact_ode_blowup(0.0, 2.0).is_err());
    }

    #[test]
    fn dense_eigs() {
        let single = dense_generalized_eigs(&build_fd_interval(1).unwrap()).unwrap();
        assert_eq!(single.len(), 1);
        assert!((single[0] - 8.0).abs() <= 4.0 * f64::EPSILON * 8.0);
        let e = dense_generalized_eigs(&build_fd_interval(3).unwrap()).unwrap();
        let expect = [9.372583002030478, 32.0, 54.62741699796952];
        for (a, b) in e.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12 * b);
        }
        let fem = build_fem_interval(&[0.0, 0.2, 0.3, 0.65, 0.7, 1.0]).unwrap();
        assert!(dense_generalized_eigs(&fem)
            .unwrap()
            .iter()
            .all(|&v| v >= 0.0));
        assert!(dense_generalized_eigs(&build_fd_interval(201).unwrap()).is_err());
    }

    #[test]
    fn closed_form_spectrum_fd20() {
        let n = 20;
        let h = 1.0 / 21.0;
        let e = dense_generalized_eigs(&build_fd_interval(n).unwrap()).unwrap();
        for (k, v) in e.iter().enumerate() {
            let exact = 4.0 / (h * h) * ((k + 1) as f64 * PI / (2.0 * 21.0)).sin().powi(2);
            assert!((v - exact).abs() < 1e-11 * exact);
        }
    }

    #[test]
    fn power_iteration_matches_dense() {
        for sys in [
            build_fd_interval(17).unwrap(),
            build_fd_interval(50).unwrap(),
            build_fd_cube(2, 5).unwrap(),
            build_fem_interval(&[0.0, 0.05, 0.3, 0.31, 0.5, 0.9, 1.0]).unwrap(),
        ] {
            let dense = *dense_generalized_eigs(&sys).unwrap().last().unwrap();
            let est = eta_estimate(&sys, 1e-9, 500_000).unwrap().eta;
            assert!((est - dense).abs() <= 1e-6 * dense, "{est} vs {dense}");
        }
    }

    #[test]
    fn dense_solve_matches_shifted_solve() {
        let s = build_fd_cube(2, 4).unwrap();
        let rhs: Vec<f64> = (0..s.n()).map(|k| 1.0 + (k as f64).sin()).collect();
        let x = dense_solve(&dense_shifted(&s, 0.3), &rhs).unwrap();
        let y = solve_shifted(&s, 0.3, &rhs).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
        assert_eq!(
            dense_solve(&[0.0; 4], &[1.0, 1.0]),
            Err(OracleError::Singular)
        );
    }

    #[test]
    fn consistency_second_order() {
        // h = 1/(n+1) halves along 9, 19, 39, 79.
        let mut prev: Option<f64> = None;
        for n in [9, 19, 39, 79] {
            let s = build_fd_interval(n).unwrap();
            let rho = consistency_residual(&s, Manufactured::SineExp, 0.3).max;
            if let Some(p) = prev {
                let r = p / rho;
                assert!((3.6..=4.4).contains(&r), "n={n}: ratio {r}");
                assert!(rho < p);
            }
            prev = Some(rho);
        }
    }

    #[test]
    fn consistency_poly_family_and_cube() {
        let a =
            consistency_residual(&build_fd_interval(9).unwrap(), Manufactured::SinePoly, 0.7).max;
        let b =
            consistency_residual(&build_fd_interval(19).unwrap(), Manufactured::SinePoly, 0.7).max;
        assert!((3.6..=4.4).contains(&(a / b)));
        let a = consistency_residual(&build_fd_cube(2, 9).unwrap(), Manufactured::SineExp, 0.1).max;
        let b =
            consistency_residual(&build_fd_cube(2, 19).unwrap(), Manufactured::SineExp, 0.1).max;
        assert!((3.6..=4.4).contains(&(a / b)));
    }

    #[test]
    fn affine_is_exact_off_boundary() {
        let s = build_fd_interval(12).unwrap();
        let c = consistency_residual(&s, Manufactured::Affine, 0.0);
        for v in &c.scaled[..s.n() - 1] {
            assert!(v.abs() <= 1e-12, "{v}");
        }
    }
}
