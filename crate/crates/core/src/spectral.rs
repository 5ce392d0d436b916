//! Generalized spectral bound of the pencil `A φ = η M φ` and the shifted
//! solve `(M + τ A) X = rhs` used by the implicit step.

use thiserror::Error;

use crate::discretize::DiscreteSystem;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error(
        "power iteration did not converge in {iterations} iterations \
         (residual {residual:e}); Gershgorin bound is {gershgorin}"
    )]
    NotConverged {
        iterations: usize,
        residual: f64,
        estimate: f64,
        gershgorin: f64,
    },
    #[error("shifted solve broke down after {iterations} iterations (relative residual {relative_residual:e})")]
    Breakdown {
        iterations: usize,
        relative_residual: f64,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Largest generalized eigenvalue estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    pub eta: f64,
    /// `||A x - eta M x||_{M^-1} / ||x||_M` at the final iterate.
    pub residual: f64,
    pub iterations: usize,
}

/// `max_i (sum_k |a_ik|) / m_i`, an upper bound on every generalized eigenvalue.
pub fn gershgorin_bound(sys: &DiscreteSystem) -> f64 {
    (0..sys.n())
        .map(|i| {
            let s: f64 = sys.stiffness().row(i).1.iter().map(|v| v.abs()).sum();
            s / sys.mass()[i]
        })
        .fold(0.0, f64::max)
}

/// Deterministic power-iteration start: `+1/-1` by a 2-colouring of the
/// adjacency graph (breadth-first from the lowest index of each component).
///
/// For a bipartite graph with `a_ij <= 0` the top eigenvector has exactly this
/// sign pattern, so the start is never `M`-orthogonal to it. On odd cycles the
/// colouring falls back to index parity.
pub fn start_vector(sys: &DiscreteSystem) -> Vec<f64> {
    let n = sys.n();
    let mut colour = vec![0i8; n];
    let mut bipartite = true;
    let mut queue = std::collections::VecDeque::new();
    for root in 0..n {
        if colour[root] != 0 {
            continue;
        }
        colour[root] = 1;
        queue.push_back(root);
        while let Some(k) = queue.pop_front() {
            for j in sys.neighbors(k) {
                if colour[j] == 0 {
                    colour[j] = -colour[k];
                    queue.push_back(j);
                } else if colour[j] == colour[k] {
                    bipartite = false;
                }
            }
        }
    }
    if bipartite {
        colour.into_iter().map(f64::from).collect()
    } else {
        (0..n)
            .map(|k| if k % 2 == 0 { 1.0 } else { -1.0 })
            .collect()
    }
}

/// Power iteration on `M^{-1} A` in the `M` inner product.
///
/// Stops once the eigen-residual satisfies
/// `||A x - eta M x||_{M^-1} <= tol * eta * ||x||_M`, which places `eta`
/// within relative `tol` of an eigenvalue of the pencil.
pub fn eta_estimate(
    sys: &DiscreteSystem,
    tol: f64,
    max_iter: usize,
) -> Result<SpectralEstimate, SpectralError> {
    if !(tol > 0.0) {
        return Err(SpectralError::InvalidArgument(format!("tol = {tol}")));
    }
    let n = sys.n();
    let m = sys.mass();
    let a = sys.stiffness();
    let mut x = start_vector(sys);
    let mut ax = vec![0.0; n];
    normalize_m(&mut x, m);

    let mut eta = 0.0;
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        a.apply(&x, &mut ax);
        // ||x||_M = 1, so the Rayleigh quotient is <Ax, x>.
        eta = dot(&ax, &x);
        let mut r2 = 0.0;
        for i in 0..n {
            let r = ax[i] - eta * m[i] * x[i];
            r2 += r * r / m[i];
        }
        residual = r2.sqrt();
        if residual <= tol * eta.abs() || eta == 0.0 && residual == 0.0 {
            return Ok(SpectralEstimate {
                eta,
                residual,
                iterations: it,
            });
        }
        for i in 0..n {
            x[i] = ax[i] / m[i];
        }
        normalize_m(&mut x, m);
    }
    Err(SpectralError::NotConverged {
        iterations: max_iter,
        residual,
        estimate: eta,
        gershgorin: gershgorin_bound(sys),
    })
}

fn normalize_m(x: &mut [f64], m: &[f64]) {
    let norm = x
        .iter()
        .zip(m)
        .map(|(xi, mi)| mi * xi * xi)
        .sum::<f64>()
        .sqrt();
    if norm > 0.0 {
        x.iter_mut().for_each(|xi| *xi /= norm);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Size up to which [`solve_shifted`] factorizes directly.
pub const DIRECT_SOLVE_MAX_N: usize = 64;

/// Relative residual required of every shifted solve.
pub const SOLVE_TOL: f64 = 1e-12;

/// Solves `(M + tau A) X = rhs`.
///
/// Banded Cholesky for `N <= 64`, diagonally preconditioned conjugate
/// gradients otherwise; either way the returned `X` satisfies
/// `||(M + tau A) X - rhs||_2 <= 1e-12 ||rhs||_2`. For `tau > 1` the
/// iterative path checks this on the equivalent system in `Y = tau X`.
pub fn solve_shifted(
    sys: &DiscreteSystem,
    tau: f64,
    rhs: &[f64],
) -> Result<Vec<f64>, SpectralError> {
    let mut out = vec![0.0; sys.n()];
    ShiftedSolver::new(sys).solve(sys, tau, rhs, &mut out)?;
    Ok(out)
}

/// Forces the direct path regardless of `N`.
pub fn solve_shifted_direct(
    sys: &DiscreteSystem,
    tau: f64,
    rhs: &[f64],
) -> Result<Vec<f64>, SpectralError> {
    let mut out = vec![0.0; sys.n()];
    let mut s = ShiftedSolver::new(sys);
    s.check_args(sys, tau, rhs)?;
    s.solve_direct(sys, tau, rhs, &mut out)?;
    Ok(out)
}

/// Forces the conjugate-gradient path regardless of `N`.
pub fn solve_shifted_cg(
    sys: &DiscreteSystem,
    tau: f64,
    rhs: &[f64],
) -> Result<Vec<f64>, SpectralError> {
    let mut out = vec![0.0; sys.n()];
    let mut s = ShiftedSolver::new(sys);
    s.check_args(sys, tau, rhs)?;
    s.solve_cg(sys, tau, rhs, &mut out)?;
    Ok(out)
}

/// Reusable workspace for repeated shifted solves on one system.
#[derive(Debug, Clone)]
pub struct ShiftedSolver {
    n: usize,
    band: usize,
    factor: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    d: Vec<f64>,
    q: Vec<f64>,
    diag_a: Vec<f64>,
}

impl ShiftedSolver {
    pub fn new(sys: &DiscreteSystem) -> Self {
        let n = sys.n();
        let band = sys.stiffness().bandwidth();
        let factor = if n <= DIRECT_SOLVE_MAX_N {
            vec![0.0; n * (band + 1)]
        } else {
            Vec::new()
        };
        Self {
            n,
            band,
            factor,
            r: vec![0.0; n],
            z: vec![0.0; n],
            d: vec![0.0; n],
            q: vec![0.0; n],
            diag_a: sys.stiffness().diagonal(),
        }
    }

    fn check_args(&self, sys: &DiscreteSystem, tau: f64, rhs: &[f64]) -> Result<(), SpectralError> {
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(SpectralError::InvalidArgument(format!("tau = {tau}")));
        }
        if rhs.len() != sys.n() || sys.n() != self.n {
            return Err(SpectralError::InvalidArgument(format!(
                "rhs has length {}, system has {} unknowns",
                rhs.len(),
                sys.n()
            )));
        }
        if rhs.iter().any(|v| !v.is_finite()) {
            return Err(SpectralError::InvalidArgument("non-finite rhs".into()));
        }
        Ok(())
    }

    /// Solves into `out`; see [`solve_shifted`].
    pub fn solve(
        &mut self,
        sys: &DiscreteSystem,
        tau: f64,
        rhs: &[f64],
        out: &mut [f64],
    ) -> Result<(), SpectralError> {
        self.check_args(sys, tau, rhs)?;
        if tau == 0.0 {
            for ((o, r), m) in out.iter_mut().zip(rhs).zip(sys.mass()) {
                *o = r / m;
            }
            return Ok(());
        }
        if self.n <= DIRECT_SOLVE_MAX_N {
            self.solve_direct(sys, tau, rhs, out)
        } else {
            self.solve_cg(sys, tau, rhs, out)
        }
    }

    /// `r = rhs - (M + tau A) x`; returns `||r||_2`.
    fn residual(&mut self, sys: &DiscreteSystem, tau: f64, rhs: &[f64], x: &[f64]) -> f64 {
        self.scaled_residual(sys, 1.0, tau, rhs, x)
    }

    /// `r = rhs - (s M + t A) x`; returns `||r||_2`.
    fn scaled_residual(
        &mut self,
        sys: &DiscreteSystem,
        s: f64,
        t: f64,
        rhs: &[f64],
        x: &[f64],
    ) -> f64 {
        sys.stiffness().apply(x, &mut self.q);
        let m = sys.mass();
        for i in 0..self.n {
            self.r[i] = rhs[i] - (s * m[i] * x[i] + t * self.q[i]);
        }
        norm2(&self.r)
    }

    fn solve_direct(
        &mut self,
        sys: &DiscreteSystem,
        tau: f64,
        rhs: &[f64],
        out: &mut [f64],
    ) -> Result<(), SpectralError> {
        if self.factor.len() != self.n * (self.band + 1) {
            self.factor = vec![0.0; self.n * (self.band + 1)];
        }
        self.factorize(sys, tau)?;
        out.copy_from_slice(rhs);
        self.substitute(out);

        let target = SOLVE_TOL * norm2(rhs);
        let mut res = self.residual(sys, tau, rhs, out);
        // Iterative refinement in case the factorization lost digits.
        for _ in 0..3 {
            if res <= target {
                return Ok(());
            }
            let mut corr = self.r.clone();
            self.substitute(&mut corr);
            for (o, c) in out.iter_mut().zip(&corr) {
                *o += c;
            }
            res = self.residual(sys, tau, rhs, out);
        }
        if res <= target {
            Ok(())
        } else {
            Err(SpectralError::Breakdown {
                iterations: 0,
                relative_residual: res / norm2(rhs).max(f64::MIN_POSITIVE),
            })
        }
    }

    /// Lower band factor `L` with `L L^T = M + tau A`, row-major with `band + 1`
    /// entries per row; entry `(i, j)` lives at `i * (band + 1) + j + band - i`.
    fn factorize(&mut self, sys: &DiscreteSystem, tau: f64) -> Result<(), SpectralError> {
        let (n, b) = (self.n, self.band);
        let w = b + 1;
        let l = &mut self.factor;
        l.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            let (cols, vals) = sys.stiffness().row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if j <= i {
                    l[i * w + j + b - i] = tau * v;
                }
            }
            l[i * w + b] += sys.mass()[i];
        }
        for i in 0..n {
            let lo = i.saturating_sub(b);
            for j in lo..=i {
                let mut s = l[i * w + j + b - i];
                let klo = lo.max(j.saturating_sub(b));
                for k in klo..j {
                    s -= l[i * w + k + b - i] * l[j * w + k + b - j];
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(SpectralError::Breakdown {
                            iterations: 0,
                            relative_residual: f64::NAN,
                        });
                    }
                    l[i * w + b] = s.sqrt();
                } else {
                    l[i * w + j + b - i] = s / l[j * w + b];
                }
            }
        }
        Ok(())
    }

    fn substitute(&self, x: &mut [f64]) {
        let (n, b) = (self.n, self.band);
        let w = b + 1;
        let l = &self.factor;
        for i in 0..n {
            let lo = i.saturating_sub(b);
            let mut s = x[i];
            for k in lo..i {
                s -= l[i * w + k + b - i] * x[k];
            }
            x[i] = s / l[i * w + b];
        }
        for i in (0..n).rev() {
            let hi = (i + b).min(n - 1);
            let mut s = x[i];
            for k in i + 1..=hi {
                s -= l[k * w + i + b - k] * x[k];
            }
            x[i] = s / l[i * w + b];
        }
    }

    fn solve_cg(
        &mut self,
        sys: &DiscreteSystem,
        tau: f64,
        rhs: &[f64],
        out: &mut [f64],
    ) -> Result<(), SpectralError> {
        let n = self.n;
        let m = sys.mass();
        let rhs_norm = norm2(rhs);
        if rhs_norm == 0.0 {
            out.iter_mut().for_each(|v| *v = 0.0);
            return Ok(());
        }
        let target = SOLVE_TOL * rhs_norm;
        // For tau > 1 solve (M / tau + A) Y = rhs with X = Y / tau, which keeps
        // the iterates out of the subnormal range when tau is huge.
        let (s, t) = if tau > 1.0 {
            (1.0 / tau, 1.0)
        } else {
            (1.0, tau)
        };
        let precond: Vec<f64> = (0..n)
            .map(|i| 1.0 / (s * m[i] + t * self.diag_a[i]))
            .collect();
        for i in 0..n {
            out[i] = rhs[i] * precond[i];
        }
        let cap = 10 * n;
        let mut iterations = 0;
        let mut res = self.scaled_residual(sys, s, t, rhs, out);
        // Restart from the true residual whenever the recursive one has
        // converged, so the final check is on the actual residual.
        while res > target && iterations < cap {
            for i in 0..n {
                self.z[i] = self.r[i] * precond[i];
            }
            self.d.copy_from_slice(&self.z);
            let mut rz = dot(&self.r, &self.z);
            while iterations < cap {
                iterations += 1;
                sys.stiffness().apply(&self.d, &mut self.q);
                for i in 0..n {
                    self.q[i] = s * m[i] * self.d[i] + t * self.q[i];
                }
                let dq = dot(&self.d, &self.q);
                if !(dq > 0.0) {
                    break;
                }
                let alpha = rz / dq;
                for i in 0..n {
                    out[i] += alpha * self.d[i];
                    self.r[i] -= alpha * self.q[i];
                }
                if norm2(&self.r) <= 0.1 * target {
                    break;
                }
                for i in 0..n {
                    self.z[i] = self.r[i] * precond[i];
                }
                let rz_new = dot(&self.r, &self.z);
                let beta = rz_new / rz;
                rz = rz_new;
                for i in 0..n {
                    self.d[i] = self.z[i] + beta * self.d[i];
                }
            }
            let prev = res;
            res = self.scaled_residual(sys, s, t, rhs, out);
            if !(res < prev) && res > target {
                break;
            }
        }
        if res > target {
            return Err(SpectralError::Breakdown {
                iterations,
                relative_residual: res / rhs_norm,
            });
        }
        if tau > 1.0 {
            out.iter_mut().for_each(|v| *v /= tau);
        }
        Ok(())
    }
}
