//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fail.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use blowup_core::diagnostics::{
    analyze, detect_blowup, estimate_blowup_time, rate_target, w_growth_fit, BlowupReport,
    NodeClassKind,
};
use blowup_core::discretize::{build_fd_interval, sample_initial, Profile};
use blowup_core::oracle::{consistency_residual, dense_generalized_eigs, Manufactured};
use blowup_core::spectral::eta_estimate;
use blowup_core::stepper::{
    replay, run, run_with, RecordOptions, ScalarHistory, Scheme, SolverConfig, Termination,
    Trajectory,
};
use blowup_core::study::{order_study, OrderStudy};

/// `w_stop` of the rate runs, per exponent.
const RATE_W_STOP_P2: f64 = 4e4;
const RATE_W_STOP_P3: f64 = 1e5;
const DENSE_TAIL: usize = 5000;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

struct RateRun {
    p: f64,
    scheme: Scheme,
    traj: Trajectory,
    report: BlowupReport,
}

fn rate_runs() -> Vec<RateRun> {
    let mut out = Vec::new();
    for (p, w_stop) in [(2.0, RATE_W_STOP_P2), (3.0, RATE_W_STOP_P3)] {
        for scheme in [Scheme::Explicit, Scheme::Implicit] {
            let sys = build_fd_interval(20).unwrap();
            let u0 = sample_initial(&sys, &Profile::Sine { amplitude: 50.0 }).unwrap();
            let cfg = SolverConfig {
                p,
                lambda: 1e-4,
                scheme,
                w_stop,
                max_steps: 1_000_000_000,
                ..SolverConfig::default()
            };
            let opts = RecordOptions {
                scalars: ScalarHistory::Tail(DENSE_TAIL),
            };
            let traj = run_with(&sys, &cfg, u0.values(), &opts).unwrap();
            let report = analyze(&sys, &traj);
            out.push(RateRun {
                p,
                scheme,
                traj,
                report,
            });
        }
    }
    out
}

fn c1_rate(runs: &[RateRun]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for r in runs {
        let range = if r.p == 2.0 {
            (0.95, 1.05)
        } else {
            (0.67, 0.74)
        };
        let rate = r.report.rate_constant;
        let ok = r.traj.termination == Termination::WThreshold
            && rate.is_some_and(|c| c >= range.0 && c <= range.1);
        pass &= ok;
        parts.push(format!(
            "p={} {}: {:.4} in [{}, {}] (C_p={:.5}, J={})",
            r.p,
            r.scheme,
            rate.unwrap_or(f64::NAN),
            range.0,
            range.1,
            rate_target(r.p),
            r.traj.final_index()
        ));
    }
    Outcome::new(pass, parts.join("; "))
}

fn c2_lyapunov(runs: &[RateRun]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for r in runs {
        let l = &r.traj.lyapunov;
        let ok = l.affine_violations == 0 && l.steps_checked == r.traj.final_index();
        pass &= ok;
        parts.push(format!(
            "p={} {}: {} violations in {} steps",
            r.p, r.scheme, l.affine_violations, l.steps_checked
        ));
    }
    Outcome::new(pass, parts.join("; "))
}

fn c3_dichotomy() -> Outcome {
    let sys = build_fd_interval(20).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for scheme in [Scheme::Explicit, Scheme::Implicit] {
        let cfg = SolverConfig {
            p: 2.0,
            lambda: 1e-3,
            scheme,
            ..SolverConfig::default()
        };
        let blow = sample_initial(&sys, &Profile::Sine { amplitude: 50.0 }).unwrap();
        let tr = run(&sys, &cfg, blow.values()).unwrap();
        let det = detect_blowup(&tr);
        let ok_blow = det.detected && det.j0.is_some();

        let decay = sample_initial(&sys, &Profile::Sine { amplitude: 0.1 }).unwrap();
        let cfg_decay = SolverConfig {
            max_steps: 20_000,
            require_initial_lambda_bound: false,
            ..cfg
        };
        let tr = run(&sys, &cfg_decay, decay.values()).unwrap();
        let det_decay = detect_blowup(&tr);
        let ended = matches!(tr.termination, Termination::Steady | Termination::MaxSteps);
        let phi_ok = tr.first_negative_phi.is_none() && tr.phi_values().all(|f| f >= 0.0);
        let ok_decay = !det_decay.detected && ended && phi_ok;
        pass &= ok_blow && ok_decay;
        parts.push(format!(
            "{scheme}: amplitude 50 detected={} j0={:?}; amplitude 0.1 detected={} end={} phi>=0={}",
            det.detected, det.j0, det_decay.detected, tr.termination, phi_ok
        ));
    }
    Outcome::new(pass, parts.join("; "))
}

fn c4_linear_growth(runs: &[RateRun]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for r in runs {
        match w_growth_fit(&r.traj) {
            Ok(g) => {
                let ok = g.slope > 0.0 && g.relative_residual < 0.05;
                pass &= ok;
                parts.push(format!(
                    "p={} {}: slope {:.4e}, rel residual {:.2e}",
                    r.p, r.scheme, g.slope, g.relative_residual
                ));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("p={} {}: {e}", r.p, r.scheme));
            }
        }
    }
    Outcome::new(pass, parts.join("; "))
}

fn c5_comparison() -> Outcome {
    let sys = build_fd_interval(10).unwrap();
    let n = sys.n();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0usize;
    let mut steps = 0usize;
    let mut failures = 0usize;
    for pair in 0..100 {
        let scheme = if pair % 2 == 0 {
            Scheme::Explicit
        } else {
            Scheme::Implicit
        };
        let scale = rng.random_range(0.5..40.0);
        let u0: Vec<f64> = (0..n)
            .map(|_| scale * rng.random_range(0.05..1.0))
            .collect();
        let v0: Vec<f64> = u0
            .iter()
            .map(|&u| u + scale * rng.random_range(0.01..0.5))
            .collect();
        let cfg = SolverConfig {
            p: 2.0,
            lambda: 1e-3,
            scheme,
            max_steps: 2000,
            require_initial_lambda_bound: false,
            ..SolverConfig::default()
        };
        let Ok(tr) = run(&sys, &cfg, u0.as_slice()) else {
            failures += 1;
            continue;
        };
        let taus: Vec<f64> = tr.scalars[..tr.scalars.len() - 1]
            .iter()
            .map(|s| s.tau)
            .collect();
        let (Ok(ru), Ok(rv)) = (
            replay(&sys, &cfg, &u0, &taus),
            replay(&sys, &cfg, &v0, &taus),
        ) else {
            failures += 1;
            continue;
        };
        for (u, v) in ru.states.iter().zip(&rv.states) {
            steps += 1;
            if u.iter().zip(v).any(|(a, b)| !(a <= b)) {
                violations += 1;
            }
        }
    }
    Outcome::new(
        violations == 0 && failures == 0,
        format!("{violations} violations over {steps} compared states, {failures} failed runs"),
    )
}

fn c6_spectral() -> Outcome {
    let sys = build_fd_interval(50).unwrap();
    let est = eta_estimate(&sys, 1e-12, 1_000_000).unwrap();
    let dense = dense_generalized_eigs(&sys).unwrap();
    let dense_max = dense.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let rel = (est.eta - dense_max).abs() / dense_max;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let y: Vec<f64> = (0..sys.n()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ay = sys.stiffness().quadratic_form(&y);
        let my: f64 = y.iter().zip(sys.mass()).map(|(v, m)| m * v * v).sum();
        worst = worst.max(ay / (est.eta * my));
    }
    Outcome::new(
        worst <= 1.000001 && rel <= 1e-6,
        format!(
            "eta {:.10} vs dense {:.10} (rel {:.1e}); max Rayleigh/eta {:.6}",
            est.eta, dense_max, rel, worst
        ),
    )
}

fn blowup_time(n: usize, lambda: f64) -> f64 {
    let sys = build_fd_interval(n).unwrap();
    let u0 = sample_initial(&sys, &Profile::Sine { amplitude: 50.0 }).unwrap();
    let cfg = SolverConfig {
        p: 2.0,
        lambda,
        max_steps: 1_000_000_000,
        ..SolverConfig::default()
    };
    let opts = RecordOptions {
        scalars: ScalarHistory::Tail(DENSE_TAIL),
    };
    let tr = run_with(&sys, &cfg, u0.values(), &opts).unwrap();
    estimate_blowup_time(&tr).unwrap().estimate
}

fn c7_time_convergence() -> Outcome {
    let lambdas = [1e-2, 5e-3, 2.5e-3, 1.25e-3];
    let ts: Vec<f64> = lambdas.iter().map(|&l| blowup_time(20, l)).collect();
    let gaps: Vec<f64> = ts.windows(2).map(|w| (w[0] - w[1]).abs()).collect();
    let last_t = *ts.last().unwrap();
    let lam_ok = gaps.windows(2).all(|g| g[1] < g[0]) && *gaps.last().unwrap() < 1e-3 * last_t;
    let th: Vec<f64> = [10, 20, 40].iter().map(|&n| blowup_time(n, 1e-4)).collect();
    let hgaps: Vec<f64> = th.windows(2).map(|w| (w[0] - w[1]).abs()).collect();
    let h_ok = hgaps[1] < hgaps[0];
    Outcome::new(
        lam_ok && h_ok,
        format!(
            "lambda gaps {:.3e}, {:.3e}, {:.3e} (last < {:.3e}); h gaps {:.3e}, {:.3e}",
            gaps[0],
            gaps[1],
            gaps[2],
            1e-3 * last_t,
            hgaps[0],
            hgaps[1]
        ),
    )
}

fn bump_report(p: f64, lambda: f64, w_stop: f64) -> BlowupReport {
    let sys = build_fd_interval(21).unwrap();
    let u0 = sample_initial(
        &sys,
        &Profile::Bump {
            amplitude: 1e6,
            width: 0.02,
        },
    )
    .unwrap();
    let cfg = SolverConfig {
        p,
        lambda,
        w_stop,
        max_steps: 1_000_000_000,
        ..SolverConfig::default()
    };
    let opts = RecordOptions {
        scalars: ScalarHistory::Tail(DENSE_TAIL),
    };
    let tr = run_with(&sys, &cfg, u0.values(), &opts).unwrap();
    analyze(&sys, &tr)
}

fn c8_propagation() -> Outcome {
    let mut parts = Vec::new();

    let r = bump_report(3.0, 1.0, 1e6);
    let bstar: Vec<usize> = r
        .node_classes
        .iter()
        .filter(|c| c.in_bstar)
        .map(|c| c.node)
        .collect();
    let a_ok = r.detected
        && !bstar.is_empty()
        && r.node_classes.iter().all(|c| match c.d {
            Some(0) => c.class == NodeClassKind::MaximalRate,
            _ => c.class == NodeClassKind::Bounded,
        });
    let max_growth = r
        .node_classes
        .iter()
        .filter(|c| c.d != Some(0))
        .map(|c| c.growth)
        .fold(0.0f64, f64::max);
    parts.push(format!(
        "(a) p=3 B*={bstar:?}, max d>=1 growth {max_growth:.3}"
    ));

    let r = bump_report(1.6, 1e3, 1e10);
    let target = 1.0 / (1.6 - 1.0) - 1.0;
    let d1: Vec<f64> = r
        .node_classes
        .iter()
        .filter(|c| c.d == Some(1))
        .map(|c| c.fitted_exponent.unwrap_or(f64::NAN))
        .collect();
    let b_exp = !d1.is_empty() && d1.iter().all(|&a| (a - target).abs() <= 0.1 * target);
    let b_bounded = r
        .node_classes
        .iter()
        .filter(|c| c.d.is_some_and(|d| d >= 2))
        .all(|c| c.class == NodeClassKind::Bounded);
    let b_ok = r.detected && b_exp && b_bounded;
    parts.push(format!(
        "(b) p=1.6 d=1 exponents {d1:.4?} vs {target:.4}, d>=2 bounded={b_bounded}"
    ));

    let r = bump_report(2.0, 1e4, 1e12);
    let cp = rate_target(2.0);
    let d1: Vec<_> = r.node_classes.iter().filter(|c| c.d == Some(1)).collect();
    let c_ok = r.detected
        && !d1.is_empty()
        && d1.iter().all(|c| {
            c.class == NodeClassKind::LogRate
                && c.fitted_exponent.is_some_and(|a| a < 0.1)
                && c.log_slope.is_some_and(|s| s > 0.0)
                && c.y_tail < 1e-3 * cp
        });
    let desc: Vec<String> = d1
        .iter()
        .map(|c| {
            format!(
                "{} exp {:.4} y {:.2e}",
                c.class.as_str(),
                c.fitted_exponent.unwrap_or(f64::NAN),
                c.y_tail
            )
        })
        .collect();
    parts.push(format!("(c) p=2 d=1 [{}]", desc.join(", ")));

    Outcome::new(a_ok && b_ok && c_ok, parts.join("; "))
}

fn c9_order() -> Outcome {
    // Explicit scheme: on decaying data the implicit step tau = h^2 / w^p
    // overshoots t_end in a single step.
    let study = OrderStudy {
        ladder: vec![10, 20, 40],
        profile: Profile::Sine { amplitude: 0.1 },
        solver: SolverConfig {
            p: 2.0,
            scheme: Scheme::Explicit,
            require_initial_lambda_bound: false,
            ..SolverConfig::default()
        },
        t_end: 0.5,
        oracle_dt_factor: 1.0 / 32.0,
    };
    let mut parts = Vec::new();
    let mut pass = match order_study(&study) {
        Ok(rows) => {
            let orders: Vec<f64> = rows.iter().filter_map(|r| r.order).collect();
            let errors: Vec<f64> = rows.iter().map(|r| r.max_error).collect();
            let errs: Vec<String> = errors.iter().map(|e| format!("{e:.3e}")).collect();
            parts.push(format!("errors [{}], orders {orders:.3?}", errs.join(", ")));
            orders.len() == 2
                && orders.iter().all(|&o| o >= 1.9)
                && errors.windows(2).all(|w| w[1] < w[0])
        }
        Err(e) => {
            parts.push(e.to_string());
            false
        }
    };
    let rho: Vec<f64> = [10, 20, 40]
        .iter()
        .map(|&n| {
            consistency_residual(&build_fd_interval(n).unwrap(), Manufactured::SineExp, 0.3).max
        })
        .collect();
    let ratios: Vec<f64> = rho.windows(2).map(|w| w[0] / w[1]).collect();
    let r_ok = ratios.iter().all(|r| (3.6..=4.4).contains(r));
    pass &= r_ok;
    parts.push(format!("consistency ratios {ratios:.3?}"));
    Outcome::new(pass, parts.join("; "))
}

fn c10_ode() -> Outcome {
    let sys = build_fd_interval(1).unwrap().with_scaled_stiffness(1e-12);
    let cfg = SolverConfig {
        p: 2.0,
        lambda: 1e-5,
        w_stop: 1e2,
        max_steps: 1_000_000_000,
        ..SolverConfig::default()
    };
    let opts = RecordOptions {
        scalars: ScalarHistory::Tail(DENSE_TAIL),
    };
    let tr = run_with(&sys, &cfg, &[1.0], &opts).unwrap();
    let t = estimate_blowup_time(&tr).unwrap().estimate;
    Outcome::new(
        (t - 1.0).abs() <= 5e-3,
        format!("T estimate {t:.6} vs exact 1 (rel {:.2e})", (t - 1.0).abs()),
    )
}

fn main() -> ExitCode {
    let mut all = true;
    let mut report = |id: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        all &= o.pass;
        println!(
            "criterion {id:>2} {:<28} {} ({:.1}s): {}",
            name,
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
    };
    let start = Instant::now();
    let runs = rate_runs();
    println!(
        "rate runs finished in {:.1}s",
        start.elapsed().as_secs_f64()
    );
    report(1, "rate constant", &mut || c1_rate(&runs));
    report(2, "lyapunov monotonicity", &mut || c2_lyapunov(&runs));
    report(3, "detection dichotomy", &mut c3_dichotomy);
    report(4, "linear growth of w", &mut || c4_linear_growth(&runs));
    report(5, "comparison principle", &mut c5_comparison);
    report(6, "spectral bound", &mut c6_spectral);
    report(7, "blow-up time convergence", &mut c7_time_convergence);
    report(8, "blow-up set propagation", &mut c8_propagation);
    report(9, "convergence order", &mut c9_order);
    report(10, "ode sanity", &mut c10_ode);
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
