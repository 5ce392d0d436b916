use proptest::prelude::*;

use blowup_core::discretize::{
    build_fd_cube, build_fd_interval, build_fem_interval, validate_properties, DiscreteSystem,
};
use blowup_core::spectral::{eta_estimate, solve_shifted_cg, solve_shifted_direct};
use blowup_core::stepper::{run, step_explicit, step_implicit, w_norm, Scheme, SolverConfig};

fn cfg(p: f64) -> SolverConfig {
    SolverConfig {
        p,
        require_initial_lambda_bound: false,
        ..SolverConfig::default()
    }
}

fn fem(gaps: &[f64]) -> DiscreteSystem {
    let total: f64 = gaps.iter().sum();
    let mut x = vec![0.0];
    let mut acc = 0.0;
    for g in &gaps[..gaps.len() - 1] {
        acc += g / total;
        x.push(acc);
    }
    x.push(1.0);
    build_fem_interval(&x).unwrap()
}

fn positive_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..20.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn builders_satisfy_structure(n in 1usize..60, d in 1usize..4, side in 1usize..7,
                                  gaps in prop::collection::vec(0.05f64..1.0, 2..40)) {
        prop_assert!(validate_properties(&build_fd_interval(n).unwrap()).passed());
        prop_assert!(validate_properties(&build_fd_cube(d, side).unwrap()).passed());
        prop_assert!(validate_properties(&fem(&gaps)).passed());
    }

    #[test]
    fn explicit_step_preserves_positivity(n in 1usize..30, p in 1.2f64..4.0,
                                          frac in 0.0f64..1.0, seed in positive_vec(30)) {
        let sys = build_fd_interval(n).unwrap();
        let u = &seed[..n];
        let tau = frac * sys.min_mass_over_diag();
        let next = step_explicit(&sys, &cfg(p), u, tau).unwrap();
        prop_assert!(next.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn implicit_step_preserves_positivity(n in 1usize..80, p in 1.2f64..4.0,
                                          tau in 1e-6f64..10.0, seed in positive_vec(80)) {
        let sys = build_fd_interval(n).unwrap();
        let u = &seed[..n];
        let next = step_implicit(&sys, &cfg(p), u, tau).unwrap();
        prop_assert!(next.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn step_maps_are_monotone(n in 1usize..30, p in 1.2f64..4.0, frac in 0.0f64..0.999,
                              a in positive_vec(30), gap in prop::collection::vec(0.0f64..5.0, 30)) {
        let sys = build_fd_interval(n).unwrap();
        let u: Vec<f64> = a[..n].to_vec();
        let v: Vec<f64> = u.iter().zip(&gap).map(|(x, g)| x + g).collect();
        let tau = frac * sys.min_mass_over_diag();
        let c = cfg(p);
        for (su, sv) in [
            (step_explicit(&sys, &c, &u, tau).unwrap(), step_explicit(&sys, &c, &v, tau).unwrap()),
            (step_implicit(&sys, &c, &u, tau).unwrap(), step_implicit(&sys, &c, &v, tau).unwrap()),
        ] {
            for (x, y) in su.iter().zip(&sv) {
                prop_assert!(x <= y, "{x} > {y}");
            }
        }
    }

    #[test]
    fn rayleigh_quotient_below_eta(side in 1usize..6, d in 1usize..3,
                                   y in prop::collection::vec(-1.0f64..1.0, 25)) {
        let sys = build_fd_cube(d, side).unwrap();
        let eta = eta_estimate(&sys, 1e-10, 1_000_000).unwrap().eta;
        let y = &y[..sys.n()];
        let ay = sys.stiffness().quadratic_form(y);
        let my: f64 = y.iter().zip(sys.mass()).map(|(v, m)| m * v * v).sum();
        prop_assert!(ay <= eta * my * (1.0 + 1e-6) + 1e-300);
    }

    #[test]
    fn shifted_solves_keep_sign(n in 1usize..100, tau in 0.0f64..5.0, rhs in positive_vec(100)) {
        let sys = build_fd_interval(n).unwrap();
        let b = &rhs[..n];
        let x = solve_shifted_direct(&sys, tau, b).unwrap();
        let y = solve_shifted_cg(&sys, tau, b).unwrap();
        prop_assert!(x.iter().all(|&v| v > 0.0));
        prop_assert!(y.iter().all(|&v| v > 0.0));
        for (a, c) in x.iter().zip(&y) {
            prop_assert!((a - c).abs() <= 1e-8 * a.abs().max(1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn recorded_w_matches_snapshots(n in 2usize..15, amp in 5.0f64..60.0, implicit in any::<bool>()) {
        let sys = build_fd_interval(n).unwrap();
        let u0: Vec<f64> = sys.nodes().map(|x| amp * (std::f64::consts::PI * x[0]).sin()).collect();
        let c = SolverConfig {
            p: 2.0,
            lambda: 1e-3,
            w_stop: 1e3,
            max_steps: 200_000,
            scheme: if implicit { Scheme::Implicit } else { Scheme::Explicit },
            ..cfg(2.0)
        };
        let tr = run(&sys, &c, &u0).unwrap();
        for s in &tr.snapshots {
            let rec = tr.scalars_at(s.j).unwrap();
            prop_assert_eq!(rec.w, w_norm(&sys, &s.u));
            prop_assert_eq!(rec.t, s.t);
        }
    }
}
