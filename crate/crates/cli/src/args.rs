//! Command-line arguments.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use blowup_core::discretize::Profile;
use blowup_core::stepper::Scheme;

use crate::config::{ExperimentConfig, MeshSpec};
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "blowup",
    version,
    about = "Adaptive-step solvers and blow-up diagnostics for u_t = Δu + u^p"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a mesh and write it as JSON.
    Mesh(MeshArgs),
    /// Run one experiment: trajectory CSV, snapshots and report JSON.
    Run(RunArgs),
    /// Run the product of the sweep axes concurrently and summarize.
    Sweep(SweepArgs),
    /// Convergence-order table against the reference integrator.
    Order(OrderArgs),
    /// Recompute blow-up diagnostics from the files of an earlier run.
    Rate(RateArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct MeshSelect {
    /// Finite differences on (0, 1) with N interior nodes.
    #[arg(long, value_name = "N")]
    pub fd_interval: Option<usize>,
    /// Finite differences on (0, 1)^D with N interior nodes per side.
    #[arg(long, num_args = 2, value_names = ["D", "N"])]
    pub fd_cube: Option<Vec<usize>>,
    /// Lumped P1 elements on the given partition of [0, 1].
    #[arg(long, value_name = "X0,X1,...", value_delimiter = ',')]
    pub fem_interval: Option<Vec<f64>>,
}

impl MeshSelect {
    pub fn spec(&self) -> Result<Option<MeshSpec>> {
        let mut specs = Vec::new();
        if let Some(n) = self.fd_interval {
            specs.push(MeshSpec::FdInterval { n });
        }
        if let Some(v) = &self.fd_cube {
            specs.push(MeshSpec::FdCube { d: v[0], n: v[1] });
        }
        if let Some(b) = &self.fem_interval {
            specs.push(MeshSpec::FemInterval {
                breakpoints: b.clone(),
            });
        }
        match specs.len() {
            0 => Ok(None),
            1 => Ok(specs.pop()),
            _ => Err(CliError::usage("give at most one mesh builder")),
        }
    }
}

#[derive(Debug, Args)]
pub struct MeshArgs {
    #[command(flatten)]
    pub select: MeshSelect,
    /// Output file; standard output when absent.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProfileFamily {
    Sine,
    Bump,
    Constant,
}

/// Settings shared by the experiment commands; each one overrides the
/// config file.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Experiment configuration (JSON).
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub mesh: MeshSelect,
    /// Mesh JSON written by `blowup mesh`.
    #[arg(long, value_name = "FILE")]
    pub mesh_file: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub profile: Option<ProfileFamily>,
    /// Amplitude (sine, bump) or value (constant).
    #[arg(long)]
    pub amplitude: Option<f64>,
    /// Bump width.
    #[arg(long)]
    pub width: Option<f64>,
    /// Exponent of the source term (> 1).
    #[arg(short, long)]
    pub p: Option<f64>,
    /// Step constant: tau = lambda / w^p.
    #[arg(short, long)]
    pub lambda: Option<f64>,
    /// explicit or implicit.
    #[arg(long)]
    pub scheme: Option<Scheme>,
    /// Stop once w reaches this value.
    #[arg(long)]
    pub w_stop: Option<f64>,
    /// Step cap.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Keep one scalar record per step for the last N steps only.
    #[arg(long, value_name = "N", conflicts_with = "full_history")]
    pub dense_tail: Option<usize>,
    /// Keep one scalar record per step for the whole run.
    #[arg(long)]
    pub full_history: bool,
    /// Do not halve steps to satisfy tau < min m/a (explicit scheme).
    #[arg(long)]
    pub no_comparison_restriction: bool,
    /// Do not halve steps to keep the functional decreasing (explicit scheme).
    #[arg(long)]
    pub no_lyapunov_restriction: bool,
    /// Accept lambda above the initial-step bound.
    #[arg(long)]
    pub no_initial_lambda_check: bool,
    /// Stored in the config; no command draws random numbers yet.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

impl ConfigArgs {
    /// Loads the config file (or the defaults) and applies the flags.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let from_flags = self.mesh.spec()?;
        match (from_flags, &self.mesh_file) {
            (Some(_), Some(_)) => return Err(CliError::usage("give at most one mesh source")),
            (Some(m), None) => cfg.mesh = m,
            (None, Some(path)) => cfg.mesh = MeshSpec::File { path: path.clone() },
            (None, None) => {}
        }
        if let Some(family) = self.profile {
            let amplitude = self.amplitude.unwrap_or(1.0);
            cfg.profile = match family {
                ProfileFamily::Sine => Profile::Sine { amplitude },
                ProfileFamily::Bump => Profile::Bump {
                    amplitude,
                    width: self.width.unwrap_or(0.1),
                },
                ProfileFamily::Constant => Profile::Constant { value: amplitude },
            };
        } else {
            match &mut cfg.profile {
                Profile::Sine { amplitude } => {
                    if let Some(a) = self.amplitude {
                        *amplitude = a;
                    }
                    if self.width.is_some() {
                        return Err(CliError::usage("--width applies to the bump profile"));
                    }
                }
                Profile::Bump { amplitude, width } => {
                    if let Some(a) = self.amplitude {
                        *amplitude = a;
                    }
                    if let Some(w) = self.width {
                        *width = w;
                    }
                }
                Profile::Constant { value } => {
                    if let Some(a) = self.amplitude {
                        *value = a;
                    }
                    if self.width.is_some() {
                        return Err(CliError::usage("--width applies to the bump profile"));
                    }
                }
            }
        }
        let s = &mut cfg.solver;
        if let Some(p) = self.p {
            s.p = p;
        }
        if let Some(l) = self.lambda {
            s.lambda = l;
        }
        if let Some(sc) = self.scheme {
            s.scheme = sc;
        }
        if let Some(w) = self.w_stop {
            s.w_stop = w;
        }
        if let Some(m) = self.max_steps {
            s.max_steps = m;
        }
        if self.no_comparison_restriction {
            s.enforce_comparison_restriction = false;
        }
        if self.no_lyapunov_restriction {
            s.enforce_lyapunov_restriction = false;
        }
        if self.no_initial_lambda_check {
            s.require_initial_lambda_bound = false;
        }
        if self.full_history {
            cfg.record.dense_tail = None;
        }
        if let Some(n) = self.dense_tail {
            cfg.record.dense_tail = Some(n);
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.output {
            cfg.output_dir = Some(out.clone());
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Lambda axis.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Mesh-size axis (nodes per side).
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// Worker threads; defaults to BLOWUP_THREADS, then to the core count.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct OrderArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Interior node counts of the FD interval ladder.
    #[arg(long, value_delimiter = ',')]
    pub ladder: Option<Vec<usize>>,
    #[arg(long)]
    pub t_end: Option<f64>,
    /// Reference-integrator substep as a fraction of h^2.
    #[arg(long)]
    pub oracle_dt_factor: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RateArgs {
    /// Directory written by `blowup run`.
    #[arg(short, long)]
    pub input: PathBuf,
    /// Output file; `<input>/rate.json` when absent.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("blowup").chain(args.iter().copied())).unwrap()
    }

    fn resolved(args: &[&str]) -> ExperimentConfig {
        match parse(args).command {
            Command::Run(r) => r.config.resolve().unwrap(),
            _ => unreachable!(),
        }
    }

    #[test]
    fn flags_override_defaults() {
        let cfg = resolved(&[
            "run",
            "--fd-cube",
            "2",
            "5",
            "-p",
            "3",
            "--scheme",
            "implicit",
            "--full-history",
        ]);
        assert_eq!(cfg.mesh, MeshSpec::FdCube { d: 2, n: 5 });
        assert_eq!(cfg.solver.p, 3.0);
        assert_eq!(cfg.solver.scheme, Scheme::Implicit);
        assert_eq!(cfg.record.dense_tail, None);
    }

    #[test]
    fn profile_flags() {
        let cfg = resolved(&["run", "--amplitude", "7"]);
        assert_eq!(cfg.profile, Profile::Sine { amplitude: 7.0 });
        let cfg = resolved(&[
            "run",
            "--profile",
            "bump",
            "--amplitude",
            "3",
            "--width",
            "0.2",
        ]);
        assert_eq!(
            cfg.profile,
            Profile::Bump {
                amplitude: 3.0,
                width: 0.2
            }
        );
        let cfg = resolved(&["run", "--profile", "constant", "--amplitude", "2"]);
        assert_eq!(cfg.profile, Profile::Constant { value: 2.0 });
        let r = match parse(&["run", "--width", "0.3"]).command {
            Command::Run(r) => r.config.resolve(),
            _ => unreachable!(),
        };
        assert!(r.is_err());
    }

    #[test]
    fn conflicting_flags_are_rejected() {
        assert!(
            Cli::try_parse_from(["blowup", "run", "--full-history", "--dense-tail", "5"]).is_err()
        );
        assert!(Cli::try_parse_from(["blowup", "run", "--scheme", "leapfrog"]).is_err());
        let r = match parse(&["run", "--fd-interval", "4", "--mesh-file", "m.json"]).command {
            Command::Run(r) => r.config.resolve(),
            _ => unreachable!(),
        };
        assert!(r.is_err());
    }
}
