//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use blowup_core::discretize::{
    build_fd_cube, build_fd_interval, build_fem_interval, sample_initial, DiscreteSystem,
    InitialData, MeshFile, Profile,
};
use blowup_core::stepper::{RecordOptions, ScalarHistory, SolverConfig};

use crate::error::{Classify, CliError, Kind, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builder", rename_all = "snake_case")]
pub enum MeshSpec {
    FdInterval { n: usize },
    FdCube { d: usize, n: usize },
    FemInterval { breakpoints: Vec<f64> },
    File { path: PathBuf },
}

impl MeshSpec {
    pub fn build(&self) -> Result<DiscreteSystem> {
        let built = match self {
            MeshSpec::FdInterval { n } => build_fd_interval(*n),
            MeshSpec::FdCube { d, n } => build_fd_cube(*d, *n),
            MeshSpec::FemInterval { breakpoints } => build_fem_interval(breakpoints),
            MeshSpec::File { path } => {
                let text = fs::read_to_string(path)
                    .classify(Kind::Io, format!("reading mesh {}", path.display()))?;
                let mesh: MeshFile = serde_json::from_str(&text)
                    .classify(Kind::Usage, format!("parsing mesh {}", path.display()))?;
                DiscreteSystem::from_mesh_file(&mesh)
            }
        };
        built.classify(Kind::Usage, "invalid mesh")
    }

    /// Largest cell width, when the builder defines one.
    pub fn h(&self) -> Option<f64> {
        match self {
            MeshSpec::FdInterval { n } | MeshSpec::FdCube { n, .. } => {
                Some(1.0 / (*n as f64 + 1.0))
            }
            MeshSpec::FemInterval { breakpoints } => {
                breakpoints.windows(2).map(|w| w[1] - w[0]).reduce(f64::max)
            }
            MeshSpec::File { .. } => None,
        }
    }

    /// The same builder with `n` nodes per side.
    pub fn with_size(&self, size: usize) -> Result<MeshSpec> {
        match self {
            MeshSpec::FdInterval { .. } => Ok(MeshSpec::FdInterval { n: size }),
            MeshSpec::FdCube { d, .. } => Ok(MeshSpec::FdCube { d: *d, n: size }),
            _ => Err(CliError::usage(
                "the size axis needs an fd_interval or fd_cube mesh",
            )),
        }
    }

    pub fn size(&self) -> Option<usize> {
        match self {
            MeshSpec::FdInterval { n } | MeshSpec::FdCube { n, .. } => Some(*n),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    Single,
    Rate,
    Set,
    TimeConvergence,
    Order,
}

/// Sweep axes; the product of the nonempty ones is run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepAxes {
    pub lambda: Vec<f64>,
    /// Nodes per side of the FD mesh.
    pub n: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrderSettings {
    pub ladder: Vec<usize>,
    pub t_end: f64,
    pub oracle_dt_factor: f64,
}

impl Default for OrderSettings {
    fn default() -> Self {
        Self {
            ladder: vec![10, 20, 40],
            t_end: 0.5,
            oracle_dt_factor: 1.0 / 32.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecordSettings {
    /// Steps kept one per step at the end of a run; `None` keeps every step.
    pub dense_tail: Option<usize>,
}

impl Default for RecordSettings {
    fn default() -> Self {
        Self {
            dense_tail: Some(100_000),
        }
    }
}

impl RecordSettings {
    pub fn options(&self) -> RecordOptions {
        RecordOptions {
            scalars: match self.dense_tail {
                Some(n) => ScalarHistory::Tail(n),
                None => ScalarHistory::Full,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub mesh: MeshSpec,
    pub profile: Profile,
    pub solver: SolverConfig,
    pub study: Study,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub sweep: SweepAxes,
    pub order: OrderSettings,
    pub record: RecordSettings,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            mesh: MeshSpec::FdInterval { n: 20 },
            profile: Profile::Sine { amplitude: 50.0 },
            solver: SolverConfig::default(),
            study: Study::Single,
            output_dir: None,
            sweep: SweepAxes::default(),
            order: OrderSettings::default(),
            record: RecordSettings::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .classify(Kind::Io, format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text)
            .classify(Kind::Usage, format!("parsing config {}", path.display()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::usage(format!(
                "config schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    /// The configuration as embedded in reports: everything except where the
    /// outputs go.
    pub fn canonical(&self) -> Self {
        Self {
            output_dir: None,
            ..self.clone()
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.canonical()).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Checks everything a run needs before any work starts.
    pub fn prepare(&self) -> Result<(DiscreteSystem, InitialData)> {
        self.solver
            .validate()
            .classify(Kind::Usage, "invalid solver settings")?;
        let sys = self.mesh.build()?;
        let u0 =
            sample_initial(&sys, &self.profile).classify(Kind::Usage, "invalid initial profile")?;
        Ok((sys, u0))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let sparse: ExperimentConfig = serde_json::from_str(r#"{"schema_version": 1}"#).unwrap();
        assert_eq!(sparse, cfg);
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            output_dir: Some("elsewhere".into()),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let mut c = a.clone();
        c.solver.lambda *= 2.0;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn mesh_sizes_and_widths() {
        let m = MeshSpec::FdCube { d: 2, n: 3 };
        assert_eq!(m.h(), Some(0.25));
        assert_eq!(m.with_size(7).unwrap(), MeshSpec::FdCube { d: 2, n: 7 });
        let f = MeshSpec::FemInterval {
            breakpoints: vec![0.0, 0.25, 1.0],
        };
        assert_eq!(f.h(), Some(0.75));
        assert!(f.with_size(3).is_err());
        assert_eq!(f.build().unwrap().n(), 1);
        assert_eq!(
            MeshSpec::FdInterval { n: 0 }.build().unwrap_err().kind,
            Kind::Usage
        );
    }

    #[test]
    fn prepare_rejects_bad_values() {
        let mut cfg = ExperimentConfig::default();
        cfg.solver.p = 0.5;
        assert_eq!(cfg.prepare().unwrap_err().kind, Kind::Usage);
        let cfg = ExperimentConfig {
            profile: Profile::Bump {
                amplitude: 1.0,
                width: -1.0,
            },
            ..ExperimentConfig::default()
        };
        assert_eq!(cfg.prepare().unwrap_err().kind, Kind::Usage);
    }
}
