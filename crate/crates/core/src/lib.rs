//! Adaptive time stepping for `u_t = Laplacian u + u^p` with homogeneous
//! Dirichlet data, together with blow-up diagnostics and reference oracles.
//!
//! The crate is organised by stage:
//!
//! * [`discretize`] builds the semidiscrete system `M U' = -A U + M U^p`;
//! * [`spectral`] bounds the pencil `(A, M)` and solves with `M + tau A`;
//! * [`stepper`] runs the explicit and implicit adaptive schemes;
//! * [`diagnostics`] turns a run into a [`diagnostics::BlowupReport`];
//! * [`oracle`] holds the independent reference computations;
//! * [`study`] drives convergence studies and sweeps.

pub mod diagnostics;
pub mod discretize;
pub mod oracle;
pub mod spectral;
pub mod stepper;
pub mod study;
pub mod sum;

pub use diagnostics::{analyze, BlowupReport};
pub use discretize::{DiscreteSystem, InitialData, Profile};
pub use stepper::{run, Scheme, SolverConfig, Termination, Trajectory};
