//! Command-line harness: experiment configs, runs, sweeps, order studies and
//! post-hoc rate analysis.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;

use args::{Cli, Command};
use error::Result;

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Mesh(a) => commands::cmd_mesh(a),
        Command::Run(a) => commands::cmd_run(a),
        Command::Sweep(a) => commands::cmd_sweep(a),
        Command::Order(a) => commands::cmd_order(a),
        Command::Rate(a) => commands::cmd_rate(a),
    }
}
