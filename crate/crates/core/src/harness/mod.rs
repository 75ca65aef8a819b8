//! Scenario files, runs, ensembles, reports and verification suites.

pub mod config;
pub mod ensemble;
pub mod report;
pub mod run;
pub mod verify;

pub use config::Scenario;
pub use ensemble::{run_ensemble, EnsembleSummary};
pub use run::{run_scenario, RunOptions, RunReport, Workspace};
