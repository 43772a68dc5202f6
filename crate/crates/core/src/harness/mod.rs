//! Experiment configuration, multi-trial runs, suites and the command line.

pub mod cli;
pub mod config;
pub mod experiment;
pub mod suites;
pub mod verify;

pub use cli::cli_main;
pub use config::RunConfig;
pub use experiment::{mean_half_width, run_experiment, run_trials, AggregateTrace, ExperimentResult, TrialOutcome};
pub use suites::{run_suite, Suite, SuiteOptions, SuiteReport};
