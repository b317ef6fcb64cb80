//! Experiment harness: configuration, task generation, scripted experiment
//! suites, and the acceptance verification suite.

pub mod config;
pub mod experiment;
pub mod taskset;
pub mod verify;

pub use config::ExperimentConfig;
pub use experiment::{resolve_out_dir, ModeSummary, OUTPUT_ROOT_ENV};
pub use taskset::{generate_taskset, Difficulty, TaskSet};
pub use verify::{all_passed, render_report, verify_suite, CheckResult, VerifyOptions};
