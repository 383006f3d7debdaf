//! Scenario loading, pipeline orchestration and result files for the `qmem`
//! command-line tool.

pub mod output;
pub mod run;
pub mod scenario;

pub use run::{run, Command, RunConfig, Summary};
pub use scenario::{load_scenario, parse_scenario, ScenarioError};
