//! Scenario runner, metrics reports, corpus checks and trace tools.

pub mod corpus;
pub mod report;
pub mod run;
pub mod scenario;
pub mod tools;
pub mod trace;

pub use report::{Format, MetricsReport, SCHEMA_VERSION};
pub use run::{run_batch, run_scenario, run_with_probes, Probe, RunOutput};
pub use scenario::{Scenario, ScenarioError};
pub use trace::{gen_trace, GenParams, Pattern, Trace};
pub use tools::{run_tool, Tool, ToolReport};
pub use corpus::{corpus_check, CorpusSummary};
