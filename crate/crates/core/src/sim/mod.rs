//! Deterministic scenario runner on a virtual clock.

pub mod harness;
pub mod metrics;
pub mod scenario;

pub use harness::{run_scenario, run_scenario_with, RunOptions, RunResult, Simulation, StepOutcome};
pub use metrics::{compare_runs, trace_jsonl, CycleSample, Divergence, Metrics, Trace, TraceEvent};
pub use scenario::{Arrival, FaultEvent, Scenario, ScenarioError, SimCluster};
