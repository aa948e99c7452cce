//! Scenario-driven simulation harness for the icn-core protocol: scenario
//! schema and validation, the deterministic epoch loop, and metrics
//! rendering. The `icn-sim` binary wraps these into a CLI.

pub mod metrics;
pub mod runner;
pub mod scenario;
