//! Single-process facility harness: configuration, launch, scripted
//! scenarios, metrics and the operator gateway.

pub mod config;
pub mod gateway;
pub mod launch;
pub mod metrics;
pub mod script;

pub use config::{default_budgets, load_config, parse_config, validate, ConfigError, FacilityConfig, SupervisorConfig, SupervisorKind};
pub use metrics::{BudgetCheck, Histogram, HistogramSummary, Metrics, MetricsError, MetricsReport};
pub use gateway::{Gateway, GatewayState};
pub use launch::{Facility, FacilityDriver, HarnessError, LaunchOptions};
pub use script::{load_script, parse_script, run_script, ScenarioReport, Script, ScriptError, ScriptParseError};
