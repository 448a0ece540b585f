//! Configuration, subcommands and reports of the `mfctrl` binary.

pub mod config;
pub mod report;
pub mod run;

pub use config::{parse_config, parse_config_str, ControlWeighting, ExperimentConfig, ModelConfig, PolicyKind, X0Policy};
pub use report::{gaussian_diagnostics, reduction_pct, ArmReport, ComparisonReport, GaussianDiagnostics, ROW_LABELS};
pub use run::{error_json, exit_code, run_command, Command, CommandOutput};
