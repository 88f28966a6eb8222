//! Benchmark and validation harness for the factored DoRA engine: suites,
//! JSON artifacts, and CSV extraction.

pub mod artifact;
pub mod config;
pub mod plot;
pub mod suites;
pub mod timing;

pub use artifact::{Artifact, Case, SCHEMA_VERSION};
pub use config::{RunConfig, ShapeSet, Suite};
pub use plot::{emit_plot_data, PlotTarget};
pub use suites::run_suite;
