//! Configuration, dataset files, run manifests and figures.

pub mod config;
pub mod csv_io;
pub mod manifest;
pub mod plot;

pub use config::{EvalConfig, ExperimentConfig};
pub use csv_io::{export_csv, export_observed_csv, ingest_csv, read_csv, write_csv, write_observed_csv};
pub use manifest::{write_atomic, FileEntry, RunManifest};
