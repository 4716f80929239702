//! Configuration, on-disk formats and the synthetic family generator.

mod artifact;
mod config;
mod synthetic;
mod tables;

pub use artifact::{ModelArtifact, ARTIFACT_VERSION};
pub use config::{RunConfig, KNOWN_KEYS};
pub use synthetic::{generate_synthetic, InputSpec, LatentSpec, SyntheticData, SyntheticFamilySpec};
pub use tables::{
    forecast_rows, load_forecast_csv, load_posteriors_csv, load_sequences_csv, load_truth_csv, read_forecast,
    read_posteriors, read_sequences, read_truth, write_forecast_csv, write_posteriors_csv, write_sequences,
    write_sequences_csv, write_truth_csv, ForecastRow, TruthRow,
};
