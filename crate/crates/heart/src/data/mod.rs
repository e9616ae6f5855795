//! Data pipeline: hourly panels, CSV ingestion, derived features,
//! window construction, and standardization.
//!
//! The toolkit refuses dirty data rather than guessing: gaps,
//! duplicates, and non-numeric values are hard errors at ingestion.
//! Cleaning and imputation are explicitly out of scope.

mod csv_io;
mod lags;
mod panel;
mod standardize;
mod synth;
mod windows;

pub use csv_io::{load_csv, write_csv};
pub use lags::{add_calendar_features, build_lag_features, LagEntry, LagSpec};
pub use panel::{Feature, FeatureKind, Panel};
pub use standardize::Standardizer;
pub use synth::{synth_generate, SynthConfig};
pub use windows::{build_windows, Sample};
