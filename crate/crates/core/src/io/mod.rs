//! On-disk formats: tensor containers, dataset manifests, run configs and the
//! results ledger.

pub mod config;
pub mod container;
pub mod ledger;
pub mod manifest;

pub use config::{MetricsConfig, RunConfig, SynthCounts};
pub use container::{read_tensor, write_atomic, write_tensor, DType, Tensor, TensorData};
pub use ledger::LedgerEntry;
pub use manifest::{DatasetManifest, Label, ManifestHeader, SampleRecord, SampleStore, Split, TrainView};
