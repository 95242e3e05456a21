//! Dataset manifests, the synthetic shape-world generator, subset-selection
//! strategies, and corpus statistics.

pub mod error;
pub mod manifest;
pub mod stats;
pub mod subset;
pub mod synthetic;

pub use error::{DataError, Result};
pub use manifest::{load_manifest, save_manifest, DatasetKind, ExampleRecord, ImageRef, Manifest, Split};
