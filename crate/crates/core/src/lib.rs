//! Offline foundation features with tensor augmentations.
//!
//! Step 1 caches foundation-model feature grids to disk once ([`store`],
//! [`provider`], [`reduce`]). Step 2 trains a compact transformer classifier
//! on the cached grids, augmenting them in feature space ([`augment`],
//! [`model`], [`trainer`]). [`bench`] measures the cost of step 2.

pub mod augment;
pub mod bench;
pub mod error;
pub mod model;
pub mod provider;
pub mod reduce;
pub mod rng;
pub mod store;
pub mod tensor;
pub mod trainer;

pub use augment::AugmentationPolicy;
pub use error::{Error, Result};
pub use model::{ClassifierParams, ModelConfig, Params, ProjectionParams};
pub use provider::{FeatureProvider, SyntheticProvider, SyntheticSpec};
pub use rng::RngStream;
pub use store::{Cache, CacheManifest, Dtype, FeatureGrid, FeatureRecord, ProviderDescriptor};
pub use tensor::{Buffer, Mat, MemoryTracker};
pub use trainer::{Metrics, MetricsLog, TrainConfig};
