//! Fully convolutional dual-head networks and their persistence.

pub mod checkpoint;
pub mod layers;
pub mod network;
pub mod tensor;

pub use checkpoint::{load, save, Checkpoint, TrainingMeta};
pub use network::{HeadOutputs, Network, NetworkConfig, NetworkRole, StemConfig};
pub use tensor::{FeatureMap, Float};
