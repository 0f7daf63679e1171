//! Invertible layers and the multi-scale flow built from them.

pub mod layers;
pub mod model;

pub use layers::{LayerKind, LayerReport};
pub use model::{ConditionedFlow, FlowModel, LatentStack, ModelConfig, Preprocess};
