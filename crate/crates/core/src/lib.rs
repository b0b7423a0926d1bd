//! Reasoning-augmented image editing: a thinking, editing and reflection loop
//! over pluggable reasoner and generator backends, the dataset pipelines that
//! feed it, and the training objectives as standalone numeric kernels.

pub mod backends;
pub mod engine;
pub mod forge;
pub mod image_store;
pub mod objectives;
pub mod reasoner;
pub mod scoring;
pub mod trace;
pub mod types;

pub use image_store::ImageStore;
pub use types::*;
