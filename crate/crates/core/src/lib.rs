//! Human-object interaction detection with a disentangled transformer.

pub mod ablation;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod evaluation;
pub mod featurizer;
pub mod inference;
pub mod loss;
pub mod matching;
pub mod model;
pub mod trainer;
