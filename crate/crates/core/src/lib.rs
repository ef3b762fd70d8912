//! Multilingual encoder–decoder translation with a semantic/linguistic
//! disentangler on the encoder side and a linguistic encoder fused into
//! the decoder, built on a small reverse-mode autodiff engine.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod disentangler;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod model;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod training;
pub mod transformer;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::Model;
