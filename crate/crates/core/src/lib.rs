//! Molecular graph variational autoencoder whose latent posterior is a
//! diffusion chain z₁…z_T.
//!
//! SMILES strings are parsed into categorical graphs, encoded by a graph
//! transformer to z₀, noised through a fixed Gaussian chain, and decoded
//! from z₁ back into per-slot categorical distributions. Training maximizes
//! a three-term evidence lower bound (reconstruction, prior KL, denoising)
//! and can be combined with a regression head for property fine-tuning.
//!
//! Batch work is spread over graphs with rayon when the `parallel` feature
//! is enabled; [`par::Execution::Sequential`] forces a single thread and
//! gives bit-identical results.

pub mod autodiff;
pub mod checkpoint;
pub mod checks;
pub mod dataset;
pub mod decoder;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod model;
pub mod molgraph;
pub mod nn;
pub mod objective;
pub mod par;
pub mod params;
pub mod property_head;
pub mod schedule;
pub mod smiles;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use molgraph::{GraphBatch, MolecularGraph};
pub use par::Execution;
pub use schedule::NoiseSchedule;
pub use tensor::Tensor;
