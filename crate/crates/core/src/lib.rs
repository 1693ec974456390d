//! Text-conditioned sampling for frozen latent-variable image generators.
//!
//! The pipeline: a frozen joint image/text embedder supplies a context vector,
//! a trainable conditional VAE maps (image, context) to an offset in a frozen
//! generator's latent space, and at inference a non-parametric prior turns
//! text embeddings into plausible image-embedding contexts. Everything needed
//! to train and evaluate at desk scale ships with synthetic toy backends.

pub mod adapter;
pub mod autodiff;
pub mod bank;
pub mod checkpoint;
pub mod config;
pub mod embedding;
pub mod eval;
pub mod error;
pub mod generator;
pub mod infer;
pub mod losses;
pub mod optim;
pub mod prior;
pub mod tensor;
pub mod toyworld;
pub mod train;

pub use adapter::{AdapterConfig, CvaeAdapter, EncoderMode};
pub use bank::{build_bank, EmbeddingBank};
pub use embedding::{Embedding, EmbeddingBackend};
pub use error::{Error, Result};
pub use generator::{GeneratorBackend, GeneratorLatent, LatentSpace};
pub use tensor::Tensor;
pub use toyworld::{ToyWorld, ToyWorldSample};
