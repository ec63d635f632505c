//! Joint learning of topics and contextual word embeddings with a
//! variational auto-encoder.
//!
//! Each word occurrence (pivot plus surrounding context window) is encoded
//! into a Gaussian posterior over a latent vector `z`. The pivot word is
//! reconstructed from `z`; the context words are reconstructed from a topic
//! mixture `ζ = softmax(W z + b)` over shared topic-word weights `β`.

pub mod checkpoint;
pub mod corpus;
pub mod densemode;
pub mod diffcore;
pub mod eval;
pub mod inference;
pub mod model;
pub mod synthetic;
pub mod trainer;
pub mod word2vec;
