//! Speaker-invariant emotion embeddings for feature sequences.
//!
//! The crate trains a TDNN + BiLSTM + statistics-pooling embedding network
//! with an emotion head and a speaker head under four strategies: emotion
//! only, multi-task, domain-adversarial (gradient reversal on the speaker
//! branch), and cross-gradient data augmentation. It ships its own
//! reverse-mode autodiff tape, a binary feature-sequence format with a
//! synthetic multi-speaker generator, speaker-disjoint splitting, and an
//! evaluation kit that measures emotion accuracy on unseen speakers plus
//! linearly decodable speaker leakage in the embeddings.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod layers;
pub mod model;
pub mod rng;
pub mod suite;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
