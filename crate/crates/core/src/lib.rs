//! Desk-scale laboratory for unsupervised corpus-poisoning attacks on
//! dense retrieval.
//!
//! The crate trains a toy bi-encoder retriever, a token-embedding
//! reconstruction model and per-document perturbation models, then
//! measures attack success, semantic irrelevance and fluency.

pub mod baselines;
pub mod advtrain;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod fluency;
pub mod index;
pub mod numerics;
pub mod perturber;
pub mod poison;
pub mod reconstructor;
pub mod seeding;
pub mod transformer;

pub use error::{Error, Result};
