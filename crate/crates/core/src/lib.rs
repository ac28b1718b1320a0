//! Attention-augmented BiLSTM toolkit for multivariate time-series fault
//! detection and attention-based cause identification.
//!
//! The crate is organized around a small reverse-mode autodiff tape
//! ([`tensor`]), the attention blocks and recurrent cells built on it
//! ([`attention`], [`recurrent`]), the full classification pipeline and its
//! checkpoint format ([`model`]), data ingestion and a synthetic benchmark
//! generator ([`data`]), and the training/evaluation/explanation layer
//! ([`train_eval`]).

pub mod error;
pub mod attention;
pub mod data;
pub mod model;
pub mod recurrent;
pub mod seeding;
pub mod train_eval;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, NodeId, Tensor};
