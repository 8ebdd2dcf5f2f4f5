//! Sequential representation quantization autoencoder.
//!
//! Encoded frame sequences are snapped to a learnable codebook, collapsed
//! into one vector per run of identical codewords, and decoded back to
//! features. A small transcribed set ties the codewords to a known unit
//! inventory through a distance-based CTC objective.

pub mod cli;
pub mod codebook;
pub mod config;
pub mod ctc;
pub mod data;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod optim;
pub mod segmentation;
pub mod seqmodel;
pub mod training;

pub use error::{Error, Result};

/// Double-precision instantiations used throughout training and evaluation.
pub type Tensor = numerics::Tensor<f64>;
pub type Tape = numerics::Tape<f64>;
pub type Var<'t> = numerics::Var<'t, f64>;
pub type Codebook = codebook::Codebook<f64>;
pub type FeatureSequence = data::FeatureSequence<f64>;
pub type Utterance = data::Utterance<f64>;
