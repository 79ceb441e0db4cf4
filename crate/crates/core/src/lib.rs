//! A desk-scale neural ranking laboratory.
//!
//! Transformer encoders with four ranking heads built on top of them
//! (representation cosine, last-layer `[CLS]`, multi-layer `[CLS]`, and a
//! projected translation-matrix head), the K-NRM and Conv-KNRM kernel-pooling
//! baselines, BM25 candidate generation, Mask-LM / next-sequence pretraining,
//! classification-loss fine-tuning, ranking metrics with permutation tests,
//! and attention / term-influence analyses.

pub mod error;
pub mod tensor;

pub use error::{NeurankError, Result};
pub mod bm25;
pub mod data;
pub mod io;
pub mod text;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod rankers;
pub mod evaluation;
pub mod synthetic;
pub mod training;
pub mod analysis;
