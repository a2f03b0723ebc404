//! Contrastive query-focused summarization on long documents.
//!
//! The pipeline: long source documents are split into fixed-length,
//! overlapping segments, each segment is prefixed with the query and encoded
//! independently, and a decoder attends over the concatenated segment
//! encodings to generate a summary. Training combines three objectives —
//! summary generation, per-segment relevance classification, and an InfoNCE
//! contrastive term that pulls embeddings of relevant segments toward the
//! embedding of the gold summary.
//!
//! Modules mirror the pipeline stages:
//! * [`corpus`] — dataset adapters and the normalized instance format
//! * [`segmenter`] — tokenizer, vocabulary, and overlapping segmentation
//! * [`labeler`] — gold-span and bigram-overlap segment labeling
//! * [`tensor`] / [`nn`] — autodiff engine and transformer building blocks
//! * [`model`] — the segment encoder-decoder with scorer and projection heads
//! * [`contrastive`] — positive/negative selection and the InfoNCE loss
//! * [`trainer`] — joint objective, optimizer, training loop, checkpointing
//! * [`evaluation`] — ROUGE metrics and split evaluation
//! * [`config`] / [`manifest`] — session TOML files and run provenance
//! * [`cli`] — command-line entry points

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod labeler;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod segmenter;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testsupport;

pub use error::{Error, Result};
