//! Group activity feature (GAF) learning with human-in-the-loop adaptation.
//!
//! This crate is the numeric core: person-feature composition, a pooled
//! dual-branch GAF encoder with a location-guided appearance head,
//! query-aware and diversity-aware video selection, contrastive fine-tuning
//! with manual backpropagation, a synthetic dataset generator and the
//! retrieval evaluation protocol.
//!
//! It is `no_std` and only needs `alloc`. File formats, the HTTP service and
//! the command line live in the `gafl` crate.

#![no_std]
#![warn(missing_debug_implementations, rust_2018_idioms)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod linalg;
pub mod optim;
pub mod rng;
pub mod selection;

pub use dataset::{
    generate_synthetic, oracle_annotate, ClassEntry, Dataset, DatasetEntry, Split, SyntheticConfig,
};
pub use encoder::{
    compose_person_feature, encode_gaf, predict_appearance, pretrain, pretrain_loss,
    spatial_positional_encoding, Block, EncoderParams, Gaf, MaskPattern, PretrainConfig,
    PretrainReport, VideoFeatures,
};
pub use error::{Error, Result};
pub use eval::{EvalConfig, TrialResult, Variant};
pub use finetune::{finetune, Annotation, FinetuneConfig, Label, LossReport};
pub use optim::{AdamConfig, AdamState};
pub use selection::{coreset_select, query_aware_select, SelectionConfig, SelectionScores};
