//! Self-supervised temporal ordering at desk scale.
//!
//! A frame is an unordered set of proposal feature vectors. A
//! future-masked transformer encoder turns a frame prefix into history
//! tokens; additive attention between history tokens and a candidate
//! frame's features, averaged over all pairs, yields a frame-transition
//! score. Training maximizes the score of the true next frame over all
//! competitors with a margin ranking loss. The crate also ships the
//! autodiff substrate this runs on, a deterministic synthetic data
//! generator, an AdamW trainer, ordering/retrieval evaluation, and a
//! FLOP-accounting benchmark for the head's sub-quadratic scaling in
//! sequence length.

pub mod accounting;
pub mod bench;
pub mod blocks;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod head;
pub mod optim;
pub mod params;
pub mod report;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use config::ModelConfig;
pub use error::{CoreError, Result};
pub use head::{ProposalSet, SequenceSample, TransitionTable};
pub use params::ParameterStore;
pub use tape::{NodeId, TapeGraph};
pub use tensor::Tensor;
