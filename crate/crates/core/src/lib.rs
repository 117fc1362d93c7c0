//! Unified single-channel / multi-channel acoustic model.
//!
//! One model serves two input types: single-channel audio (a primary channel
//! coming from a lone microphone or an on-device beamformer) and
//! multi-channel audio (the primary channel plus two raw auxiliary
//! microphone channels). Each input type has its own frontend; both
//! frontends feed a shared backend, so the backend learns from every
//! utterance while each frontend only ever sees its own input type.
//!
//! The crate is self-contained: it ships a synthetic microphone-array data
//! generator ([`signal_sim`]), STFT feature extraction with low-frame-rate
//! stacking ([`features`]), a trainable neural beamforming layer with
//! super-directive initialization ([`beamform`]), hand-written LSTM kernels
//! with finite-difference-verified backward passes ([`neural_core`]), the
//! assembled model with checkpointing ([`unified_model`]), a mixed-batch
//! trainer with per-partition gradient routing ([`trainer`]), and an
//! SNR-binned evaluation harness with a reproducible experiment suite
//! ([`eval_harness`]).

pub mod beamform;
pub mod error;
pub mod eval_harness;
pub mod features;
pub mod neural_core;
pub mod params;
pub mod rng;
pub mod signal_sim;
pub mod trainer;
pub mod unified_model;

pub(crate) mod fftu;

pub use error::{Error, Result};
pub use params::{
    init_store_from_specs, GradStore, InitKind, ParamTensor, ParameterStore, Partition, TensorSpec,
};
