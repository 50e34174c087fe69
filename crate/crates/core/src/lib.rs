// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse-autoencoder toolkit for finding, probing and intervening on concept
//! latents in the residual stream of small deterministic transformers.

pub mod audit;
pub mod container;
pub mod corpus;
pub mod error;
pub mod fixture;
pub mod interp;
pub mod intervene;
pub mod probe;
pub mod runtime;
pub mod sae;
pub mod tensor;

pub use audit::{AnswerTokens, AuditReport, PairedDelta};
pub use corpus::{CorpusSpec, Group, NoteRecord, VocabLayout, Vocabulary};
pub use error::{Error, Result};
pub use intervene::{AblationSpec, EffectResult, SteerSpec};
pub use probe::{FeatureMatrix, ProbeModel};
pub use runtime::{
    build_planted_model, build_random_model, Edit, HookPoint, LogitMatrix, Model, ModelConfig,
    PlantedModelSpec, Precision, ResidualActivations, SamplerConfig, Site, TokenSequence,
};
pub use sae::{Activation, LatentVector, SaeModel};
pub use tensor::Matrix;
