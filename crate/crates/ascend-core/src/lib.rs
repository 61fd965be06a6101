//! Phenotype-aware EHR sequence modeling at desk scale.
//!
//! The pipeline runs end to end on synthetic cohorts: clinical events are
//! mapped to phenotype tokens ([`phenomap`]), tokenized into patient
//! sequences ([`seqbuild`]), used to pretrain a small transformer encoder
//! with masked-token prediction ([`pretrain`]), fine-tuned with a Cox
//! partial-likelihood loss for five time-to-event outcomes ([`finetune`]),
//! and evaluated with survival metrics ([`metrics`]). The [`tensor`] module
//! provides the dense-tensor autodiff engine everything trains on, and
//! [`synthcohort`] generates reproducible cohorts with planted hazard
//! signals for verification.

pub mod config;
pub mod events;
pub mod finetune;
pub mod metrics;
pub mod model;
pub mod phenomap;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod seqbuild;
pub mod synthcohort;
pub mod tensor;

pub use events::{EventType, MedicalEvent, Outcome, PatientDemographics, OUTCOMES};
pub use phenomap::{MappingTable, Vocabulary};
pub use seqbuild::{IndexSample, SurvivalLabel, TokenSequence};
pub use tensor::Tensor;
