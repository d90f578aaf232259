//! Vocabulary surgery, embedding remapping and offline cosine distillation
//! for sentence encoders.
//!
//! The stages are: build a target vocabulary ([`builder`]), segment text
//! with it ([`segmenter`]), clone a teacher's embedding table onto it
//! ([`cloner`]), precompute teacher vectors ([`store`]), distill a student
//! against them ([`train`]) and score it on STS pairs ([`eval`]).

pub mod builder;
pub mod cloner;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod segmenter;
pub mod store;
pub mod tensor;
pub mod train;
mod trie;
pub mod vocab;

pub use builder::{build, BuildPlan};
pub use cloner::{clone_bundle, compose, EmbeddingMatrix, ModelBundle, ModelConfig, Strategy, TokenMapping};
pub use corpus::{CorpusRecord, FrequencyTable, BOUNDARY};
pub use error::{Error, Result};
pub use eval::{evaluate_sts, pearson, spearman, StsPair, StsReport};
pub use model::{StudentModel, Trainable};
pub use segmenter::{Pretokenize, Segmenter};
pub use store::{Dataset, QuotaPolicy, TargetKind, TeacherRecord};
pub use train::{train, TrainConfig};
pub use vocab::Vocabulary;
