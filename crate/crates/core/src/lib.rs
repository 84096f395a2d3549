//! Reaction-aware molecular representation learning.
//!
//! The pipeline parses SMILES into hydrogen-explicit graphs, featurizes atoms
//! as concatenated one-hot blocks, encodes graphs with message-passing
//! networks, pre-trains a teacher encoder on reactions with a yield-scaled
//! margin loss, and distills the teacher into a property-prediction student
//! through a contrastive objective.

pub mod checkpoint;
pub mod chem;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod evalkit;
pub mod featurize;
pub mod ndiff;
pub mod pretrain;
pub mod synthetic;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use chem::{parse_reaction_line, parse_smiles, MolGraph, ParseError, ReactionRecord};
pub use data::DataError;
pub use distill::{DistillConfig, DistillError, Predictor, PropertyDataset, Split, TaskKind};
pub use encoder::{Architecture, EncoderError, EncoderParams, EncoderSpec};
pub use evalkit::{EvalError, PerturbationSet};
pub use featurize::{build_vocab, FeatureError, FeatureVocab};
pub use ndiff::{Tensor, TensorError};
pub use pretrain::{PretrainConfig, PretrainError, RankingResult};
