//! Grouped token pruning transformer for 2D keypoint estimation on CPU.
//!
//! An image is tokenised by a small conv stem, processed by a coarse encoder
//! that starts from a single human token, split into head / upper / lower
//! groups, refined by group attention in a fine encoder, and decoded by a
//! coordinate-classification head. Visual tokens are pruned three times
//! using softmax-pooled keypoint attention.

pub mod checkpoint;
pub mod coarse_encoder;
pub mod complexity;
pub mod config;
pub mod dump;
pub mod error;
pub mod fine_encoder;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod pruning;
pub mod schema;
pub mod simcc_head;
pub mod synthdata;
pub mod tokenizer;
pub mod training;
pub mod transition;

pub use config::{validate_config, Ablation, AttentionKind, IntroductionMode, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::{ForwardOptions, ForwardOutput, Model};
pub use pruning::{PruneDecision, Pruner};
pub use schema::{build_schema, DenseLayout, Group, KeypointSchema, Mode};
