//! Contrastive language–music pretraining for ABC notation.

pub mod ablation;
pub mod contrastive;
pub mod corpus;
pub mod m3;
pub mod nn;
pub mod patch;
pub mod retrieval;
pub mod synth;
pub mod text;
