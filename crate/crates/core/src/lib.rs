//! One-shot personalization of a small text-conditioned diffusion model with
//! a tuning encoder: the encoder predicts a soft concept embedding and
//! low-rank attention offsets, which a short tuning run then refines.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod denoiser;
pub mod dual_path;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod fixtures;
pub mod foundation;
pub mod lora;
pub mod nn;
pub mod personalize;
pub mod pretrain;
pub mod regularization;
pub mod token_space;

pub use error::{Error, Result};
