//! Skill-token discovery for continuous control.
//!
//! Continuous actions are quantized into a small codebook conditioned on a
//! learned latent state, code sequences are compressed with byte-pair
//! encoding into variable-length skill tokens, and a policy over tokens is
//! trained by behavior cloning. A point-mass task suite and an ablation
//! harness exercise the whole pipeline.

pub mod autodiff;
pub mod bpe;
pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod envsim;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod loss;
pub mod model;
pub mod nn;
pub mod params;
pub mod policy;
pub mod pretrain;
pub mod quantizer;
pub mod tensor;
pub mod worldmodel;

pub use error::{Error, Result};
