//! TiMo: a hierarchical spatiotemporal transformer for satellite image
//! time series at desk scale.
//!
//! The crate provides the three attention mechanisms (MHSA, gyroscope
//! attention, and its differential variant) with brute-force oracles and
//! gradient validation, the four-stage encoder with variant configs and
//! pretrain-to-finetune weight surgery, mask-unit masked-image-modeling
//! pretraining, sampling-manifest generation with a synthetic data
//! stand-in, and analytic FLOPs/parameter accounting.

pub mod attention;
pub mod encoder;
pub mod error;
pub mod nn;
pub mod numerics;
pub mod pretrain;
pub mod sampler;
pub mod tally;
pub mod validate;

pub use error::{Error, Result};
