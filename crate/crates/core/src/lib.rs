//! Reconstruction-based visual anomaly detection with attention-guided
//! feature perturbation.
//!
//! A frozen ViT encoder produces multi-layer features that are fused into a
//! clean target. During training a small transformer decoder learns to
//! reconstruct that target from copies perturbed by Gaussian noise, where
//! the noise is concentrated on locations the encoder (and an EMA copy of
//! the decoder) attend to. At test time the per-position reconstruction
//! error is the anomaly map.
//!
//! Module map:
//!
//! - [`data`]: MVTec-style ingestion, toy dataset, few-shot augmentation
//! - [`encoder`]: frozen feature extractor and multi-layer fusion
//! - [`mask`]: prior / learnable / final guidance masks, EMA teacher
//! - [`perturb`]: feature- and image-level noise with curricula
//! - [`decoder`]: plain transformer decoder with manual gradients
//! - [`train`]: two-view training loop, AdamW, checkpoints
//! - [`score`]: anomaly maps and image scores
//! - [`metrics`]: image/pixel AUROC and per-region overlap
//! - [`cli`]: the `agp` command-line entry points

pub mod archive;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod perturb;
pub mod plot;
pub mod rng;
pub mod score;
pub mod train;

pub use error::{Error, Result};
