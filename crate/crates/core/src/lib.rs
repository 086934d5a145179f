//! IVUS-Net: lumen and media-adventitia segmentation of intravascular
//! ultrasound frames.
//!
//! The crate carries everything from the numeric substrate up: a small
//! reverse-mode autodiff engine ([`autograd`]) over dense tensors
//! ([`tensor`]), the network operators ([`nn`]), the encoder/decoder
//! topology ([`arch`]), data handling ([`data`], [`augment`]), training and
//! ensembling ([`train`]), ellipse-based contour extraction
//! ([`postprocess`]) and the evaluation metrics ([`metrics`]).

pub mod arch;
pub mod augment;
pub mod autograd;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod postprocess;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};

#[cfg(test)]
#[path = "../tests/support/oracles.rs"]
#[allow(dead_code)]
mod oracles;
