//! Data adaptive traceback: zero-shot sampling of a web-scale embedding bank
//! followed by semi-supervised, contrastive adaptation of a small encoder.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod cli;
pub mod config;
pub mod embank;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod objective;
pub mod pipeline;
pub mod pseudo;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod trainer;

pub use error::{DatError, Result};
