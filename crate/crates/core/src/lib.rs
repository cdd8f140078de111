//! Unsupervised domain adaptation with a shared encoder trained against a
//! domain discriminator, a class-center loss on labelled source features,
//! and a thresholded pseudo-label center loss on target features.
//!
//! Everything runs on a small reverse-mode autodiff engine over dense
//! `f64` matrices ([`autodiff`]), with fully connected networks
//! ([`models`]), the loss terms ([`losses`]), synthetic and IDX data
//! ([`data`]), the alternating training loop ([`trainer`]) and evaluation
//! and ablation tooling ([`eval`]).

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor2;
