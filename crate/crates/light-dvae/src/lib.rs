//! Transformer dynamical variational autoencoders for speech power
//! spectrograms.
//!
//! The crate provides the full pipeline: waveform preprocessing and STFT
//! analysis ([`dsp`]), a reverse-mode autodiff substrate ([`tensor`]) with
//! Transformer building blocks ([`nn`]), the generative/inference model with
//! its ablation variants ([`model`]), ELBO training ([`training`]),
//! evaluation metrics ([`metrics`]) and corpus handling ([`data`]).

pub mod data;
pub mod distributions;
pub mod dsp;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
