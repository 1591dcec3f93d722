//! Few-shot adaptation to concept shift through latent trend embeddings.
//!
//! A frozen feature extractor and a trained head predict a Gaussian outcome
//! conditioned on a low-dimensional trend vector. At test time only the
//! trend is optimized, so model weights never change after training.

pub mod autodiff;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod synth;
pub mod trend;
pub mod train;
pub mod adapt;
pub mod metrics;
pub mod config;
pub mod export;
pub mod pipeline;
