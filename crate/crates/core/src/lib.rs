//! Music-driven conducting-motion generation with a conditional diffusion model.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! * [`data`]: pose/music clip types, the on-disk dataset format and a
//!   synthetic metronome-conductor generator with known beats.
//! * [`diffusion`]: noise schedules, the forward process, DDPM and DDIM
//!   samplers and conversions between noise- and sample-prediction.
//! * [`nn`]: music encoder, skeleton-graph motion encoder, pairing head,
//!   random condition mask and the cross-attention transformer denoiser, all
//!   built on the small reverse-mode engine in [`autodiff`].
//! * [`train`]: contrastive pretraining and diffusion training with the full
//!   loss suite.
//! * [`metrics`]: MSE, Fréchet distance over latent motion features, beat
//!   consistency and diversity.

pub mod autodiff;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
