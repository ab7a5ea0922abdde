//! Trainable networks: music encoder, skeleton-graph motion encoder, pairing
//! head, condition mask and the cross-attention transformer denoiser.

mod checkpoint;
mod denoiser;
mod head;
mod layers;
mod mask;
mod motion;
mod music;
mod params;

pub use checkpoint::{DiffusionModel, ModelBundle, Progress, ScheduleConfig, Stage, FORMAT_VERSION};
pub use denoiser::{CondVar, DenoiserConfig, Parameterized, PredictionTarget, TransformerDenoiser};
pub use head::{PairHead, PairHeadConfig};
pub use layers::{positional_table, sinusoid, LayerNorm, Linear, TemporalConv};
pub use mask::RandomMask;
pub use motion::{MotionEncoder, MotionEncoderConfig};
pub use music::{MusicEncoder, MusicEncoderConfig};
pub use params::{Bound, Init, ParamId, Params};
