//! Evaluation metrics: MSE, FGD, beat consistency and diversity, plus the
//! beat extractors they rely on.

mod beats;
mod features;
mod report;

pub use beats::{
    beat_consistency, beat_recall, clip_beat_consistency, extract_motion_beats, extract_music_beats,
    kinetic_velocity, moving_average, onset_strength, BeatList, BC_SIGMA, ONSET_MIN_SEPARATION,
    VELOCITY_SMOOTHING,
};
pub use features::{
    diversity, feature_diversity, fgd, fit_gaussian, frechet_distance, motion_features, mse,
    permuted_feature_gap, GaussianStats, DIVERSITY_SAMPLES,
};
pub use report::{EvalReport, MetricRecord};
