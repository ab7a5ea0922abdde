//! Contrastive pretraining, diffusion training, losses and the training log.

mod contrastive;
mod diffusion;
mod losses;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use contrastive::{pair_score_means, train_contrastive, OptimizerKind, StageOneConfig};
pub use diffusion::{resume_diffusion, train_diffusion, StageTwoConfig};
pub use losses::{
    contrastive_loss, contrastive_loss_var, diffusion_loss, elbow_loss, elbow_loss_var, mse_var,
    perceptual_loss, perceptual_loss_var, total_loss, velocity_loss, velocity_loss_var,
    LossComponents, LossWeights, SCORE_CLAMP,
};

/// Summary of one finished epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimiser steps taken so far.
    pub step: u64,
    /// Batch-averaged unweighted loss terms.
    pub components: Vec<(&'static str, f64)>,
    pub total: f64,
    pub wall_secs: f64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        let mut s = format!("epoch={} step={}", self.epoch, self.step);
        for (name, v) in &self.components {
            s.push_str(&format!(" {name}={v:.6e}"));
        }
        s.push_str(&format!(" total={:.6e} wall={:.3}", self.total, self.wall_secs));
        s
    }
}

/// Append-only text log, one [`EpochRecord`] per line.
#[derive(Clone, Debug)]
pub struct TrainingLog {
    path: PathBuf,
}

impl TrainingLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, rec: &EpochRecord) -> Result<()> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{}", rec.to_line()).map_err(|e| Error::io(&self.path, e))
    }
}

/// Called after every epoch with the record and the current model.
pub type EpochHook<'a> = dyn FnMut(&EpochRecord, &crate::nn::ModelBundle) -> Result<()> + 'a;

/// Deterministic 64-bit mix of a seed and stream indices.
pub(crate) fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, a, b))
}

/// Shuffled index batches for one epoch; a trailing batch smaller than
/// `min_batch` is dropped.
pub(crate) fn epoch_batches(n: usize, batch: usize, min_batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, 0xBA7C4, epoch as u64));
    idx.chunks(batch)
        .filter(|c| c.len() >= min_batch)
        .map(<[usize]>::to_vec)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_index_once() {
        let b = epoch_batches(10, 4, 1, 3, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(epoch_batches(10, 4, 3, 3, 0).len(), 2);
        assert_ne!(epoch_batches(10, 4, 1, 3, 0), epoch_batches(10, 4, 1, 3, 1));
    }

    #[test]
    fn log_appends_lines() {
        let dir = tempfile::tempdir().unwrap();
        let log = TrainingLog::new(dir.path().join("train.log"));
        let rec = EpochRecord {
            epoch: 1,
            step: 4,
            components: vec![("ddim", 0.5)],
            total: 0.5,
            wall_secs: 0.25,
        };
        log.append(&rec).unwrap();
        log.append(&rec).unwrap();
        let text = std::fs::read_to_string(log.path()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("epoch=1 step=4 ddim=5.000000e-1"));
    }
}
