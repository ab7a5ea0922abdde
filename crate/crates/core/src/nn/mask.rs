use rand::Rng;

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Per-clip condition dropout: with probability `uncond_rate` the whole music
/// embedding is swapped for the null embedding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RandomMask {
    uncond_rate: f64,
}

impl RandomMask {
    pub fn new(uncond_rate: f64) -> Result<Self> {
        ensure!(
            (0.0..=1.0).contains(&uncond_rate),
            Argument,
            "uncond_rate must lie in [0, 1], got {uncond_rate}"
        );
        Ok(Self { uncond_rate })
    }

    pub fn uncond_rate(&self) -> f64 {
        self.uncond_rate
    }

    /// One draw per clip; `true` means drop the condition.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> bool {
        rng.gen::<f64>() < self.uncond_rate
    }

    /// Apply to a concrete embedding `[N, d]`, broadcasting the `[1, d]` null row.
    pub fn apply<R: Rng + ?Sized>(&self, music_emb: &Tensor, null: &Tensor, rng: &mut R) -> Result<Tensor> {
        ensure!(
            null.rows() == 1 && null.cols() == music_emb.cols(),
            Shape,
            "null embedding must be [1, {}], got {:?}",
            music_emb.cols(),
            null.shape()
        );
        Ok(if self.draw(rng) {
            Tensor::from_fn(music_emb.rows(), music_emb.cols(), |_, c| null.get(0, c))
        } else {
            music_emb.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn extreme_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let emb = Tensor::from_fn(4, 2, |r, c| (r + c) as f64);
        let null = Tensor::filled(1, 2, -1.0);
        let keep = RandomMask::new(0.0).unwrap();
        let drop = RandomMask::new(1.0).unwrap();
        for _ in 0..100 {
            assert_eq!(keep.apply(&emb, &null, &mut rng).unwrap(), emb);
            assert_eq!(drop.apply(&emb, &null, &mut rng).unwrap(), Tensor::filled(4, 2, -1.0));
        }
        assert!(RandomMask::new(1.5).is_err());
        assert!(keep.apply(&emb, &Tensor::zeros(1, 3), &mut rng).is_err());
    }
}
