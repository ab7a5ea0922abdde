use serde::{Deserialize, Serialize};

use super::layers::Linear;
use super::params::{Bound, Init, Params};
use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairHeadConfig {
    pub hidden: usize,
}

impl Default for PairHeadConfig {
    fn default() -> Self {
        Self { hidden: 128 }
    }
}

/// Two-layer MLP over `[pooled music ; motion]` with a sigmoid output: the
/// probability that a music clip and a motion clip belong together.
#[derive(Clone, Debug)]
pub struct PairHead {
    cfg: PairHeadConfig,
    music_dim: usize,
    motion_dim: usize,
    params: Params,
    hidden: Linear,
    out: Linear,
}

impl PairHead {
    pub fn new(cfg: PairHeadConfig, music_dim: usize, motion_dim: usize, seed: u64) -> Result<Self> {
        ensure!(
            cfg.hidden >= 2 && cfg.hidden % 2 == 0,
            Config,
            "pair head hidden width must be a positive even number, got {}",
            cfg.hidden
        );
        ensure!(
            music_dim == motion_dim,
            Config,
            "pair head expects equal embedding widths, got {music_dim} and {motion_dim}"
        );
        let mut p = Params::new();
        let mut init = Init::new(seed);
        let hidden = Linear::new(&mut p, &mut init, "hidden", music_dim + motion_dim, cfg.hidden);
        let out = Linear::new(&mut p, &mut init, "out", cfg.hidden, 1);
        // Start as a distance detector: hidden units come in sign-flipped pairs
        // reading `music - motion`, and the output sums them negatively, so the
        // initial score already falls with embedding distance.
        let half = cfg.hidden / 2;
        let base = init.glorot(music_dim, half);
        let w = Tensor::from_fn(music_dim + motion_dim, cfg.hidden, |r, c| {
            let v = base.get(r % music_dim, c % half);
            let v = if c < half { v } else { -v };
            if r < music_dim {
                v
            } else {
                -v
            }
        });
        let w_out = Tensor::filled(cfg.hidden, 1, -1.0 / half as f64);
        let names = ["hidden.weight", "out.weight"];
        for (name, t) in names.into_iter().zip([w, w_out]) {
            let id = p.find(name).expect("declared above");
            p.set(id, t)?;
        }
        Ok(Self {
            cfg,
            music_dim,
            motion_dim,
            params: p,
            hidden,
            out,
        })
    }

    pub fn config(&self) -> &PairHeadConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Scores for stacked pairs: `music [P, dm]`, `motion [P, dx]` -> `[P, 1]`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, music: Var, motion: Var) -> Var {
        let x = g.concat_cols(&[music, motion]);
        let h = self.hidden.forward(g, b, x);
        let h = g.silu(h);
        let logit = self.out.forward(g, b, h);
        g.sigmoid(logit)
    }

    /// Shift the output bias by `delta` logits.
    pub fn shift_output_bias(&mut self, delta: f64) {
        let id = self.params.find("out.bias").expect("declared in new");
        let b = self.params.get(id).map(|v| v + delta);
        self.params.set(id, b).expect("same shape");
    }

    /// All `B x B` combinations of pooled music rows and motion rows;
    /// entry `(i, j)` scores music `i` with motion `j`.
    pub fn forward_all_pairs(&self, g: &mut Graph, b: &Bound, music: Var, motion: Var) -> Var {
        let n = g.value(music).rows();
        assert_eq!(n, g.value(motion).rows(), "pair batch size mismatch");
        let mi: Vec<usize> = (0..n * n).map(|k| k / n).collect();
        let xj: Vec<usize> = (0..n * n).map(|k| k % n).collect();
        let m = g.gather_rows(music, &mi);
        let x = g.gather_rows(motion, &xj);
        let s = self.forward(g, b, m, x);
        g.reshape(s, n, n)
    }

    /// Score a single pair. `music_emb` may be per-frame `[N, dm]`; it is mean-pooled first.
    pub fn score(&self, music_emb: &Tensor, motion_emb: &Tensor) -> Result<f64> {
        ensure!(
            music_emb.cols() == self.music_dim && music_emb.rows() >= 1,
            Shape,
            "pair head expects music width {}, got {:?}",
            self.music_dim,
            music_emb.shape()
        );
        ensure!(
            motion_emb.shape() == (1, self.motion_dim),
            Shape,
            "pair head expects motion shape (1, {}), got {:?}",
            self.motion_dim,
            motion_emb.shape()
        );
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let m = g.constant(music_emb.clone());
        let m = g.mean_rows(m);
        let x = g.constant(motion_emb.clone());
        let s = self.forward(&mut g, &b, m, x);
        Ok(g.scalar(s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_pairs_matches_individual_scores() {
        let head = PairHead::new(PairHeadConfig { hidden: 6 }, 4, 4, 2).unwrap();
        let music = Tensor::from_fn(3, 4, |r, c| (r as f64 - c as f64) * 0.3);
        let motion = Tensor::from_fn(3, 4, |r, c| (r * c) as f64 * 0.2 - 0.4);
        let mut g = Graph::new();
        let b = head.params().bind(&mut g, false);
        let m = g.constant(music.clone());
        let x = g.constant(motion.clone());
        let s = head.forward_all_pairs(&mut g, &b, m, x);
        let all = g.value(s).clone();
        for i in 0..3 {
            for j in 0..3 {
                let mi = Tensor::from_vec(1, 4, music.row(i).to_vec());
                let xj = Tensor::from_vec(1, 4, motion.row(j).to_vec());
                let single = head.score(&mi, &xj).unwrap();
                assert!((all.get(i, j) - single).abs() < 1e-12);
                assert!(single > 0.0 && single < 1.0);
            }
        }
    }
}
