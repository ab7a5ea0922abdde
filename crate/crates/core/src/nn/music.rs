use serde::{Deserialize, Serialize};

use super::layers::{LayerNorm, Linear, TemporalConv};
use super::params::{Bound, Init, Params};
use crate::autodiff::{Graph, Var};
use crate::data::{MusicFeatureSequence, DEFAULT_BANDS, MUSIC_FRAMES_PER_POSE};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MusicEncoderConfig {
    /// Feature bands per music frame.
    pub bands: usize,
    pub n_groups: usize,
    pub residual_layers_per_group: usize,
    pub channels: Vec<usize>,
    pub temporal_pool_factors: Vec<usize>,
    pub out_dim: usize,
}

impl Default for MusicEncoderConfig {
    fn default() -> Self {
        Self {
            bands: DEFAULT_BANDS,
            n_groups: 3,
            residual_layers_per_group: 3,
            channels: vec![64, 128, 256],
            temporal_pool_factors: vec![3, 1, 1],
            out_dim: 256,
        }
    }
}

impl MusicEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.bands > 0 && self.out_dim > 0, Config, "music encoder dims must be positive");
        ensure!(self.n_groups >= 1, Config, "music encoder needs at least one group");
        ensure!(
            self.residual_layers_per_group >= 1,
            Config,
            "music encoder groups need at least one residual layer"
        );
        ensure!(
            self.channels.len() == self.n_groups && self.temporal_pool_factors.len() == self.n_groups,
            Config,
            "music encoder channels and pool factors need one entry per group ({})",
            self.n_groups
        );
        ensure!(self.channels.iter().all(|&c| c > 0), Config, "music encoder channels must be positive");
        let product: usize = self.temporal_pool_factors.iter().product();
        ensure!(
            product == MUSIC_FRAMES_PER_POSE,
            Config,
            "temporal pool factors must multiply to {MUSIC_FRAMES_PER_POSE}, got {product}"
        );
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Residual {
    conv_a: TemporalConv,
    conv_b: TemporalConv,
    skip: Option<Linear>,
}

impl Residual {
    fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        let h = self.conv_a.forward(g, b, x);
        let h = g.silu(h);
        let h = self.conv_b.forward(g, b, h);
        let s = match &self.skip {
            Some(lin) => lin.forward(g, b, x),
            None => x,
        };
        let sum = g.add(h, s);
        g.silu(sum)
    }
}

/// Residual 1-D convolutional encoder from band energies to one embedding per
/// motion frame.
#[derive(Clone, Debug)]
pub struct MusicEncoder {
    cfg: MusicEncoderConfig,
    params: Params,
    groups: Vec<(Vec<Residual>, usize)>,
    out: Linear,
    out_norm: LayerNorm,
}

impl MusicEncoder {
    pub fn new(cfg: MusicEncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut p = Params::new();
        let mut init = Init::new(seed);
        let mut groups = Vec::with_capacity(cfg.n_groups);
        let mut width = cfg.bands;
        for (gi, (&ch, &pool)) in cfg.channels.iter().zip(&cfg.temporal_pool_factors).enumerate() {
            let mut layers = Vec::with_capacity(cfg.residual_layers_per_group);
            for li in 0..cfg.residual_layers_per_group {
                let name = format!("group{gi}.res{li}");
                let conv_a = TemporalConv::new(&mut p, &mut init, &format!("{name}.conv_a"), width, ch, 1);
                let conv_b = TemporalConv::new(&mut p, &mut init, &format!("{name}.conv_b"), ch, ch, 1);
                let skip = (width != ch)
                    .then(|| Linear::new(&mut p, &mut init, &format!("{name}.skip"), width, ch));
                layers.push(Residual { conv_a, conv_b, skip });
                width = ch;
            }
            groups.push((layers, pool));
        }
        let out = Linear::new(&mut p, &mut init, "out", width, cfg.out_dim);
        let out_norm = LayerNorm::new(&mut p, "out_norm", cfg.out_dim);
        Ok(Self {
            cfg,
            params: p,
            groups,
            out,
            out_norm,
        })
    }

    pub fn config(&self) -> &MusicEncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn out_dim(&self) -> usize {
        self.cfg.out_dim
    }

    /// `[M, bands] -> [M / 3, out_dim]`. `M` must be divisible by 3.
    pub fn forward(&self, g: &mut Graph, b: &Bound, music: Var) -> Var {
        let mut h = music;
        for (layers, pool) in &self.groups {
            for layer in layers {
                h = layer.forward(g, b, h);
            }
            if *pool > 1 {
                h = g.max_pool_rows(h, *pool);
            }
        }
        let y = self.out.forward(g, b, h);
        self.out_norm.forward(g, b, y)
    }

    fn check(&self, music: &Tensor) -> Result<()> {
        ensure!(
            music.cols() == self.cfg.bands,
            Shape,
            "music encoder expects {} bands, got {}",
            self.cfg.bands,
            music.cols()
        );
        ensure!(
            music.rows() >= MUSIC_FRAMES_PER_POSE && music.rows() % MUSIC_FRAMES_PER_POSE == 0,
            Shape,
            "music frame count {} is not a positive multiple of {MUSIC_FRAMES_PER_POSE}",
            music.rows()
        );
        Ok(())
    }

    /// Per-frame embeddings `[M / 3, out_dim]`.
    pub fn encode_tensor(&self, music: &Tensor) -> Result<Tensor> {
        self.check(music)?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(music.clone());
        let y = self.forward(&mut g, &b, x);
        Ok(g.value(y).clone())
    }

    pub fn encode(&self, music: &MusicFeatureSequence) -> Result<Tensor> {
        self.encode_tensor(&music.to_tensor())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> MusicEncoderConfig {
        MusicEncoderConfig {
            bands: 6,
            n_groups: 2,
            residual_layers_per_group: 1,
            channels: vec![5, 4],
            temporal_pool_factors: vec![3, 1],
            out_dim: 3,
        }
    }

    #[test]
    fn pools_to_motion_rate() {
        let enc = MusicEncoder::new(tiny(), 1).unwrap();
        let music = Tensor::from_fn(12, 6, |r, c| ((r * 7 + c) % 5) as f64 / 5.0);
        let out = enc.encode_tensor(&music).unwrap();
        assert_eq!(out.shape(), (4, 3));
        assert_eq!(out, enc.encode_tensor(&music).unwrap());
    }

    #[test]
    fn rejects_misaligned_input() {
        let enc = MusicEncoder::new(tiny(), 1).unwrap();
        assert!(enc.encode_tensor(&Tensor::zeros(10, 6)).is_err());
        assert!(enc.encode_tensor(&Tensor::zeros(12, 5)).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny();
        cfg.temporal_pool_factors = vec![1, 1];
        assert!(MusicEncoder::new(cfg, 0).is_err());
        let mut cfg = tiny();
        cfg.channels = vec![4];
        assert!(cfg.validate().is_err());
        assert!(MusicEncoderConfig::default().validate().is_ok());
    }
}
