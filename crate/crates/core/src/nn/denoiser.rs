use serde::{Deserialize, Serialize};

use super::layers::{positional_table, sinusoid, LayerNorm, Linear};
use super::params::{Bound, Init, ParamId, Params};
use crate::autodiff::{Graph, Var};
use crate::data::POSE_DIM;
use crate::diffusion::{predict_x0_from_eps, Condition, Denoiser, NoiseSchedule};
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub timestep_embedding_dim: usize,
    /// Width of the music embeddings it attends to.
    pub music_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            model_dim: 256,
            heads: 4,
            ffn_dim: 1024,
            timestep_embedding_dim: 256,
            music_dim: 256,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.layers >= 1, Config, "denoiser needs at least one layer");
        ensure!(
            self.model_dim > 0 && self.heads > 0 && self.ffn_dim > 0 && self.music_dim > 0,
            Config,
            "denoiser widths must be positive"
        );
        ensure!(
            self.model_dim % self.heads == 0,
            Config,
            "model_dim {} is not divisible by heads {}",
            self.model_dim,
            self.heads
        );
        ensure!(
            self.timestep_embedding_dim >= 2 && self.timestep_embedding_dim % 2 == 0,
            Config,
            "timestep embedding width must be a positive even number"
        );
        Ok(())
    }
}

/// What the network's raw output represents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionTarget {
    /// Clean motion.
    #[default]
    X0,
    /// The injected noise.
    Eps,
}

impl std::str::FromStr for PredictionTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x0" => Ok(Self::X0),
            "eps" => Ok(Self::Eps),
            other => Err(Error::Argument(format!("unknown prediction target `{other}` (x0|eps)"))),
        }
    }
}

impl std::fmt::Display for PredictionTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::X0 => "x0",
            Self::Eps => "eps",
        })
    }
}

/// Conditioning on the tape.
#[derive(Clone, Copy, Debug)]
pub enum CondVar {
    Music(Var),
    Null,
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn new(p: &mut Params, init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(p, init, &format!("{name}.q"), dim, dim),
            k: Linear::new(p, init, &format!("{name}.k"), dim, dim),
            v: Linear::new(p, init, &format!("{name}.v"), dim, dim),
            o: Linear::new(p, init, &format!("{name}.o"), dim, dim),
            heads,
        }
    }

    fn forward(&self, g: &mut Graph, b: &Bound, x: Var, memory: Var) -> Var {
        let q = self.q.forward(g, b, x);
        let k = self.k.forward(g, b, memory);
        let v = self.v.forward(g, b, memory);
        let dim = g.value(q).cols();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi);
            let kh = g.slice_cols(k, lo, hi);
            let vh = g.slice_cols(v, lo, hi);
            let s = g.matmul_nt(qh, kh);
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s);
            outs.push(g.matmul(a, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.o.forward(g, b, cat)
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    cross_attn: Attention,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Pre-norm transformer over motion tokens with self-attention, cross-attention
/// into per-frame music embeddings and a feed-forward sublayer per block.
///
/// Attention is plain softmax attention; sequences here are short enough that a
/// linear-time variant buys nothing.
#[derive(Clone, Debug)]
pub struct TransformerDenoiser {
    cfg: DenoiserConfig,
    params: Params,
    input: Linear,
    music_in: Linear,
    time_in: Linear,
    time_out: Linear,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    output: Linear,
    null: ParamId,
}

impl TransformerDenoiser {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let mut p = Params::new();
        let mut init = Init::new(seed);
        let input = Linear::new(&mut p, &mut init, "input", POSE_DIM, d);
        let music_in = Linear::new(&mut p, &mut init, "music_in", cfg.music_dim, d);
        let time_in = Linear::new(&mut p, &mut init, "time_in", cfg.timestep_embedding_dim, d);
        let time_out = Linear::new(&mut p, &mut init, "time_out", d, d);
        let blocks = (0..cfg.layers)
            .map(|i| Block {
                ln_self: LayerNorm::new(&mut p, &format!("block{i}.ln_self"), d),
                self_attn: Attention::new(&mut p, &mut init, &format!("block{i}.self_attn"), d, cfg.heads),
                ln_cross: LayerNorm::new(&mut p, &format!("block{i}.ln_cross"), d),
                cross_attn: Attention::new(&mut p, &mut init, &format!("block{i}.cross_attn"), d, cfg.heads),
                ln_ff: LayerNorm::new(&mut p, &format!("block{i}.ln_ff"), d),
                ff_in: Linear::new(&mut p, &mut init, &format!("block{i}.ff_in"), d, cfg.ffn_dim),
                ff_out: Linear::new(&mut p, &mut init, &format!("block{i}.ff_out"), cfg.ffn_dim, d),
            })
            .collect();
        let ln_out = LayerNorm::new(&mut p, "ln_out", d);
        let output = Linear::new(&mut p, &mut init, "output", d, POSE_DIM);
        let null = p.add("null_music", init.uniform(1, cfg.music_dim, 0.1));
        Ok(Self {
            cfg,
            params: p,
            input,
            music_in,
            time_in,
            time_out,
            blocks,
            ln_out,
            output,
            null,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// The learned embedding that stands in for dropped music, `[1, music_dim]`.
    pub fn null_embedding(&self) -> &Tensor {
        self.params.get(self.null)
    }

    /// `x_t [N, 26]` at timestep `t` -> raw output `[N, 26]`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, x_t: Var, t: usize, cond: CondVar) -> Var {
        let n = g.value(x_t).rows();
        let d = self.cfg.model_dim;
        let pos = g.constant(positional_table(n, d));

        let temb = g.constant(Tensor::row_vector(sinusoid(t as f64, self.cfg.timestep_embedding_dim)));
        let temb = self.time_in.forward(g, b, temb);
        let temb = g.silu(temb);
        let temb = self.time_out.forward(g, b, temb);

        let h = self.input.forward(g, b, x_t);
        let h = g.add(h, pos);
        let mut h = g.add_row(h, temb);

        let music = match cond {
            CondVar::Music(m) => m,
            CondVar::Null => g.broadcast_rows(b.var(self.null), n),
        };
        let mem = self.music_in.forward(g, b, music);
        let mem_pos = g.constant(positional_table(g.value(mem).rows(), d));
        let mem = g.add(mem, mem_pos);

        for blk in &self.blocks {
            let a = blk.ln_self.forward(g, b, h);
            let a = blk.self_attn.forward(g, b, a, a);
            h = g.add(h, a);
            let c = blk.ln_cross.forward(g, b, h);
            let c = blk.cross_attn.forward(g, b, c, mem);
            h = g.add(h, c);
            let f = blk.ln_ff.forward(g, b, h);
            let f = blk.ff_in.forward(g, b, f);
            let f = g.silu(f);
            let f = blk.ff_out.forward(g, b, f);
            h = g.add(h, f);
        }
        let h = self.ln_out.forward(g, b, h);
        self.output.forward(g, b, h)
    }

    /// Evaluate the raw output on concrete tensors.
    pub fn predict(&self, x_t: &Tensor, t: usize, cond: Condition<'_>) -> Result<Tensor> {
        ensure!(x_t.cols() == POSE_DIM, Shape, "x_t must have {POSE_DIM} columns, got {}", x_t.cols());
        ensure!(x_t.rows() >= 1, Shape, "x_t has no frames");
        ensure!(t >= 1, Argument, "timestep must be at least 1");
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(x_t.clone());
        let c = match cond {
            Condition::Music(m) => {
                ensure!(
                    m.shape() == (x_t.rows(), self.cfg.music_dim),
                    Shape,
                    "music embedding must be [{}, {}], got {:?}",
                    x_t.rows(),
                    self.cfg.music_dim,
                    m.shape()
                );
                CondVar::Music(g.constant(m.clone()))
            }
            Condition::Null => CondVar::Null,
        };
        let y = self.forward(&mut g, &b, x, t, c);
        Ok(g.value(y).clone())
    }
}

/// A trained denoiser read as a clean-motion predictor, converting noise
/// predictions where needed.
pub struct Parameterized<'a> {
    pub net: &'a TransformerDenoiser,
    pub target: PredictionTarget,
    pub schedule: &'a NoiseSchedule,
}

impl Denoiser for Parameterized<'_> {
    fn predict_x0(&self, x_t: &Tensor, t: usize, cond: Condition<'_>) -> Result<Tensor> {
        let out = self.net.predict(x_t, t, cond)?;
        match self.target {
            PredictionTarget::X0 => Ok(out),
            PredictionTarget::Eps => predict_x0_from_eps(x_t, t, &out, self.schedule),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            layers: 1,
            model_dim: 8,
            heads: 2,
            ffn_dim: 12,
            timestep_embedding_dim: 6,
            music_dim: 5,
        }
    }

    #[test]
    fn output_matches_input_shape() {
        let net = TransformerDenoiser::new(tiny(), 0).unwrap();
        let x = Tensor::from_fn(7, POSE_DIM, |r, c| ((r + c) % 4) as f64 * 0.2);
        let m = Tensor::from_fn(7, 5, |r, c| (r * c) as f64 * 0.05);
        let y = net.predict(&x, 10, Condition::Music(&m)).unwrap();
        assert_eq!(y.shape(), x.shape());
        let u = net.predict(&x, 10, Condition::Null).unwrap();
        assert_ne!(y, u);
        assert_ne!(y, net.predict(&x, 11, Condition::Music(&m)).unwrap());
    }

    #[test]
    fn shape_errors() {
        let net = TransformerDenoiser::new(tiny(), 0).unwrap();
        let x = Tensor::zeros(4, POSE_DIM);
        assert!(net.predict(&x, 1, Condition::Music(&Tensor::zeros(3, 5))).is_err());
        assert!(net.predict(&Tensor::zeros(4, 5), 1, Condition::Null).is_err());
        let bad = DenoiserConfig {
            heads: 3,
            ..tiny()
        };
        assert!(TransformerDenoiser::new(bad, 0).is_err());
    }

    #[test]
    fn target_parses() {
        assert_eq!("eps".parse::<PredictionTarget>().unwrap(), PredictionTarget::Eps);
        assert!("v".parse::<PredictionTarget>().is_err());
    }
}
