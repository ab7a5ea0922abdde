//! Single-file model bundles.
//!
//! Layout: a UTF-8 header of one record per line, terminated by `end`, then
//! every listed tensor as little-endian `f32` in header order.
//!
//! ```text
//! BATON-CHECKPOINT
//! format_version 1
//! stage stage2
//! config {...json...}
//! optimizer {...json...}        (optional)
//! tensor music.out.weight 256 256
//! ...
//! end
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    DenoiserConfig, MotionEncoder, MotionEncoderConfig, MusicEncoder, MusicEncoderConfig, PairHead,
    PairHeadConfig, Parameterized, Params, PredictionTarget, TransformerDenoiser,
};
use crate::data::{MusicFeatureSequence, PoseSequence};
use crate::diffusion::{make_schedule, sample, NoiseSchedule, SamplerConfig, ScheduleKind};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

const MAGIC: &str = "BATON-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Contrastively pretrained encoders and pair head.
    Stage1,
    /// Stage-one networks plus a trained denoiser.
    Stage2,
}

impl Stage {
    fn tag(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, ScheduleKind::Linear, self.beta_start, self.beta_end)
    }
}

/// How far training has progressed; used for resuming.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epochs: usize,
    pub steps: u64,
}

/// The denoiser half of a stage-two bundle.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub denoiser: TransformerDenoiser,
    pub target: PredictionTarget,
    pub schedule: ScheduleConfig,
    /// Whether the music encoder was updated during stage two.
    pub finetuned_music: bool,
}

#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub music: MusicEncoder,
    pub motion: MotionEncoder,
    pub head: PairHead,
    pub diffusion: Option<DiffusionModel>,
    pub progress: Progress,
    /// Optimiser state over the trainable tensors of the current stage.
    pub optimizer: Option<Adam>,
}

#[derive(Serialize, Deserialize)]
struct HeaderConfig {
    music: MusicEncoderConfig,
    motion: MotionEncoderConfig,
    head: PairHeadConfig,
    denoiser: Option<DenoiserConfig>,
    target: Option<PredictionTarget>,
    schedule: Option<ScheduleConfig>,
    finetuned_music: bool,
    progress: Progress,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    cfg: AdamConfig,
    step: u64,
    tensors: usize,
}

impl ModelBundle {
    /// Freshly initialised stage-one networks.
    pub fn init_stage1(
        music: MusicEncoderConfig,
        motion: MotionEncoderConfig,
        head: PairHeadConfig,
        seed: u64,
    ) -> Result<Self> {
        let music = MusicEncoder::new(music, seed.wrapping_mul(3).wrapping_add(1))?;
        let motion = MotionEncoder::new(motion, seed.wrapping_mul(3).wrapping_add(2))?;
        let head = PairHead::new(head, music.out_dim(), motion.out_dim(), seed.wrapping_mul(3).wrapping_add(3))?;
        Ok(Self {
            music,
            motion,
            head,
            diffusion: None,
            progress: Progress::default(),
            optimizer: None,
        })
    }

    pub fn stage(&self) -> Stage {
        if self.diffusion.is_some() {
            Stage::Stage2
        } else {
            Stage::Stage1
        }
    }

    /// The trained diffusion half, or a configuration error for stage-one bundles.
    pub fn diffusion(&self) -> Result<&DiffusionModel> {
        self.diffusion
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint holds no diffusion model (stage1 bundle)".into()))
    }

    /// Sample a motion for `music`, one pose per three music frames.
    pub fn generate(&self, music: &MusicFeatureSequence, sampler: &SamplerConfig, seed: u64) -> Result<PoseSequence> {
        let model = self.diffusion()?;
        let sched = model.schedule.build()?;
        let emb = self.music.encode(music)?;
        let den = Parameterized {
            net: &model.denoiser,
            target: model.target,
            schedule: &sched,
        };
        sample(&den, &emb, &sched, sampler, seed)
    }

    /// Every parameter record with its checkpoint prefix.
    pub fn sections(&self) -> Vec<(&'static str, &Params)> {
        let mut out = vec![
            ("music", self.music.params()),
            ("motion", self.motion.params()),
            ("head", self.head.params()),
        ];
        if let Some(d) = &self.diffusion {
            out.push(("denoiser", d.denoiser.params()));
        }
        out
    }

    fn sections_mut(&mut self) -> Vec<(&'static str, &mut Params)> {
        let mut out = vec![
            ("music", self.music.params_mut()),
            ("motion", self.motion.params_mut()),
            ("head", self.head.params_mut()),
        ];
        if let Some(d) = &mut self.diffusion {
            out.push(("denoiser", d.denoiser.params_mut()));
        }
        out
    }

    fn header_config(&self) -> HeaderConfig {
        HeaderConfig {
            music: self.music.config().clone(),
            motion: self.motion.config().clone(),
            head: self.head.config().clone(),
            denoiser: self.diffusion.as_ref().map(|d| d.denoiser.config().clone()),
            target: self.diffusion.as_ref().map(|d| d.target),
            schedule: self.diffusion.as_ref().map(|d| d.schedule.clone()),
            finetuned_music: self.diffusion.as_ref().is_some_and(|d| d.finetuned_music),
            progress: self.progress,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        for (prefix, params) in self.sections() {
            for (name, t) in params.iter() {
                tensors.push((format!("{prefix}.{name}"), t));
            }
        }
        if let Some(opt) = &self.optimizer {
            for (i, t) in opt.m.iter().enumerate() {
                tensors.push((format!("optim.m.{i}"), t));
            }
            for (i, t) in opt.v.iter().enumerate() {
                tensors.push((format!("optim.v.{i}"), t));
            }
        }
        let config = serde_json::to_string(&self.header_config())
            .map_err(|e| Error::format(path, format!("cannot encode config: {e}")))?;

        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut header = format!(
            "{MAGIC}\nformat_version {FORMAT_VERSION}\nstage {}\nconfig {config}\n",
            self.stage().tag()
        );
        if let Some(opt) = &self.optimizer {
            let oh = OptimizerHeader {
                cfg: opt.cfg,
                step: opt.step,
                tensors: opt.m.len(),
            };
            header.push_str(&format!(
                "optimizer {}\n",
                serde_json::to_string(&oh).expect("plain struct serialises")
            ));
        }
        for (name, t) in &tensors {
            header.push_str(&format!("tensor {name} {} {}\n", t.rows(), t.cols()));
        }
        header.push_str("end\n");
        let io = |e| Error::io(path, e);
        w.write_all(header.as_bytes()).map_err(io)?;
        for (_, t) in &tensors {
            for &x in t.data() {
                w.write_all(&(x as f32).to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |reason: String| Error::format(path, reason);

        let mut lines = Vec::new();
        loop {
            let mut line = String::new();
            let n = r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
            if n == 0 {
                return Err(bad("header is not terminated by `end`".into()));
            }
            let line = line.trim_end_matches('\n').to_string();
            if line == "end" {
                break;
            }
            lines.push(line);
            if lines.len() == 1 && lines[0] != MAGIC {
                return Err(bad("not a checkpoint file".into()));
            }
        }

        let mut version = None;
        let mut stage = None;
        let mut config: Option<HeaderConfig> = None;
        let mut optimizer: Option<OptimizerHeader> = None;
        let mut listed: Vec<(String, usize, usize)> = Vec::new();
        for line in lines.iter().skip(1) {
            let (key, rest) = line.split_once(' ').unwrap_or((line.as_str(), ""));
            match key {
                "format_version" => version = rest.parse::<u32>().ok(),
                "stage" => {
                    stage = Some(match rest {
                        "stage1" => Stage::Stage1,
                        "stage2" => Stage::Stage2,
                        other => return Err(bad(format!("unknown stage `{other}`"))),
                    })
                }
                "config" => {
                    config = Some(serde_json::from_str(rest).map_err(|e| bad(format!("bad config: {e}")))?)
                }
                "optimizer" => {
                    optimizer = Some(serde_json::from_str(rest).map_err(|e| bad(format!("bad optimizer record: {e}")))?)
                }
                "tensor" => {
                    let parts: Vec<&str> = rest.split(' ').collect();
                    let parsed = match parts.as_slice() {
                        [name, rows, cols] => rows
                            .parse()
                            .ok()
                            .zip(cols.parse().ok())
                            .map(|(r, c)| (name.to_string(), r, c)),
                        _ => None,
                    };
                    listed.push(parsed.ok_or_else(|| bad(format!("bad tensor record `{line}`")))?);
                }
                other => return Err(bad(format!("unknown header record `{other}`"))),
            }
        }
        match version {
            Some(FORMAT_VERSION) => {}
            Some(v) => return Err(bad(format!("unsupported format version {v}"))),
            None => return Err(bad("missing format_version".into())),
        }
        let stage = stage.ok_or_else(|| bad("missing stage".into()))?;
        let cfg = config.ok_or_else(|| bad("missing config".into()))?;

        let mut data: HashMap<String, Tensor> = HashMap::new();
        for (name, rows, cols) in &listed {
            let mut buf = vec![0u8; rows * cols * 4];
            r.read_exact(&mut buf)
                .map_err(|_| bad(format!("tensor `{name}` is truncated")))?;
            let values = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            if data.insert(name.clone(), Tensor::from_vec(*rows, *cols, values)).is_some() {
                return Err(bad(format!("tensor `{name}` listed twice")));
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes after tensor data", rest.len())));
        }

        let mut bundle = Self::init_stage1(cfg.music, cfg.motion, cfg.head, 0).map_err(|e| bad(e.to_string()))?;
        bundle.progress = cfg.progress;
        match (stage, cfg.denoiser) {
            (Stage::Stage1, None) => {}
            (Stage::Stage2, Some(dcfg)) => {
                bundle.diffusion = Some(DiffusionModel {
                    denoiser: TransformerDenoiser::new(dcfg, 0).map_err(|e| bad(e.to_string()))?,
                    target: cfg.target.unwrap_or_default(),
                    schedule: cfg.schedule.unwrap_or_default(),
                    finetuned_music: cfg.finetuned_music,
                });
            }
            (s, d) => {
                return Err(bad(format!(
                    "stage {} inconsistent with denoiser config present = {}",
                    s.tag(),
                    d.is_some()
                )))
            }
        }

        for (prefix, params) in bundle.sections_mut() {
            let names: Vec<String> = params.names().to_vec();
            for name in names {
                let key = format!("{prefix}.{name}");
                let t = data
                    .remove(&key)
                    .ok_or_else(|| bad(format!("missing tensor `{key}`")))?;
                let id = params.find(&name).expect("name from the same record");
                params
                    .set(id, t)
                    .map_err(|e| bad(format!("tensor `{key}`: {e}")))?;
            }
        }
        if let Some(oh) = optimizer {
            let mut take = |kind: &str| -> Result<Vec<Tensor>> {
                (0..oh.tensors)
                    .map(|i| {
                        let key = format!("optim.{kind}.{i}");
                        data.remove(&key).ok_or_else(|| bad(format!("missing tensor `{key}`")))
                    })
                    .collect()
            };
            let m = take("m")?;
            let v = take("v")?;
            bundle.optimizer = Some(Adam {
                cfg: oh.cfg,
                step: oh.step,
                m,
                v,
            });
        }
        if let Some(extra) = data.keys().next() {
            return Err(bad(format!("unexpected tensor `{extra}`")));
        }
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_bundle() -> ModelBundle {
        let music = MusicEncoderConfig {
            bands: 4,
            n_groups: 1,
            residual_layers_per_group: 1,
            channels: vec![3],
            temporal_pool_factors: vec![3],
            out_dim: 4,
        };
        let motion = MotionEncoderConfig {
            st_gcn_layers: 1,
            channels: vec![3],
            out_dim: 4,
            ..MotionEncoderConfig::default()
        };
        ModelBundle::init_stage1(music, motion, PairHeadConfig { hidden: 4 }, 5).unwrap()
    }

    #[test]
    fn stage1_round_trip_is_exact_after_rounding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut b = tiny_bundle();
        for (_, p) in b.sections_mut() {
            p.round_to_f32();
        }
        b.save(&path).unwrap();
        let back = ModelBundle::load(&path).unwrap();
        assert_eq!(back.stage(), Stage::Stage1);
        for ((_, a), (_, c)) in b.sections().iter().zip(back.sections()) {
            assert_eq!(a.tensors().collect::<Vec<_>>(), c.tensors().collect::<Vec<_>>());
        }
    }

    #[test]
    fn stage2_with_optimizer_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        let mut b = tiny_bundle();
        let dcfg = DenoiserConfig {
            layers: 1,
            model_dim: 4,
            heads: 2,
            ffn_dim: 4,
            timestep_embedding_dim: 4,
            music_dim: 4,
        };
        let denoiser = TransformerDenoiser::new(dcfg, 1).unwrap();
        b.optimizer = Some(Adam::new(AdamConfig::with_lr(1e-3), denoiser.params().tensors()));
        b.diffusion = Some(DiffusionModel {
            denoiser,
            target: PredictionTarget::Eps,
            schedule: ScheduleConfig::default(),
            finetuned_music: false,
        });
        b.progress = Progress { epochs: 3, steps: 9 };
        b.save(&path).unwrap();
        let back = ModelBundle::load(&path).unwrap();
        assert_eq!(back.stage(), Stage::Stage2);
        assert_eq!(back.progress, b.progress);
        assert_eq!(back.diffusion().unwrap().target, PredictionTarget::Eps);
        assert_eq!(back.optimizer.unwrap().m.len(), b.optimizer.unwrap().m.len());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        tiny_bundle().save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();

        let truncated = dir.path().join("t.ckpt");
        fs::write(&truncated, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(ModelBundle::load(&truncated), Err(Error::Format { .. })));

        let text = String::from_utf8_lossy(&bytes).into_owned();
        let header_end = text.find("\nend\n").unwrap();
        let header = &text[..header_end];
        let reshaped = header.replacen("tensor head.out.bias 1 1", "tensor head.out.bias 1 1\ntensor bogus 1 1", 1);
        let mut forged = reshaped.into_bytes();
        forged.extend_from_slice(&bytes[header_end..]);
        forged.extend_from_slice(&0f32.to_le_bytes());
        let extra = dir.path().join("x.ckpt");
        fs::write(&extra, forged).unwrap();
        assert!(matches!(ModelBundle::load(&extra), Err(Error::Format { .. })));

        let other = dir.path().join("o.ckpt");
        fs::write(&other, b"hello\nend\n").unwrap();
        assert!(ModelBundle::load(&other).is_err());
        assert!(matches!(
            ModelBundle::load(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
        assert!(tiny_bundle().diffusion().is_err());
    }
}
