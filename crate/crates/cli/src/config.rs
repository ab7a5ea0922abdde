use std::path::Path;

use baton::data::CorpusSpec;
use baton::diffusion::SamplerConfig;
use baton::metrics::{BC_SIGMA, DIVERSITY_SAMPLES};
use baton::nn::{DenoiserConfig, MotionEncoderConfig, MusicEncoderConfig, PairHeadConfig};
use baton::train::{StageOneConfig, StageTwoConfig};
use baton::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub clips: usize,
    pub frames: usize,
    pub beat_period_min: usize,
    pub beat_period_max: usize,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    pub bands: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let c = CorpusSpec::default();
        Self {
            clips: c.clips,
            frames: c.n_frames,
            beat_period_min: c.beat_period.0,
            beat_period_max: c.beat_period.1,
            amplitude_min: c.amplitude.0,
            amplitude_max: c.amplitude.1,
            bands: c.bands,
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

impl DataConfig {
    pub fn corpus(&self) -> CorpusSpec {
        CorpusSpec {
            clips: self.clips,
            n_frames: self.frames,
            beat_period: (self.beat_period_min, self.beat_period_max),
            amplitude: (self.amplitude_min, self.amplitude_max),
            bands: self.bands,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub music: MusicEncoderConfig,
    pub motion: MotionEncoderConfig,
    pub head: PairHeadConfig,
    pub denoiser: DenoiserConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub bc_sigma: f64,
    pub diversity_samples: usize,
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            bc_sigma: BC_SIGMA,
            diversity_samples: DIVERSITY_SAMPLES,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    /// Write an intermediate checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

/// Everything a command needs, merged from defaults, an optional config file,
/// `--set section.key=value` overrides and dedicated flags (in that order).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub stage1: StageOneConfig,
    pub stage2: StageTwoConfig,
    pub sampler: SamplerConfig,
    pub metrics: MetricsConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.to_path_buf(),
                    source: e,
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::Io { path, source: e })
    }
}

/// Insert `a.b.c=value` into `table`; the value is parsed as a TOML literal
/// and falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Argument(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if key.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Argument(format!("override `{spec}` has an empty key")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, path) = parts.split_last().expect("non-empty key");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Argument(format!("override `{spec}`: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
