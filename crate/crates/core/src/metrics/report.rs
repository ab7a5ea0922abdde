use std::fmt::Write as _;
use std::path::Path;

use super::beats::clip_beat_consistency;
use super::features::{diversity, fgd, mse};
use crate::data::{PairedClip, PoseSequence};
use crate::error::{ensure, Error, Result};
use crate::nn::MotionEncoder;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub name: String,
    pub value: f64,
    pub samples: usize,
}

/// Metric values plus what is needed to reproduce them.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub extractor: String,
    pub seed: u64,
    pub sigma: f64,
    pub metrics: Vec<MetricRecord>,
}

impl EvalReport {
    /// Scores generated motion against the ground-truth clips it was generated
    /// for (same order): MSE, FGD, BC against the ground-truth music, and diversity.
    pub fn compute(
        gt: &[PairedClip],
        generated: &[PoseSequence],
        encoder: &MotionEncoder,
        extractor: &str,
        sigma: f64,
        diversity_samples: usize,
        seed: u64,
    ) -> Result<Self> {
        ensure!(
            gt.len() == generated.len(),
            Argument,
            "{} ground-truth clips but {} generated",
            gt.len(),
            generated.len()
        );
        let n = gt.len();
        ensure!(n >= 2, UndefinedMetric, "evaluation needs at least 2 clips, got {n}");
        let mut mse_sum = 0.0;
        let mut bc_sum = 0.0;
        for (clip, gen) in gt.iter().zip(generated) {
            mse_sum += mse(&clip.motion, gen)?;
            bc_sum += clip_beat_consistency(gen, &clip.music, sigma)?;
        }
        let gt_motion: Vec<PoseSequence> = gt.iter().map(|c| c.motion.clone()).collect();
        let record = |name: &str, value: f64, samples: usize| MetricRecord {
            name: name.to_string(),
            value,
            samples,
        };
        let metrics = vec![
            record("mse", mse_sum / n as f64, n),
            record("fgd", fgd(&gt_motion, generated, encoder)?, n),
            record("bc", bc_sum / n as f64, n),
            record("diversity", diversity(generated, encoder, diversity_samples, seed)?, diversity_samples),
        ];
        Ok(Self {
            extractor: extractor.to_string(),
            seed,
            sigma,
            metrics,
        })
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# evaluation report\n");
        let _ = writeln!(s, "extractor={}", self.extractor);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "bc_sigma={}", self.sigma);
        for m in &self.metrics {
            let _ = writeln!(s, "metric={} value={:.6e} samples={}", m.name, m.value, m.samples);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |why: String| Error::Argument(format!("malformed evaluation report: {why}"));
        let mut extractor = None;
        let mut seed = None;
        let mut sigma = None;
        let mut metrics = Vec::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("metric=") {
                let mut it = rest.split_whitespace();
                let name = it.next().ok_or_else(|| bad(line.into()))?.to_string();
                let value = it.next().and_then(|v| v.strip_prefix("value="));
                let samples = it.next().and_then(|v| v.strip_prefix("samples="));
                let (Some(value), Some(samples)) = (value, samples) else {
                    return Err(bad(line.into()));
                };
                metrics.push(MetricRecord {
                    name,
                    value: value.parse().map_err(|_| bad(line.into()))?,
                    samples: samples.parse().map_err(|_| bad(line.into()))?,
                });
            } else if let Some(v) = line.strip_prefix("extractor=") {
                extractor = Some(v.to_string());
            } else if let Some(v) = line.strip_prefix("seed=") {
                seed = Some(v.parse().map_err(|_| bad(line.into()))?);
            } else if let Some(v) = line.strip_prefix("bc_sigma=") {
                sigma = Some(v.parse().map_err(|_| bad(line.into()))?);
            } else {
                return Err(bad(line.into()));
            }
        }
        Ok(Self {
            extractor: extractor.ok_or_else(|| bad("missing extractor".into()))?,
            seed: seed.ok_or_else(|| bad("missing seed".into()))?,
            sigma: sigma.ok_or_else(|| bad("missing bc_sigma".into()))?,
            metrics,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_corpus;
    use crate::data::CorpusSpec;
    use crate::nn::MotionEncoderConfig;

    #[test]
    fn report_round_trip() {
        let clips = synthetic_corpus(
            4,
            &CorpusSpec {
                clips: 3,
                n_frames: 40,
                bands: 8,
                ..CorpusSpec::default()
            },
        )
        .unwrap();
        let enc = MotionEncoder::new(
            MotionEncoderConfig {
                st_gcn_layers: 1,
                channels: vec![4],
                out_dim: 3,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let gen: Vec<PoseSequence> = clips.iter().map(|c| c.motion.clone()).collect();
        let r = EvalReport::compute(&clips, &gen, &enc, "stage1.ckpt", 3.0, 10, 7).unwrap();
        assert_eq!(r.get("mse"), Some(0.0));
        assert!(r.get("fgd").unwrap() < 1e-6);
        assert!(r.get("bc").unwrap() > 0.9);
        let back = EvalReport::parse(&r.to_text()).unwrap();
        assert_eq!(back.extractor, "stage1.ckpt");
        assert_eq!(back.metrics.len(), 4);
        for (a, b) in back.metrics.iter().zip(&r.metrics) {
            assert!((a.value - b.value).abs() <= 1e-6 * b.value.abs().max(1e-12));
        }
        assert!(EvalReport::parse("nonsense").is_err());
    }
}
