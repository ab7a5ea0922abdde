use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::losses::contrastive_loss_var;
use super::{epoch_batches, EpochHook, EpochRecord};
use crate::autodiff::{Graph, Var};
use crate::data::{flatten_pose, PairedClip};
use crate::error::{ensure, Error, Result};
use crate::nn::{Bound, ModelBundle};
use crate::optim::{Adam, AdamConfig};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageOneConfig {
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(alias = "lr")]
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
}

impl Default for StageOneConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl StageOneConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.batch_size >= 2,
            Config,
            "stage-one batch_size must be at least 2 (in-batch negatives), got {}",
            self.batch_size
        );
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            Config,
            "learning_rate must be positive"
        );
        Ok(())
    }
}

/// One clip's encoder graph: pooled music and motion features on their own tape.
struct EncoderPass {
    g: Graph,
    music_bound: Bound,
    motion_bound: Bound,
    pooled_music: Var,
    motion_feat: Var,
}

fn encode_clip(bundle: &ModelBundle, music: &Tensor, motion: &Tensor) -> EncoderPass {
    let mut g = Graph::new();
    let music_bound = bundle.music.params().bind(&mut g, true);
    let motion_bound = bundle.motion.params().bind(&mut g, true);
    let m = g.constant(music.clone());
    let emb = bundle.music.forward(&mut g, &music_bound, m);
    let pooled_music = g.mean_rows(emb);
    let x = g.constant(motion.clone());
    let motion_feat = bundle.motion.forward(&mut g, &motion_bound, x);
    EncoderPass {
        g,
        music_bound,
        motion_bound,
        pooled_music,
        motion_feat,
    }
}

fn stack_rows(rows: &[&Tensor]) -> Tensor {
    let cols = rows[0].cols();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Tensor::from_vec(rows.len(), cols, data)
}

fn row_of(t: &Tensor, i: usize) -> Tensor {
    Tensor::from_vec(1, t.cols(), t.row(i).to_vec())
}

fn add_all(acc: &mut [Tensor], g: Vec<Tensor>) {
    for (a, b) in acc.iter_mut().zip(g) {
        a.add_assign(&b);
    }
}

/// Loss and parameter gradients (music, motion, head order) for one batch.
fn batch_gradients(
    bundle: &ModelBundle,
    inputs: &[(Tensor, Tensor)],
    batch: &[usize],
) -> (f64, Vec<Tensor>) {
    let passes: Vec<EncoderPass> = par::map(batch, |&i| encode_clip(bundle, &inputs[i].0, &inputs[i].1));

    let pooled: Vec<&Tensor> = passes.iter().map(|p| p.g.value(p.pooled_music)).collect();
    let feats: Vec<&Tensor> = passes.iter().map(|p| p.g.value(p.motion_feat)).collect();
    let mut hg = Graph::new();
    let head_bound = bundle.head.params().bind(&mut hg, true);
    let m = hg.leaf(stack_rows(&pooled));
    let x = hg.leaf(stack_rows(&feats));
    let scores = bundle.head.forward_all_pairs(&mut hg, &head_bound, m, x);
    let loss = contrastive_loss_var(&mut hg, scores);
    let loss_value = hg.scalar(loss);
    let hgrads = hg.backward(loss);
    let head_grads = bundle.head.params().gradients(&head_bound, &hgrads);
    let gm = hgrads.get_or_zeros(m, hg.value(m).shape());
    let gx = hgrads.get_or_zeros(x, hg.value(x).shape());

    let per_clip: Vec<(Vec<Tensor>, Vec<Tensor>)> = par::map_range(passes.len(), |k| {
        let p = &passes[k];
        let music = {
            let grads = p.g.backward_with(p.pooled_music, row_of(&gm, k));
            bundle.music.params().gradients(&p.music_bound, &grads)
        };
        let motion = {
            let grads = p.g.backward_with(p.motion_feat, row_of(&gx, k));
            bundle.motion.params().gradients(&p.motion_bound, &grads)
        };
        (music, motion)
    });

    let mut music = bundle.music.params().zeros_like();
    let mut motion = bundle.motion.params().zeros_like();
    for (gm, gx) in per_clip {
        add_all(&mut music, gm);
        add_all(&mut motion, gx);
    }
    music.extend(motion);
    music.extend(head_grads);
    (loss_value, music)
}

fn stage_one_tensors(bundle: &mut ModelBundle) -> impl Iterator<Item = &mut Tensor> {
    let ModelBundle {
        music, motion, head, ..
    } = bundle;
    music
        .params_mut()
        .tensors_mut()
        .chain(motion.params_mut().tensors_mut())
        .chain(head.params_mut().tensors_mut())
}

pub(crate) fn round_stage_one(bundle: &mut ModelBundle) {
    bundle.music.params_mut().round_to_f32();
    bundle.motion.params_mut().round_to_f32();
    bundle.head.params_mut().round_to_f32();
}

/// Move the head's output bias so the mean initial score over one batch equals
/// the positive rate `1 / B`. Starting from the class prior keeps the first
/// steps from pushing every pair apart at once.
fn calibrate_head(bundle: &mut ModelBundle, inputs: &[(Tensor, Tensor)], batch_size: usize) {
    let batch: Vec<usize> = (0..batch_size.min(inputs.len())).collect();
    let passes: Vec<EncoderPass> = par::map(&batch, |&i| encode_clip(bundle, &inputs[i].0, &inputs[i].1));
    let pooled: Vec<&Tensor> = passes.iter().map(|p| p.g.value(p.pooled_music)).collect();
    let feats: Vec<&Tensor> = passes.iter().map(|p| p.g.value(p.motion_feat)).collect();
    let mut g = Graph::new();
    let b = bundle.head.params().bind(&mut g, false);
    let m = g.constant(stack_rows(&pooled));
    let x = g.constant(stack_rows(&feats));
    let s = bundle.head.forward_all_pairs(&mut g, &b, m, x);
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let mean_logit = g.value(s).data().iter().map(|&p| logit(p.clamp(1e-12, 1.0 - 1e-12))).sum::<f64>()
        / (batch.len() * batch.len()) as f64;
    bundle.head.shift_output_bias(logit(1.0 / batch.len() as f64) - mean_logit);
}

/// Pretrain the encoders and pair head with in-batch negatives.
///
/// The bundle is updated in place from its current progress up to
/// `cfg.epochs`; a bundle with zero remaining epochs is returned unchanged.
pub fn train_contrastive(
    mut bundle: ModelBundle,
    clips: &[PairedClip],
    cfg: &StageOneConfig,
    rng_seed: u64,
    hook: &mut EpochHook<'_>,
) -> Result<ModelBundle> {
    cfg.validate()?;
    ensure!(bundle.diffusion.is_none(), Config, "contrastive training expects a stage-one bundle");
    ensure!(
        clips.len() >= cfg.batch_size,
        Argument,
        "need at least batch_size = {} clips, got {}",
        cfg.batch_size,
        clips.len()
    );
    let inputs: Vec<(Tensor, Tensor)> = clips
        .iter()
        .map(|c| (c.music.to_tensor(), flatten_pose(&c.motion)))
        .collect();
    for (m, _) in &inputs {
        ensure!(
            m.cols() == bundle.music.config().bands,
            Shape,
            "clips carry {} music bands but the encoder expects {}",
            m.cols(),
            bundle.music.config().bands
        );
    }

    if bundle.progress.steps == 0 && cfg.epochs > 0 {
        calibrate_head(&mut bundle, &inputs, cfg.batch_size);
    }
    if bundle.optimizer.is_none() {
        let shapes: Vec<Tensor> = bundle
            .sections()
            .iter()
            .flat_map(|(_, p)| p.zeros_like())
            .collect();
        bundle.optimizer = Some(Adam::new(AdamConfig::with_lr(cfg.learning_rate), &shapes));
    }
    let start = Instant::now();
    for epoch in bundle.progress.epochs..cfg.epochs {
        let batches = epoch_batches(clips.len(), cfg.batch_size, 2, rng_seed, epoch);
        let mut loss_sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let (loss, grads) = batch_gradients(&bundle, &inputs, batch);
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::TrainingDiverged(format!(
                    "contrastive loss {loss} at epoch {}, batch {bi}; parameter norms: music {:.4e}, motion {:.4e}, head {:.4e}",
                    epoch + 1,
                    bundle.music.params().l2_norm(),
                    bundle.motion.params().l2_norm(),
                    bundle.head.params().l2_norm()
                )));
            }
            loss_sum += loss;
            let mut opt = bundle.optimizer.take().expect("initialised above");
            opt.update(stage_one_tensors(&mut bundle), &grads)?;
            opt.round_to_f32();
            bundle.optimizer = Some(opt);
            round_stage_one(&mut bundle);
            bundle.progress.steps += 1;
        }
        bundle.progress.epochs = epoch + 1;
        let mean = loss_sum / batches.len().max(1) as f64;
        let rec = EpochRecord {
            epoch: epoch + 1,
            step: bundle.progress.steps,
            components: vec![("contrastive", mean)],
            total: mean,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        hook(&rec, &bundle)?;
    }
    Ok(bundle)
}

/// Mean pair-head score over true pairs and over mismatched pairs
/// `(music_i, motion_{i+shift})` for every shift in `1..n`.
pub fn pair_score_means(bundle: &ModelBundle, clips: &[PairedClip]) -> Result<(f64, f64)> {
    ensure!(clips.len() >= 2, Argument, "need at least two clips to form mismatched pairs");
    let music: Vec<Tensor> = par::try_map(clips, |c| bundle.music.encode(&c.music))?;
    let motion: Vec<Tensor> = par::try_map(clips, |c| bundle.motion.encode(&c.motion))?;
    let n = clips.len();
    let rows: Vec<Vec<f64>> = par::map_range(n, |i| {
        (0..n)
            .map(|j| bundle.head.score(&music[i], &motion[j]).unwrap_or(f64::NAN))
            .collect()
    });
    let mut pos = 0.0;
    let mut neg = 0.0;
    for (i, row) in rows.iter().enumerate() {
        for (j, s) in row.iter().enumerate() {
            if i == j {
                pos += s;
            } else {
                neg += s;
            }
        }
    }
    Ok((pos / n as f64, neg / (n * (n - 1)) as f64))
}
