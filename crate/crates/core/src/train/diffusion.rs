use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::losses::{
    elbow_loss_var, mse_var, perceptual_loss_var, total_loss, velocity_loss_var, LossComponents,
    LossWeights,
};
use super::{epoch_batches, rng_for, EpochHook, EpochRecord};
use crate::autodiff::Graph;
use crate::data::{flatten_pose, JointLayout, PairedClip};
use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::{ensure, Error, Result};
use crate::nn::{
    CondVar, DenoiserConfig, DiffusionModel, ModelBundle, PredictionTarget, RandomMask,
    ScheduleConfig, TransformerDenoiser,
};
use crate::optim::{Adam, AdamConfig};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageTwoConfig {
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(alias = "lr")]
    pub learning_rate: f64,
    pub uncond_rate: f64,
    #[serde(flatten)]
    pub weights: LossWeights,
    /// Diffusion steps `T`.
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Update the music encoder too instead of keeping it frozen.
    pub finetune_music: bool,
}

impl Default for StageTwoConfig {
    fn default() -> Self {
        Self {
            batch_size: 48,
            epochs: 500,
            learning_rate: 2e-4,
            uncond_rate: 0.1,
            weights: LossWeights::default(),
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            finetune_music: false,
        }
    }
}

impl StageTwoConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Config, "batch_size must be positive");
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            Config,
            "learning_rate must be positive"
        );
        ensure!(
            (0.0..=1.0).contains(&self.uncond_rate),
            Config,
            "uncond_rate must lie in [0, 1], got {}",
            self.uncond_rate
        );
        ensure!(self.steps >= 1, Config, "T must be at least 1");
        self.weights.validate()?;
        self.schedule().build().map(|_| ())
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            steps: self.steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }
}

struct Prepared {
    x0: Tensor,
    music: Tensor,
    /// Frozen-encoder embedding, present unless the music encoder is trained.
    music_emb: Option<Tensor>,
    /// Frozen motion-encoder features of `x0`.
    motion_feat: Tensor,
}

struct SampleOut {
    loss: f64,
    components: LossComponents,
    grads: Vec<Tensor>,
}

/// Read-only state shared by every sample of a step.
struct StepCtx<'a> {
    bundle: &'a ModelBundle,
    model: &'a DiffusionModel,
    sched: &'a NoiseSchedule,
    cfg: &'a StageTwoConfig,
    layout: &'a JointLayout,
    seed: u64,
}

fn sample_gradients(ctx: &StepCtx<'_>, data: &Prepared, step: u64, slot: usize) -> Result<SampleOut> {
    let StepCtx {
        bundle,
        model,
        sched,
        cfg,
        layout,
        seed,
    } = *ctx;
    let mut rng = rng_for(seed, step, slot as u64);
    let t = rng.gen_range(1..=sched.steps());
    let (n, d) = data.x0.shape();
    let eps = Tensor::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
    let x_t = q_sample(&data.x0, t, &eps, sched)?;
    let masked = RandomMask::new(cfg.uncond_rate)?.draw(&mut rng);

    let mut g = Graph::new();
    let dn_bound = model.denoiser.params().bind(&mut g, true);
    let music_bound = cfg.finetune_music.then(|| bundle.music.params().bind(&mut g, true));
    let cond = if masked {
        CondVar::Null
    } else {
        match (&music_bound, &data.music_emb) {
            (Some(mb), _) => {
                let m = g.constant(data.music.clone());
                CondVar::Music(bundle.music.forward(&mut g, mb, m))
            }
            (None, Some(e)) => CondVar::Music(g.constant(e.clone())),
            (None, None) => unreachable!("frozen embeddings are precomputed"),
        }
    };
    let xt = g.constant(x_t);
    let out = model.denoiser.forward(&mut g, &dn_bound, xt, t, cond);

    let w = &cfg.weights;
    let mut c = LossComponents::default();
    let loss = match model.target {
        PredictionTarget::Eps => {
            let e = g.constant(eps);
            let l = mse_var(&mut g, e, out);
            c.ddim = g.scalar(l);
            let s = w.lambda_ddim;
            g.scale(l, s)
        }
        PredictionTarget::X0 => {
            let x0 = g.constant(data.x0.clone());
            let l_ddim = mse_var(&mut g, x0, out);
            c.ddim = g.scalar(l_ddim);
            let mut terms = vec![g.scale(l_ddim, w.lambda_ddim)];
            if w.lambda_perc > 0.0 {
                let target = g.constant(data.motion_feat.clone());
                let l = perceptual_loss_var(&mut g, &bundle.motion, target, out);
                c.perc = g.scalar(l);
                terms.push(g.scale(l, w.lambda_perc));
            }
            if w.lambda_geo > 0.0 {
                let lv = velocity_loss_var(&mut g, x0, out);
                let le = elbow_loss_var(&mut g, out, layout);
                c.vel = g.scalar(lv);
                c.elbow = g.scalar(le);
                terms.push(g.scale(lv, w.lambda_geo * w.lambda_vel));
                terms.push(g.scale(le, w.lambda_geo * w.lambda_elbow));
            }
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = g.add(acc, t);
            }
            acc
        }
    };
    let value = g.scalar(loss);
    let grads = g.backward(loss);
    let mut out_grads = model.denoiser.params().gradients(&dn_bound, &grads);
    if let Some(mb) = &music_bound {
        out_grads.extend(bundle.music.params().gradients(mb, &grads));
    }
    Ok(SampleOut {
        loss: value,
        components: c,
        grads: out_grads,
    })
}

/// Initialise a denoiser on top of a stage-one bundle and train it.
pub fn train_diffusion(
    stage1: &ModelBundle,
    clips: &[PairedClip],
    denoiser: DenoiserConfig,
    cfg: &StageTwoConfig,
    target: PredictionTarget,
    rng_seed: u64,
    hook: &mut EpochHook<'_>,
) -> Result<ModelBundle> {
    cfg.validate()?;
    ensure!(
        denoiser.music_dim == stage1.music.out_dim(),
        Config,
        "denoiser music_dim {} does not match the music encoder width {}",
        denoiser.music_dim,
        stage1.music.out_dim()
    );
    let mut bundle = stage1.clone();
    bundle.progress = Default::default();
    bundle.optimizer = None;
    super::contrastive::round_stage_one(&mut bundle);
    let mut denoiser = TransformerDenoiser::new(denoiser, super::mix(rng_seed, 0xD1F, 0))?;
    denoiser.params_mut().round_to_f32();
    bundle.diffusion = Some(DiffusionModel {
        denoiser,
        target,
        schedule: cfg.schedule(),
        finetuned_music: cfg.finetune_music,
    });
    resume_diffusion(bundle, clips, cfg, rng_seed, hook)
}

fn trainable_tensors<'a>(bundle: &'a mut ModelBundle, finetune: bool) -> Vec<&'a mut Tensor> {
    let ModelBundle { music, diffusion, .. } = bundle;
    let d = diffusion.as_mut().expect("stage-two bundle");
    let mut out: Vec<&mut Tensor> = d.denoiser.params_mut().tensors_mut().collect();
    if finetune {
        out.extend(music.params_mut().tensors_mut());
    }
    out
}

/// Continue stage-two training of `bundle` from its recorded progress up to `cfg.epochs`.
pub fn resume_diffusion(
    mut bundle: ModelBundle,
    clips: &[PairedClip],
    cfg: &StageTwoConfig,
    rng_seed: u64,
    hook: &mut EpochHook<'_>,
) -> Result<ModelBundle> {
    cfg.validate()?;
    ensure!(!clips.is_empty(), Argument, "training set is empty");
    let model = bundle.diffusion()?;
    ensure!(
        model.schedule == cfg.schedule(),
        Config,
        "schedule in the checkpoint differs from the configured one"
    );
    ensure!(
        model.finetuned_music == cfg.finetune_music,
        Config,
        "checkpoint was trained with finetune_music = {}",
        model.finetuned_music
    );
    let sched = cfg.schedule().build()?;
    let layout = JointLayout::default();
    let bands = bundle.music.config().bands;
    for c in clips {
        ensure!(c.music.bands() == bands, Shape, "clip `{}` has {} bands, encoder expects {bands}", c.clip_id, c.music.bands());
    }

    let need_feat = model.target == PredictionTarget::X0 && cfg.weights.lambda_perc > 0.0;
    let prepared: Vec<Prepared> = par::try_map(clips, |c| -> Result<Prepared> {
        let x0 = flatten_pose(&c.motion);
        let music = c.music.to_tensor();
        let music_emb = if cfg.finetune_music {
            None
        } else {
            Some(bundle.music.encode_tensor(&music)?)
        };
        let motion_feat = if need_feat {
            bundle.motion.encode_tensor(&x0)?
        } else {
            Tensor::zeros(1, 1)
        };
        Ok(Prepared {
            x0,
            music,
            music_emb,
            motion_feat,
        })
    })?;

    let trainable_count = {
        let d = bundle.diffusion()?;
        d.denoiser.params().len() + if cfg.finetune_music { bundle.music.params().len() } else { 0 }
    };
    match &bundle.optimizer {
        Some(opt) => ensure!(
            opt.m.len() == trainable_count,
            Config,
            "optimizer state covers {} tensors, expected {trainable_count}",
            opt.m.len()
        ),
        None => {
            let shapes: Vec<Tensor> = trainable_tensors(&mut bundle, cfg.finetune_music)
                .into_iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect();
            bundle.optimizer = Some(Adam::new(AdamConfig::with_lr(cfg.learning_rate), &shapes));
        }
    }

    let start = Instant::now();
    for epoch in bundle.progress.epochs..cfg.epochs {
        let batches = epoch_batches(clips.len(), cfg.batch_size, 1, rng_seed, epoch);
        let mut sum = LossComponents::default();
        let mut total_sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let step = bundle.progress.steps;
            let slots: Vec<(usize, usize)> = batch.iter().copied().enumerate().collect();
            let outs: Vec<SampleOut> = {
                let ctx = StepCtx {
                    bundle: &bundle,
                    model: bundle.diffusion()?,
                    sched: &sched,
                    cfg,
                    layout: &layout,
                    seed: rng_seed,
                };
                par::try_map(&slots, |&(slot, i)| sample_gradients(&ctx, &prepared[i], step, slot))?
            };
            let k = 1.0 / outs.len() as f64;
            let mut comps = LossComponents::default();
            let mut loss = 0.0;
            let mut grads: Vec<Tensor> = outs[0].grads.iter().map(|g| Tensor::zeros(g.rows(), g.cols())).collect();
            for o in &outs {
                comps = comps.add(&o.components.scaled(k));
                loss += o.loss * k;
                for (a, g) in grads.iter_mut().zip(&o.grads) {
                    a.axpy(k, g);
                }
            }
            let checked = total_loss(&cfg.weights, &comps).and_then(|_| {
                if loss.is_finite() && grads.iter().all(Tensor::all_finite) {
                    Ok(())
                } else {
                    Err(Error::TrainingDiverged(format!("non-finite total loss ({loss})")))
                }
            });
            if let Err(e) = checked {
                let d = bundle.diffusion()?;
                return Err(Error::TrainingDiverged(format!(
                    "{e} at epoch {}, batch {bi}; parameter norms: denoiser {:.4e}, music {:.4e}",
                    epoch + 1,
                    d.denoiser.params().l2_norm(),
                    bundle.music.params().l2_norm()
                )));
            }
            let mut opt = bundle.optimizer.take().expect("initialised above");
            opt.update(trainable_tensors(&mut bundle, cfg.finetune_music), &grads)?;
            opt.round_to_f32();
            bundle.optimizer = Some(opt);
            for t in trainable_tensors(&mut bundle, cfg.finetune_music) {
                for x in t.data_mut() {
                    *x = *x as f32 as f64;
                }
            }
            bundle.progress.steps += 1;
            sum = sum.add(&comps);
            total_sum += loss;
        }
        bundle.progress.epochs = epoch + 1;
        let nb = batches.len().max(1) as f64;
        let mean = sum.scaled(1.0 / nb);
        let target = bundle.diffusion()?.target;
        let components = match target {
            PredictionTarget::Eps => vec![("eps", mean.ddim)],
            PredictionTarget::X0 => mean.named().to_vec(),
        };
        let rec = EpochRecord {
            epoch: epoch + 1,
            step: bundle.progress.steps,
            components,
            total: total_sum / nb,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        hook(&rec, &bundle)?;
    }
    Ok(bundle)
}
