use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use baton::data::{load_dataset, read_manifest, save_splits, synthetic_corpus, Normalization, PairedClip, Split, MOTION_FPS};
use baton::metrics::{extract_motion_beats, extract_music_beats, kinetic_velocity, moving_average, EvalReport, VELOCITY_SMOOTHING};
use baton::nn::{ModelBundle, PredictionTarget, Stage};
use baton::par;
use baton::train::{pair_score_means, resume_diffusion, train_contrastive as fit_contrastive, train_diffusion as fit_diffusion, EpochRecord, TrainingLog};
use baton::{Error, Result};

use crate::config::RunConfig;
use crate::plot;
use crate::{Common, Evaluate, Generate, MakeData, TrainContrastive, TrainDiffusion};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train.log";
pub const REPORT_FILE: &str = "report.txt";

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Create a fresh run directory; existing paths are never reused.
fn create_run_dir(path: &Path) -> Result<()> {
    if path.exists() {
        return Err(Error::Argument(format!(
            "output {} already exists; run directories are never overwritten",
            path.display()
        )));
    }
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn load_config(common: &Common) -> Result<RunConfig> {
    RunConfig::load(common.config.as_deref(), &common.overrides)
}

fn load_split(root: &Path, split: Split) -> Result<Vec<PairedClip>> {
    let clips = load_dataset(root, split)?.load_all()?;
    if clips.is_empty() {
        let name = format!("{split:?}").to_lowercase();
        return Err(Error::Argument(format!("{} has no {name} clips", root.display())));
    }
    Ok(clips)
}

fn parse_range(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Argument(format!("beat period range `{s}` is not of the form MIN:MAX"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

/// Contiguous split assignment: the last clips go to test, the ones before to val.
pub fn assign_splits(n: usize, val_fraction: f64, test_fraction: f64) -> Result<(usize, usize, usize)> {
    let ok = |f: f64| (0.0..1.0).contains(&f);
    if !ok(val_fraction) || !ok(test_fraction) || val_fraction + test_fraction >= 1.0 {
        return Err(Error::Config(format!(
            "split fractions val {val_fraction} and test {test_fraction} must be in [0, 1) and sum below 1"
        )));
    }
    let test = (n as f64 * test_fraction).round() as usize;
    let val = (n as f64 * val_fraction).round() as usize;
    let train = n.saturating_sub(test + val);
    if train == 0 {
        return Err(Error::Argument(format!("{n} clips leave no training clips")));
    }
    Ok((train, val, test))
}

pub fn make_data(a: MakeData) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(v) = a.clips {
        cfg.data.clips = v;
    }
    if let Some(v) = a.frames {
        cfg.data.frames = v;
    }
    if let Some(r) = &a.beat_period_range {
        (cfg.data.beat_period_min, cfg.data.beat_period_max) = parse_range(r)?;
    }
    if let Some(v) = a.bands {
        cfg.data.bands = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let clips = synthetic_corpus(cfg.seed, &cfg.data.corpus())?;
    let (train, val, test) = assign_splits(clips.len(), cfg.data.val_fraction, cfg.data.test_fraction)?;
    create_run_dir(&a.out)?;
    save_splits(
        &a.out,
        &[
            (Split::Train, &clips[..train]),
            (Split::Val, &clips[train..train + val]),
            (Split::Test, &clips[train + val..]),
        ],
        Normalization::unit(),
    )?;
    cfg.write(&a.out)?;
    let seconds: f64 = clips.iter().map(|c| c.motion.n_frames() as f64 / MOTION_FPS).sum();
    println!(
        "wrote {} clips (train {train}, val {val}, test {test}), {seconds:.1} s of motion, to {}",
        clips.len(),
        a.out.display()
    );
    Ok(())
}

/// Log each epoch to the run directory, and optionally snapshot the model.
fn epoch_hook<'a>(
    dir: &'a Path,
    log: &'a TrainingLog,
    every: usize,
    curve: &'a mut Vec<(usize, f64)>,
) -> impl FnMut(&EpochRecord, &ModelBundle) -> Result<()> + 'a {
    move |rec, bundle| {
        log.append(rec)?;
        eprintln!("{}", rec.to_line());
        curve.push((rec.epoch, rec.total));
        if every > 0 && rec.epoch % every == 0 {
            bundle.save(&dir.join(format!("epoch{:05}.ckpt", rec.epoch)))?;
        }
        Ok(())
    }
}

pub fn train_contrastive(a: TrainContrastive) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(v) = a.epochs {
        cfg.stage1.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.stage1.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.stage1.learning_rate = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let clips = load_split(&a.data, Split::Train)?;
    cfg.model.music.bands = clips[0].music.bands();
    let bundle = ModelBundle::init_stage1(
        cfg.model.music.clone(),
        cfg.model.motion.clone(),
        cfg.model.head.clone(),
        cfg.seed,
    )?;
    create_run_dir(&a.out)?;
    cfg.write(&a.out)?;
    let log = TrainingLog::new(a.out.join(LOG_FILE));
    let mut curve = Vec::new();
    let start = Instant::now();
    let trained = {
        let mut hook = epoch_hook(&a.out, &log, cfg.output.checkpoint_every, &mut curve);
        fit_contrastive(bundle, &clips, &cfg.stage1, cfg.seed, &mut hook)?
    };
    trained.save(&a.out.join(CHECKPOINT_FILE))?;
    plot::write(&a.out.join("loss.svg"), &plot::loss_curve(&curve, "contrastive loss"))?;
    let (matched, shuffled) = pair_score_means(&trained, &clips)?;
    println!(
        "stage one done in {:.1} s: mean pair score {matched:.3} matched vs {shuffled:.3} mismatched; checkpoint {}",
        start.elapsed().as_secs_f64(),
        a.out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

pub fn train_diffusion(a: TrainDiffusion) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(v) = a.epochs {
        cfg.stage2.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.stage2.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.stage2.learning_rate = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let clips = load_split(&a.data, Split::Train)?;
    let start_from = match (&a.resume, &a.stage1) {
        (Some(path), _) => {
            let b = ModelBundle::load(path)?;
            if b.stage() != Stage::Stage2 {
                return Err(Error::Config(format!("{} is not a stage-two checkpoint", path.display())));
            }
            let model = b.diffusion()?;
            if model.target != a.predict {
                return Err(Error::Config(format!(
                    "{} was trained with --predict {}",
                    path.display(),
                    model.target
                )));
            }
            cfg.model.denoiser = model.denoiser.config().clone();
            b
        }
        (None, Some(path)) => {
            let b = ModelBundle::load(path)?;
            if b.stage() != Stage::Stage1 {
                return Err(Error::Config(format!("{} is not a stage-one checkpoint", path.display())));
            }
            cfg.model.denoiser.music_dim = b.music.out_dim();
            b
        }
        (None, None) => return Err(Error::Argument("either --stage1 or --resume is required".into())),
    };
    cfg.model.music = start_from.music.config().clone();
    cfg.model.motion = start_from.motion.config().clone();
    cfg.model.head = start_from.head.config().clone();
    create_run_dir(&a.out)?;
    cfg.write(&a.out)?;
    if a.predict == PredictionTarget::Eps {
        println!("predicting eps: training on the noise MSE only; perceptual and geometric terms are disabled");
    }
    let log = TrainingLog::new(a.out.join(LOG_FILE));
    let mut curve = Vec::new();
    let start = Instant::now();
    let trained = {
        let mut hook = epoch_hook(&a.out, &log, cfg.output.checkpoint_every, &mut curve);
        if a.resume.is_some() {
            resume_diffusion(start_from, &clips, &cfg.stage2, cfg.seed, &mut hook)?
        } else {
            fit_diffusion(
                &start_from,
                &clips,
                cfg.model.denoiser.clone(),
                &cfg.stage2,
                a.predict,
                cfg.seed,
                &mut hook,
            )?
        }
    };
    trained.save(&a.out.join(CHECKPOINT_FILE))?;
    plot::write(&a.out.join("loss.svg"), &plot::loss_curve(&curve, "diffusion loss"))?;
    println!(
        "stage two done in {:.1} s after {} epochs; checkpoint {}",
        start.elapsed().as_secs_f64(),
        trained.progress.epochs,
        a.out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

pub fn generate(a: Generate) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(v) = a.steps {
        cfg.sampler.steps = v;
    }
    if let Some(v) = a.eta {
        cfg.sampler.eta = v;
    }
    if let Some(v) = a.guidance {
        cfg.sampler.guidance_scale = v;
    }
    if let Some(m) = &a.method {
        cfg.sampler.method = m.parse()?;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let split: Split = a.split.parse()?;
    let bundle = ModelBundle::load(&a.model)?;
    bundle.diffusion()?;
    let mut clips = load_split(&a.music, split)?;
    if let Some(id) = &a.clip {
        clips.retain(|c| &c.clip_id == id);
        if clips.is_empty() {
            return Err(Error::Argument(format!("no {} clip with id `{id}`", a.split)));
        }
    }
    let seeds: Vec<u64> = (0..clips.len() as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let jobs: Vec<(&PairedClip, u64)> = clips.iter().zip(seeds).collect();
    let generated = par::try_map(&jobs, |&(clip, seed)| -> Result<PairedClip> {
        let motion = bundle.generate(&clip.music, &cfg.sampler, seed)?;
        PairedClip::new(clip.clip_id.clone(), clip.music.clone(), motion, clip.beat_frames.clone())
    })?;
    create_run_dir(&a.out)?;
    let normalization = read_manifest(&a.music)?.normalization;
    save_splits(&a.out, &[(split, &generated)], normalization)?;
    cfg.write(&a.out)?;
    let plots = a.out.join("plots");
    fs::create_dir_all(&plots).map_err(|e| io_err(&plots, e))?;
    for clip in &generated {
        let svg = plot::trajectory(&clip.motion, &format!("{} (generated)", clip.clip_id));
        plot::write(&plots.join(format!("{}.svg", clip.clip_id)), &svg)?;
    }
    println!("generated {} clips into {}", generated.len(), a.out.display());
    Ok(())
}

pub fn evaluate(a: Evaluate) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(v) = a.seed {
        cfg.metrics.seed = v;
    }
    let split: Split = a.split.parse()?;
    let gt = load_split(&a.gt, split)?;
    let gen = load_split(&a.gen, split)?;
    let mut by_id: HashMap<&str, &PairedClip> = gen.iter().map(|c| (c.clip_id.as_str(), c)).collect();
    let mut paired = Vec::with_capacity(gt.len());
    for clip in &gt {
        let g = by_id.remove(clip.clip_id.as_str()).ok_or_else(|| {
            Error::Argument(format!("generated set has no clip `{}`", clip.clip_id))
        })?;
        paired.push(g.motion.clone());
    }
    if let Some(extra) = by_id.keys().next() {
        return Err(Error::Argument(format!("generated clip `{extra}` has no ground truth")));
    }
    let bundle = ModelBundle::load(&a.stage1)?;
    let report = EvalReport::compute(
        &gt,
        &paired,
        &bundle.motion,
        &a.stage1.display().to_string(),
        cfg.metrics.bc_sigma,
        cfg.metrics.diversity_samples,
        cfg.metrics.seed,
    )?;
    create_run_dir(&a.out)?;
    report.save(a.out.join(REPORT_FILE))?;
    cfg.write(&a.out)?;
    let plots = a.out.join("plots");
    fs::create_dir_all(&plots).map_err(|e| io_err(&plots, e))?;
    for (clip, motion) in gt.iter().zip(&paired).take(4) {
        let v = moving_average(&kinetic_velocity(motion), VELOCITY_SMOOTHING);
        let motion_beats = extract_motion_beats(motion)?;
        let music_beats = extract_music_beats(&clip.music)?;
        let svg = plot::beat_alignment(
            &v,
            motion_beats.positions(),
            music_beats.positions(),
            &format!("{}: generated motion vs music beats", clip.clip_id),
        );
        plot::write(&plots.join(format!("beats_{}.svg", clip.clip_id)), &svg)?;
    }
    print!("{}", report.to_text());
    Ok(())
}
