//! Small end-to-end training runs on synthetic data.

use baton::data::*;
use baton::nn::*;
use baton::train::*;
use baton::{par, Tensor};

fn music_cfg(bands: usize) -> MusicEncoderConfig {
    MusicEncoderConfig {
        bands,
        n_groups: 3,
        residual_layers_per_group: 1,
        channels: vec![32, 32, 32],
        temporal_pool_factors: vec![3, 1, 1],
        out_dim: 32,
    }
}

fn motion_cfg() -> MotionEncoderConfig {
    MotionEncoderConfig {
        st_gcn_layers: 2,
        channels: vec![16, 32],
        out_dim: 32,
        ..MotionEncoderConfig::default()
    }
}

fn denoiser_cfg() -> DenoiserConfig {
    DenoiserConfig {
        layers: 2,
        model_dim: 64,
        heads: 4,
        ffn_dim: 128,
        timestep_embedding_dim: 64,
        music_dim: 32,
    }
}

fn corpus(seed: u64, clips: usize) -> Vec<PairedClip> {
    let spec = CorpusSpec {
        clips,
        bands: 32,
        ..CorpusSpec::default()
    };
    synthetic_corpus(seed, &spec).unwrap()
}

fn fresh() -> ModelBundle {
    ModelBundle::init_stage1(music_cfg(32), motion_cfg(), PairHeadConfig { hidden: 64 }, 0).unwrap()
}

#[test]
fn contrastive_training_separates_pairs() {
    let clips = corpus(1, 200);
    let (train, held_out) = clips.split_at(160);
    let cfg = StageOneConfig {
        batch_size: 8,
        epochs: 90,
        learning_rate: 3e-3,
        ..StageOneConfig::default()
    };
    let mut curve = Vec::new();
    let bundle = train_contrastive(fresh(), train, &cfg, 7, &mut |r, _| {
        curve.push(r.total);
        Ok(())
    })
    .unwrap();
    let (first, last) = (curve[0], *curve.last().unwrap());
    let (matched, shuffled) = pair_score_means(&bundle, held_out).unwrap();
    println!("contrastive loss {first:.4} -> {last:.4}; held-out scores matched {matched:.3} shuffled {shuffled:.3}");
    assert!(last <= 0.5 * first, "loss {first} -> {last}");
    assert!(matched > shuffled);
}

/// Two-class logistic regression by gradient descent; returns held-out accuracy.
fn probe_accuracy(train: &[(Tensor, bool)], test: &[(Tensor, bool)]) -> f64 {
    let d = train[0].0.cols();
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..2000 {
        let (mut gw, mut gb) = (vec![0.0; d], 0.0);
        for (x, y) in train {
            let z: f64 = x.data().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let err = 1.0 / (1.0 + (-z).exp()) - if *y { 1.0 } else { 0.0 };
            for (g, xi) in gw.iter_mut().zip(x.data()) {
                *g += err * xi;
            }
            gb += err;
        }
        let n = train.len() as f64;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= 0.5 * g / n;
        }
        b -= 0.5 * gb / n;
    }
    let hits = test
        .iter()
        .filter(|(x, y)| {
            let z: f64 = x.data().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            (z > 0.0) == *y
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn contrastive_embeddings_separate_beat_periods() {
    let clips = corpus(2, 160);
    let cfg = StageOneConfig {
        batch_size: 8,
        epochs: 10,
        learning_rate: 3e-3,
        ..StageOneConfig::default()
    };
    let bundle = train_contrastive(fresh(), &clips, &cfg, 3, &mut |_, _| Ok(())).unwrap();
    let labelled = |seed: u64| -> Vec<(Tensor, bool)> {
        [(10usize, false), (25, true)]
            .iter()
            .flat_map(|&(p, label)| {
                let spec = CorpusSpec {
                    clips: 40,
                    beat_period: (p, p),
                    bands: 32,
                    ..CorpusSpec::default()
                };
                let set = synthetic_corpus(seed + p as u64, &spec).unwrap();
                par::map(&set, |c| bundle.motion.encode(&c.motion).unwrap())
                    .into_iter()
                    .map(move |e| (e, label))
            })
            .collect()
    };
    let acc = probe_accuracy(&labelled(100), &labelled(200));
    println!("linear probe accuracy {acc:.3}");
    assert!(acc >= 0.9, "{acc}");
}

#[test]
fn contrastive_training_is_deterministic() {
    let clips = corpus(3, 24);
    let cfg = StageOneConfig {
        batch_size: 8,
        epochs: 2,
        learning_rate: 3e-3,
        ..StageOneConfig::default()
    };
    let a = train_contrastive(fresh(), &clips, &cfg, 5, &mut |_, _| Ok(())).unwrap();
    let b = par::sequential(|| train_contrastive(fresh(), &clips, &cfg, 5, &mut |_, _| Ok(())).unwrap());
    for ((_, p), (_, q)) in a.sections().iter().zip(b.sections()) {
        for (x, y) in p.tensors().zip(q.tensors()) {
            assert!(x.sub(y).max_abs() <= 1e-6);
        }
    }
}

#[test]
fn diffusion_loss_falls_on_desk_scale_run() {
    let clips = corpus(4, 200);
    let stage1 = fresh();
    let cfg = StageTwoConfig {
        batch_size: 16,
        epochs: 100,
        learning_rate: 1e-3,
        ..StageTwoConfig::default()
    };
    let mut curve = Vec::new();
    let model = train_diffusion(&stage1, &clips, denoiser_cfg(), &cfg, PredictionTarget::X0, 1, &mut |r, _| {
        curve.push(r.total);
        Ok(())
    })
    .unwrap();
    let (first, last) = (curve[0], *curve.last().unwrap());
    println!("diffusion loss {first:.4e} -> {last:.4e} over {} epochs", curve.len());
    assert_eq!(model.progress.epochs, 100);
    assert!(last <= 0.4 * first, "loss {first} -> {last}");
}

#[test]
fn diffusion_resume_and_determinism() {
    let clips = corpus(5, 24);
    let stage1 = fresh();
    let small = DenoiserConfig {
        layers: 1,
        model_dim: 32,
        heads: 2,
        ffn_dim: 64,
        timestep_embedding_dim: 32,
        music_dim: 32,
    };
    let cfg = |epochs| StageTwoConfig {
        batch_size: 8,
        epochs,
        learning_rate: 1e-3,
        ..StageTwoConfig::default()
    };
    for target in [PredictionTarget::X0, PredictionTarget::Eps] {
        let mut straight = Vec::new();
        let full = train_diffusion(&stage1, &clips, small.clone(), &cfg(3), target, 9, &mut |r, _| {
            straight.push(r.total);
            Ok(())
        })
        .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.ckpt");
        let half = train_diffusion(&stage1, &clips, small.clone(), &cfg(2), target, 9, &mut |_, _| Ok(())).unwrap();
        half.save(&path).unwrap();
        let mut resumed = Vec::new();
        let again = resume_diffusion(ModelBundle::load(&path).unwrap(), &clips, &cfg(3), 9, &mut |r, _| {
            resumed.push(r.total);
            Ok(())
        })
        .unwrap();
        assert_eq!(resumed.len(), 1);
        assert!((resumed[0] - straight[2]).abs() <= 1e-6, "{target}: {} vs {}", resumed[0], straight[2]);

        let seq = par::sequential(|| train_diffusion(&stage1, &clips, small.clone(), &cfg(3), target, 9, &mut |_, _| Ok(())).unwrap());
        let (p, q, r) = (full.diffusion().unwrap(), again.diffusion().unwrap(), seq.diffusion().unwrap());
        for ((x, y), z) in p.denoiser.params().tensors().zip(q.denoiser.params().tensors()).zip(r.denoiser.params().tensors()) {
            assert_eq!(x, y, "{target}: resumed differs by {}", x.sub(y).max_abs());
            assert_eq!(x, z, "{target}: sequential differs by {}", x.sub(z).max_abs());
        }
    }
}

#[test]
fn eps_mode_reports_noise_loss_only() {
    let clips = corpus(6, 16);
    let cfg = StageTwoConfig {
        batch_size: 8,
        epochs: 1,
        learning_rate: 1e-3,
        ..StageTwoConfig::default()
    };
    let small = DenoiserConfig {
        layers: 1,
        model_dim: 16,
        heads: 2,
        ffn_dim: 16,
        timestep_embedding_dim: 8,
        music_dim: 32,
    };
    let mut recs = Vec::new();
    train_diffusion(&fresh(), &clips, small, &cfg, PredictionTarget::Eps, 2, &mut |r, _| {
        recs.push(r.clone());
        Ok(())
    })
    .unwrap();
    let rec = &recs[0];
    assert_eq!(rec.components.len(), 1);
    assert_eq!(rec.components[0].0, "eps");
    assert_eq!(rec.total, rec.components[0].1);
}
