//! Training objectives, each in two forms: a graph builder used by the
//! trainers and a plain function on tensors.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::JointLayout;
use crate::error::{ensure, Error, Result};
use crate::nn::MotionEncoder;
use crate::tensor::Tensor;

pub const SCORE_CLAMP: f64 = 1e-7;

/// Binary cross-entropy (base 2) of a `B x B` score matrix against the identity,
/// averaged over all `B^2` entries.
pub fn contrastive_loss_var(g: &mut Graph, scores: Var) -> Var {
    let (b, c) = g.value(scores).shape();
    assert_eq!(b, c, "contrastive scores must be square");
    let s = g.clamp(scores, SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    let eye = g.constant(Tensor::identity(b));
    let off = g.constant(Tensor::from_fn(b, b, |i, j| if i == j { 0.0 } else { 1.0 }));
    let log_s = g.ln(s);
    let one_minus = {
        let neg = g.scale(s, -1.0);
        g.add_scalar(neg, 1.0)
    };
    let log_1ms = g.ln(one_minus);
    let pos = g.mul(eye, log_s);
    let neg = g.mul(off, log_1ms);
    let both = g.add(pos, neg);
    let total = g.sum(both);
    g.scale(total, -1.0 / (LN_2 * (b * b) as f64))
}

pub fn contrastive_loss(scores: &Tensor) -> Result<f64> {
    ensure!(scores.rows() == scores.cols() && scores.rows() > 0, Shape, "scores must be a non-empty square matrix, got {:?}", scores.shape());
    ensure!(
        scores.data().iter().all(|s| (0.0..=1.0).contains(s)),
        Domain,
        "pair scores must lie in [0, 1]"
    );
    let mut g = Graph::new();
    let s = g.constant(scores.clone());
    let l = contrastive_loss_var(&mut g, s);
    Ok(g.scalar(l))
}

/// Mean squared error over all elements.
pub fn mse_var(g: &mut Graph, target: Var, pred: Var) -> Var {
    let d = g.sub(pred, target);
    let sq = g.square(d);
    g.mean(sq)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    ensure!(a.shape() == b.shape(), Shape, "shape mismatch: {:?} vs {:?}", a.shape(), b.shape());
    ensure!(!a.is_empty(), Shape, "empty input");
    Ok(())
}

pub fn diffusion_loss(x0: &Tensor, x0_hat: &Tensor) -> Result<f64> {
    same_shape(x0, x0_hat)?;
    let mut g = Graph::new();
    let (a, b) = (g.constant(x0.clone()), g.constant(x0_hat.clone()));
    let l = mse_var(&mut g, a, b);
    Ok(g.scalar(l))
}

/// Mean absolute difference between frozen motion-encoder features.
/// `target_features` is the encoder output for the ground truth, `[1, d]`.
pub fn perceptual_loss_var(
    g: &mut Graph,
    encoder: &MotionEncoder,
    target_features: Var,
    x0_hat: Var,
) -> Var {
    let frozen = encoder.params().bind(g, false);
    let f = encoder.forward(g, &frozen, x0_hat);
    let d = g.sub(f, target_features);
    let a = g.abs(d);
    g.mean(a)
}

pub fn perceptual_loss(encoder: &MotionEncoder, x0: &Tensor, x0_hat: &Tensor) -> Result<f64> {
    same_shape(x0, x0_hat)?;
    let target = encoder.encode_tensor(x0)?;
    let mut g = Graph::new();
    let t = g.constant(target);
    let x = g.constant(x0_hat.clone());
    let l = perceptual_loss_var(&mut g, encoder, t, x);
    Ok(g.scalar(l))
}

/// Frame-to-frame differences `[N-1, C]`.
fn frame_diff(g: &mut Graph, x: Var) -> Var {
    let n = g.value(x).rows();
    let later = g.slice_rows(x, 1, n);
    let earlier = g.slice_rows(x, 0, n - 1);
    g.sub(later, earlier)
}

/// Squared velocity mismatch summed over coordinates, averaged over frame gaps.
pub fn velocity_loss_var(g: &mut Graph, x0: Var, x0_hat: Var) -> Var {
    let n = g.value(x0).rows();
    let d = g.sub(x0_hat, x0);
    let v = frame_diff(g, d);
    let sq = g.square(v);
    let s = g.sum(sq);
    g.scale(s, 1.0 / (n - 1) as f64)
}

pub fn velocity_loss(x0: &Tensor, x0_hat: &Tensor) -> Result<f64> {
    same_shape(x0, x0_hat)?;
    ensure!(x0.rows() >= 2, Argument, "velocity loss needs at least 2 frames, got {}", x0.rows());
    let mut g = Graph::new();
    let (a, b) = (g.constant(x0.clone()), g.constant(x0_hat.clone()));
    let l = velocity_loss_var(&mut g, a, b);
    Ok(g.scalar(l))
}

/// Negative mean squared elbow speed; rewards larger arm swings.
pub fn elbow_loss_var(g: &mut Graph, x0_hat: Var, layout: &JointLayout) -> Var {
    let n = g.value(x0_hat).rows();
    let e = g.gather_cols(x0_hat, &layout.elbow_columns());
    let v = frame_diff(g, e);
    let sq = g.square(v);
    let s = g.sum(sq);
    g.scale(s, -1.0 / (n - 1) as f64)
}

pub fn elbow_loss(x0_hat: &Tensor, layout: &JointLayout) -> Result<f64> {
    ensure!(x0_hat.rows() >= 2, Argument, "elbow loss needs at least 2 frames, got {}", x0_hat.rows());
    let mut g = Graph::new();
    let x = g.constant(x0_hat.clone());
    let l = elbow_loss_var(&mut g, x, layout);
    Ok(g.scalar(l))
}

/// Loss weights of the diffusion stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ddim: f64,
    pub lambda_perc: f64,
    pub lambda_geo: f64,
    pub lambda_vel: f64,
    pub lambda_elbow: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ddim: 1.0,
            lambda_perc: 1e-6,
            lambda_geo: 1.0,
            lambda_vel: 0.1,
            lambda_elbow: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            ensure!(v >= 0.0 && v.is_finite(), Config, "{name} must be a finite non-negative number, got {v}");
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("lambda_ddim", self.lambda_ddim),
            ("lambda_perc", self.lambda_perc),
            ("lambda_geo", self.lambda_geo),
            ("lambda_vel", self.lambda_vel),
            ("lambda_elbow", self.lambda_elbow),
        ]
    }
}

/// Unweighted loss terms of one prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub ddim: f64,
    pub perc: f64,
    pub vel: f64,
    pub elbow: f64,
}

impl LossComponents {
    pub fn named(&self) -> [(&'static str, f64); 4] {
        [("ddim", self.ddim), ("perc", self.perc), ("vel", self.vel), ("elbow", self.elbow)]
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            ddim: self.ddim * k,
            perc: self.perc * k,
            vel: self.vel * k,
            elbow: self.elbow * k,
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        Self {
            ddim: self.ddim + o.ddim,
            perc: self.perc + o.perc,
            vel: self.vel + o.vel,
            elbow: self.elbow + o.elbow,
        }
    }
}

pub fn total_loss(w: &LossWeights, c: &LossComponents) -> Result<f64> {
    for (name, v) in c.named() {
        if !v.is_finite() {
            return Err(Error::TrainingDiverged(format!("non-finite {name} loss ({v})")));
        }
    }
    Ok(w.lambda_ddim * c.ddim
        + w.lambda_perc * c.perc
        + w.lambda_geo * (w.lambda_vel * c.vel + w.lambda_elbow * c.elbow))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contrastive_analytic_values() {
        assert!(contrastive_loss(&Tensor::identity(4)).unwrap() < 1e-5);
        let half = contrastive_loss(&Tensor::filled(3, 3, 0.5)).unwrap();
        assert!((half - 1.0).abs() < 1e-12);
        assert!(matches!(contrastive_loss(&Tensor::filled(2, 2, 1.5)), Err(Error::Domain(_))));
        assert!(contrastive_loss(&Tensor::zeros(2, 3)).is_err());
    }

    #[test]
    fn diffusion_loss_values() {
        let x = Tensor::from_fn(3, 4, |r, c| (r + c) as f64);
        assert_eq!(diffusion_loss(&x, &x).unwrap(), 0.0);
        assert_eq!(diffusion_loss(&Tensor::zeros(2, 5), &Tensor::filled(2, 5, 1.0)).unwrap(), 1.0);
        assert!(diffusion_loss(&x, &Tensor::zeros(4, 3)).is_err());
    }

    #[test]
    fn velocity_and_elbow_values() {
        let n = 5;
        let still = Tensor::zeros(n, 26);
        let moving = Tensor::from_fn(n, 26, |r, c| if c == 3 { r as f64 } else { 0.0 });
        assert!((velocity_loss(&still, &moving).unwrap() - 1.0).abs() < 1e-12);
        let shifted = Tensor::from_fn(n, 26, |r, c| moving.get(r, c) + 0.7 * c as f64);
        assert!(velocity_loss(&moving, &shifted).unwrap().abs() < 1e-12);
        assert!(velocity_loss(&Tensor::zeros(1, 26), &Tensor::zeros(1, 26)).is_err());

        let layout = JointLayout::default();
        assert_eq!(elbow_loss(&still, &layout).unwrap(), 0.0);
        let cols = layout.elbow_columns();
        let elbows = Tensor::from_fn(n, 26, |r, c| if c == cols[0] || c == cols[2] { r as f64 } else { 0.0 });
        assert!((elbow_loss(&elbows, &layout).unwrap() + 2.0).abs() < 1e-12);
        let fast = elbows.scale(2.0);
        assert!((elbow_loss(&fast, &layout).unwrap() + 8.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weights() {
        let w = LossWeights::default();
        let c = LossComponents { ddim: 1.0, perc: 1.0, vel: 1.0, elbow: -1.0 };
        assert!((total_loss(&w, &c).unwrap() - 1.000001).abs() < 1e-12);
        assert_eq!(total_loss(&w, &LossComponents::default()).unwrap(), 0.0);
        let bad = LossComponents { vel: f64::NAN, ..c };
        match total_loss(&w, &bad) {
            Err(Error::TrainingDiverged(msg)) => assert!(msg.contains("vel")),
            other => panic!("{other:?}"),
        }
        let no_geo = LossWeights { lambda_geo: 0.0, ..w };
        let big = LossComponents { vel: 1e6, elbow: -1e6, ..c };
        assert_eq!(total_loss(&no_geo, &big).unwrap(), total_loss(&no_geo, &c).unwrap());
    }
}
