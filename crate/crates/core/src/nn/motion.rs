use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::layers::{LayerNorm, Linear, TemporalConv};
use super::params::{Bound, Init, Params};
use crate::autodiff::{Graph, Var};
use crate::data::{flatten_pose, JointLayout, PoseSequence, COORDS, JOINTS, MOTION_FPS, POSE_DIM};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionEncoderConfig {
    pub st_gcn_layers: usize,
    pub channels: Vec<usize>,
    /// Undirected skeleton edges over the 13 joints.
    pub bones: Vec<(usize, usize)>,
    pub out_dim: usize,
}

impl Default for MotionEncoderConfig {
    fn default() -> Self {
        Self {
            st_gcn_layers: 4,
            channels: vec![32, 64, 128, 256],
            bones: JointLayout::default().bones,
            out_dim: 256,
        }
    }
}

impl MotionEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.st_gcn_layers >= 1, Config, "motion encoder needs at least one layer");
        ensure!(
            self.channels.len() == self.st_gcn_layers,
            Config,
            "motion encoder needs {} channel entries, got {}",
            self.st_gcn_layers,
            self.channels.len()
        );
        ensure!(
            self.channels.iter().all(|&c| c > 0) && self.out_dim > 0,
            Config,
            "motion encoder widths must be positive"
        );
        let adj = adjacency(&self.bones)?;
        ensure!(is_connected(&adj), Config, "skeleton graph must connect all {JOINTS} joints");
        Ok(())
    }

    /// Symmetrically normalised adjacency with self loops, `D^-1/2 (A + I) D^-1/2`.
    pub fn normalized_adjacency(&self) -> Result<Tensor> {
        let adj = adjacency(&self.bones)?;
        let deg: Vec<f64> = (0..JOINTS).map(|i| adj.row(i).iter().sum()).collect();
        Ok(Tensor::from_fn(JOINTS, JOINTS, |i, j| {
            adj.get(i, j) / (deg[i] * deg[j]).sqrt()
        }))
    }
}

fn adjacency(bones: &[(usize, usize)]) -> Result<Tensor> {
    let mut a = Tensor::identity(JOINTS);
    for &(i, j) in bones {
        ensure!(i < JOINTS && j < JOINTS && i != j, Config, "invalid bone ({i}, {j})");
        a.set(i, j, 1.0);
        a.set(j, i, 1.0);
    }
    Ok(a)
}

fn is_connected(adj: &Tensor) -> bool {
    let n = adj.rows();
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            if adj.get(i, j) > 0.0 && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

#[derive(Clone, Debug)]
struct GcnLayer {
    spatial: Linear,
    temporal: TemporalConv,
    skip: Option<Linear>,
}

/// Spatial-temporal graph convolution over the skeleton (position and
/// velocity per joint), mean-pooled over frames and joints into a single
/// feature vector.
#[derive(Clone, Debug)]
pub struct MotionEncoder {
    cfg: MotionEncoderConfig,
    params: Params,
    adjacency: Arc<Tensor>,
    layers: Vec<GcnLayer>,
    out: Linear,
    out_norm: LayerNorm,
}

impl MotionEncoder {
    pub fn new(cfg: MotionEncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let adjacency = Arc::new(cfg.normalized_adjacency()?);
        let mut p = Params::new();
        let mut init = Init::new(seed);
        let mut width = 2 * COORDS;
        let mut layers = Vec::with_capacity(cfg.st_gcn_layers);
        for (i, &ch) in cfg.channels.iter().enumerate() {
            let spatial = Linear::new(&mut p, &mut init, &format!("gcn{i}.spatial"), width, ch);
            let temporal =
                TemporalConv::new(&mut p, &mut init, &format!("gcn{i}.temporal"), ch, ch, JOINTS);
            let skip = (width != ch)
                .then(|| Linear::new(&mut p, &mut init, &format!("gcn{i}.skip"), width, ch));
            layers.push(GcnLayer {
                spatial,
                temporal,
                skip,
            });
            width = ch;
        }
        let out = Linear::new(&mut p, &mut init, "out", width, cfg.out_dim);
        let out_norm = LayerNorm::new(&mut p, "out_norm", cfg.out_dim);
        Ok(Self {
            cfg,
            params: p,
            adjacency,
            layers,
            out,
            out_norm,
        })
    }

    pub fn config(&self) -> &MotionEncoderConfig {
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

    /// `[N, 26] -> [1, out_dim]`.
    ///
    /// Each joint node carries its position and its backward-difference
    /// velocity in units per second.
    pub fn forward(&self, g: &mut Graph, b: &Bound, motion: Var) -> Var {
        let n = g.value(motion).rows();
        let later = g.slice_rows(motion, 1, n);
        let earlier = g.slice_rows(motion, 0, n - 1);
        let diff = g.sub(later, earlier);
        let diff = g.scale(diff, MOTION_FPS);
        let idx: Vec<usize> = (0..n).map(|r| r.saturating_sub(1)).collect();
        let vel = g.gather_rows(diff, &idx);
        let pos = g.reshape(motion, n * JOINTS, COORDS);
        let vel = g.reshape(vel, n * JOINTS, COORDS);
        let mut h = g.concat_cols(&[pos, vel]);
        for layer in &self.layers {
            let s = layer.spatial.forward(g, b, h);
            let s = g.graph_mix(s, self.adjacency.clone());
            let s = g.silu(s);
            let s = layer.temporal.forward(g, b, s);
            let skip = match &layer.skip {
                Some(lin) => lin.forward(g, b, h),
                None => h,
            };
            let sum = g.add(s, skip);
            h = g.silu(sum);
        }
        let pooled = g.mean_rows(h);
        let y = self.out.forward(g, b, pooled);
        self.out_norm.forward(g, b, y)
    }

    /// Feature vector `[1, out_dim]` of a flattened `[N, 26]` motion.
    pub fn encode_tensor(&self, motion: &Tensor) -> Result<Tensor> {
        ensure!(motion.cols() == POSE_DIM, Shape, "motion must have {POSE_DIM} columns, got {}", motion.cols());
        ensure!(motion.rows() >= 2, Argument, "motion needs at least 2 frames, got {}", motion.rows());
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(motion.clone());
        let y = self.forward(&mut g, &b, x);
        Ok(g.value(y).clone())
    }

    pub fn encode(&self, motion: &PoseSequence) -> Result<Tensor> {
        self.encode_tensor(&flatten_pose(motion))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(bones: Vec<(usize, usize)>) -> MotionEncoderConfig {
        MotionEncoderConfig {
            st_gcn_layers: 2,
            channels: vec![4, 5],
            bones,
            out_dim: 3,
        }
    }

    #[test]
    fn default_skeleton_is_connected() {
        assert!(MotionEncoderConfig::default().validate().is_ok());
        let mut cfg = MotionEncoderConfig::default();
        cfg.bones.retain(|&(a, b)| (a, b) != (5, 11) && (a, b) != (6, 12));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn adjacency_is_symmetric_with_unit_spectral_bound() {
        let a = MotionEncoderConfig::default().normalized_adjacency().unwrap();
        assert_eq!(a, a.transpose());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn output_shape_and_short_input() {
        let enc = MotionEncoder::new(tiny(JointLayout::default().bones), 3).unwrap();
        let x = Tensor::from_fn(5, POSE_DIM, |r, c| ((r + 3 * c) % 7) as f64 * 0.1);
        assert_eq!(enc.encode_tensor(&x).unwrap().shape(), (1, 3));
        assert!(enc.encode_tensor(&Tensor::zeros(1, POSE_DIM)).is_err());
    }

    #[test]
    fn joint_permutation_invariance() {
        // perm[new] = old
        let perm: Vec<usize> = vec![4, 0, 12, 7, 2, 9, 1, 11, 5, 3, 10, 8, 6];
        let mut inv = vec![0; JOINTS];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let bones = JointLayout::default().bones;
        let permuted: Vec<_> = bones.iter().map(|&(a, b)| (inv[a], inv[b])).collect();
        let a = MotionEncoder::new(tiny(bones), 11).unwrap();
        let b = MotionEncoder::new(tiny(permuted), 11).unwrap();
        let x = Tensor::from_fn(6, POSE_DIM, |r, c| ((r * 5 + c * 3) % 11) as f64 / 11.0 - 0.5);
        let xp = Tensor::from_fn(6, POSE_DIM, |r, c| x.get(r, 2 * perm[c / 2] + c % 2));
        let ya = a.encode_tensor(&x).unwrap();
        let yb = b.encode_tensor(&xp).unwrap();
        for (u, v) in ya.data().iter().zip(yb.data()) {
            assert!((u - v).abs() < 1e-12, "{u} vs {v}");
        }
    }
}
