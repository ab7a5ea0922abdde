//! Domain types for paired music/motion clips.

mod dataset;
mod synthetic;

pub use dataset::{load_dataset, read_manifest, save_dataset, save_splits, Dataset, Manifest, ManifestClip, Normalization, Split};
pub use synthetic::{generate_synthetic_clip, generate_synthetic_clip_with, synthetic_corpus, CorpusSpec};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// Upper-body keypoints per pose.
pub const JOINTS: usize = 13;
/// Coordinates per keypoint.
pub const COORDS: usize = 2;
/// Width of a flattened pose frame.
pub const POSE_DIM: usize = JOINTS * COORDS;
pub const MOTION_FPS: f64 = 30.0;
pub const MUSIC_RATE: f64 = 90.0;
/// Music feature frames per motion frame.
pub const MUSIC_FRAMES_PER_POSE: usize = 3;
pub const DEFAULT_BANDS: usize = 128;

/// A motion clip: `n_frames` poses of 13 joints x 2 coordinates at 30 fps.
///
/// Storage is joint-major within a frame, `[x0, y0, x1, y1, ..., x12, y12]`,
/// which is also the frozen order of [`flatten_pose`].
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    n_frames: usize,
    data: Vec<f32>,
}

impl PoseSequence {
    pub fn new(n_frames: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            data.len() == n_frames * POSE_DIM,
            Shape,
            "pose data has {} values, expected {} frames x {POSE_DIM}",
            data.len(),
            n_frames
        );
        ensure!(n_frames >= 2, Argument, "a pose sequence needs at least 2 frames, got {n_frames}");
        ensure!(
            data.iter().all(|v| v.is_finite()),
            Domain,
            "pose sequence contains non-finite coordinates"
        );
        Ok(Self { n_frames, data })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn fps(&self) -> f64 {
        MOTION_FPS
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * POSE_DIM..(i + 1) * POSE_DIM]
    }

    pub fn joint(&self, frame: usize, joint: usize) -> [f32; 2] {
        let o = frame * POSE_DIM + joint * COORDS;
        [self.data[o], self.data[o + 1]]
    }

    /// True if every coordinate lies in `[-1, 1]`.
    pub fn within_unit_box(&self) -> bool {
        self.data.iter().all(|v| (-1.0..=1.0).contains(v))
    }

    /// Frames in reverse order.
    pub fn time_reversed(&self) -> Self {
        let data = (0..self.n_frames)
            .rev()
            .flat_map(|i| self.frame(i).iter().copied())
            .collect();
        Self {
            n_frames: self.n_frames,
            data,
        }
    }
}

/// `[N, 13, 2] -> [N, 26]`, joint-major then coordinate.
pub fn flatten_pose(motion: &PoseSequence) -> Tensor {
    Tensor::from_vec(
        motion.n_frames,
        POSE_DIM,
        motion.data.iter().map(|&v| v as f64).collect(),
    )
}

/// Inverse of [`flatten_pose`]; values are stored at single precision.
pub fn unflatten_pose(arr: &Tensor) -> Result<PoseSequence> {
    ensure!(
        arr.cols() == POSE_DIM,
        Shape,
        "flattened pose must have {POSE_DIM} columns, got {}",
        arr.cols()
    );
    PoseSequence::new(arr.rows(), arr.data().iter().map(|&v| v as f32).collect())
}

/// Spectral band energies at 90 Hz, `[n_frames, bands]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MusicFeatureSequence {
    n_frames: usize,
    bands: usize,
    data: Vec<f32>,
}

impl MusicFeatureSequence {
    pub fn new(n_frames: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(bands > 0, Argument, "music features need at least one band");
        ensure!(
            data.len() == n_frames * bands,
            Shape,
            "music data has {} values, expected {n_frames} x {bands}",
            data.len()
        );
        ensure!(
            data.iter().all(|v| v.is_finite() && *v >= 0.0),
            Domain,
            "music features must be finite and non-negative"
        );
        Ok(Self { n_frames, bands, data })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn rate(&self) -> f64 {
        MUSIC_RATE
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.bands..(i + 1) * self.bands]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            self.n_frames,
            self.bands,
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    /// Multiply every value by `k` (must be non-negative).
    pub fn scaled(&self, k: f32) -> Result<Self> {
        Self::new(self.n_frames, self.bands, self.data.iter().map(|v| v * k).collect())
    }
}

/// A music clip and the motion performed to it.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedClip {
    pub clip_id: String,
    pub music: MusicFeatureSequence,
    pub motion: PoseSequence,
    /// Ground-truth beat positions in motion frames; only synthetic clips carry them.
    pub beat_frames: Option<Vec<usize>>,
}

impl PairedClip {
    pub fn new(
        clip_id: impl Into<String>,
        music: MusicFeatureSequence,
        motion: PoseSequence,
        beat_frames: Option<Vec<usize>>,
    ) -> Result<Self> {
        let clip = Self {
            clip_id: clip_id.into(),
            music,
            motion,
            beat_frames,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::ClipValidation {
            clip_id: self.clip_id.clone(),
            reason,
        };
        if self.clip_id.is_empty() || self.clip_id.contains(['/', '\\']) {
            return Err(fail("clip id must be a non-empty file-name-safe string".into()));
        }
        if !self.motion.as_slice().iter().all(|v| v.is_finite()) {
            return Err(fail("motion contains non-finite coordinates".into()));
        }
        if !self.music.as_slice().iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(fail("music features must be finite and non-negative".into()));
        }
        if self.music.n_frames() != MUSIC_FRAMES_PER_POSE * self.motion.n_frames() {
            return Err(fail(format!(
                "music has {} frames but motion has {} (expected music = 3 x motion)",
                self.music.n_frames(),
                self.motion.n_frames()
            )));
        }
        if let Some(beats) = &self.beat_frames {
            if beats.windows(2).any(|w| w[0] >= w[1]) {
                return Err(fail("beat_frames must be strictly increasing".into()));
            }
            if beats.iter().any(|&b| b >= self.motion.n_frames()) {
                return Err(fail("beat_frames must lie within the clip".into()));
            }
        }
        Ok(())
    }
}

/// Names and limb indices of the 13-keypoint upper-body skeleton.
#[derive(Clone, Debug, PartialEq)]
pub struct JointLayout {
    pub names: Vec<String>,
    pub elbow_indices: (usize, usize),
    pub wrist_indices: (usize, usize),
    /// Undirected bone list used to build the skeleton graph.
    pub bones: Vec<(usize, usize)>,
}

impl Default for JointLayout {
    /// COCO keypoint order truncated after the hips.
    fn default() -> Self {
        let names = [
            "nose",
            "left_eye",
            "right_eye",
            "left_ear",
            "right_ear",
            "left_shoulder",
            "right_shoulder",
            "left_elbow",
            "right_elbow",
            "left_wrist",
            "right_wrist",
            "left_hip",
            "right_hip",
        ];
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            elbow_indices: (7, 8),
            wrist_indices: (9, 10),
            bones: vec![
                (0, 1),
                (0, 2),
                (1, 3),
                (2, 4),
                (1, 2),
                (3, 5),
                (4, 6),
                (5, 6),
                (5, 7),
                (6, 8),
                (7, 9),
                (8, 10),
                (5, 11),
                (6, 12),
                (11, 12),
            ],
        }
    }
}

impl JointLayout {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.names.len() == JOINTS, Argument, "layout must name {JOINTS} joints");
        let (e0, e1) = self.elbow_indices;
        let (w0, w1) = self.wrist_indices;
        let all = [e0, e1, w0, w1];
        ensure!(all.iter().all(|&i| i < JOINTS), Argument, "limb index out of range");
        ensure!(
            e0 != e1 && w0 != w1 && ![w0, w1].contains(&e0) && ![w0, w1].contains(&e1),
            Argument,
            "elbow and wrist indices must be distinct and disjoint"
        );
        ensure!(
            self.bones.iter().all(|&(a, b)| a < JOINTS && b < JOINTS && a != b),
            Argument,
            "bone endpoints must be distinct joints"
        );
        Ok(())
    }

    /// Columns of a flattened pose holding the two elbows' coordinates.
    pub fn elbow_columns(&self) -> [usize; 4] {
        let (a, b) = self.elbow_indices;
        [2 * a, 2 * a + 1, 2 * b, 2 * b + 1]
    }

    pub fn wrist_columns(&self) -> [usize; 4] {
        let (a, b) = self.wrist_indices;
        [2 * a, 2 * a + 1, 2 * b, 2 * b + 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn flatten_order_is_joint_major() {
        let data: Vec<f32> = (0..2 * POSE_DIM).map(|v| v as f32 + 1.0).collect();
        let pose = PoseSequence::new(2, data.clone()).unwrap();
        let flat = flatten_pose(&pose);
        assert_eq!(flat.shape(), (2, POSE_DIM));
        assert_eq!(&flat.row(0)[..4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pose.joint(1, 0), [27.0, 28.0]);
    }

    #[test]
    fn flatten_of_zero_pose_is_zero() {
        let pose = PoseSequence::new(2, vec![0.0; 2 * POSE_DIM]).unwrap();
        let flat = flatten_pose(&pose);
        assert_eq!(flat.row(0), &[0.0; POSE_DIM]);
    }

    #[test]
    fn unflatten_rejects_wrong_width() {
        let t = Tensor::zeros(4, 25);
        assert!(matches!(unflatten_pose(&t), Err(Error::Shape(_))));
    }

    #[test]
    fn pose_rejects_short_and_nonfinite() {
        assert!(PoseSequence::new(1, vec![0.0; POSE_DIM]).is_err());
        let mut d = vec![0.0; 2 * POSE_DIM];
        d[3] = f32::NAN;
        assert!(matches!(PoseSequence::new(2, d), Err(Error::Domain(_))));
    }

    #[test]
    fn music_must_be_nonnegative() {
        assert!(MusicFeatureSequence::new(1, 2, vec![0.0, -1.0]).is_err());
    }

    #[test]
    fn clip_alignment_is_enforced() {
        let music = MusicFeatureSequence::new(5, 1, vec![0.0; 5]).unwrap();
        let motion = PoseSequence::new(2, vec![0.0; 2 * POSE_DIM]).unwrap();
        let err = PairedClip::new("c1", music, motion, None).unwrap_err();
        assert!(err.to_string().contains("c1"));
    }

    #[test]
    fn beat_frames_validated() {
        let music = MusicFeatureSequence::new(6, 1, vec![0.0; 6]).unwrap();
        let motion = PoseSequence::new(2, vec![0.0; 2 * POSE_DIM]).unwrap();
        assert!(PairedClip::new("c", music.clone(), motion.clone(), Some(vec![1, 1])).is_err());
        assert!(PairedClip::new("c", music.clone(), motion.clone(), Some(vec![2])).is_err());
        assert!(PairedClip::new("c", music, motion, Some(vec![0, 1])).is_ok());
    }

    #[test]
    fn default_layout_is_valid() {
        let l = JointLayout::default();
        l.validate().unwrap();
        assert_eq!(l.elbow_columns(), [14, 15, 16, 17]);
        assert_eq!(l.names[9], "left_wrist");
    }

    proptest! {
        #[test]
        fn flatten_round_trip(n in 2usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..n * POSE_DIM).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let pose = PoseSequence::new(n, data).unwrap();
            prop_assert_eq!(unflatten_pose(&flatten_pose(&pose)).unwrap(), pose);
        }
    }
}
