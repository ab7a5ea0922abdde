//! Synthetic metronome-conductor clips with known beats.
//!
//! The music is a band-energy array with a burst on every beat. The conductor's
//! wrists swing along arcs and reverse direction half a frame after each beat
//! frame, so the frame gap starting at a beat frame carries zero arm
//! displacement and the kinetic-velocity minima land exactly on the beats.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    MusicFeatureSequence, PairedClip, PoseSequence, DEFAULT_BANDS, JOINTS, MUSIC_FRAMES_PER_POSE,
    POSE_DIM,
};
use crate::error::{ensure, Result};

/// Resting pose in normalised coordinates, COCO upper-body order.
const REST_POSE: [[f64; 2]; JOINTS] = [
    [0.0, 0.62],
    [-0.06, 0.68],
    [0.06, 0.68],
    [-0.13, 0.64],
    [0.13, 0.64],
    [-0.32, 0.32],
    [0.32, 0.32],
    [-0.42, 0.0],
    [0.42, 0.0],
    [-0.5, -0.25],
    [0.5, -0.25],
    [-0.24, -0.72],
    [0.24, -0.72],
];

/// Burst envelope relative to the beat's first music frame: attack, peak, then a 3-frame decay.
const BURST: [f64; 5] = [0.6, 1.0, 0.5, 0.25, 0.1];
const MUSIC_NOISE: f64 = 0.05;
const JOINT_JITTER: f64 = 0.001;
const ARC_RADIUS: f64 = 0.4;
/// Arc sweep in radians at amplitude 1.
const ARC_SPAN: f64 = 1.3;
const ELBOW_FOLLOW: f64 = 0.45;

/// [`generate_synthetic_clip_with`] at the default band count.
pub fn generate_synthetic_clip(
    seed: u64,
    n_frames: usize,
    beat_period: usize,
    amplitude: f64,
) -> Result<PairedClip> {
    generate_synthetic_clip_with(seed, n_frames, beat_period, amplitude, DEFAULT_BANDS)
}

pub fn generate_synthetic_clip_with(
    seed: u64,
    n_frames: usize,
    beat_period: usize,
    amplitude: f64,
    bands: usize,
) -> Result<PairedClip> {
    ensure!(beat_period >= 4, Argument, "beat_period must be at least 4 frames, got {beat_period}");
    ensure!(
        n_frames >= 2 * beat_period,
        Argument,
        "n_frames ({n_frames}) must be at least twice the beat period ({beat_period})"
    );
    ensure!(
        amplitude > 0.0 && amplitude <= 1.0,
        Argument,
        "amplitude must lie in (0, 1], got {amplitude}"
    );
    ensure!(bands > 0, Argument, "band count must be positive");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beats: Vec<usize> = (0..n_frames).step_by(beat_period).collect();

    // Motion.
    let jitter = Normal::new(0.0, JOINT_JITTER).expect("valid std");
    let offset = [rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02)];
    let span = ARC_SPAN * amplitude;
    let period = beat_period as f64;
    let arm = |phase: f64, side: f64| -> ([f64; 2], [f64; 2]) {
        // Right arm swings around a pivot near the shoulder; the left arm mirrors it.
        let pivot = [0.2 * side, -0.05];
        let angle = |p: f64| -0.35 + (p - 0.5) * span;
        let at = |p: f64| {
            let a = angle(p);
            [pivot[0] + side * ARC_RADIUS * a.cos(), pivot[1] + ARC_RADIUS * a.sin()]
        };
        let wrist = at(phase);
        let mid = at(0.5);
        let rest_wrist = if side > 0.0 { REST_POSE[10] } else { REST_POSE[9] };
        let rest_elbow = if side > 0.0 { REST_POSE[8] } else { REST_POSE[7] };
        let w = [rest_wrist[0] + wrist[0] - mid[0], rest_wrist[1] + wrist[1] - mid[1]];
        let e = [
            rest_elbow[0] + ELBOW_FOLLOW * (wrist[0] - mid[0]),
            rest_elbow[1] + ELBOW_FOLLOW * (wrist[1] - mid[1]),
        ];
        (w, e)
    };
    let mut motion = Vec::with_capacity(n_frames * POSE_DIM);
    for i in 0..n_frames {
        let phase = swing_phase(i as f64, period);
        let (rw, re) = arm(phase, 1.0);
        let (lw, le) = arm(phase, -1.0);
        for (j, rest) in REST_POSE.iter().enumerate() {
            let p = match j {
                7 => le,
                8 => re,
                9 => lw,
                10 => rw,
                _ => [
                    rest[0] + jitter.sample(&mut rng),
                    rest[1] + jitter.sample(&mut rng),
                ],
            };
            motion.push((p[0] + offset[0]).clamp(-1.0, 1.0) as f32);
            motion.push((p[1] + offset[1]).clamp(-1.0, 1.0) as f32);
        }
    }

    // Music.
    let n_music = n_frames * MUSIC_FRAMES_PER_POSE;
    let timbre: Vec<f64> = (0..bands).map(|_| rng.gen_range(0.5..1.0)).collect();
    let mut envelope = vec![0.0; n_music];
    for &b in &beats {
        let start = b * MUSIC_FRAMES_PER_POSE;
        for (k, e) in BURST.iter().enumerate() {
            if let Some(slot) = envelope.get_mut(start + k) {
                *slot += e * amplitude;
            }
        }
    }
    let mut music = Vec::with_capacity(n_music * bands);
    for env in &envelope {
        for w in &timbre {
            music.push((env * w + rng.gen_range(0.0..MUSIC_NOISE)) as f32);
        }
    }

    PairedClip::new(
        format!("synth_{seed:08}"),
        MusicFeatureSequence::new(n_music, bands, music)?,
        PoseSequence::new(n_frames, motion)?,
        Some(beats),
    )
}

/// Back-and-forth swing phase in `[0, 1]` at continuous time `t` (motion frames).
///
/// Reversals sit at `k * period + 0.5`; between two reversals the phase follows
/// a half-cosine, so the speed vanishes at each reversal and peaks midway.
fn swing_phase(t: f64, period: f64) -> f64 {
    let s = t - 0.5;
    let k = (s / period).floor();
    let u = (s - k * period) / period;
    let rising = (k as i64).rem_euclid(2) == 0;
    if rising {
        (1.0 - (PI * u).cos()) / 2.0
    } else {
        (1.0 + (PI * u).cos()) / 2.0
    }
}

/// Parameters for a batch of synthetic clips.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub clips: usize,
    pub n_frames: usize,
    /// Inclusive range of beat periods in motion frames.
    pub beat_period: (usize, usize),
    pub amplitude: (f64, f64),
    pub bands: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            clips: 200,
            n_frames: 60,
            beat_period: (10, 25),
            amplitude: (0.5, 1.0),
            bands: DEFAULT_BANDS,
        }
    }
}

/// Generate `spec.clips` clips with per-clip seeds and parameters derived from `seed`.
pub fn synthetic_corpus(seed: u64, spec: &CorpusSpec) -> Result<Vec<PairedClip>> {
    let (lo, hi) = spec.beat_period;
    ensure!(lo <= hi, Argument, "beat period range {lo}:{hi} is empty");
    let (alo, ahi) = spec.amplitude;
    ensure!(alo <= ahi, Argument, "amplitude range is empty");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..spec.clips)
        .map(|_| {
            let clip_seed: u64 = rng.gen();
            let period = rng.gen_range(lo..=hi);
            let amplitude = if alo == ahi { alo } else { rng.gen_range(alo..=ahi) };
            generate_synthetic_clip_with(clip_seed, spec.n_frames, period, amplitude, spec.bands)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn beats_at_multiples_of_period() {
        let clip = generate_synthetic_clip(1, 60, 15, 0.7).unwrap();
        assert_eq!(clip.beat_frames.as_deref(), Some(&[0, 15, 30, 45][..]));
        assert_eq!(clip.music.n_frames(), 180);
        assert_eq!(clip.music.bands(), DEFAULT_BANDS);
        assert!(clip.motion.within_unit_box());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic_clip(9, 60, 12, 0.9).unwrap();
        let b = generate_synthetic_clip(9, 60, 12, 0.9).unwrap();
        let c = generate_synthetic_clip(10, 60, 12, 0.9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.motion, c.motion);
    }

    #[test]
    fn preconditions() {
        for (n, p, a) in [(20, 15, 0.5), (60, 3, 0.5), (60, 15, 0.0), (60, 15, 1.5)] {
            assert!(matches!(
                generate_synthetic_clip(1, n, p, a),
                Err(Error::Argument(_))
            ));
        }
    }

    #[test]
    fn arm_displacement_vanishes_on_beat_gaps() {
        let clip = generate_synthetic_clip(3, 60, 12, 1.0).unwrap();
        let wrist = 10;
        for &b in clip.beat_frames.as_ref().unwrap() {
            let p0 = clip.motion.joint(b, wrist);
            let p1 = clip.motion.joint(b + 1, wrist);
            assert!((p0[0] - p1[0]).abs() < 1e-6 && (p0[1] - p1[1]).abs() < 1e-6);
        }
        let p = clip.motion.joint(6, wrist);
        let q = clip.motion.joint(7, wrist);
        assert!((p[1] - q[1]).abs() > 1e-3);
    }

    #[test]
    fn music_bursts_scale_with_amplitude() {
        let lo = generate_synthetic_clip(4, 40, 10, 0.25).unwrap();
        let hi = generate_synthetic_clip(4, 40, 10, 1.0).unwrap();
        let peak = |c: &PairedClip| c.music.frame(1).iter().sum::<f32>();
        assert!(peak(&hi) > 3.0 * peak(&lo));
    }

    #[test]
    fn swing_phase_reverses_half_a_frame_after_beat() {
        let p = 10.0;
        assert!((swing_phase(0.5, p)).abs() < 1e-12);
        assert!((swing_phase(10.5, p) - 1.0).abs() < 1e-12);
        assert!((swing_phase(10.0, p) - swing_phase(11.0, p)).abs() < 1e-12);
    }

    #[test]
    fn corpus_is_seeded() {
        let spec = CorpusSpec {
            clips: 5,
            bands: 8,
            ..CorpusSpec::default()
        };
        let a = synthetic_corpus(7, &spec).unwrap();
        assert_eq!(a, synthetic_corpus(7, &spec).unwrap());
        assert_eq!(a.len(), 5);
    }
}
