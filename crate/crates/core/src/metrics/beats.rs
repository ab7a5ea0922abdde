use crate::data::{MusicFeatureSequence, PoseSequence, JOINTS, MUSIC_FRAMES_PER_POSE};
use crate::error::{ensure, Result};

/// Centered moving-average width applied to kinetic velocity.
pub const VELOCITY_SMOOTHING: usize = 5;
/// Minimum distance between music onset peaks, in feature frames.
pub const ONSET_MIN_SEPARATION: usize = 9;
/// Default kernel width of [`beat_consistency`], in motion frames.
pub const BC_SIGMA: f64 = 3.0;

/// Strictly increasing beat positions in motion frames.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BeatList {
    positions: Vec<usize>,
}

impl BeatList {
    pub fn new(mut positions: Vec<usize>) -> Self {
        positions.sort_unstable();
        positions.dedup();
        Self { positions }
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Sum of joint displacement magnitudes for every frame gap, `N - 1` values.
pub fn kinetic_velocity(motion: &PoseSequence) -> Vec<f64> {
    (0..motion.n_frames() - 1)
        .map(|i| {
            (0..JOINTS)
                .map(|j| {
                    let a = motion.joint(i, j);
                    let b = motion.joint(i + 1, j);
                    let dx = b[0] as f64 - a[0] as f64;
                    let dy = b[1] as f64 - a[1] as f64;
                    dx.hypot(dy)
                })
                .sum()
        })
        .collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let last = n as isize - 1;
    if last == 0 {
        return 0;
    }
    let period = 2 * last;
    let m = i.rem_euclid(period);
    (if m > last { period - m } else { m }) as usize
}

/// Centered moving average with reflected edges.
pub fn moving_average(v: &[f64], window: usize) -> Vec<f64> {
    let half = (window / 2) as isize;
    let n = v.len();
    (0..n as isize)
        .map(|i| (-half..=half).map(|k| v[reflect(i + k, n)]).sum::<f64>() / (2 * half + 1) as f64)
        .collect()
}

/// Frame gaps where smoothed kinetic velocity has a strict local minimum
/// below its median. Edges compare against their reflected neighbour.
pub fn extract_motion_beats(motion: &PoseSequence) -> Result<BeatList> {
    ensure!(
        motion.n_frames() >= 3,
        Argument,
        "motion beat extraction needs at least 3 frames, got {}",
        motion.n_frames()
    );
    let v = moving_average(&kinetic_velocity(motion), VELOCITY_SMOOTHING);
    let n = v.len();
    let median = median(&v);
    let beats = (0..n)
        .filter(|&i| {
            let prev = v[reflect(i as isize - 1, n)];
            let next = v[reflect(i as isize + 1, n)];
            prev > v[i] && v[i] < next && v[i] < median
        })
        .collect();
    Ok(BeatList::new(beats))
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Positive spectral flux per feature frame; the first frame has none.
pub fn onset_strength(music: &MusicFeatureSequence) -> Vec<f64> {
    let mut out = vec![0.0; music.n_frames()];
    for m in 1..music.n_frames() {
        out[m] = music
            .frame(m)
            .iter()
            .zip(music.frame(m - 1))
            .map(|(&a, &b)| (a as f64 - b as f64).max(0.0))
            .sum();
    }
    out
}

/// Onset peaks above mean + one standard deviation, greedily kept strongest
/// first with a minimum separation, then converted to motion frames.
pub fn extract_music_beats(music: &MusicFeatureSequence) -> Result<BeatList> {
    ensure!(
        music.n_frames() >= ONSET_MIN_SEPARATION,
        Argument,
        "music beat extraction needs at least {ONSET_MIN_SEPARATION} frames, got {}",
        music.n_frames()
    );
    let o = onset_strength(music);
    let n = o.len() as f64;
    let mean = o.iter().sum::<f64>() / n;
    let std = (o.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let threshold = mean + std;
    let mut peaks: Vec<usize> = (0..o.len())
        .filter(|&m| {
            let prev = if m == 0 { f64::NEG_INFINITY } else { o[m - 1] };
            let next = o.get(m + 1).copied().unwrap_or(f64::NEG_INFINITY);
            o[m] > threshold && o[m] > prev && o[m] >= next
        })
        .collect();
    peaks.sort_by(|&a, &b| o[b].total_cmp(&o[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for p in peaks {
        if kept.iter().all(|&k| k.abs_diff(p) >= ONSET_MIN_SEPARATION) {
            kept.push(p);
        }
    }
    let frames = music.n_frames() / MUSIC_FRAMES_PER_POSE;
    let beats = kept
        .into_iter()
        .map(|m| {
            let f = (m as f64 / MUSIC_FRAMES_PER_POSE as f64).round() as usize;
            f.min(frames.saturating_sub(1))
        })
        .collect();
    Ok(BeatList::new(beats))
}

/// Mean over music beats of `exp(-d^2 / (2 sigma^2))`, where `d` is the
/// distance to the nearest motion beat in motion frames.
pub fn beat_consistency(motion_beats: &BeatList, music_beats: &BeatList, sigma: f64) -> Result<f64> {
    ensure!(!motion_beats.is_empty(), UndefinedMetric, "beat consistency needs motion beats");
    ensure!(!music_beats.is_empty(), UndefinedMetric, "beat consistency needs music beats");
    ensure!(sigma > 0.0, Argument, "beat consistency sigma must be positive, got {sigma}");
    let total: f64 = music_beats
        .positions()
        .iter()
        .map(|&t| {
            let d = motion_beats
                .positions()
                .iter()
                .map(|&x| x.abs_diff(t))
                .min()
                .expect("non-empty") as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    Ok(total / music_beats.len() as f64)
}

/// Beat consistency of a generated motion against the music it was
/// generated for. A motion without any kinetic-velocity minimum (for example
/// a frozen pose) scores 0 instead of being undefined.
pub fn clip_beat_consistency(motion: &PoseSequence, music: &MusicFeatureSequence, sigma: f64) -> Result<f64> {
    let music_beats = extract_music_beats(music)?;
    let motion_beats = extract_motion_beats(motion)?;
    if motion_beats.is_empty() {
        ensure!(!music_beats.is_empty(), UndefinedMetric, "beat consistency needs music beats");
        return Ok(0.0);
    }
    beat_consistency(&motion_beats, &music_beats, sigma)
}

/// Fraction of `truth` positions with a detected beat within `tolerance` frames.
pub fn beat_recall(detected: &BeatList, truth: &[usize], tolerance: usize) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let hit = truth
        .iter()
        .filter(|&&t| detected.positions().iter().any(|&d| d.abs_diff(t) <= tolerance))
        .count();
    hit as f64 / truth.len() as f64
}
