//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json          clip list, shapes, splits, normalisation bounds
//! <root>/<clip_id>.motion.f32   [frames, 13, 2] little-endian f32, row-major
//! <root>/<clip_id>.music.f32    [music_frames, bands] little-endian f32, row-major
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{MusicFeatureSequence, PairedClip, PoseSequence, POSE_DIM};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split `{other}`"))),
        }
    }
}

/// Pixel-space bounding box the stored `[-1, 1]` coordinates were mapped from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Normalization {
    /// Identity bounds, used for data generated directly in normalised space.
    pub fn unit() -> Self {
        Self {
            x_min: -1.0,
            x_max: 1.0,
            y_min: -1.0,
            y_max: 1.0,
        }
    }

    /// Map a raw `(x, y)` into `[-1, 1]^2`.
    pub fn normalize(&self, x: f64, y: f64) -> (f64, f64) {
        (
            2.0 * (x - self.x_min) / (self.x_max - self.x_min) - 1.0,
            2.0 * (y - self.y_min) / (self.y_max - self.y_min) - 1.0,
        )
    }

    pub fn denormalize(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x + 1.0) * 0.5 * (self.x_max - self.x_min) + self.x_min,
            (y + 1.0) * 0.5 * (self.y_max - self.y_min) + self.y_min,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestClip {
    pub clip_id: String,
    pub split: Split,
    pub motion_frames: usize,
    pub music_frames: usize,
    pub music_bands: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beat_frames: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub motion_fps: f64,
    pub music_rate: f64,
    pub joints: usize,
    pub coords: usize,
    pub normalization: Normalization,
    pub clips: Vec<ManifestClip>,
}

/// A split of a dataset directory. Clips are read from disk on access.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
    entries: Vec<ManifestClip>,
}

impl Dataset {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn entries(&self) -> &[ManifestClip] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Read and validate the `i`-th clip of this split.
    pub fn get(&self, i: usize) -> Result<PairedClip> {
        read_clip(&self.root, &self.entries[i])
    }

    /// Clips in manifest order; each item is validated independently.
    pub fn iter(&self) -> impl Iterator<Item = Result<PairedClip>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    /// Read every clip, failing on the first invalid one.
    pub fn load_all(&self) -> Result<Vec<PairedClip>> {
        self.iter().collect()
    }
}

/// Open one split of a dataset directory.
pub fn load_dataset(root: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let root = root.as_ref().to_path_buf();
    let manifest = read_manifest(&root)?;
    let entries = manifest
        .clips
        .iter()
        .filter(|c| c.split == split)
        .cloned()
        .collect();
    Ok(Dataset {
        root,
        manifest,
        entries,
    })
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Config(format!("dataset manifest not found at {}", path.display()))
        } else {
            Error::io(&path, e)
        }
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    if manifest.joints * manifest.coords != POSE_DIM {
        return Err(Error::format(&path, "manifest pose layout must be 13 joints x 2 coords"));
    }
    Ok(manifest)
}

fn read_clip(root: &Path, entry: &ManifestClip) -> Result<PairedClip> {
    let invalid = |reason: String| Error::ClipValidation {
        clip_id: entry.clip_id.clone(),
        reason,
    };
    let motion_path = root.join(format!("{}.motion.f32", entry.clip_id));
    let music_path = root.join(format!("{}.music.f32", entry.clip_id));
    let motion = read_f32(&motion_path)?;
    let music = read_f32(&music_path)?;
    if motion.len() != entry.motion_frames * POSE_DIM {
        return Err(invalid(format!(
            "motion file holds {} values, manifest declares {} frames x {POSE_DIM}",
            motion.len(),
            entry.motion_frames
        )));
    }
    if music.len() != entry.music_frames * entry.music_bands {
        return Err(invalid(format!(
            "music file holds {} values, manifest declares {} x {}",
            music.len(),
            entry.music_frames,
            entry.music_bands
        )));
    }
    let motion = PoseSequence::new(entry.motion_frames, motion).map_err(|e| invalid(e.to_string()))?;
    let music = MusicFeatureSequence::new(entry.music_frames, entry.music_bands, music)
        .map_err(|e| invalid(e.to_string()))?;
    PairedClip::new(entry.clip_id.clone(), music, motion, entry.beat_frames.clone())
}

fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(path, "byte length is not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write clips as a single training split with unit normalisation bounds.
pub fn save_dataset(clips: &[PairedClip], root: impl AsRef<Path>) -> Result<()> {
    save_splits(root, &[(Split::Train, clips)], Normalization::unit())
}

/// Write several splits into one dataset directory.
///
/// Every clip is validated before anything touches the disk.
pub fn save_splits(
    root: impl AsRef<Path>,
    splits: &[(Split, &[PairedClip])],
    normalization: Normalization,
) -> Result<()> {
    let root = root.as_ref();
    let mut seen = std::collections::HashSet::new();
    for (_, clips) in splits {
        for clip in clips.iter() {
            clip.validate()?;
            if !seen.insert(clip.clip_id.as_str()) {
                return Err(Error::ClipValidation {
                    clip_id: clip.clip_id.clone(),
                    reason: "duplicate clip id".into(),
                });
            }
        }
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::new();
    for (split, clips) in splits {
        for clip in clips.iter() {
            write_f32(
                &root.join(format!("{}.motion.f32", clip.clip_id)),
                clip.motion.as_slice(),
            )?;
            write_f32(
                &root.join(format!("{}.music.f32", clip.clip_id)),
                clip.music.as_slice(),
            )?;
            entries.push(ManifestClip {
                clip_id: clip.clip_id.clone(),
                split: *split,
                motion_frames: clip.motion.n_frames(),
                music_frames: clip.music.n_frames(),
                music_bands: clip.music.bands(),
                beat_frames: clip.beat_frames.clone(),
            });
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        motion_fps: super::MOTION_FPS,
        music_rate: super::MUSIC_RATE,
        joints: super::JOINTS,
        coords: super::COORDS,
        normalization,
        clips: entries,
    };
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_clip;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let clips = vec![
            generate_synthetic_clip(1, 60, 15, 0.8).unwrap(),
            generate_synthetic_clip(2, 40, 10, 0.5).unwrap(),
        ];
        save_dataset(&clips, dir.path()).unwrap();
        let loaded = load_dataset(dir.path(), Split::Train).unwrap().load_all().unwrap();
        assert_eq!(loaded, clips);
        assert_eq!(load_dataset(dir.path(), Split::Test).unwrap().len(), 0);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&[], dir.path()).unwrap();
        let ds = load_dataset(dir.path(), Split::Train).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.load_all().unwrap(), vec![]);
    }

    #[test]
    fn missing_manifest_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(dir.path(), Split::Train),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn misaligned_clip_names_its_id() {
        let dir = tempfile::tempdir().unwrap();
        let clip = generate_synthetic_clip(3, 30, 10, 1.0).unwrap();
        save_dataset(std::slice::from_ref(&clip), dir.path()).unwrap();
        // Truncate the music to break M == 3N while keeping the manifest self-consistent.
        let mut manifest = read_manifest(dir.path()).unwrap();
        manifest.clips[0].music_frames -= 1;
        let bands = manifest.clips[0].music_bands;
        let keep = manifest.clips[0].music_frames * bands;
        write_f32(
            &dir.path().join(format!("{}.music.f32", clip.clip_id)),
            &clip.music.as_slice()[..keep],
        )
        .unwrap();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            serde_json::to_string(&manifest).unwrap(),
        )
        .unwrap();
        let ds = load_dataset(dir.path(), Split::Train).unwrap();
        match ds.get(0) {
            Err(Error::ClipValidation { clip_id, .. }) => assert_eq!(clip_id, clip.clip_id),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_in_file_names_clip() {
        let dir = tempfile::tempdir().unwrap();
        let clip = generate_synthetic_clip(4, 30, 10, 1.0).unwrap();
        save_dataset(std::slice::from_ref(&clip), dir.path()).unwrap();
        write_f32(&dir.path().join(format!("{}.motion.f32", clip.clip_id)), &[0.0; 10]).unwrap();
        let err = load_dataset(dir.path(), Split::Train).unwrap().get(0).unwrap_err();
        assert!(err.to_string().contains(&clip.clip_id));
    }

    #[test]
    fn nan_clip_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let good = generate_synthetic_clip(5, 30, 10, 1.0).unwrap();
        let mut data = good.motion.as_slice().to_vec();
        data[0] = f32::NAN;
        // The constructor refuses NaN outright, so build the bad clip by hand.
        let bad = PairedClip {
            motion: PoseSequence { n_frames: 30, data },
            ..good
        };
        let target = dir.path().join("out");
        assert!(save_dataset(&[bad], &target).is_err());
        assert!(!target.exists());
    }

    #[test]
    fn normalization_round_trip() {
        let n = Normalization {
            x_min: 0.0,
            x_max: 640.0,
            y_min: 0.0,
            y_max: 480.0,
        };
        let (x, y) = n.normalize(320.0, 120.0);
        assert_eq!((x, y), (0.0, -0.5));
        assert_eq!(n.denormalize(x, y), (320.0, 120.0));
    }
}
