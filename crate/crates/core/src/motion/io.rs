//! RDMC / RDMF binary formats and the JSON dataset manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{motion_dim, MotionClip, MusicFeatureTrack, MUSIC_DIM};
use crate::error::{DanceError, Result};

pub const MOTION_MAGIC: [u8; 4] = *b"RDMC";
pub const MUSIC_MAGIC: [u8; 4] = *b"RDMF";
const VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(DanceError::TruncatedFile)?;
        if end > self.bytes.len() {
            return Err(DanceError::TruncatedFile);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        if found != expected {
            return Err(DanceError::BadMagic { expected, found });
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(DanceError::BadVersion(version));
        }
        Ok(())
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = self.take(count.checked_mul(4).ok_or(DanceError::TruncatedFile)?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| DanceError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| DanceError::io(path, e))
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_motion(clip: &MotionClip) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + clip.data().len() * 4);
    out.extend_from_slice(&MOTION_MAGIC);
    for v in [VERSION, clip.joints() as u32, clip.len() as u32, clip.fps(), clip.style()] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_f32s(&mut out, clip.data());
    out
}

/// Decodes an RDMC buffer. The payload must be exactly `T` rows of
/// `J*9 + 3` values; any other payload size is a width mismatch unless it
/// is simply short.
pub fn decode_motion(bytes: &[u8], clip_id: &str) -> Result<MotionClip> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(MOTION_MAGIC)?;
    let joints = r.u32()? as usize;
    let frames = r.u32()? as usize;
    let fps = r.u32()?;
    let style = r.u32()?;
    let dim = motion_dim(joints);
    let payload = r.remaining();
    if !payload.is_multiple_of(4) {
        return Err(DanceError::TruncatedFile);
    }
    let values = payload / 4;
    if frames > 0 && values.is_multiple_of(frames) && values / frames != dim {
        return Err(DanceError::DimensionMismatch(format!(
            "header declares {joints} joints (width {dim}) but rows hold {} values",
            values / frames
        )));
    }
    if values < frames * dim {
        return Err(DanceError::TruncatedFile);
    }
    if values > frames * dim {
        return Err(DanceError::DimensionMismatch(format!(
            "{} trailing values after {frames} rows",
            values - frames * dim
        )));
    }
    MotionClip::new(r.f32s(frames * dim)?, joints, fps, style, clip_id)
}

pub fn save_motion(clip: &MotionClip, path: &Path) -> Result<()> {
    write(path, &encode_motion(clip))
}

/// Loads an RDMC file; the clip id is the file stem.
pub fn load_motion(path: &Path) -> Result<MotionClip> {
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    decode_motion(&read(path)?, &id)
}

pub fn encode_music(track: &MusicFeatureTrack) -> Vec<u8> {
    let mut out = Vec::with_capacity(21 + track.data().len() * 4 + track.len());
    out.extend_from_slice(&MUSIC_MAGIC);
    for v in [VERSION, track.len() as u32, track.fps(), track.style()] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(u8::from(track.beat_annotation().is_some()));
    put_f32s(&mut out, track.data());
    if let Some(b) = track.beat_annotation() {
        out.extend_from_slice(b);
    }
    out
}

pub fn decode_music(bytes: &[u8]) -> Result<MusicFeatureTrack> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(MUSIC_MAGIC)?;
    let frames = r.u32()? as usize;
    let fps = r.u32()?;
    let style = r.u32()?;
    let has_beats = r.take(1)?[0];
    if has_beats > 1 {
        return Err(DanceError::InvalidData(format!("has_beats flag {has_beats}")));
    }
    let data = r.f32s(frames * MUSIC_DIM)?;
    let beats = if has_beats == 1 { Some(r.take(frames)?.to_vec()) } else { None };
    if r.remaining() != 0 {
        return Err(DanceError::DimensionMismatch(format!("{} trailing bytes", r.remaining())));
    }
    MusicFeatureTrack::new(data, fps, style, beats)
}

pub fn save_music(track: &MusicFeatureTrack, path: &Path) -> Result<()> {
    write(path, &encode_music(track))
}

pub fn load_music(path: &Path) -> Result<MusicFeatureTrack> {
    decode_music(&read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestClip {
    pub id: String,
    pub motion: PathBuf,
    pub music: PathBuf,
    pub style: u32,
}

/// Dataset listing. Relative paths are resolved against the manifest's
/// directory on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub styles: Vec<String>,
    pub clips: Vec<ManifestClip>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        for c in &self.clips {
            if c.style as usize >= self.styles.len() {
                return Err(DanceError::BadStyle {
                    style: c.style as usize,
                    count: self.styles.len(),
                });
            }
        }
        Ok(())
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| DanceError::io(path, e))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    let base = path.parent().unwrap_or(Path::new(""));
    for c in &mut manifest.clips {
        for p in [&mut c.motion, &mut c.music] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.exists() {
                return Err(DanceError::io(
                    p.clone(),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest"),
                ));
            }
        }
    }
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    write(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(frames: usize) -> MotionClip {
        let dim = motion_dim(24);
        let data = (0..frames * dim).map(|i| (i as f32 * 0.37).sin()).collect();
        MotionClip::new(data, 24, 20, 1, "c").unwrap()
    }

    #[test]
    fn single_frame_file_size() {
        assert_eq!(encode_motion(&clip(1)).len(), 4 + 5 * 4 + 219 * 4);
    }

    #[test]
    fn motion_round_trip_is_bit_exact() {
        let c = clip(100);
        let bytes = encode_motion(&c);
        let back = decode_motion(&bytes, "c").unwrap();
        assert_eq!(back.dim(), 219);
        assert_eq!(back, c);
        assert_eq!(encode_motion(&back), bytes);
    }

    #[test]
    fn wrong_row_width_is_a_dimension_mismatch() {
        let mut bytes = encode_motion(&clip(1));
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(decode_motion(&bytes, "c"), Err(DanceError::DimensionMismatch(_))));
    }

    #[test]
    fn short_payload_is_truncation() {
        let mut bytes = encode_motion(&clip(3));
        bytes.truncate(bytes.len() - 8);
        assert!(matches!(decode_motion(&bytes, "c"), Err(DanceError::TruncatedFile)));
        assert!(matches!(decode_motion(&bytes[..10], "c"), Err(DanceError::TruncatedFile)));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_motion(&clip(1));
        bytes[0] = b'X';
        assert!(matches!(decode_motion(&bytes, "c"), Err(DanceError::BadMagic { .. })));
        let mut bytes = encode_motion(&clip(1));
        bytes[4] = 2;
        assert!(matches!(decode_motion(&bytes, "c"), Err(DanceError::BadVersion(2))));
    }

    #[test]
    fn loader_rejects_nan() {
        let mut bytes = encode_motion(&clip(2));
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_motion(&bytes, "c"), Err(DanceError::NonFinite(_))));
    }

    #[test]
    fn music_round_trip_with_and_without_beats() {
        let data: Vec<f32> = (0..5 * 32).map(|i| i as f32 * 0.5).collect();
        for beats in [None, Some(vec![1, 0, 0, 1, 0])] {
            let t = MusicFeatureTrack::new(data.clone(), 20, 3, beats).unwrap();
            let bytes = encode_music(&t);
            assert_eq!(decode_music(&bytes).unwrap(), t);
        }
    }

    #[test]
    fn empty_path_fails_with_io_error() {
        assert!(matches!(save_motion(&clip(1), Path::new("")), Err(DanceError::Io { .. })));
    }
}
