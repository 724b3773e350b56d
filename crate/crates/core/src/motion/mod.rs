//! Pose and music feature data model, augmentation and contact labels.

mod io;
pub mod skeleton;
mod synth;

pub use io::{
    load_manifest, load_motion, load_music, save_manifest, save_motion, save_music, DatasetManifest,
    ManifestClip, MOTION_MAGIC, MUSIC_MAGIC,
};
pub use skeleton::Skeleton;
pub use synth::{synth_beat_frames, synth_dance, synth_dance_with, SynthOptions, SYNTH_STYLE_COUNT};

use dance_nn::{Scalar, Tensor};

use crate::error::{DanceError, Result};
use skeleton::{det, mat_mul, rotation_at, transpose, Mat3, Vec3};

pub const DEFAULT_FPS: u32 = 20;
pub const DEFAULT_JOINTS: usize = 24;
pub const MUSIC_DIM: usize = 32;
pub const MFCC_DIMS: usize = 20;

/// Feature width for `joints` joints: nine rotation entries each plus the
/// root position.
pub const fn motion_dim(joints: usize) -> usize {
    joints * 9 + 3
}

/// `T x (J*9 + 3)` pose sequence. Each row holds `J` row-major rotation
/// matrices followed by the root position.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionClip {
    frames: Vec<f32>,
    joints: usize,
    fps: u32,
    style: u32,
    clip_id: String,
}

impl MotionClip {
    pub fn new(frames: Vec<f32>, joints: usize, fps: u32, style: u32, clip_id: impl Into<String>) -> Result<Self> {
        if joints == 0 || fps == 0 {
            return Err(DanceError::InvalidData("joint count and fps must be positive".into()));
        }
        let dim = motion_dim(joints);
        if frames.is_empty() || !frames.len().is_multiple_of(dim) {
            return Err(DanceError::DimensionMismatch(format!(
                "{} values do not form rows of width {dim}",
                frames.len()
            )));
        }
        if let Some(i) = frames.iter().position(|v| !v.is_finite()) {
            return Err(DanceError::NonFinite(format!("motion frame {}", i / dim)));
        }
        Ok(MotionClip {
            frames,
            joints,
            fps,
            style,
            clip_id: clip_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len() / self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        motion_dim(self.joints)
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn fps(&self) -> u32 {
        self.fps
    }

    pub fn style(&self) -> u32 {
        self.style
    }

    pub fn clip_id(&self) -> &str {
        &self.clip_id
    }

    pub fn data(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let d = self.dim();
        &self.frames[t * d..(t + 1) * d]
    }

    pub fn root(&self, t: usize) -> Vec3 {
        let f = self.frame(t);
        let r = self.joints * 9;
        [f[r] as f64, f[r + 1] as f64, f[r + 2] as f64]
    }

    pub fn rotation(&self, t: usize, joint: usize) -> Mat3 {
        rotation_at(self.frame(t), joint)
    }

    pub fn with_style(mut self, style: u32) -> Self {
        self.style = style;
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.clip_id = id.into();
        self
    }

    /// Frames `start..start + len` as a new clip with the same metadata.
    pub fn slice(&self, start: usize, len: usize) -> Result<MotionClip> {
        if len == 0 || start + len > self.len() {
            return Err(DanceError::TooShort(format!(
                "slice {start}..{} of {} frames",
                start + len,
                self.len()
            )));
        }
        let d = self.dim();
        Ok(MotionClip {
            frames: self.frames[start * d..(start + len) * d].to_vec(),
            ..self.clone_meta()
        })
    }

    fn clone_meta(&self) -> MotionClip {
        MotionClip {
            frames: Vec::new(),
            joints: self.joints,
            fps: self.fps,
            style: self.style,
            clip_id: self.clip_id.clone(),
        }
    }

    /// Frames `start..start + len` as a `len x D` tensor.
    pub fn tensor<T: Scalar>(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        if len == 0 || start + len > self.len() {
            return Err(DanceError::TooShort(format!(
                "window {start}..{} of {} frames",
                start + len,
                self.len()
            )));
        }
        let d = self.dim();
        let data = self.frames[start * d..(start + len) * d]
            .iter()
            .map(|&v| T::lit(v as f64))
            .collect();
        Ok(Tensor::matrix(len, d, data)?)
    }

    /// Appends frames from a `n x D` row-major buffer.
    pub fn extend_frames(&mut self, rows: &[f32]) -> Result<()> {
        if !rows.len().is_multiple_of(self.dim()) {
            return Err(DanceError::DimensionMismatch(format!(
                "{} values for width {}",
                rows.len(),
                self.dim()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(DanceError::NonFinite("appended frame".into()));
        }
        self.frames.extend_from_slice(rows);
        Ok(())
    }

    /// Global joint positions per frame via the skeleton for this joint
    /// count.
    pub fn joint_positions(&self) -> Vec<Vec<Vec3>> {
        let skel = Skeleton::for_joints(self.joints);
        (0..self.len()).map(|t| skel.forward_kinematics(self.frame(t))).collect()
    }

    /// Checks every rotation block: `|R^T R - I|_F < tol` and `det R > 0`.
    pub fn check_rotations(&self, tol: f64) -> Result<()> {
        for t in 0..self.len() {
            for j in 0..self.joints {
                let r = self.rotation(t, j);
                let rtr = mat_mul(&transpose(&r), &r);
                let mut err = 0.0;
                for (i, row) in rtr.iter().enumerate() {
                    for (k, &v) in row.iter().enumerate() {
                        let id = if i == k { 1.0 } else { 0.0 };
                        err += (v - id) * (v - id);
                    }
                }
                if err.sqrt() >= tol || det(&r) <= 0.0 {
                    return Err(DanceError::InvalidData(format!(
                        "frame {t} joint {j} is not a rotation (orthogonality error {:.3e})",
                        err.sqrt()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Replaces every rotation block with the closest rotation (polar
    /// decomposition).
    pub fn orthonormalized(&self) -> MotionClip {
        let mut out = self.clone();
        let d = self.dim();
        for frame in out.frames.chunks_mut(d) {
            orthonormalize_frame(frame, self.joints);
        }
        out
    }
}

/// Projects the `joints` rotation blocks of one frame onto the nearest
/// rotations in place.
pub fn orthonormalize_frame(frame: &mut [f32], joints: usize) {
    for j in 0..joints {
        let r = closest_rotation(&rotation_at(frame, j));
        for i in 0..3 {
            for k in 0..3 {
                frame[j * 9 + i * 3 + k] = r[i][k] as f32;
            }
        }
    }
}

fn closest_rotation(m: &Mat3) -> Mat3 {
    let a = nalgebra::Matrix3::from_fn(|i, j| m[i][j]);
    let svd = a.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = r[(i, j)];
        }
    }
    out
}

/// `T x 32` music features: 20 MFCC-like then 12 chroma-like dims.
#[derive(Clone, Debug, PartialEq)]
pub struct MusicFeatureTrack {
    frames: Vec<f32>,
    fps: u32,
    style: u32,
    beats: Option<Vec<u8>>,
}

impl MusicFeatureTrack {
    pub fn new(frames: Vec<f32>, fps: u32, style: u32, beats: Option<Vec<u8>>) -> Result<Self> {
        if fps == 0 {
            return Err(DanceError::InvalidData("fps must be positive".into()));
        }
        if frames.is_empty() || !frames.len().is_multiple_of(MUSIC_DIM) {
            return Err(DanceError::DimensionMismatch(format!(
                "{} values do not form rows of width {MUSIC_DIM}",
                frames.len()
            )));
        }
        if let Some(i) = frames.iter().position(|v| !v.is_finite()) {
            return Err(DanceError::NonFinite(format!("music frame {}", i / MUSIC_DIM)));
        }
        let t = frames.len() / MUSIC_DIM;
        if let Some(b) = &beats {
            if b.len() != t {
                return Err(DanceError::DimensionMismatch(format!(
                    "beat annotation has {} entries for {t} frames",
                    b.len()
                )));
            }
            if b.iter().any(|&v| v > 1) {
                return Err(DanceError::InvalidData("beat annotation must be binary".into()));
            }
        }
        Ok(MusicFeatureTrack {
            frames,
            fps,
            style,
            beats,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len() / MUSIC_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn fps(&self) -> u32 {
        self.fps
    }

    pub fn style(&self) -> u32 {
        self.style
    }

    pub fn data(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * MUSIC_DIM..(t + 1) * MUSIC_DIM]
    }

    pub fn beat_annotation(&self) -> Option<&[u8]> {
        self.beats.as_deref()
    }

    pub fn tensor<T: Scalar>(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        if len == 0 || start + len > self.len() {
            return Err(DanceError::TooShort(format!(
                "window {start}..{} of {} frames",
                start + len,
                self.len()
            )));
        }
        let data = self.frames[start * MUSIC_DIM..(start + len) * MUSIC_DIM]
            .iter()
            .map(|&v| T::lit(v as f64))
            .collect();
        Ok(Tensor::matrix(len, MUSIC_DIM, data)?)
    }
}

/// Per-frame binary foot contacts, `[left, right]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContactTrack {
    pub labels: Vec<[u8; 2]>,
}

impl ContactTrack {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Left/right mirror: negates root x, swaps paired joints and conjugates
/// every rotation with `S = diag(-1, 1, 1)`.
pub fn mirror_motion(clip: &MotionClip) -> Result<MotionClip> {
    let skel = Skeleton::for_joints(clip.joints());
    let pairs = skel.mirror.as_ref().ok_or(DanceError::UnsupportedSkeleton(clip.joints()))?;
    let d = clip.dim();
    let mut out = vec![0.0f32; clip.data().len()];
    for t in 0..clip.len() {
        let src = clip.frame(t);
        let dst = &mut out[t * d..(t + 1) * d];
        for j in 0..clip.joints() {
            let from = &src[pairs[j] * 9..pairs[j] * 9 + 9];
            for i in 0..3 {
                for k in 0..3 {
                    // (S R S)_ik = s_i s_k R_ik with s = (-1, 1, 1)
                    let sign = if (i == 0) ^ (k == 0) { -1.0 } else { 1.0 };
                    dst[j * 9 + i * 3 + k] = sign * from[i * 3 + k];
                }
            }
        }
        let r = clip.joints() * 9;
        dst[r] = -src[r];
        dst[r + 1] = src[r + 1];
        dst[r + 2] = src[r + 2];
    }
    MotionClip::new(out, clip.joints(), clip.fps(), clip.style(), format!("{}_mirror", clip.clip_id()))
}

/// Thresholds per-frame foot speeds: 1 where `speed < threshold`.
pub fn contact_labels_from_speeds(speeds: &[[f64; 2]], threshold: f64) -> ContactTrack {
    ContactTrack {
        labels: speeds
            .iter()
            .map(|s| [u8::from(s[0] < threshold), u8::from(s[1] < threshold)])
            .collect(),
    }
}

/// Per-frame positional speed (units per frame) of the two foot joints.
/// Frame 0 copies frame 1.
pub fn foot_speeds(clip: &MotionClip) -> Result<Vec<[f64; 2]>> {
    if clip.len() < 2 {
        return Err(DanceError::TooShort(format!("{} frames, need 2", clip.len())));
    }
    let skel = Skeleton::for_joints(clip.joints());
    let pos: Vec<Vec<Vec3>> = (0..clip.len()).map(|t| skel.forward_kinematics(clip.frame(t))).collect();
    let mut speeds = Vec::with_capacity(clip.len());
    speeds.push([0.0; 2]);
    for t in 1..clip.len() {
        let mut s = [0.0; 2];
        for (k, &foot) in skel.feet.iter().enumerate() {
            s[k] = skeleton::distance(&pos[t][foot], &pos[t - 1][foot]);
        }
        speeds.push(s);
    }
    speeds[0] = speeds[1];
    Ok(speeds)
}

pub fn extract_foot_contacts(clip: &MotionClip, speed_threshold: f64) -> Result<ContactTrack> {
    Ok(contact_labels_from_speeds(&foot_speeds(clip)?, speed_threshold))
}
