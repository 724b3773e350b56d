//! Beat identification from motion and music, and time-to-arrival codes.

use crate::error::{DanceError, Result};
use crate::motion::{MotionClip, MusicFeatureTrack};

pub const DEFAULT_PROMINENCE: f64 = 0.3;
pub const DEFAULT_ONSET_K: f64 = 1.0;

/// Default minimum beat spacing: a quarter second.
pub fn default_min_separation(fps: u32) -> usize {
    (fps as usize / 4).max(1)
}

/// Default TTA cap `C = 2 * fps`.
pub fn default_tta_cap(fps: u32) -> usize {
    2 * fps as usize
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BeatTrack {
    pub flags: Vec<u8>,
    pub fps: u32,
}

impl BeatTrack {
    pub fn new(flags: Vec<u8>, fps: u32) -> Result<Self> {
        if flags.iter().any(|&f| f > 1) {
            return Err(DanceError::InvalidData("beat flags must be 0 or 1".into()));
        }
        Ok(BeatTrack { flags, fps })
    }

    pub fn from_frames(len: usize, frames: &[usize], fps: u32) -> BeatTrack {
        let mut flags = vec![0u8; len];
        for &f in frames {
            if f < len {
                flags[f] = 1;
            }
        }
        BeatTrack { flags, fps }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn frames(&self) -> Vec<usize> {
        self.flags
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == 1)
            .map(|(i, _)| i)
            .collect()
    }

    /// Beat instants in seconds.
    pub fn times(&self) -> Vec<f64> {
        self.frames().into_iter().map(|f| f as f64 / self.fps as f64).collect()
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<BeatTrack> {
        if start + len > self.len() {
            return Err(DanceError::TooShort(format!(
                "beat slice {start}..{} of {}",
                start + len,
                self.len()
            )));
        }
        Ok(BeatTrack {
            flags: self.flags[start..start + len].to_vec(),
            fps: self.fps,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TtaSequence {
    pub values: Vec<usize>,
    pub cap: usize,
}

/// Mean over joints of each joint's positional speed, central differences
/// inside the clip and one-sided differences at both ends.
pub fn aggregate_speed(clip: &MotionClip) -> Result<Vec<f64>> {
    if clip.len() < 2 {
        return Err(DanceError::TooShort(format!("{} frames", clip.len())));
    }
    let pos = clip.joint_positions();
    let t_len = pos.len();
    let joints = clip.joints() as f64;
    Ok((0..t_len)
        .map(|t| {
            let (a, b, span) = match t {
                0 => (0, 1, 1.0),
                t if t == t_len - 1 => (t - 1, t, 1.0),
                t => (t - 1, t + 1, 2.0),
            };
            pos[b]
                .iter()
                .zip(&pos[a])
                .map(|(p, q)| crate::motion::skeleton::distance(p, q) / span)
                .sum::<f64>()
                / joints
        })
        .collect())
}

/// Beats from an aggregate speed curve: strict local minima (so never the
/// first or last frame) that sit at least
/// `prominence` neighbourhood standard deviations below the neighbourhood
/// mean, scanned forward with a minimum spacing where the earlier beat wins.
/// Differences below `1e-4` of the neighbourhood mean count as ties, so
/// single-precision jitter on a constant speed does not produce minima.
pub fn beats_from_speed(speed: &[f64], fps: u32, min_separation: usize, prominence: f64) -> Vec<usize> {
    let n = speed.len();
    let half = (fps as usize / 2).max(1);
    let mut beats: Vec<usize> = Vec::new();
    if n < 3 {
        return beats;
    }
    for t in 1..n - 1 {
        let lo = t.saturating_sub(half);
        let hi = (t + half).min(n - 1);
        let window = &speed[lo..=hi];
        let mean = window.iter().sum::<f64>() / window.len() as f64;
        let tie = 1e-4 * mean.abs();
        if speed[t - 1] <= speed[t] + tie || speed[t + 1] <= speed[t] + tie {
            continue;
        }
        let var = window.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / window.len() as f64;
        if speed[t] > mean - prominence * var.sqrt() {
            continue;
        }
        if beats.last().is_some_and(|&b| t - b < min_separation) {
            continue;
        }
        beats.push(t);
    }
    beats
}

pub fn motion_beats(clip: &MotionClip, min_separation: usize, prominence: f64) -> Result<BeatTrack> {
    if clip.len() < 3 {
        return Err(DanceError::TooShort(format!("{} frames, need 3", clip.len())));
    }
    let speed = aggregate_speed(clip)?;
    let frames = beats_from_speed(&speed, clip.fps(), min_separation, prominence);
    Ok(BeatTrack::from_frames(clip.len(), &frames, clip.fps()))
}

/// Half-wave rectified spectral flux; frame 0 has no predecessor and is 0.
pub fn onset_novelty(frames: &[f32], dim: usize) -> Vec<f64> {
    let t_len = frames.len() / dim;
    let mut n = vec![0.0; t_len];
    for t in 1..t_len {
        n[t] = (0..dim)
            .map(|d| (frames[t * dim + d] as f64 - frames[(t - 1) * dim + d] as f64).max(0.0))
            .sum();
    }
    n
}

/// Peaks of the novelty curve above `mean + k * std`, scanned forward with a
/// minimum spacing where the earlier peak wins.
pub fn onsets_from_novelty(novelty: &[f64], min_separation: usize, k: f64) -> Vec<usize> {
    let n = novelty.len();
    if n < 2 {
        return Vec::new();
    }
    let vals = &novelty[1..];
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
    let threshold = mean + k * std;
    let mut beats: Vec<usize> = Vec::new();
    for t in 1..n {
        let peak = novelty[t] > novelty[t - 1] && (t + 1 == n || novelty[t] >= novelty[t + 1]);
        if !peak || novelty[t] <= threshold {
            continue;
        }
        if beats.last().is_some_and(|&b| t - b < min_separation) {
            continue;
        }
        beats.push(t);
    }
    beats
}

pub fn music_onsets(track: &MusicFeatureTrack, min_separation: usize, k: f64) -> Result<BeatTrack> {
    if track.len() < 2 {
        return Err(DanceError::TooShort(format!("{} frames, need 2", track.len())));
    }
    let novelty = onset_novelty(track.data(), crate::motion::MUSIC_DIM);
    let frames = onsets_from_novelty(&novelty, min_separation, k);
    Ok(BeatTrack::from_frames(track.len(), &frames, track.fps()))
}

/// Frames remaining until the next beat at or after each frame, capped at
/// `cap`; frames with no later beat get `cap`.
pub fn tta_encode(beats: &BeatTrack, cap: usize) -> TtaSequence {
    let mut values = vec![cap; beats.len()];
    let mut next: Option<usize> = None;
    for t in (0..beats.len()).rev() {
        if beats.flags[t] == 1 {
            next = Some(t);
        }
        if let Some(b) = next {
            values[t] = (b - t).min(cap);
        }
    }
    TtaSequence { values, cap }
}

/// Fraction of `reference` beats that have a detected beat within
/// `tolerance` frames.
pub fn beat_recall(detected: &[usize], reference: &[usize], tolerance: usize) -> f64 {
    if reference.is_empty() {
        return 1.0;
    }
    let hit = reference
        .iter()
        .filter(|&&r| detected.iter().any(|&d| d.abs_diff(r) <= tolerance))
        .count();
    hit as f64 / reference.len() as f64
}
