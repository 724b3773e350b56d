//! Kinetic and geometric motion descriptors.

use std::sync::OnceLock;

use serde::Deserialize;

use crate::error::{DanceError, Result};
use crate::motion::skeleton::{distance, Vec3};
use crate::motion::MotionClip;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Kinetic,
    Geometric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVec {
    pub kind: FeatureKind,
    pub values: Vec<f64>,
}

impl AsRef<[f64]> for FeatureVec {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

fn root_relative(clip: &MotionClip) -> (Vec<Vec<Vec3>>, Vec<Vec3>) {
    let mut joints = clip.joint_positions();
    let mut roots = Vec::with_capacity(joints.len());
    for frame in joints.iter_mut() {
        let r = frame[0];
        for p in frame.iter_mut() {
            *p = [p[0] - r[0], p[1] - r[1], p[2] - r[2]];
        }
        roots.push(r);
    }
    (joints, roots)
}

/// Mean speed, mean acceleration magnitude and speed variance of one point
/// track, in units per second.
fn track_stats(track: &[Vec3], fps: f64) -> [f64; 3] {
    let speeds: Vec<f64> = track.windows(2).map(|w| distance(&w[1], &w[0]) * fps).collect();
    let accels: Vec<f64> = track
        .windows(3)
        .map(|w| {
            let a = [0, 1, 2].map(|k| w[2][k] - 2.0 * w[1][k] + w[0][k]);
            (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt() * fps * fps
        })
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ms = mean(&speeds);
    let var = speeds.iter().map(|s| (s - ms) * (s - ms)).sum::<f64>() / speeds.len() as f64;
    [ms, mean(&accels), var]
}

/// Per joint (root-relative) mean speed, mean acceleration and speed
/// variance, each block `J` long, followed by the same three statistics of
/// the root trajectory.
pub fn kinetic_features(clip: &MotionClip) -> Result<FeatureVec> {
    if clip.len() < 3 {
        return Err(DanceError::TooShort(format!("kinetic features need 3 frames, got {}", clip.len())));
    }
    let (joints, roots) = root_relative(clip);
    let fps = clip.fps() as f64;
    let j = clip.joints();
    let mut values = vec![0.0; 3 * j + 3];
    for k in 0..j {
        let track: Vec<Vec3> = joints.iter().map(|f| f[k]).collect();
        let [s, a, v] = track_stats(&track, fps);
        values[k] = s;
        values[j + k] = a;
        values[2 * j + k] = v;
    }
    values[3 * j..].copy_from_slice(&track_stats(&roots, fps));
    Ok(FeatureVec {
        kind: FeatureKind::Kinetic,
        values,
    })
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Relation {
    /// `p_a[axis] > p_b[axis] + margin`.
    AxisGreater { name: String, axis: usize, a: usize, b: usize, margin: f64 },
    /// `|p_a - p_b| < |p_c - p_d|`.
    Closer { name: String, a: usize, b: usize, c: usize, d: usize },
    /// `|p_a - p_b| > |p_c - p_d|`.
    Farther { name: String, a: usize, b: usize, c: usize, d: usize },
}

impl Relation {
    pub fn name(&self) -> &str {
        match self {
            Relation::AxisGreater { name, .. } | Relation::Closer { name, .. } | Relation::Farther { name, .. } => name,
        }
    }

    pub fn holds(&self, p: &[Vec3]) -> bool {
        match *self {
            Relation::AxisGreater { axis, a, b, margin, .. } => p[a][axis] > p[b][axis] + margin,
            Relation::Closer { a, b, c, d, .. } => distance(&p[a], &p[b]) < distance(&p[c], &p[d]),
            Relation::Farther { a, b, c, d, .. } => distance(&p[a], &p[b]) > distance(&p[c], &p[d]),
        }
    }
}

/// The 16 relations shipped in `data/geometric_features.json`, defined on
/// the 24-joint skeleton.
pub fn geometric_relations() -> &'static [Relation] {
    static REL: OnceLock<Vec<Relation>> = OnceLock::new();
    REL.get_or_init(|| {
        serde_json::from_str(include_str!("../../data/geometric_features.json")).expect("bundled relation table parses")
    })
}

/// Fraction of frames on which each relation holds, on root-relative
/// positions.
pub fn geometric_features(clip: &MotionClip) -> Result<FeatureVec> {
    if clip.joints() != 24 {
        return Err(DanceError::UnsupportedSkeleton(clip.joints()));
    }
    if clip.is_empty() {
        return Err(DanceError::TooShort("empty clip".into()));
    }
    let rel = geometric_relations();
    let (joints, _) = root_relative(clip);
    let mut values = vec![0.0; rel.len()];
    for frame in &joints {
        for (v, r) in values.iter_mut().zip(rel) {
            if r.holds(frame) {
                *v += 1.0;
            }
        }
    }
    let t = joints.len() as f64;
    values.iter_mut().for_each(|v| *v /= t);
    Ok(FeatureVec {
        kind: FeatureKind::Geometric,
        values,
    })
}

/// Kinetic and geometric features concatenated.
pub fn combined_features(clip: &MotionClip) -> Result<Vec<f64>> {
    let mut v = kinetic_features(clip)?.values;
    v.extend(geometric_features(clip)?.values);
    Ok(v)
}
