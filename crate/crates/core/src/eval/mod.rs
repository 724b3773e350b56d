//! Motion quality metrics: Fréchet distances, diversity, beat alignment,
//! style accuracy and the long-term FID curve.

mod classifier;
mod features;
mod fid;

use serde::{Deserialize, Serialize};

pub use classifier::{ClassifierOptions, StyleClassifier};
pub use features::{
    combined_features, geometric_features, geometric_relations, kinetic_features, FeatureKind, FeatureVec, Relation,
};
pub use fid::{diversity, frechet_distance, FID_RIDGE};

use crate::beats::{default_min_separation, motion_beats, music_onsets, BeatTrack, DEFAULT_ONSET_K, DEFAULT_PROMINENCE};
use crate::error::{DanceError, Result};
use crate::motion::{MotionClip, MusicFeatureTrack};

/// `(1/m) sum_i exp(-min_j (x_i - y_j)^2 / (2 sigma^2))` over kinematic
/// beats `x` and music beats `y`.
pub fn beat_align(kinetic: &[f64], music: &[f64], sigma: f64) -> Result<f64> {
    if kinetic.is_empty() || music.is_empty() {
        return Err(DanceError::EmptyBeatSet);
    }
    let mut sorted = music.to_vec();
    sorted.sort_by(f64::total_cmp);
    let s = kinetic
        .iter()
        .map(|&x| {
            let i = sorted.partition_point(|&y| y < x);
            let mut best = f64::INFINITY;
            for k in [i.wrapping_sub(1), i] {
                if let Some(&y) = sorted.get(k) {
                    best = best.min((x - y).abs());
                }
            }
            (-best * best / (2.0 * sigma * sigma)).exp()
        })
        .sum::<f64>();
    Ok(s / kinetic.len() as f64)
}

/// Beat alignment of two beat tracks with beat times in seconds.
pub fn beat_align_tracks(motion: &BeatTrack, music: &BeatTrack, sigma: f64) -> Result<f64> {
    beat_align(&motion.times(), &music.times(), sigma)
}

/// Cuts each clip into non-overlapping windows of `window` frames.
pub fn clip_windows(clips: &[MotionClip], window: usize) -> Result<Vec<MotionClip>> {
    let mut out = Vec::new();
    for c in clips {
        for k in 0..c.len() / window.max(1) {
            out.push(c.slice(k * window, window)?);
        }
    }
    Ok(out)
}

/// Fits the style classifier on `window`-frame slices of the clips, using
/// each clip's style label.
pub fn train_style_classifier(clips: &[MotionClip], classes: usize, window: usize) -> Result<StyleClassifier> {
    if classes < 2 {
        return Err(DanceError::TooFewClips(format!("{classes} styles")));
    }
    for s in 0..classes as u32 {
        let count = clips.iter().filter(|c| c.style() == s).count();
        if count < 4 {
            return Err(DanceError::TooFewClips(format!("style {s} has {count} clips, need 4")));
        }
    }
    let windows = clip_windows(clips, window)?;
    let feats = windows.iter().map(combined_features).collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = windows.iter().map(|c| c.style() as usize).collect();
    StyleClassifier::fit(&feats, &labels, classes, &ClassifierOptions::default())
}

pub fn style_accuracy(clf: &StyleClassifier, clips: &[MotionClip], labels: &[usize]) -> Result<f64> {
    if clips.len() != labels.len() {
        return Err(DanceError::DimensionMismatch(format!("{} clips vs {} labels", clips.len(), labels.len())));
    }
    let feats = clips.iter().map(combined_features).collect::<Result<Vec<_>>>()?;
    Ok(clf.accuracy(&feats, labels))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: f64,
    pub fid_k: f64,
}

/// Anchor frames every `anchor_s` seconds (t = 0 excluded) whose centered
/// `window_s` window fits entirely inside `frames`.
pub fn curve_anchors(frames: usize, fps: u32, anchor_s: f64, window_s: f64) -> Vec<(f64, usize)> {
    let w = (window_s * fps as f64).round() as usize;
    let mut out = Vec::new();
    for k in 1.. {
        let t = k as f64 * anchor_s;
        let centre = (t * fps as f64).round() as usize;
        let start = centre as i64 - (w / 2) as i64;
        if start + w as i64 > frames as i64 {
            break;
        }
        if start >= 0 {
            out.push((t, start as usize));
        }
    }
    out
}

/// Kinetic FID per anchor between the generated windows at that anchor and
/// `reference` window features.
pub fn longterm_fid_curve(
    generated: &[MotionClip],
    reference: &[FeatureVec],
    anchor_s: f64,
    window_s: f64,
) -> Result<Vec<CurvePoint>> {
    if generated.len() < 2 {
        return Err(DanceError::TooFew(format!("{} generated clips", generated.len())));
    }
    let fps = generated[0].fps();
    let shortest = generated.iter().map(MotionClip::len).min().unwrap_or(0);
    if shortest < 60 * fps as usize {
        return Err(DanceError::TooShort(format!("generated clip of {shortest} frames, need 60 s")));
    }
    let w = (window_s * fps as f64).round() as usize;
    curve_anchors(shortest, fps, anchor_s, window_s)
        .into_iter()
        .map(|(t, start)| {
            let feats = generated
                .iter()
                .map(|c| kinetic_features(&c.slice(start, w)?))
                .collect::<Result<Vec<_>>>()?;
            Ok(CurvePoint {
                t,
                fid_k: frechet_distance(&feats, reference)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid_k: f64,
    pub fid_g: f64,
    pub dist_k: f64,
    pub dist_g: f64,
    pub beat_align: Option<f64>,
    pub style_acc: Option<f64>,
    pub curve: Vec<CurvePoint>,
}

/// Full report for a generated set against reference clips. Beat alignment
/// uses the music paired with each generated clip where given; style
/// accuracy and the curve are skipped when the inputs cannot support them.
pub fn evaluate(generated: &[MotionClip], music: &[Option<MusicFeatureTrack>], reference: &[MotionClip]) -> Result<EvalReport> {
    let kin = |set: &[MotionClip]| set.iter().map(kinetic_features).collect::<Result<Vec<_>>>();
    let geo = |set: &[MotionClip]| set.iter().map(geometric_features).collect::<Result<Vec<_>>>();
    let (gk, gg) = (kin(generated)?, geo(generated)?);
    let (rk, rg) = (kin(reference)?, geo(reference)?);
    let mut aligns = Vec::new();
    for (clip, m) in generated.iter().zip(music) {
        let Some(m) = m else { continue };
        let mb = motion_beats(clip, default_min_separation(clip.fps()), DEFAULT_PROMINENCE)?;
        let ob = music_onsets(m, default_min_separation(m.fps()), DEFAULT_ONSET_K)?;
        if let Ok(v) = beat_align_tracks(&mb, &ob, 1.0) {
            aligns.push(v);
        }
    }
    let classes = reference.iter().map(|c| c.style() as usize + 1).max().unwrap_or(0);
    let window = generated.iter().chain(reference).map(MotionClip::len).min().unwrap_or(0);
    let style_acc = train_style_classifier(reference, classes, window).ok().and_then(|clf| {
        let labels: Vec<usize> = generated.iter().map(|c| c.style() as usize).collect();
        style_accuracy(&clf, generated, &labels).ok()
    });
    let fps = generated.first().map_or(20, MotionClip::fps);
    let curve = if generated.len() >= 2 && generated.iter().all(|c| c.len() >= 60 * fps as usize) {
        let refs = kin(&clip_windows(reference, fps as usize)?)?;
        longterm_fid_curve(generated, &refs, 3.0, 1.0)?
    } else {
        Vec::new()
    };
    Ok(EvalReport {
        fid_k: frechet_distance(&gk, &rk)?,
        fid_g: frechet_distance(&gg, &rg)?,
        dist_k: diversity(&gk)?,
        dist_g: diversity(&gg)?,
        beat_align: (!aligns.is_empty()).then(|| aligns.iter().sum::<f64>() / aligns.len() as f64),
        style_acc,
        curve,
    })
}
