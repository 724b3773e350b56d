//! Style embedding and autoregressive rollout.

use dance_nn::{Graph, ParamStore, Tensor};

use crate::beats::{default_min_separation, music_onsets, BeatTrack, DEFAULT_ONSET_K};
use crate::error::{DanceError, Result};
use crate::model::{DanceModel, HistoryCache, StepInput};
use crate::motion::{ContactTrack, MotionClip, MusicFeatureTrack};

/// `H_style` (`w_style x d`) with the clips it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleEmbedding {
    pub h: Tensor<f32>,
    pub music_id: String,
    pub motion_id: String,
}

pub fn encode_style(
    model: &DanceModel,
    store: &ParamStore<f32>,
    music: &MusicFeatureTrack,
    music_start: usize,
    motion: &MotionClip,
    motion_start: usize,
) -> Result<StyleEmbedding> {
    let w = model.config.w_style;
    let mut g = Graph::new(store);
    let h = model.style(&mut g, music.tensor(music_start, w)?, motion.tensor(motion_start, w)?)?;
    Ok(StyleEmbedding {
        h: g.value(h).clone(),
        music_id: format!("music@{music_start}"),
        motion_id: format!("{}@{motion_start}", motion.clip_id()),
    })
}

#[derive(Clone, Debug)]
pub struct Rollout {
    /// Seed frames followed by generated frames.
    pub motion: MotionClip,
    /// Thresholded contact predictions for the generated frames only.
    pub contacts: ContactTrack,
    pub steps: usize,
    /// Set when a non-finite activation stopped generation early; `motion`
    /// then holds the frames produced before the failure.
    pub aborted: Option<String>,
}

/// Appends `stride` predicted frames per step until `total_frames` exist.
/// Predicted frames are fed back as they are; rotation blocks are not
/// re-projected.
/// Beats past the end of `beats` count as no beat.
pub fn rollout(
    model: &DanceModel,
    store: &ParamStore<f32>,
    seed_motion: &MotionClip,
    beats: &BeatTrack,
    style: &StyleEmbedding,
    total_frames: usize,
    stride: usize,
) -> Result<Rollout> {
    let cfg = &model.config;
    let (w, n) = (cfg.w_ctx, cfg.n);
    if seed_motion.len() < w {
        return Err(DanceError::TooShort(format!("seed motion has {} frames, need {w}", seed_motion.len())));
    }
    if total_frames <= seed_motion.len() {
        return Err(DanceError::InvalidData(format!(
            "total_frames {total_frames} must exceed the seed length {}",
            seed_motion.len()
        )));
    }
    if stride == 0 || stride > n {
        return Err(DanceError::InvalidData(format!("stride {stride} outside 1..={n}")));
    }
    if seed_motion.dim() != cfg.motion_dim() {
        return Err(DanceError::DimensionMismatch(format!(
            "seed width {} vs model width {}",
            seed_motion.dim(),
            cfg.motion_dim()
        )));
    }
    let dim = cfg.motion_dim();
    let mut motion = seed_motion.clone().with_id(format!("{}_gen", seed_motion.clip_id()));
    let mut cache = model.generator.history.as_ref().map(|h| HistoryCache::new(h, store));
    if let Some(c) = cache.as_mut() {
        for t in 0..motion.len() {
            c.push(motion.frame(t))?;
        }
    }
    let mut contacts = ContactTrack { labels: Vec::new() };
    let mut steps = 0;
    let mut aborted = None;
    while motion.len() < total_frames {
        let t = motion.len();
        let start = t - w;
        let flags: Vec<u8> = (start..start + w + n).map(|f| beats.flags.get(f).copied().unwrap_or(0)).collect();
        let window_beats = BeatTrack { flags, fps: beats.fps };
        let mut g = Graph::new(store);
        let context = g.constant(motion.tensor(start, w)?);
        let style_v = g.constant(style.h.clone());
        let e_hist = match (&cache, &model.generator.history) {
            (Some(c), Some(h)) => {
                let e = match c.embedding(cfg.history_max) {
                    Some((e, _)) => Tensor::matrix(n, h.d_out, e)?,
                    None => h.zero_embedding(),
                };
                Some(g.constant(e))
            }
            _ => None,
        };
        let out = match model.generator.forward(
            &mut g,
            &StepInput {
                context,
                beats: &window_beats,
                style: style_v,
                e_hist,
            },
        ) {
            Ok(o) => o,
            Err(DanceError::NonFiniteActivation(what)) => {
                aborted = Some(format!("non-finite {what} at frame {t}"));
                break;
            }
            Err(e) => return Err(e),
        };
        steps += 1;
        let take = stride.min(total_frames - t);
        let poses = g.value(out.poses);
        let logits = g.value(out.contact_logits);
        for r in 0..take {
            motion.extend_frames(&poses.data()[r * dim..(r + 1) * dim])?;
            if let Some(c) = cache.as_mut() {
                c.push(motion.frame(motion.len() - 1))?;
            }
            contacts.labels.push([u8::from(logits.at(r, 0) > 0.0), u8::from(logits.at(r, 1) > 0.0)]);
        }
    }
    Ok(Rollout {
        motion,
        contacts,
        steps,
        aborted,
    })
}

/// Inference protocol: beats are the music onsets, the style comes from the
/// first `w_style` frames of the music and of the seed motion, and the
/// first `w_ctx` seed frames start the rollout.
pub fn generate_from_music(
    model: &DanceModel,
    store: &ParamStore<f32>,
    music: &MusicFeatureTrack,
    seed_motion: &MotionClip,
    total_frames: usize,
    stride: usize,
) -> Result<Rollout> {
    let cfg = &model.config;
    let beats = music_onsets(music, default_min_separation(music.fps()), DEFAULT_ONSET_K)?;
    let style = encode_style(model, store, music, 0, seed_motion, 0)?;
    let seed = seed_motion.slice(0, cfg.w_ctx)?;
    rollout(model, store, &seed, &beats, &style, total_frames, stride)
}
