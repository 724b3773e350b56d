//! In-memory training corpus with per-clip motion beats and contacts.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::beats::{default_min_separation, motion_beats, BeatTrack, DEFAULT_PROMINENCE};
use crate::error::{DanceError, Result};
use crate::motion::{
    extract_foot_contacts, load_manifest, load_motion, load_music, mirror_motion, synth_dance, ContactTrack,
    MotionClip, MusicFeatureTrack, SYNTH_STYLE_COUNT,
};

/// One motion clip. `source` indexes the music track recorded with it;
/// mirrored copies share their original's source.
#[derive(Clone, Debug)]
pub struct DataClip {
    pub motion: MotionClip,
    pub source: usize,
    pub beats: BeatTrack,
    pub contacts: ContactTrack,
}

#[derive(Clone, Debug)]
pub struct DatasetOptions {
    pub mirror: bool,
    pub contact_threshold: f64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            mirror: true,
            contact_threshold: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub styles: Vec<String>,
    pub clips: Vec<DataClip>,
    /// Music by source index.
    pub music: Vec<MusicFeatureTrack>,
    pub source_ids: Vec<String>,
}

impl Dataset {
    pub fn from_pairs(styles: Vec<String>, pairs: Vec<(MotionClip, MusicFeatureTrack)>, opts: &DatasetOptions) -> Result<Dataset> {
        let mut ds = Dataset {
            styles,
            clips: Vec::new(),
            music: Vec::new(),
            source_ids: Vec::new(),
        };
        for (source, (motion, music)) in pairs.into_iter().enumerate() {
            if motion.style() as usize >= ds.styles.len() {
                return Err(DanceError::BadStyle {
                    style: motion.style() as usize,
                    count: ds.styles.len(),
                });
            }
            if music.style() != motion.style() {
                return Err(DanceError::InvalidData(format!(
                    "clip {} has motion style {} but music style {}",
                    motion.clip_id(),
                    motion.style(),
                    music.style()
                )));
            }
            ds.source_ids.push(motion.clip_id().to_string());
            let mirrored = if opts.mirror { Some(mirror_motion(&motion)?) } else { None };
            for m in std::iter::once(motion).chain(mirrored) {
                let beats = motion_beats(&m, default_min_separation(m.fps()), DEFAULT_PROMINENCE)?;
                let contacts = extract_foot_contacts(&m, opts.contact_threshold)?;
                ds.clips.push(DataClip {
                    motion: m,
                    source,
                    beats,
                    contacts,
                });
            }
            ds.music.push(music);
        }
        Ok(ds)
    }

    pub fn load(manifest: &Path, opts: &DatasetOptions) -> Result<Dataset> {
        let man = load_manifest(manifest)?;
        let mut pairs = Vec::with_capacity(man.clips.len());
        for c in &man.clips {
            let motion = load_motion(&c.motion)?.with_id(c.id.clone()).with_style(c.style);
            let music = load_music(&c.music)?;
            if music.len() != motion.len() {
                return Err(DanceError::DimensionMismatch(format!(
                    "clip {}: {} motion frames vs {} music frames",
                    c.id,
                    motion.len(),
                    music.len()
                )));
            }
            pairs.push((motion, music));
        }
        Dataset::from_pairs(man.styles, pairs, opts)
    }

    pub fn num_styles(&self) -> usize {
        self.styles.len()
    }

    pub fn clips_of_style(&self, style: u32) -> Vec<usize> {
        (0..self.clips.len()).filter(|&i| self.clips[i].motion.style() == style).collect()
    }

    pub fn sources_of_style(&self, style: u32) -> Vec<usize> {
        (0..self.music.len()).filter(|&s| self.music[s].style() == style).collect()
    }

    pub fn min_clip_len(&self) -> usize {
        self.clips.iter().map(|c| c.motion.len()).min().unwrap_or(0)
    }
}

/// Procedural corpus: `clips_per_style` pairs for each of the first
/// `styles` synthetic styles, each with its own tempo in 90..150 bpm.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub styles: Vec<String>,
    pub pairs: Vec<(MotionClip, MusicFeatureTrack)>,
    pub bpms: Vec<f64>,
}

pub fn synth_corpus(styles: usize, clips_per_style: usize, seconds: f64, seed: u64) -> Result<SynthCorpus> {
    if styles == 0 || styles > SYNTH_STYLE_COUNT || clips_per_style == 0 {
        return Err(DanceError::InvalidData(format!(
            "need 1..={SYNTH_STYLE_COUNT} styles and at least one clip per style, got {styles} x {clips_per_style}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SynthCorpus {
        styles: (0..styles).map(|s| format!("style{s}")).collect(),
        pairs: Vec::with_capacity(styles * clips_per_style),
        bpms: Vec::new(),
    };
    for s in 0..styles {
        for k in 0..clips_per_style {
            let bpm = rng.random_range(90.0..150.0_f64).round();
            let (motion, music) = synth_dance(s, seconds, bpm, rng.random())?;
            out.pairs.push((motion.with_id(format!("s{s}_c{k:03}")), music));
            out.bpms.push(bpm);
        }
    }
    Ok(out)
}

impl SynthCorpus {
    pub fn into_dataset(self, opts: &DatasetOptions) -> Result<Dataset> {
        Dataset::from_pairs(self.styles, self.pairs, opts)
    }
}
