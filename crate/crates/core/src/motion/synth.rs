//! Procedural dance/music pairs standing in for a captured corpus.
//!
//! Joint angles are sums of sinusoids driven by a warped beat phase
//! `w(b) = b - sin(2 pi b) / (2 pi)`, whose derivative vanishes at every
//! integer `b`. All joints therefore pause together on the beat, which is
//! where the aggregate joint speed has its minima.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::skeleton::{mat_mul, rot_x, rot_y, rot_z};
use super::{motion_dim, MotionClip, MusicFeatureTrack, DEFAULT_FPS, MFCC_DIMS, MUSIC_DIM};
use crate::error::{DanceError, Result};

pub const SYNTH_STYLE_COUNT: usize = 8;
const JOINTS: usize = 24;
const PULSE_DIMS: usize = 8;

#[derive(Clone, Copy, Debug)]
pub struct SynthOptions {
    pub fps: u32,
    /// Height of the energy pulse added to the music features at each beat.
    pub pulse: f64,
    /// Innovation scale of the smoothed feature noise.
    pub noise: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            fps: DEFAULT_FPS,
            pulse: 1.0,
            noise: 0.05,
        }
    }
}

struct Oscillator {
    amp: f64,
    /// Cycles per beat.
    freq: f64,
    phase: f64,
}

struct StyleTable {
    bias: Vec<[f64; 3]>,
    joints: Vec<[Vec<Oscillator>; 3]>,
    bounce: f64,
    sway: f64,
    timbre: [f64; MFCC_DIMS],
    chroma: [f64; 12],
}

// Joints that carry most of the visible movement get larger swings.
fn joint_gain(j: usize) -> f64 {
    match j {
        0 => 0.15,
        3 | 6 | 9 => 0.2,
        12 | 15 => 0.3,
        1 | 2 | 4 | 5 => 0.45,
        7 | 8 | 10 | 11 => 0.25,
        13 | 14 => 0.2,
        _ => 0.7,
    }
}

fn style_table(style: usize) -> StyleTable {
    let mut rng = ChaCha8Rng::seed_from_u64(0x51A7_0000 + style as u64);
    let cycle = [2.0, 4.0, 1.0, 2.0][style % 4];
    let energy = 0.6 + 0.8 * rng.random::<f64>();
    let mut bias = Vec::with_capacity(JOINTS);
    let mut joints = Vec::with_capacity(JOINTS);
    for j in 0..JOINTS {
        let g = joint_gain(j);
        bias.push(std::array::from_fn(|_| rng.random_range(-1.0..1.0) * g));
        joints.push(std::array::from_fn(|_| {
            (0..2)
                .map(|h| Oscillator {
                    amp: energy * g * rng.random_range(0.1..0.6) / (h + 1) as f64,
                    freq: (h + 1) as f64 / cycle,
                    phase: rng.random_range(0.0..TAU),
                })
                .collect()
        }));
    }
    let bounce = rng.random_range(0.05..0.25);
    let sway = rng.random_range(0.0..0.4);
    let timbre = std::array::from_fn(|_| rng.random_range(-1.5..1.5));
    let key = rng.random_range(0..12);
    const MAJOR: [f64; 12] = [1.0, 0.1, 0.5, 0.1, 0.7, 0.5, 0.1, 0.8, 0.1, 0.5, 0.1, 0.4];
    let chroma = std::array::from_fn(|i| MAJOR[(i + 12 - key) % 12]);
    StyleTable {
        bias,
        joints,
        bounce,
        sway,
        timbre,
        chroma,
    }
}

fn warp(b: f64) -> f64 {
    b - (TAU * b).sin() / TAU
}

/// Beat frames `round(k * fps * 60 / bpm)` that fall inside `frames`.
pub fn synth_beat_frames(frames: usize, fps: u32, bpm: f64) -> Vec<usize> {
    let period = fps as f64 * 60.0 / bpm;
    (0..)
        .map(|k| (k as f64 * period).round() as usize)
        .take_while(|&f| f < frames)
        .collect()
}

pub fn synth_dance(style: usize, duration_s: f64, bpm: f64, seed: u64) -> Result<(MotionClip, MusicFeatureTrack)> {
    synth_dance_with(&SynthOptions::default(), style, duration_s, bpm, seed)
}

pub fn synth_dance_with(
    opts: &SynthOptions,
    style: usize,
    duration_s: f64,
    bpm: f64,
    seed: u64,
) -> Result<(MotionClip, MusicFeatureTrack)> {
    if style >= SYNTH_STYLE_COUNT {
        return Err(DanceError::BadStyle {
            style,
            count: SYNTH_STYLE_COUNT,
        });
    }
    if !(60.0..=180.0).contains(&bpm) {
        return Err(DanceError::InvalidData(format!("bpm {bpm} outside [60, 180]")));
    }
    if !(duration_s.is_finite() && duration_s > 0.0) || opts.fps == 0 {
        return Err(DanceError::InvalidData(format!("duration {duration_s} s at {} fps", opts.fps)));
    }
    let fps = opts.fps;
    let frames = ((duration_s * fps as f64).round() as usize).max(1);
    let table = style_table(style);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((style as u64) << 48));
    let jitter = Normal::new(0.0, 1.0).expect("unit normal");

    let amp_scale: Vec<[f64; 3]> = (0..JOINTS)
        .map(|_| std::array::from_fn(|_| 1.0 + 0.1 * jitter.sample(&mut rng)))
        .collect();
    let phase_shift: Vec<[f64; 3]> = (0..JOINTS)
        .map(|_| std::array::from_fn(|_| 0.2 * jitter.sample(&mut rng)))
        .collect();
    let bias: Vec<[f64; 3]> = table
        .bias
        .iter()
        .map(|b| std::array::from_fn(|a| b[a] + 0.05 * jitter.sample(&mut rng)))
        .collect();
    let origin = [rng.random_range(-1.0..1.0), 0.0, rng.random_range(-1.0..1.0)];

    let period = fps as f64 * 60.0 / bpm;
    let dim = motion_dim(JOINTS);
    let mut data = vec![0.0f32; frames * dim];
    for t in 0..frames {
        let w = warp(t as f64 / period);
        let row = &mut data[t * dim..(t + 1) * dim];
        for j in 0..JOINTS {
            let ang: [f64; 3] = std::array::from_fn(|a| {
                bias[j][a]
                    + table.joints[j][a]
                        .iter()
                        .map(|o| amp_scale[j][a] * o.amp * (TAU * o.freq * w + o.phase + phase_shift[j][a]).sin())
                        .sum::<f64>()
            });
            let r = mat_mul(&rot_z(ang[2]), &mat_mul(&rot_y(ang[1]), &rot_x(ang[0])));
            for i in 0..3 {
                for k in 0..3 {
                    row[j * 9 + i * 3 + k] = r[i][k] as f32;
                }
            }
        }
        let root = JOINTS * 9;
        row[root] = (origin[0] + table.sway * (TAU * w / 4.0).sin()) as f32;
        row[root + 1] = (table.bounce * (TAU * w).cos()) as f32;
        row[root + 2] = (origin[2] + 0.5 * table.sway * (TAU * w / 8.0).sin()) as f32;
    }

    let beat_frames = synth_beat_frames(frames, fps, bpm);
    let mut annotation = vec![0u8; frames];
    for &b in &beat_frames {
        annotation[b] = 1;
    }
    let noise = Normal::new(0.0, opts.noise).expect("valid noise scale");
    let mut state = [0.0f64; MUSIC_DIM];
    let mut music = vec![0.0f32; frames * MUSIC_DIM];
    let mut pulse = 0.0f64;
    for t in 0..frames {
        pulse *= 0.5;
        if annotation[t] == 1 {
            pulse = opts.pulse;
        }
        let row = &mut music[t * MUSIC_DIM..(t + 1) * MUSIC_DIM];
        for (d, s) in state.iter_mut().enumerate() {
            *s = 0.9 * *s + noise.sample(&mut rng);
            let base = if d < MFCC_DIMS { table.timbre[d] } else { table.chroma[d - MFCC_DIMS] };
            let p = if d < PULSE_DIMS { pulse } else { 0.0 };
            row[d] = (base + *s + p) as f32;
        }
    }

    let id = format!("s{style}_{seed}");
    Ok((
        MotionClip::new(data, JOINTS, fps, style as u32, id)?,
        MusicFeatureTrack::new(music, fps, style as u32, Some(annotation))?,
    ))
}
