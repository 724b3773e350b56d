//! Unpaired batch construction, losses and the optimization loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dance_nn::{AdamConfig, DropoutKey, Gradients, Graph, ParamStore, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::beats::{default_min_separation, motion_beats, BeatTrack, DEFAULT_PROMINENCE};
use crate::config::{Config, Scheme};
use crate::dataset::Dataset;
use crate::error::{DanceError, Result};
use crate::model::{mean_pool, triplet_loss, DanceModel, StepInput};

/// Window lengths and sampling switches used by [`build_batch`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchSpec {
    pub w_ctx: usize,
    pub n: usize,
    pub w_style: usize,
    /// `None` when the long-history branch is disabled.
    pub history_len: Option<usize>,
    pub scheme: Scheme,
    pub triplets: usize,
}

impl BatchSpec {
    pub fn from_config(cfg: &Config) -> BatchSpec {
        BatchSpec {
            w_ctx: cfg.model.w_ctx,
            n: cfg.model.n,
            w_style: cfg.model.w_style,
            history_len: cfg.model.long_history.is_on().then_some(cfg.train.history_len),
            scheme: cfg.train.scheme,
            triplets: cfg.train.triplet_batch,
        }
    }

    pub fn window(&self) -> usize {
        self.w_ctx + self.n
    }
}

/// Where every slice of a sample was read from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub target_clip: usize,
    pub target_source: usize,
    pub target_start: usize,
    pub target_len: usize,
    pub music_source: usize,
    pub music_start: usize,
    pub motion_clip: usize,
    pub motion_start: usize,
    pub history: Option<(usize, usize)>,
    pub style_len: usize,
}

impl Provenance {
    /// True when the music exemplar overlaps the music frames aligned with
    /// the target window.
    pub fn reads_target_music(&self) -> bool {
        self.music_source == self.target_source
            && self.music_start < self.target_start + self.target_len
            && self.target_start < self.music_start + self.style_len
    }
}

#[derive(Clone, Debug)]
pub struct TrainSample {
    pub style: u32,
    /// `w_ctx + n` frames: context followed by the supervised future.
    pub target: Tensor<f32>,
    /// Motion beats of the target window.
    pub beats: BeatTrack,
    pub music: Tensor<f32>,
    pub motion: Tensor<f32>,
    pub history: Option<Tensor<f32>>,
    /// `n x 2` contact labels of the future frames.
    pub contacts: Tensor<f32>,
    pub provenance: Provenance,
}

/// Music slices for the style triplet loss.
#[derive(Clone, Debug)]
pub struct Triplet {
    pub anchor: Tensor<f32>,
    pub positive: Tensor<f32>,
    pub negative: Tensor<f32>,
    /// `(source, start)` of anchor, positive and negative.
    pub reads: [(usize, usize); 3],
    /// Target source of the sample the triplet is attached to.
    pub avoid_source: usize,
}

#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub samples: Vec<TrainSample>,
    pub triplets: Vec<Triplet>,
}

/// The only view of the corpus the exemplar and history samplers get:
/// clip and music pools keyed by style. Callers name the source to avoid.
struct StylePools<'a> {
    ds: &'a Dataset,
}

impl StylePools<'_> {
    fn music(&self, style: u32, avoid: &[usize], len: usize, rng: &mut ChaCha8Rng) -> Result<(usize, usize)> {
        let pool: Vec<usize> = self
            .ds
            .sources_of_style(style)
            .into_iter()
            .filter(|s| !avoid.contains(s) && self.ds.music[*s].len() >= len)
            .collect();
        let src = pick(&pool, rng).ok_or_else(|| no_clip("music", style))?;
        let start = rng.random_range(0..=self.ds.music[src].len() - len);
        Ok((src, start))
    }

    fn motion(&self, style: u32, avoid_source: Option<usize>, len: usize, rng: &mut ChaCha8Rng) -> Result<(usize, usize)> {
        let pool: Vec<usize> = self
            .ds
            .clips_of_style(style)
            .into_iter()
            .filter(|&c| Some(self.ds.clips[c].source) != avoid_source && self.ds.clips[c].motion.len() >= len)
            .collect();
        let clip = pick(&pool, rng).ok_or_else(|| no_clip("motion", style))?;
        let start = rng.random_range(0..=self.ds.clips[clip].motion.len() - len);
        Ok((clip, start))
    }
}

fn pick(pool: &[usize], rng: &mut ChaCha8Rng) -> Option<usize> {
    (!pool.is_empty()).then(|| pool[rng.random_range(0..pool.len())])
}

fn no_clip(what: &str, style: u32) -> DanceError {
    DanceError::NoEligibleClip(format!("no {what} clip of style {style} outside the target"))
}

/// Samples `batch_size` targets uniformly over clips and start frames, then
/// style exemplars and history by style label alone. Under the unpaired
/// scheme no exemplar comes from the target's source recording.
pub fn build_batch(dataset: &Dataset, spec: &BatchSpec, batch_size: usize, seed: u64) -> Result<TrainBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pools = StylePools { ds: dataset };
    let win = spec.window();
    let targets: Vec<usize> = (0..dataset.clips.len())
        .filter(|&c| dataset.clips[c].motion.len() >= win.max(spec.w_style))
        .collect();
    if targets.is_empty() {
        return Err(DanceError::NoEligibleClip(format!("no clip has {win} frames")));
    }
    let mut samples = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let ci = targets[rng.random_range(0..targets.len())];
        let clip = &dataset.clips[ci];
        let style = clip.motion.style();
        let start = rng.random_range(0..=clip.motion.len() - win);
        let window = clip.motion.slice(start, win)?;
        let beats = motion_beats(&window, default_min_separation(window.fps()), DEFAULT_PROMINENCE)?;
        let (music_source, music_start) = match spec.scheme {
            Scheme::Unpaired => pools.music(style, &[clip.source], spec.w_style, &mut rng)?,
            Scheme::Paired => {
                let len = dataset.music[clip.source].len();
                (clip.source, start.min(len.saturating_sub(spec.w_style)))
            }
        };
        let (motion_clip, motion_start) = pools.motion(style, Some(clip.source), spec.w_style, &mut rng)?;
        let history = match spec.history_len {
            Some(len) => Some(pools.motion(style, None, len, &mut rng)?),
            None => None,
        };
        let mut contacts = Vec::with_capacity(spec.n * 2);
        for t in start + spec.w_ctx..start + win {
            let [l, r] = clip.contacts.labels[t];
            contacts.extend([l as f32, r as f32]);
        }
        samples.push(TrainSample {
            style,
            target: window.tensor(0, win)?,
            beats,
            music: dataset.music[music_source].tensor(music_start, spec.w_style)?,
            motion: dataset.clips[motion_clip].motion.tensor(motion_start, spec.w_style)?,
            history: match (history, spec.history_len) {
                (Some((h, hs)), Some(len)) => Some(dataset.clips[h].motion.tensor(hs, len)?),
                _ => None,
            },
            contacts: Tensor::matrix(spec.n, 2, contacts)?,
            provenance: Provenance {
                target_clip: ci,
                target_source: clip.source,
                target_start: start,
                target_len: win,
                music_source,
                music_start,
                motion_clip,
                motion_start,
                history,
                style_len: spec.w_style,
            },
        });
    }
    let mut triplets = Vec::new();
    if dataset.num_styles() > 1 {
        for k in 0..spec.triplets {
            let s = &samples[k % samples.len().max(1)];
            let avoid = s.provenance.target_source;
            let anchor = pools.music(s.style, &[avoid], spec.w_style, &mut rng)?;
            let positive = pools
                .music(s.style, &[avoid, anchor.0], spec.w_style, &mut rng)
                .or_else(|_| pools.music(s.style, &[avoid], spec.w_style, &mut rng))?;
            let others: Vec<u32> = (0..dataset.num_styles() as u32).filter(|&o| o != s.style).collect();
            let neg_style = others[rng.random_range(0..others.len())];
            let negative = pools.music(neg_style, &[], spec.w_style, &mut rng)?;
            let slice = |(src, at): (usize, usize)| dataset.music[src].tensor(at, spec.w_style);
            triplets.push(Triplet {
                anchor: slice(anchor)?,
                positive: slice(positive)?,
                negative: slice(negative)?,
                reads: [anchor, positive, negative],
                avoid_source: avoid,
            });
        }
    }
    Ok(TrainBatch { samples, triplets })
}

/// `sum_t |pred_t - target_t|`.
pub fn loss_rec<T: Scalar>(g: &mut Graph<'_, T>, pred: Var, target: Var) -> Result<Var> {
    check_shapes(g, pred, target)?;
    let d = g.sub(pred, target)?;
    let norms = g.row_norm(d);
    Ok(g.sum_all(norms))
}

/// `sum_t |sigmoid(logits_t) - c_t|`.
pub fn loss_foot<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, target: Var) -> Result<Var> {
    check_shapes(g, logits, target)?;
    let p = g.sigmoid(logits);
    let d = g.sub(p, target)?;
    let norms = g.row_norm(d);
    Ok(g.sum_all(norms))
}

fn check_shapes<T: Scalar>(g: &Graph<'_, T>, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa != sb {
        return Err(DanceError::DimensionMismatch(format!("{sa:?} vs {sb:?}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub rec: f64,
    pub foot: f64,
    pub trip: f64,
}

impl Lambdas {
    pub fn from_config(cfg: &Config) -> Lambdas {
        Lambdas {
            rec: cfg.train.lambda_rec,
            foot: cfg.train.lambda_foot,
            trip: cfg.train.lambda_trip,
        }
    }
}

pub fn total_loss(l_rec: f64, l_foot: f64, l_trip: f64, lambdas: &Lambdas) -> f64 {
    lambdas.rec * l_rec + lambdas.foot * l_foot + lambdas.trip * l_trip
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_rec: f64,
    pub l_foot: f64,
    pub l_trip: f64,
    pub total: f64,
    pub lr: f64,
}

/// Loss of one sample: `(l_rec, l_foot)` as graph scalars.
pub fn sample_losses<T: Scalar>(g: &mut Graph<'_, T>, model: &DanceModel, sample: &TrainSample) -> Result<(Var, Var)> {
    let (w, n) = (model.config.w_ctx, model.config.n);
    let target = g.constant(sample.target.cast());
    let context = g.slice_rows(target, 0, w)?;
    let future = g.slice_rows(target, w, n)?;
    let style = model.style(g, sample.music.cast(), sample.motion.cast())?;
    let e_hist = match (&model.generator.history, &sample.history) {
        (Some(h), Some(x)) => {
            let x = g.constant(x.cast());
            Some(h.forward(g, x)?.e_hist)
        }
        _ => None,
    };
    let out = model.generator.forward(
        g,
        &StepInput {
            context,
            beats: &sample.beats,
            style,
            e_hist,
        },
    )?;
    let rec = loss_rec(g, out.poses, future)?;
    let c = g.constant(sample.contacts.cast());
    let foot = loss_foot(g, out.contact_logits, c)?;
    Ok((rec, foot))
}

pub fn triplet_value<T: Scalar>(g: &mut Graph<'_, T>, model: &DanceModel, t: &Triplet, margin: f64) -> Result<Var> {
    let mut pooled = Vec::with_capacity(3);
    for x in [&t.anchor, &t.positive, &t.negative] {
        let x = g.constant(x.cast());
        let h = model.music.forward(g, x)?;
        pooled.push(mean_pool(g, h));
    }
    triplet_loss(g, pooled[0], pooled[1], pooled[2], margin)
}

/// Batch seed for a step.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    seed ^ step.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Losses and accumulated gradients of one batch; sample terms are averaged
/// over the batch and triplet terms over the triplets.
pub fn batch_gradients(
    model: &DanceModel,
    store: &ParamStore<f32>,
    batch: &TrainBatch,
    lambdas: &Lambdas,
    margin: f64,
    dropout: Option<DropoutKey>,
) -> Result<(f64, f64, f64, Gradients<f32>)> {
    let mut grads = Gradients::empty(store.len());
    let (mut l_rec, mut l_foot, mut l_trip) = (0.0, 0.0, 0.0);
    let b = batch.samples.len() as f64;
    for (i, s) in batch.samples.iter().enumerate() {
        let mut g = Graph::new(store);
        if let Some(key) = dropout {
            g = g.with_dropout(DropoutKey { stream: i as u64, ..key });
        }
        let (rec, foot) = sample_losses(&mut g, model, s)?;
        l_rec += g.value(rec).item() as f64 / b;
        l_foot += g.value(foot).item() as f64 / b;
        let a = g.scale(rec, (lambdas.rec / b) as f32);
        let c = g.scale(foot, (lambdas.foot / b) as f32);
        let root = g.add(a, c)?;
        grads.accumulate(&g.backward(root)?);
    }
    let nt = batch.triplets.len() as f64;
    for (k, t) in batch.triplets.iter().enumerate() {
        let mut g = Graph::new(store);
        if let Some(key) = dropout {
            g = g.with_dropout(DropoutKey {
                stream: (batch.samples.len() + k) as u64,
                ..key
            });
        }
        let v = triplet_value(&mut g, model, t, margin)?;
        l_trip += g.value(v).item() as f64 / nt;
        let root = g.scale(v, (lambdas.trip / nt) as f32);
        grads.accumulate(&g.backward(root)?);
    }
    Ok((l_rec, l_foot, l_trip, grads))
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for the log and checkpoints; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Overrides `train.iters`.
    pub max_steps: Option<u64>,
}

#[derive(Debug)]
pub struct TrainRun {
    pub model: DanceModel,
    pub store: ParamStore<f32>,
    pub log: Vec<LossReport>,
    pub checkpoints: Vec<PathBuf>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.rdck";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.rdck";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:07}.rdck")
}

/// Runs the optimization loop single-threaded; identical inputs give
/// identical logs and checkpoint bytes.
pub fn train(dataset: &Dataset, config: &Config, opts: &TrainOptions) -> Result<TrainRun> {
    config.validate()?;
    let seed = config.train.seed;
    let (model, mut store) = DanceModel::init::<f32>(&config.model, seed)?;
    let spec = BatchSpec::from_config(config);
    let lambdas = Lambdas::from_config(config);
    let adam = AdamConfig::default();
    let steps = opts.max_steps.unwrap_or(config.train.iters);
    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| DanceError::io(dir, e))?;
            let p = dir.join(LOG_FILE);
            Some((BufWriter::new(File::create(&p).map_err(|e| DanceError::io(&p, e))?), p))
        }
        None => None,
    };
    let mut log = Vec::with_capacity(steps as usize);
    let mut checkpoints = Vec::new();
    for step in 1..=steps {
        let batch = build_batch(dataset, &spec, config.train.batch, step_seed(seed, step))?;
        let key = (config.model.dropout > 0.0).then_some(DropoutKey { seed, step, stream: 0 });
        let lr = config.train.lr_at(step - 1);
        let outcome = batch_gradients(&model, &store, &batch, &lambdas, config.train.margin, key).and_then(
            |(r, f, t, mut grads)| {
                if !grads.is_finite() || !(r + f + t).is_finite() {
                    return Err(DanceError::NonFiniteGrad {
                        step,
                        detail: format!("losses rec {r} foot {f} trip {t}"),
                    });
                }
                if config.train.clip_norm > 0.0 {
                    let norm = grads.global_norm() as f64;
                    if norm > config.train.clip_norm {
                        grads.scale((config.train.clip_norm / norm) as f32);
                    }
                }
                store.adam_step(&grads, lr, &adam).map_err(|e| DanceError::NonFiniteGrad {
                    step,
                    detail: e.to_string(),
                })?;
                Ok((r, f, t))
            },
        );
        let (l_rec, l_foot, l_trip) = match outcome {
            Ok(v) => v,
            Err(e @ (DanceError::NonFiniteGrad { .. } | DanceError::NonFiniteActivation(_))) => {
                if let Some(dir) = &opts.out_dir {
                    model.save(&dir.join(LAST_GOOD_CHECKPOINT), &store, config, 1)?;
                }
                return Err(match e {
                    DanceError::NonFiniteActivation(what) => DanceError::NonFiniteGrad {
                        step,
                        detail: format!("non-finite {what}"),
                    },
                    e => e,
                });
            }
            Err(e) => return Err(e),
        };
        let report = LossReport {
            step,
            l_rec,
            l_foot,
            l_trip,
            total: total_loss(l_rec, l_foot, l_trip, &lambdas),
            lr,
        };
        if let Some((w, p)) = log_file.as_mut() {
            serde_json::to_writer(&mut *w, &report)?;
            writeln!(w).map_err(|e| DanceError::io(&*p, e))?;
        }
        log.push(report);
        if let Some(dir) = &opts.out_dir {
            if config.train.checkpoint_every > 0 && step % config.train.checkpoint_every == 0 && step < steps {
                let p = dir.join(checkpoint_name(step));
                model.save(&p, &store, config, 1)?;
                checkpoints.push(p);
            }
        }
    }
    if let Some((mut w, p)) = log_file {
        w.flush().map_err(|e| DanceError::io(&p, e))?;
    }
    if let Some(dir) = &opts.out_dir {
        let p = dir.join(FINAL_CHECKPOINT);
        model.save(&p, &store, config, 1)?;
        checkpoints.push(p);
    }
    Ok(TrainRun {
        model,
        store,
        log,
        checkpoints,
    })
}

/// Trailing mean of `values` over `window` entries ending at index `at`.
pub fn trailing_mean(values: &[f64], at: usize, window: usize) -> f64 {
    let lo = (at + 1).saturating_sub(window);
    let s = &values[lo..=at];
    s.iter().sum::<f64>() / s.len() as f64
}

pub fn read_log(path: &Path) -> Result<Vec<LossReport>> {
    let text = fs::read_to_string(path).map_err(|e| DanceError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
