//! `dance-synth`: synthetic data, training, generation, evaluation and beat
//! extraction from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dance_core::beats::{default_min_separation, motion_beats, music_onsets, DEFAULT_ONSET_K, DEFAULT_PROMINENCE};
use dance_core::config::Config;
use dance_core::dataset::{synth_corpus, Dataset, DatasetOptions};
use dance_core::eval::{evaluate, EvalReport};
use dance_core::generate::generate_from_music;
use dance_core::model::DanceModel;
use dance_core::motion::{
    load_manifest, load_motion, load_music, save_manifest, save_motion, save_music, DatasetManifest, ManifestClip,
    MotionClip,
};
use dance_core::training::{train, TrainOptions};
use dance_core::DanceError;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "dance-synth", version, about = "Beat- and style-conditioned dance synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural motion/music corpus and its manifest.
    SynthData {
        #[arg(long)]
        styles: usize,
        #[arg(long)]
        clips_per_style: usize,
        #[arg(long)]
        seconds: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Train from a JSON config; writes the log and checkpoints to `--out`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stop after this many steps instead of `train.iters`.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Generate motion for a music track.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        music: PathBuf,
        /// Seed motion; defaults to the first style-matched clip of the
        /// training manifest.
        #[arg(long)]
        seed_motion: Option<PathBuf>,
        #[arg(long)]
        seconds: f64,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long)]
        out: PathBuf,
        /// Project rotation blocks onto the nearest rotations before writing.
        #[arg(long)]
        orthonormalize: bool,
    },
    /// Compare generated clips against reference clips.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        export_csv: Option<PathBuf>,
    },
    /// Detect beats in a motion (RDMC) or music (RDMF) file.
    Beats {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        kind: BeatKind,
        /// Also write the beat frames as a JSON array here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BeatKind {
    Motion,
    Music,
}

enum Failure {
    Usage(String),
    Core(DanceError),
}

impl From<DanceError> for Failure {
    fn from(e: DanceError) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn report(&self) -> (u8, &'static str, String) {
        match self {
            Failure::Usage(d) => (2, "Usage", d.clone()),
            Failure::Core(e) => {
                let (code, kind) = match e {
                    DanceError::Config(_) => (2, "Config"),
                    DanceError::NonFiniteGrad { .. } => (4, "NonFiniteGrad"),
                    DanceError::NonFiniteActivation(_) => (4, "NonFiniteActivation"),
                    DanceError::DegenerateCovariance(_) => (4, "DegenerateCovariance"),
                    DanceError::Io { .. } => (3, "IoFailure"),
                    DanceError::BadMagic { .. } => (3, "BadMagic"),
                    DanceError::BadVersion(_) => (3, "BadVersion"),
                    DanceError::DimensionMismatch(_) => (3, "DimensionMismatch"),
                    DanceError::TruncatedFile => (3, "TruncatedFile"),
                    DanceError::NoEligibleClip(_) => (3, "NoEligibleClip"),
                    DanceError::TooShort(_) => (3, "TooShort"),
                    DanceError::TooFew(_) | DanceError::TooFewClips(_) => (3, "TooFew"),
                    _ => (3, "DataError"),
                };
                (code, kind, e.to_string())
            }
        }
    }
}

type CmdResult = Result<Value, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn write_json(path: &Path, v: &Value) -> Result<(), DanceError> {
    let text = serde_json::to_string_pretty(v)?;
    std::fs::write(path, text + "\n").map_err(|e| DanceError::Io {
        path: path.into(),
        source: e,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DanceError + '_ {
    move |e| DanceError::Io {
        path: path.into(),
        source: e,
    }
}

fn synth_data(styles: usize, per_style: usize, seconds: f64, out: &Path, seed: u64) -> CmdResult {
    if styles == 0 || per_style == 0 {
        return Err(usage("--styles and --clips-per-style must be positive"));
    }
    if !(seconds > 0.0) {
        return Err(usage("--seconds must be positive"));
    }
    let corpus = synth_corpus(styles, per_style, seconds, seed).map_err(|e| match e {
        DanceError::InvalidData(d) => usage(d),
        e => e.into(),
    })?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut clips = Vec::with_capacity(corpus.pairs.len());
    for (motion, music) in &corpus.pairs {
        let id = motion.clip_id().to_string();
        let (mp, fp) = (format!("{id}.rdmc"), format!("{id}.rdmf"));
        save_motion(motion, &out.join(&mp))?;
        save_music(music, &out.join(&fp))?;
        clips.push(ManifestClip {
            id,
            motion: mp.into(),
            music: fp.into(),
            style: motion.style(),
        });
    }
    let manifest = out.join("manifest.json");
    save_manifest(
        &DatasetManifest {
            styles: corpus.styles,
            clips,
        },
        &manifest,
    )?;
    Ok(json!({"command": "synth-data", "clips": corpus.pairs.len(), "manifest": manifest}))
}

fn dataset_options(cfg: &Config) -> DatasetOptions {
    DatasetOptions {
        mirror: cfg.train.mirror,
        contact_threshold: cfg.train.contact_threshold,
    }
}

fn cmd_train(config: &Path, out: &Path, steps: Option<u64>) -> CmdResult {
    let cfg = Config::load(config)?;
    if cfg.data.manifest.as_os_str().is_empty() {
        return Err(usage("config has no data.manifest"));
    }
    let ds = Dataset::load(&cfg.data.manifest, &dataset_options(&cfg))?;
    let run = train(
        &ds,
        &cfg,
        &TrainOptions {
            out_dir: Some(out.to_path_buf()),
            max_steps: steps,
        },
    )?;
    let last = run.log.last().copied();
    Ok(json!({
        "command": "train",
        "steps": run.log.len(),
        "final": last,
        "checkpoint": run.checkpoints.last(),
    }))
}

fn default_seed_motion(cfg: &Config, style: u32) -> Result<MotionClip, Failure> {
    if cfg.data.manifest.as_os_str().is_empty() {
        return Err(usage("checkpoint has no manifest; pass --seed-motion"));
    }
    let man = load_manifest(&cfg.data.manifest)?;
    let clip = man
        .clips
        .iter()
        .find(|c| c.style == style)
        .ok_or_else(|| DanceError::NoEligibleClip(format!("no manifest clip of style {style}")))?;
    Ok(load_motion(&clip.motion)?.with_style(style))
}

fn cmd_generate(
    checkpoint: &Path,
    music: &Path,
    seed_motion: Option<&Path>,
    seconds: f64,
    stride: usize,
    out: &Path,
    orthonormalize: bool,
) -> CmdResult {
    if !(seconds > 0.0) {
        return Err(usage("--seconds must be positive"));
    }
    let (model, store, cfg, _) = DanceModel::load(checkpoint)?;
    let track = load_music(music)?;
    let seed = match seed_motion {
        Some(p) => load_motion(p)?,
        None => default_seed_motion(&cfg, track.style())?,
    };
    let total = ((seconds * cfg.model.fps as f64).ceil() as usize).max(cfg.model.w_ctx + 1);
    let r = generate_from_music(&model, &store, &track, &seed, total, stride)?;
    let stem = out.file_stem().map_or("generated".into(), |s| s.to_string_lossy().into_owned());
    let mut clip = r.motion.with_style(track.style()).with_id(stem);
    if orthonormalize {
        clip = clip.orthonormalized();
    }
    save_motion(&clip, out)?;
    if let Some(reason) = r.aborted {
        return Err(DanceError::NonFiniteActivation(reason).into());
    }
    Ok(json!({
        "command": "generate",
        "frames": clip.len(),
        "seconds": clip.len() as f64 / clip.fps() as f64,
        "steps": r.steps,
        "out": out,
    }))
}

fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, DanceError> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    out.sort();
    Ok(out)
}

fn cmd_evaluate(generated: &Path, reference: &Path, out: &Path, csv: Option<&Path>) -> CmdResult {
    let mut gen = Vec::new();
    let mut music = Vec::new();
    for p in files_with_ext(generated, "rdmc")? {
        gen.push(load_motion(&p)?);
        let m = p.with_extension("rdmf");
        music.push(if m.exists() { Some(load_music(&m)?) } else { None });
    }
    let refs = files_with_ext(reference, "rdmc")?
        .iter()
        .map(|p| load_motion(p))
        .collect::<Result<Vec<_>, _>>()?;
    if gen.len() < 2 || refs.len() < 2 {
        return Err(DanceError::TooFew(format!(
            "{} generated and {} reference clips; need 2 of each",
            gen.len(),
            refs.len()
        ))
        .into());
    }
    let report: EvalReport = evaluate(&gen, &music, &refs)?;
    let v = serde_json::to_value(&report).map_err(DanceError::from)?;
    write_json(out, &v)?;
    if let Some(csv) = csv {
        let mut text = String::from("t,fid_k\n");
        for p in &report.curve {
            text.push_str(&format!("{},{}\n", p.t, p.fid_k));
        }
        std::fs::write(csv, text).map_err(io_err(csv))?;
    }
    Ok(json!({
        "command": "evaluate",
        "fid_k": report.fid_k,
        "fid_g": report.fid_g,
        "dist_k": report.dist_k,
        "dist_g": report.dist_g,
        "beat_align": report.beat_align,
        "style_acc": report.style_acc,
        "curve_points": report.curve.len(),
        "out": out,
    }))
}

fn cmd_beats(input: &Path, kind: BeatKind, out: Option<&Path>) -> CmdResult {
    let track = match kind {
        BeatKind::Motion => {
            let clip = load_motion(input)?;
            motion_beats(&clip, default_min_separation(clip.fps()), DEFAULT_PROMINENCE)?
        }
        BeatKind::Music => {
            let m = load_music(input)?;
            music_onsets(&m, default_min_separation(m.fps()), DEFAULT_ONSET_K)?
        }
    };
    let frames = track.frames();
    if let Some(out) = out {
        write_json(out, &json!(frames))?;
    }
    Ok(json!({"command": "beats", "frames": track.len(), "beats": frames}))
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::SynthData {
            styles,
            clips_per_style,
            seconds,
            out,
            seed,
        } => synth_data(styles, clips_per_style, seconds, &out, seed),
        Command::Train { config, out, steps } => cmd_train(&config, &out, steps),
        Command::Generate {
            checkpoint,
            music,
            seed_motion,
            seconds,
            stride,
            out,
            orthonormalize,
        } => cmd_generate(&checkpoint, &music, seed_motion.as_deref(), seconds, stride, &out, orthonormalize),
        Command::Evaluate {
            generated,
            reference,
            out,
            export_csv,
        } => cmd_evaluate(&generated, &reference, &out, export_csv.as_deref()),
        Command::Beats { input, kind, out } => cmd_beats(&input, kind, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({"error": "Usage", "detail": e.to_string().trim()}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            let (code, kind, detail) = f.report();
            eprintln!("{}", json!({"error": kind, "detail": detail}));
            ExitCode::from(code)
        }
    }
}
