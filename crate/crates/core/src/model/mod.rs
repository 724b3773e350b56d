//! Model architecture. Layers hold only parameter ids, so one
//! [`DanceModel`] drives both the `f32` training store and its `f64` copy
//! used for gradient checks.

pub mod block;
pub mod generator;
pub mod history;
pub mod style;

use std::path::Path;

use dance_nn::checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, CheckpointMeta};
use dance_nn::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, ModelConfig};
use crate::error::{DanceError, Result};
use crate::motion::MUSIC_DIM;
pub use block::{Block, ConditionalLayerNorm, Norm};
pub use generator::{pad_motion, Generator, Mag, StepInput, StepOutput};
pub use history::{HistoryCache, HistoryEncoder, HistoryOutput};
pub use style::{mean_pool, style_embedding, triplet_hinge, triplet_loss, StyleEncoder};

#[derive(Clone, Debug)]
pub struct DanceModel {
    pub config: ModelConfig,
    pub music: StyleEncoder,
    pub motion: StyleEncoder,
    pub generator: Generator,
}

impl DanceModel {
    pub fn build<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let music = StyleEncoder::new(store, &mut rng, "style.music", MUSIC_DIM, cfg)?;
        let motion = StyleEncoder::new(store, &mut rng, "style.motion", cfg.motion_dim(), cfg)?;
        let generator = Generator::new(store, &mut rng, cfg)?;
        Ok(DanceModel {
            config: cfg.clone(),
            music,
            motion,
            generator,
        })
    }

    pub fn init<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = DanceModel::build(cfg, &mut store, seed)?;
        Ok((model, store))
    }

    /// `H_style` from a music slice and a motion slice, each `w_style` rows.
    pub fn style<T: Scalar>(&self, g: &mut Graph<'_, T>, music: Tensor<T>, motion: Tensor<T>) -> Result<Var> {
        let m = g.constant(music);
        let hm = self.music.forward(g, m)?;
        let x = g.constant(motion);
        let hx = self.motion.forward(g, x)?;
        style_embedding(g, hm, hx)
    }

    pub fn save(&self, path: &Path, store: &ParamStore<f32>, config: &Config, threads: usize) -> Result<()> {
        let meta = CheckpointMeta {
            seed: config.train.seed,
            config_hash: config.hash(),
            threads,
            config: config.to_json(),
        };
        Ok(save_checkpoint(path, store, &meta)?)
    }

    /// Rebuilds the architecture recorded in a checkpoint and checks that
    /// every stored tensor matches it by name and shape.
    pub fn load(path: &Path) -> Result<(DanceModel, ParamStore<f32>, Config, CheckpointHeader)> {
        let (store, header) = load_checkpoint(path)?;
        let config: Config = serde_json::from_value(header.config.clone())
            .map_err(|e| DanceError::Config(format!("checkpoint config: {e}")))?;
        let (model, fresh) = DanceModel::init::<f32>(&config.model, 0)?;
        if fresh.len() != store.len() {
            return Err(DanceError::DimensionMismatch(format!(
                "checkpoint holds {} tensors, model expects {}",
                store.len(),
                fresh.len()
            )));
        }
        for (a, b) in fresh.ids().zip(store.ids()) {
            if fresh.name(a) != store.name(b) || fresh.value(a).shape() != store.value(b).shape() {
                return Err(DanceError::DimensionMismatch(format!(
                    "checkpoint tensor {} {:?} does not match {} {:?}",
                    store.name(b),
                    store.value(b).shape(),
                    fresh.name(a),
                    fresh.value(a).shape()
                )));
            }
        }
        Ok((model, store, config, header))
    }
}
