mod common;

use common::{conv_window, history_oracle, planted_trial, random_matrix, randomize, rng, HistoryKernels};
use dance_core::beats::BeatTrack;
use dance_core::config::{Config, Fusion, ModelConfig, Toggle};
use dance_core::model::block::ConditionalLayerNorm;
use dance_core::model::{pad_motion, triplet_hinge, triplet_loss, DanceModel, HistoryCache, HistoryEncoder, Mag, StepInput};
use dance_core::DanceError;
use dance_nn::layers::layer_norm;
use dance_nn::{grad_check_with, GradCheckOptions, Graph, ParamStore, Tensor};
use rand::Rng;

fn zero_mlps(store: &mut ParamStore<f64>, cln: &ConditionalLayerNorm) {
    for l in cln.gamma_mlp.iter().chain(cln.beta_mlp.iter()) {
        for id in [l.weight, l.bias] {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[test]
fn cln_with_zero_condition_mlps_is_layer_norm() {
    let mut r = rng(1);
    let mut store = ParamStore::<f64>::new();
    let cln = ConditionalLayerNorm::new(&mut store, &mut r, "cln", 8, 6, 12).unwrap();
    zero_mlps(&mut store, &cln);
    let x = random_matrix(&mut r, 5, 8, 2.0);
    let s = random_matrix(&mut r, 1, 6, 1.0);
    let mut g = Graph::new(&store);
    let xv = g.constant(x);
    let sv = g.constant(s);
    let a = cln.forward(&mut g, xv, sv).unwrap();
    let b = layer_norm(&mut g, xv, cln.base.gamma, cln.base.beta, cln.base.eps).unwrap();
    assert!(g.value(a).max_abs_diff(g.value(b)).unwrap() < 1e-12);
}

#[test]
fn cln_hand_example() {
    let mut r = rng(2);
    let mut store = ParamStore::<f64>::new();
    let mut cln = ConditionalLayerNorm::new(&mut store, &mut r, "cln", 2, 3, 4).unwrap();
    cln.base.eps = 0.0;
    zero_mlps(&mut store, &cln);
    store.value_mut(cln.gamma_mlp[1].bias).data_mut().copy_from_slice(&[1.0, 1.0]);
    store.value_mut(cln.beta_mlp[1].bias).data_mut().copy_from_slice(&[2.0, 2.0]);
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap());
    let s = g.constant(Tensor::matrix(1, 3, vec![0.3, -0.2, 0.9]).unwrap());
    let y = cln.forward(&mut g, x, s).unwrap();
    let got = g.value(y).data();
    assert!((got[0] - 0.0).abs() < 1e-12 && (got[1] - 4.0).abs() < 1e-12, "{got:?}");
}

#[test]
fn cln_ignores_constant_offsets() {
    let mut r = rng(3);
    let mut store = ParamStore::<f64>::new();
    let cln = ConditionalLayerNorm::new(&mut store, &mut r, "cln", 6, 4, 8).unwrap();
    let x = random_matrix(&mut r, 3, 6, 1.0);
    let s = random_matrix(&mut r, 1, 4, 1.0);
    let mut g = Graph::new(&store);
    let (xa, sv) = (g.constant(x.clone()), g.constant(s));
    let xb = g.constant(x.map(|v| v + 7.5));
    let a = cln.forward(&mut g, xa, sv).unwrap();
    let b = cln.forward(&mut g, xb, sv).unwrap();
    assert!(g.value(a).max_abs_diff(g.value(b)).unwrap() < 1e-9);
}

#[test]
fn cln_gradient_matches_finite_differences() {
    let mut r = rng(4);
    let mut store = ParamStore::<f64>::new();
    let cln = ConditionalLayerNorm::new(&mut store, &mut r, "cln", 6, 4, 8).unwrap();
    randomize(&mut store, &mut r, 0.5);
    let xid = store.add("x", random_matrix(&mut r, 4, 6, 1.0)).unwrap();
    let sid = store.add("s", random_matrix(&mut r, 1, 4, 1.0)).unwrap();
    let w = random_matrix(&mut r, 4, 6, 1.0);
    let report = grad_check_with(&store, &GradCheckOptions::default(), |g| -> Result<_, DanceError> {
        let (x, s) = (g.param(xid), g.param(sid));
        let y = cln.forward(g, x, s)?;
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv)?;
        Ok(g.sum_all(p))
    })
    .unwrap();
    assert!(report.passes(1e-3), "{report:?}");
}

#[test]
fn mag_with_zero_memory_and_bias_is_identity() {
    let mut r = rng(5);
    let mut store = ParamStore::<f64>::new();
    let mag = Mag::new(&mut store, &mut r, "mag", 8, 1.0).unwrap();
    let z = random_matrix(&mut r, 7, 8, 3.0);
    let mut g = Graph::new(&store);
    let zv = g.constant(z.clone());
    let e = g.constant(Tensor::zeros(vec![7, 8]));
    let out = mag.forward(&mut g, zv, e).unwrap();
    assert_eq!(g.value(out).data(), z.data());
}

#[test]
fn mag_alpha_follows_norm_ratio_and_clamps() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let z = g.constant(Tensor::matrix(2, 2, vec![3.0, 4.0, 1.0, 0.0]).unwrap());
    let h = g.constant(Tensor::matrix(2, 2, vec![0.0, 2.0, 0.01, 0.0]).unwrap());
    let a = g.mag_alpha(z, h, 0.1).unwrap();
    let v = g.value(a).data().to_vec();
    assert!((v[0] - 0.25).abs() < 1e-12);
    let b = g.mag_alpha(z, h, 1.0).unwrap();
    assert_eq!(g.value(b).data()[1], 1.0);
}

#[test]
fn mag_gradient_matches_finite_differences() {
    let mut r = rng(6);
    let mut store = ParamStore::<f64>::new();
    let mag = Mag::new(&mut store, &mut r, "mag", 6, 0.3).unwrap();
    randomize(&mut store, &mut r, 0.6);
    let zid = store.add("z", random_matrix(&mut r, 4, 6, 1.0)).unwrap();
    let eid = store.add("e", random_matrix(&mut r, 4, 6, 1.0)).unwrap();
    let w = random_matrix(&mut r, 4, 6, 1.0);
    let report = grad_check_with(&store, &GradCheckOptions::default(), |g| -> Result<_, DanceError> {
        let (z, e) = (g.param(zid), g.param(eid));
        let (y, alpha) = mag.forward_with_alpha(g, z, e)?;
        assert!(g.value(alpha).data().iter().any(|&a| a < 1.0), "clamp branch only");
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv)?;
        Ok(g.sum_all(p))
    })
    .unwrap();
    assert!(report.passes(1e-3), "{report:?}");
}

fn history_setup(seed: u64, d_in: usize, d_out: usize, m: usize, n: usize) -> (ParamStore<f64>, HistoryEncoder) {
    let mut r = rng(seed);
    let mut store = ParamStore::<f64>::new();
    let enc = HistoryEncoder::new(&mut store, &mut r, "hist", m, n, 3, d_in, d_out).unwrap();
    randomize(&mut store, &mut r, 0.3);
    (store, enc)
}

fn kernels<'a>(store: &'a ParamStore<f64>, enc: &HistoryEncoder) -> HistoryKernels<'a> {
    HistoryKernels {
        q: (store.value(enc.query.kernel).data(), store.value(enc.query.bias).data()),
        k: (store.value(enc.key.kernel).data(), store.value(enc.key.bias).data()),
        v: (store.value(enc.value.kernel).data(), store.value(enc.value.bias).data()),
        width: enc.width,
        d_out: enc.d_out,
    }
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

#[test]
fn history_matches_brute_force_oracle() {
    let mut r = rng(7);
    for trial in 0..12 {
        let (m, n) = (4, 3);
        let t = r.random_range(2 * m + n..=100);
        let (store, enc) = history_setup(100 + trial, 5, 4, m, n);
        let x = random_matrix(&mut r, t, 5, 1.0);
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let out = enc.forward(&mut g, xv).unwrap();
        let (e, a) = history_oracle(&rows(&x), m, n, &kernels(&store, &enc));
        let got = g.value(out.e_hist);
        for (rr, er) in e.iter().enumerate() {
            for (c, v) in er.iter().enumerate() {
                assert!((got.at(rr, c) - v).abs() < 1e-9, "T={t}");
            }
        }
        let w = g.value(out.weights).data();
        assert_eq!(w.len(), a.len());
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(w.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn conv_window_oracle_agrees_with_graph_conv() {
    let mut r = rng(8);
    let mut store = ParamStore::<f64>::new();
    let k = store.add("k", Tensor::new(vec![3, 4, 2], (0..24).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()).unwrap();
    let x = random_matrix(&mut r, 6, 4, 1.0);
    let mut g = Graph::new(&store);
    let (xv, kv) = (g.constant(x.clone()), g.param(k));
    let y = g.conv1d(xv, kv).unwrap();
    let o = conv_window(&rows(&x), 0, 6, store.value(k).data(), &[0.0, 0.0], 3, 2);
    for (rr, row) in o.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            assert!((g.value(y).at(rr, c) - v).abs() < 1e-12);
        }
    }
}

#[test]
fn minimal_history_has_one_window() {
    let (m, n) = (3, 2);
    let (store, enc) = history_setup(9, 4, 3, m, n);
    let mut r = rng(9);
    let x = random_matrix(&mut r, 2 * m + n, 4, 1.0);
    let mut g = Graph::new(&store);
    let xv = g.constant(x.clone());
    let out = enc.forward(&mut g, xv).unwrap();
    assert_eq!(g.value(out.weights).data(), &[1.0]);
    let kern = kernels(&store, &enc);
    let v = conv_window(&rows(&x), m, n, kern.v.0, kern.v.1, 3, 3);
    for (rr, row) in v.iter().enumerate() {
        for (c, val) in row.iter().enumerate() {
            assert!((g.value(out.e_hist).at(rr, c) - val).abs() < 1e-12);
        }
    }
}

#[test]
fn short_history_is_rejected() {
    let (store, enc) = history_setup(10, 4, 3, 3, 2);
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::zeros(vec![7, 4]));
    assert!(matches!(
        enc.forward(&mut g, x),
        Err(DanceError::InsufficientHistory { need: 8, have: 7 })
    ));
}

#[test]
fn planted_repeat_is_retrieved() {
    for seed in 0..100 {
        let (got, want) = planted_trial(seed);
        assert_eq!(got, want, "seed {seed}");
    }
}

#[test]
fn history_gradient_matches_finite_differences() {
    let (mut store, enc) = history_setup(11, 4, 3, 3, 2);
    let mut r = rng(11);
    let xid = store.add("x", random_matrix(&mut r, 14, 4, 1.0)).unwrap();
    let w = random_matrix(&mut r, 2, 3, 1.0);
    let report = grad_check_with(&store, &GradCheckOptions::default(), |g| -> Result<_, DanceError> {
        let x = g.param(xid);
        let out = enc.forward(g, x)?;
        let wv = g.constant(w.clone());
        let p = g.mul(out.e_hist, wv)?;
        Ok(g.sum_all(p))
    })
    .unwrap();
    assert!(report.passes(1e-3), "{report:?}");
}

#[test]
fn rollout_cache_matches_graph_encoder() {
    let (m, n, d_in, d_out) = (4, 3, 6, 5);
    let mut r = rng(12);
    let mut store = ParamStore::<f32>::new();
    let enc = HistoryEncoder::new(&mut store, &mut r, "hist", m, n, 3, d_in, d_out).unwrap();
    let frames: Vec<Vec<f32>> = (0..60).map(|_| (0..d_in).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let mut cache = HistoryCache::new(&enc, &store);
    for cap in [usize::MAX, 25] {
        let mut cache2 = HistoryCache::new(&enc, &store);
        for (t, f) in frames.iter().enumerate() {
            cache2.push(f).unwrap();
            let len = t + 1;
            let span = len.min(cap);
            let got = cache2.embedding(cap);
            if span < 2 * m + n {
                assert!(got.is_none());
                continue;
            }
            let (e, a) = got.unwrap();
            let flat: Vec<f32> = frames[len - span..len].concat();
            let mut g = Graph::new(&store);
            let xv = g.constant(Tensor::matrix(span, d_in, flat).unwrap());
            let out = enc.forward(&mut g, xv).unwrap();
            for (x, y) in e.iter().zip(g.value(out.e_hist).data()) {
                assert!((x - y).abs() < 1e-4, "t={t} cap={cap}");
            }
            assert_eq!(a.len(), g.value(out.weights).len());
        }
    }
    cache.push(&frames[0]).unwrap();
    assert!(cache.push(&[0.0; 3]).is_err());
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 32,
        ffn: 48,
        n: 3,
        m: 3,
        w_ctx: 6,
        w_style: 5,
        mag_layer: 0,
        mag_beta: 0.5,
        tta_cap: 8,
        style_layers: 1,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

struct TinyInputs {
    music: Tensor<f64>,
    motion: Tensor<f64>,
    context: Tensor<f64>,
    history: Tensor<f64>,
    beats: BeatTrack,
}

fn tiny_inputs(cfg: &ModelConfig, seed: u64) -> TinyInputs {
    let mut r = rng(seed);
    let d = cfg.motion_dim();
    TinyInputs {
        music: random_matrix(&mut r, cfg.w_style, 32, 1.0),
        motion: random_matrix(&mut r, cfg.w_style, d, 1.0),
        context: random_matrix(&mut r, cfg.w_ctx, d, 1.0),
        history: random_matrix(&mut r, 2 * cfg.m + cfg.n + 4, d, 1.0),
        beats: BeatTrack::from_frames(cfg.w_ctx + cfg.n, &[1, 5, 8], 20),
    }
}

#[test]
fn generator_output_shapes_and_zero_head() {
    for fusion in [Fusion::Cln, Fusion::Mt] {
        for long in [Toggle::On, Toggle::Off] {
            let cfg = ModelConfig {
                fusion,
                long_history: long,
                ..tiny_config()
            };
            let (model, store) = DanceModel::init::<f64>(&cfg, 3).unwrap();
            let inp = tiny_inputs(&cfg, 4);
            let mut g = Graph::new(&store);
            let style = model.style(&mut g, inp.music, inp.motion).unwrap();
            let context = g.constant(inp.context);
            let e_hist = match &model.generator.history {
                Some(h) => {
                    let x = g.constant(inp.history);
                    Some(h.forward(&mut g, x).unwrap().e_hist)
                }
                None => None,
            };
            let out = model
                .generator
                .forward(&mut g, &StepInput { context, beats: &inp.beats, style, e_hist })
                .unwrap();
            assert_eq!(g.value(out.poses).shape(), &[3, 219]);
            assert_eq!(g.value(out.contact_logits).shape(), &[3, 2]);
            assert!(g.value(out.poses).data().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn generator_rejects_bad_beat_length() {
    let cfg = tiny_config();
    let (model, store) = DanceModel::init::<f64>(&cfg, 3).unwrap();
    let inp = tiny_inputs(&cfg, 4);
    let mut g = Graph::new(&store);
    let style = model.style(&mut g, inp.music, inp.motion).unwrap();
    let context = g.constant(inp.context);
    let beats = BeatTrack::from_frames(5, &[], 20);
    let r = model.generator.forward(&mut g, &StepInput { context, beats: &beats, style, e_hist: None });
    assert!(matches!(r, Err(DanceError::DimensionMismatch(_))));
}

#[test]
fn tiny_generator_gradient_matches_finite_differences() {
    let cfg = tiny_config();
    let (model, mut store) = DanceModel::init::<f64>(&cfg, 5).unwrap();
    let mut r = rng(6);
    randomize(&mut store, &mut r, 0.2);
    let inp = tiny_inputs(&cfg, 7);
    let target = random_matrix(&mut r, cfg.n, cfg.motion_dim(), 1.0);
    let opts = GradCheckOptions {
        max_coords_per_param: Some(6),
        ..GradCheckOptions::default()
    };
    let report = grad_check_with(&store, &opts, |g| -> Result<_, DanceError> {
        let style = model.style(g, inp.music.clone(), inp.motion.clone())?;
        let context = g.constant(inp.context.clone());
        let x = g.constant(inp.history.clone());
        let e_hist = Some(model.generator.history.as_ref().unwrap().forward(g, x)?.e_hist);
        let out = model.generator.forward(g, &StepInput { context, beats: &inp.beats, style, e_hist })?;
        let t = g.constant(target.clone());
        let d = g.sub(out.poses, t)?;
        let l = g.row_norm(d);
        let l = g.sum_all(l);
        let c = g.sigmoid(out.contact_logits);
        let c = g.sum_all(c);
        let total = g.add(l, c)?;
        // Keeps round-off in the differences well under the 1e-8 floor of
        // the relative error for parameters with structurally zero
        // gradients (attention key biases).
        Ok(g.scale(total, 1e-3))
    })
    .unwrap();
    assert!(report.passes(1e-3), "{report:?}");
    assert!(report.checked > 300);
}

#[test]
fn pad_motion_examples() {
    let x = Tensor::<f64>::matrix(3, 2, vec![1., 1., 2., 2., 3., 3.]).unwrap();
    let (p, mask) = pad_motion(&x, 2).unwrap();
    assert_eq!(p.data(), &[1., 1., 2., 2., 3., 3., 3., 3., 3., 3.]);
    assert_eq!(mask, vec![0, 0, 0, 1, 1]);
    let (p, mask) = pad_motion(&x, 0).unwrap();
    assert_eq!(p, x);
    assert_eq!(mask, vec![0, 0, 0]);
    let a = Tensor::<f64>::matrix(1, 2, vec![4., 5.]).unwrap();
    assert_eq!(pad_motion(&a, 3).unwrap().0.data(), &[4., 5., 4., 5., 4., 5., 4., 5.]);
}

#[test]
fn equal_tta_values_share_beat_embeddings() {
    let cfg = tiny_config();
    let (model, store) = DanceModel::init::<f64>(&cfg, 8).unwrap();
    let mut g = Graph::new(&store);
    let e = model.generator.beat_embed.forward(&mut g, &[3, 5, 3, 8]).unwrap();
    let v = g.value(e);
    assert_eq!(v.row(0), v.row(2));
    assert_ne!(v.row(0), v.row(1));
}

#[test]
fn style_encoders_shapes_determinism_and_parity() {
    let cfg = tiny_config();
    let (model, store) = DanceModel::init::<f64>(&cfg, 9).unwrap();
    let inp = tiny_inputs(&cfg, 10);
    let run = || {
        let mut g = Graph::new(&store);
        let m = g.constant(inp.music.clone());
        let hm = model.music.forward(&mut g, m).unwrap();
        let x = g.constant(inp.motion.clone());
        let hx = model.motion.forward(&mut g, x).unwrap();
        (g.value(hm).clone(), g.value(hx).clone())
    };
    let (a, b) = run();
    assert_eq!(a.shape(), &[cfg.w_style, cfg.d_model]);
    assert_eq!(b.shape(), &[cfg.w_style, cfg.d_model]);
    assert_eq!(run(), (a, b));
    let music = store.num_scalars_with_prefix("style.music.") - model.music.input.num_scalars();
    let motion = store.num_scalars_with_prefix("style.motion.") - model.motion.input.num_scalars();
    assert_eq!(music, motion);

    let mut g = Graph::new(&store);
    let short = g.constant(Tensor::zeros(vec![cfg.w_style - 1, 32]));
    assert!(matches!(model.music.forward(&mut g, short), Err(DanceError::BadLength { .. })));
}

#[test]
fn style_embedding_is_the_sum_of_encoder_outputs() {
    let cfg = tiny_config();
    let (model, mut store) = DanceModel::init::<f64>(&cfg, 11).unwrap();
    let inp = tiny_inputs(&cfg, 12);
    for id in [model.motion.norm.gamma, model.motion.norm.beta] {
        store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut g = Graph::new(&store);
    let h = model.style(&mut g, inp.music.clone(), inp.motion.clone()).unwrap();
    let m = g.constant(inp.music);
    let hm = model.music.forward(&mut g, m).unwrap();
    assert_eq!(g.value(h), g.value(hm));
}

#[test]
fn triplet_values() {
    assert_eq!(triplet_hinge(1.0, 3.0, 1.0), 0.0);
    assert_eq!(triplet_hinge(2.0, 1.0, 0.5), 1.5);
    assert_eq!(triplet_hinge(0.0, 0.7, 0.0), 0.0);
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let a = g.constant(Tensor::row_vector(vec![0.0, 0.0]));
    let p = g.constant(Tensor::row_vector(vec![2.0, 0.0]));
    let n = g.constant(Tensor::row_vector(vec![0.0, 1.0]));
    let l = triplet_loss(&mut g, a, p, n, 0.5).unwrap();
    assert!((g.value(l).item() - 1.5).abs() < 1e-12);
    let l = triplet_loss(&mut g, a, a, n, 0.0).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn triplet_gradient_matches_finite_differences() {
    let cfg = tiny_config();
    let (model, mut store) = DanceModel::init::<f64>(&cfg, 13).unwrap();
    let mut r = rng(14);
    randomize(&mut store, &mut r, 0.3);
    let xs: Vec<Tensor<f64>> = (0..3).map(|_| random_matrix(&mut r, cfg.w_style, 32, 1.0)).collect();
    let opts = GradCheckOptions {
        max_coords_per_param: Some(8),
        ..GradCheckOptions::default()
    };
    let objective = |g: &mut Graph<'_, f64>| -> Result<_, DanceError> {
        let pooled: Vec<_> = xs
            .iter()
            .map(|x| {
                let v = g.constant(x.clone());
                let h = model.music.forward(g, v)?;
                Ok(g.mean_rows(h))
            })
            .collect::<Result<_, DanceError>>()?;
        triplet_loss(g, pooled[0], pooled[1], pooled[2], 5.0)
    };
    {
        let mut g = Graph::new(&store);
        let l = objective(&mut g).unwrap();
        assert!(g.value(l).item() > 0.0, "hinge must be active");
    }
    let report = grad_check_with(&store, &opts, objective).unwrap();
    assert!(report.passes(1e-3), "{report:?}");
}

#[test]
fn checkpoint_round_trip_rebuilds_model() {
    let cfg = Config::toy();
    let (model, store) = DanceModel::init::<f32>(&cfg.model, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.rdck");
    model.save(&path, &store, &cfg, 1).unwrap();
    let (_, loaded, cfg2, header) = DanceModel::load(&path).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(header.config_hash, cfg.hash());
    for (a, b) in store.ids().zip(loaded.ids()) {
        assert_eq!(store.value(a), loaded.value(b));
    }
}
