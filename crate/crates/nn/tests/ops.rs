use dance_nn::layers::{sinusoidal_positions, Conv1d, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use dance_nn::{grad_check, AdamConfig, Graph, GradCheckOptions, Gradients, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::full(vec![1, 5], 3.7));
    let y = g.softmax(x);
    for &v in g.value(y).data() {
        assert!((v - 0.2).abs() < 1e-12);
    }
}

#[test]
fn matmul_with_identity_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let a = random_matrix(&mut rng, 4, 3);
    let i = g.constant(Tensor::eye(4));
    let av = g.constant(a.clone());
    let y = g.matmul(i, av).unwrap();
    assert_eq!(g.value(y), &a);
}

#[test]
fn matmul_rejects_bad_shapes() {
    let store = ParamStore::<f32>::new();
    let mut g = Graph::new(&store);
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    assert!(g.matmul(a, b).is_err());
}

#[test]
fn layer_norm_hand_values() {
    let mut store = ParamStore::<f64>::new();
    let ln = LayerNorm::new(&mut store, "ln", 2, 0.0).unwrap();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::row_vector(vec![1.0, 3.0]));
    let y = ln.forward(&mut g, x).unwrap();
    assert_eq!(g.value(y).data(), &[-1.0, 1.0]);
}

#[test]
fn layer_norm_of_constant_input_is_beta() {
    let mut store = ParamStore::<f64>::new();
    let ln = LayerNorm::new(&mut store, "ln", 4, 1e-5).unwrap();
    store.value_mut(ln.beta).data_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.0]);
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::full(vec![3, 4], 7.25));
    let y = ln.forward(&mut g, x).unwrap();
    for r in 0..3 {
        assert_eq!(g.value(y).row(r), &[0.5, -1.0, 2.0, 0.0]);
    }
}

#[test]
fn layer_norm_output_moments_follow_gamma_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let ln = LayerNorm::new(&mut store, "ln", 64, 1e-12).unwrap();
    store.value_mut(ln.gamma).data_mut().fill(-2.5);
    store.value_mut(ln.beta).data_mut().fill(0.75);
    let mut g = Graph::new(&store);
    let x = g.constant(random_matrix(&mut rng, 5, 64));
    let y = ln.forward(&mut g, x).unwrap();
    for r in 0..5 {
        let row = g.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 64.0;
        let std = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0).sqrt();
        assert!((mean - 0.75).abs() < 1e-4);
        assert!((std - 2.5).abs() < 1e-4);
    }
}

#[test]
fn conv1d_with_identity_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_matrix(&mut rng, 6, 3);
    let mut kernel = Tensor::<f64>::zeros(vec![1, 3, 3]);
    for i in 0..3 {
        kernel.data_mut()[i * 3 + i] = 1.0;
    }
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let xv = g.constant(x.clone());
    let k = g.constant(kernel);
    let y = g.conv1d(xv, k).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

/// Direct definition: out[t,o] = sum_j sum_c x[t+j-p, c] K[j,c,o].
fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>) -> Vec<f64> {
    let (w, d_in, d_out) = (k.shape()[0], k.shape()[1], k.shape()[2]);
    let t_len = x.rows();
    let p = (w / 2) as isize;
    let mut out = vec![0.0; t_len * d_out];
    for t in 0..t_len as isize {
        for j in 0..w as isize {
            let s = t + j - p;
            if s < 0 || s >= t_len as isize {
                continue;
            }
            for c in 0..d_in {
                for o in 0..d_out {
                    out[t as usize * d_out + o] += x.at(s as usize, c) * k.data()[(j as usize * d_in + c) * d_out + o];
                }
            }
        }
    }
    out
}

#[test]
fn conv1d_matches_direct_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_matrix(&mut rng, 9, 4);
    let k = random_matrix(&mut rng, 5 * 4, 3).reshape(vec![5, 4, 3]).unwrap();
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let xv = g.constant(x.clone());
    let kv = g.constant(k.clone());
    let y = g.conv1d(xv, kv).unwrap();
    let oracle = conv_oracle(&x, &k);
    for (a, b) in g.value(y).data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn conv1d_rejects_even_width() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::zeros(vec![4, 2]));
    let k = g.constant(Tensor::zeros(vec![2, 2, 2]));
    assert!(g.conv1d(x, k).is_err());
}

#[test]
fn avg_pool_over_time_is_column_mean() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
    let y = g.mean_rows(x);
    assert_eq!(g.value(y).data(), &[2.0, 3.0]);
}

#[test]
fn conv1d_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", random_matrix(&mut rng, 7, 3)).unwrap();
    let conv = Conv1d::new(&mut store, &mut rng, "conv", 3, 3, 4).unwrap();
    let target = random_matrix(&mut rng, 7, 4);
    let report = grad_check(&store, &GradCheckOptions::default(), |g| {
        let xv = g.param(x);
        let y = conv.forward(g, xv)?;
        let t = g.constant(target.clone());
        let d = g.mul(y, t)?;
        let d = g.gelu(d);
        Ok(g.sum_all(d))
    })
    .unwrap();
    assert!(report.passes(1e-3), "{report:?}");
}

#[test]
fn single_position_attention_returns_value_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f64>::new();
    let mha = MultiHeadAttention::new(&mut store, &mut rng, "mha", 8, 2).unwrap();
    let x = random_matrix(&mut rng, 1, 8);
    let mut g = Graph::new(&store);
    let xv = g.constant(x);
    let out = mha.forward(&mut g, xv, xv, false, 0.0).unwrap();
    let v = mha.value.forward(&mut g, xv).unwrap();
    let expected = mha.output.forward(&mut g, v).unwrap();
    let diff = g.value(out).max_abs_diff(g.value(expected)).unwrap();
    assert!(diff < 1e-12);
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    assert!(MultiHeadAttention::new(&mut store, &mut rng, "mha", 10, 3).is_err());
}

#[test]
fn attention_rows_sum_to_one_and_causal_mask_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f64>::new();
    let mha = MultiHeadAttention::new(&mut store, &mut rng, "mha", 12, 3).unwrap();
    let x = random_matrix(&mut rng, 6, 12);
    let mut g = Graph::new(&store);
    let xv = g.constant(x);
    let out = mha.forward_with_weights(&mut g, xv, xv, true, 0.0).unwrap();
    for &w in &out.weights {
        let w = g.value(w);
        for r in 0..6 {
            let s: f64 = w.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            for c in (r + 1)..6 {
                assert!(w.at(r, c) < 1e-12);
            }
        }
    }
}

#[test]
fn attention_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", random_matrix(&mut rng, 5, 8)).unwrap();
    let mha = MultiHeadAttention::new(&mut store, &mut rng, "mha", 8, 2).unwrap();
    let target = random_matrix(&mut rng, 5, 8);
    let report = grad_check(&store, &GradCheckOptions::default(), |g| {
        let xv = g.param(x);
        let y = mha.forward(g, xv, xv, false, 0.0)?;
        let t = g.constant(target.clone());
        let d = g.sub(y, t)?;
        let n = g.row_norm(d);
        Ok(g.sum_all(n))
    })
    .unwrap();
    assert!(report.passes(1e-3), "{report:?}");
}

#[test]
fn mlp_with_gelu_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::<f64>::new();
    let x = random_matrix(&mut rng, 4, 6);
    let l1 = Linear::new(&mut store, &mut rng, "l1", 6, 16).unwrap();
    let l2 = Linear::new(&mut store, &mut rng, "l2", 16, 3).unwrap();
    for id in [l1.bias, l2.bias] {
        for v in store.value_mut(id).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let report = grad_check(&store, &GradCheckOptions::default(), |g| {
        let xv = g.constant(x.clone());
        let h = l1.forward(g, xv)?;
        let h = g.gelu(h);
        let y = l2.forward(g, h)?;
        let s = g.softmax(y);
        let s = g.mul(s, s)?;
        Ok(g.mean_all(s))
    })
    .unwrap();
    assert!(report.passes(1e-3), "{report:?}");
    assert_eq!(report.checked, store.num_scalars());
}

#[test]
fn feed_forward_and_layer_norm_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", random_matrix(&mut rng, 4, 8)).unwrap();
    let ln = LayerNorm::new(&mut store, "ln", 8, 1e-5).unwrap();
    let ff = FeedForward::new(&mut store, &mut rng, "ff", 8, 12).unwrap();
    let pos = sinusoidal_positions::<f64>(4, 8);
    let report = grad_check(&store, &GradCheckOptions::default(), |g| {
        let xv = g.param(x);
        let p = g.constant(pos.clone());
        let xv = g.add(xv, p)?;
        let n = ln.forward(g, xv)?;
        let y = ff.forward(g, n, 0.0)?;
        let y = g.mul(y, xv)?;
        let m = g.mean_rows(y);
        Ok(g.sum_all(m))
    })
    .unwrap();
    assert!(report.passes(1e-3), "{report:?}");
}

#[test]
fn structural_ops_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", random_matrix(&mut rng, 6, 4)).unwrap();
    let b = store.add("b", random_matrix(&mut rng, 1, 4)).unwrap();
    let c = store.add("c", random_matrix(&mut rng, 6, 1)).unwrap();
    let report = grad_check(&store, &GradCheckOptions::default(), |g| {
        let (av, bv, cv) = (g.param(a), g.param(b), g.param(c));
        let x = g.add(av, bv)?;
        let d = g.scale(cv, 0.5);
        let d = g.sigmoid(d);
        let x = g.div(x, d)?;
        let top = g.slice_rows(x, 0, 3)?;
        let bottom = g.slice_rows(x, 3, 3)?;
        let left = g.slice_cols(top, 0, 2)?;
        let stacked = g.concat_cols(&[left, bottom])?;
        let t = g.transpose(stacked);
        let extra = g.slice_rows(t, 1, 2)?;
        let rows = g.concat_rows(&[t, extra])?;
        let emb = g.gather(rows, &[0, 2, 2, 5])?;
        let w = g.window_sum(emb, 1, 2, 2)?;
        let clipped = g.clamp(w, -50.0, 50.0);
        let n = g.row_norm(clipped);
        Ok(g.sum_all(n))
    })
    .unwrap();
    assert!(report.passes(1e-3), "{report:?}");
}

#[test]
fn grad_check_of_square_at_three() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Tensor::scalar(3.0)).unwrap();
    let report = grad_check(&store, &GradCheckOptions::default(), |g| {
        let v = g.param(x);
        g.mul(v, v)
    })
    .unwrap();
    let worst = report.worst.clone().unwrap();
    assert!((worst.analytic - 6.0).abs() < 1e-12);
    assert!((worst.numeric - 6.0).abs() < 1e-6);
    assert!(report.max_rel_error < 1e-8);
}

#[test]
fn grad_check_flags_the_kink_of_abs() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Tensor::scalar(0.0)).unwrap();
    let report = grad_check(&store, &GradCheckOptions::default(), |g| {
        let v = g.param(x);
        Ok(g.abs(v))
    })
    .unwrap();
    assert_eq!(report.kinks.len(), 1);
    assert!(!report.passes(1e-3));
}

#[test]
fn adam_leaves_parameters_alone_for_zero_gradient() {
    let mut store = ParamStore::<f32>::new();
    let x = store.add("x", Tensor::row_vector(vec![1.0, -2.0])).unwrap();
    let mut grads = Gradients::empty(store.len());
    grads.set(x, Tensor::zeros(vec![1, 2]));
    store.adam_step(&grads, 0.1, &AdamConfig::default()).unwrap();
    assert_eq!(store.value(x).data(), &[1.0, -2.0]);
    assert_eq!(store.step(), 1);
    store.adam_step(&grads, 0.1, &AdamConfig::default()).unwrap();
    assert_eq!(store.step(), 2);
}

#[test]
fn adam_minimizes_a_parabola() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("theta", Tensor::scalar(1.0)).unwrap();
    for _ in 0..200 {
        let grads = {
            let mut g = Graph::new(&store);
            let v = g.param(x);
            let f = g.mul(v, v).unwrap();
            g.backward(f).unwrap()
        };
        store.adam_step(&grads, 0.1, &AdamConfig::default()).unwrap();
    }
    assert!(store.value(x).item().abs() < 0.05, "{}", store.value(x).item());
}

#[test]
fn adam_rejects_non_finite_gradient_without_mutation() {
    let mut store = ParamStore::<f32>::new();
    let x = store.add("x", Tensor::scalar(1.0)).unwrap();
    let mut grads = Gradients::empty(1);
    grads.set(x, Tensor::scalar(f32::NAN));
    assert!(store.adam_step(&grads, 0.1, &AdamConfig::default()).is_err());
    assert_eq!(store.value(x).item(), 1.0);
    assert_eq!(store.step(), 0);
}

#[test]
fn dropout_is_identity_in_eval_and_seeded_in_training() {
    use dance_nn::DropoutKey;
    let store = ParamStore::<f32>::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::ones(vec![4, 8]));
    let y = g.dropout(x, 0.5).unwrap();
    assert_eq!(x, y);
    let key = DropoutKey { seed: 1, step: 2, stream: 3 };
    let run = || {
        let mut g = Graph::new(&store).with_dropout(key);
        let x = g.constant(Tensor::ones(vec![4, 8]));
        let y = g.dropout(x, 0.5).unwrap();
        g.value(y).clone()
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a.data().iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn validate_reports_non_finite_nodes() {
    let store = ParamStore::<f32>::new();
    let mut g = Graph::new(&store);
    let a = g.constant(Tensor::scalar(1.0));
    let z = g.constant(Tensor::scalar(0.0));
    g.div(a, z).unwrap();
    assert!(g.validate().is_err());
}

#[test]
fn checkpoint_round_trip_preserves_names_shapes_and_values() {
    use dance_nn::checkpoint::{decode_checkpoint, encode_checkpoint};
    use dance_nn::CheckpointMeta;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::<f32>::new();
    Linear::new(&mut store, &mut rng, "a", 3, 4).unwrap();
    Conv1d::new(&mut store, &mut rng, "c", 3, 2, 2).unwrap();
    store.set_step(17);
    let meta = CheckpointMeta {
        seed: 5,
        config_hash: "abc".into(),
        threads: 1,
        config: serde_json::json!({"layers": 2}),
    };
    let bytes = encode_checkpoint(&store, &meta).unwrap();
    let (back, header) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(header.step, 17);
    assert_eq!(header.seed, 5);
    assert_eq!(back.len(), store.len());
    for id in store.ids() {
        assert_eq!(back.name(id), store.name(id));
        assert_eq!(back.value(id), store.value(id));
    }
    assert_eq!(encode_checkpoint(&back, &meta).unwrap(), bytes);
    assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_checkpoint(&bad).is_err());
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(xs in proptest::collection::vec(-10.0f64..10.0, 1..12), c in -100.0f64..100.0) {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::row_vector(xs.clone()));
        let shifted = g.constant(Tensor::row_vector(xs.iter().map(|v| v + c).collect()));
        let a = g.softmax(x);
        let b = g.softmax(shifted);
        let diff = g.value(a).max_abs_diff(g.value(b)).unwrap();
        prop_assert!(diff < 1e-6);
        let s: f64 = g.value(a).data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
    }
}
