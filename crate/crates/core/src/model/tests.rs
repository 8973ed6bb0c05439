use super::*;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn random_features(config: &ModelConfig, seed: u64) -> Vec<FrameFeatures> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..config.window_len)
        .map(|_| FrameFeatures {
            mdct_grid: Array2::from_shape_simple_fn((32, 18), || rng.random_range(-2.0..2.0f32)),
            scalefac_grid: Array2::from_shape_simple_fn((5, 12), || rng.random_range(0.0..4.0f32)),
            scalars: std::array::from_fn(|_| rng.random_range(-1.5..1.5f32)),
        })
        .collect()
}

#[test]
fn positional_encoding_rows_distinct_and_bounded() {
    let pe = positional_encoding(20, 300);
    for v in pe.iter() {
        assert!((-1.0..=1.0).contains(v));
    }
    for a in 0..20 {
        for b in a + 1..20 {
            let diff: f64 = (0..300).map(|j| (pe[(a, j)] - pe[(b, j)]).abs()).sum();
            assert!(diff > 1e-6, "rows {a} and {b} coincide");
        }
    }
}

#[test]
fn forward_has_probability_rows() {
    let config = ModelConfig::reduced();
    let model = Model::new(ModelParameters::init(&config, 3).unwrap()).unwrap();
    let features = random_features(&config, 5);
    let probs = model.forward(&features, None).unwrap();
    assert_eq!(probs.shape(), [config.window_len, 2]);
    for row in probs.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn eval_forward_is_deterministic() {
    let config = ModelConfig::reduced();
    let model = Model::new(ModelParameters::init(&config, 11).unwrap()).unwrap();
    let features = random_features(&config, 7);
    let a = model.forward(&features, None).unwrap();
    let b = model.forward(&features, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn train_mode_dropout_depends_only_on_seed() {
    let config = ModelConfig::reduced();
    let model = Model::new(ModelParameters::init(&config, 11).unwrap()).unwrap();
    let features = random_features(&config, 7);
    let mut r1 = ChaCha20Rng::seed_from_u64(42);
    let mut r2 = ChaCha20Rng::seed_from_u64(42);
    let mut r3 = ChaCha20Rng::seed_from_u64(43);
    let a = model.forward(&features, Some(&mut r1)).unwrap();
    let b = model.forward(&features, Some(&mut r2)).unwrap();
    let c = model.forward(&features, Some(&mut r3)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn assembled_input_is_2l_by_d_with_interleaved_tokens() {
    let config = ModelConfig::reduced();
    let mut params = ModelParameters::init(&config, 0).unwrap();
    // Zero every weight, then give the class tokens recognizable values.
    params.visit_mut(|_, slice| slice.fill(0.0));
    for l in 0..config.window_len {
        for j in 0..config.d_model {
            params.class_tokens[(l, j)] = (100 * (l + 1) + j) as f64;
        }
    }
    let model = Model::new(params.clone()).unwrap();

    // Zero features make every z_l zero, so odd rows must equal the
    // positional encoding and even rows the class tokens.
    let zero_features: Vec<FrameFeatures> = (0..config.window_len)
        .map(|_| FrameFeatures {
            mdct_grid: Array2::zeros((32, 18)),
            scalefac_grid: Array2::zeros((5, 12)),
            scalars: [0.0; 18],
        })
        .collect();
    let assembled = assemble_input(&model, &zero_features).unwrap();
    assert_eq!(assembled.shape(), [2 * config.window_len, config.d_model]);
    let pe = positional_encoding(config.window_len, config.d_model);
    for l in 0..config.window_len {
        for j in 0..config.d_model {
            assert_eq!(assembled[(2 * l, j)], params.class_tokens[(l, j)]);
            assert!((assembled[(2 * l + 1, j)] - pe[(l, j)]).abs() < 1e-12);
        }
    }
}

#[test]
fn permuting_frames_changes_assembly_when_pe_is_active() {
    let config = ModelConfig::reduced();
    let model = Model::new(ModelParameters::init(&config, 9).unwrap()).unwrap();
    let features = random_features(&config, 21);
    let mut permuted = features.clone();
    permuted.swap(0, 3);
    permuted.swap(1, 2);
    let a = assemble_input(&model, &features).unwrap();
    let b = assemble_input(&model, &permuted).unwrap();
    assert_ne!(a, b);
}

#[test]
fn identical_tokens_without_pe_make_token_outputs_permutation_invariant() {
    // Pure self-attention sees the frame vectors as a multiset: with all
    // class tokens equal and no positional signal, permuting the frames
    // cannot change any class-token output.
    let config = ModelConfig::reduced();
    let mut params = ModelParameters::init(&config, 13).unwrap();
    let token = params.class_tokens.row(0).to_owned();
    for mut row in params.class_tokens.rows_mut() {
        row.assign(&token);
    }
    let geom = super::net::Geometry::new(&config);
    let pe_zero = Array2::zeros((config.window_len, config.d_model));

    let features = random_features(&config, 31);
    let mut permuted = features.clone();
    permuted.rotate_left(2);

    let run = |feats: &[FrameFeatures]| -> Array2<f64> {
        let input = WindowInput::from_features(feats, config.n_scalars);
        let mut tape = Tape::new();
        let graph = super::net::build_graph(
            &mut tape,
            &params,
            &geom,
            &pe_zero,
            &input,
            DropoutPlan { rate: 0.0, rng: None },
        );
        tape.value(graph.probs)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned()
    };
    let a = run(&features);
    let b = run(&permuted);
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - y).abs() < 1e-9, "{x} vs {y}");
    }
}

#[test]
fn msa_preserves_shape_across_valid_configs() {
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    for (n, d, h) in [(3usize, 8usize, 2usize), (5, 12, 3), (4, 12, 4), (7, 10, 5)] {
        let z = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0));
        let u_qkv = Array2::from_shape_simple_fn((d, 3 * d), || rng.random_range(-0.5..0.5));
        let u_msa = Array2::from_shape_simple_fn((d, d), || rng.random_range(-0.5..0.5));
        let out = multi_head_self_attention(&z, &u_qkv, &u_msa, h);
        assert_eq!(out.shape(), z.shape());
    }
}

#[test]
fn single_head_msa_with_identity_projection_equals_self_attention() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let (n, d) = (4usize, 6usize);
    let z = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0));
    let u_qkv = Array2::from_shape_simple_fn((d, 3 * d), || rng.random_range(-0.5..0.5));
    let sa = self_attention(&z, &u_qkv, d);
    let msa = multi_head_self_attention(&z, &u_qkv, &Array2::eye(d), 1);
    for (a, b) in sa.iter().zip(msa.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn self_attention_on_single_element_returns_v() {
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let d = 5usize;
    let d_h = 3usize;
    let z = Array2::from_shape_simple_fn((1, d), || rng.random_range(-1.0..1.0));
    let u_qkv = Array2::from_shape_simple_fn((d, 3 * d_h), || rng.random_range(-1.0..1.0));
    let out = self_attention(&z, &u_qkv, d_h);
    let v = z.dot(&u_qkv.slice(ndarray::s![.., 2 * d_h..]).to_owned());
    for (a, b) in out.iter().zip(v.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn cnn_outputs_have_configured_lengths() {
    let config = ModelConfig::full();
    let params = ModelParameters::init(&config, 1).unwrap();
    let grid1 = Array2::from_shape_fn((32, 18), |(i, j)| ((i * 18 + j) as f64 * 0.01).sin());
    let grid2 = Array2::from_shape_fn((5, 12), |(i, j)| ((i * 12 + j) as f64 * 0.1).cos());
    assert_eq!(cnn_forward(&params, &grid1, 1, None).unwrap().len(), 233);
    assert_eq!(cnn_forward(&params, &grid2, 2, None).unwrap().len(), 49);
}

#[test]
fn cnn_zero_weights_zero_input_gives_zero_output() {
    let config = ModelConfig::reduced();
    let mut params = ModelParameters::init(&config, 1).unwrap();
    params.visit_mut(|name, slice| {
        if name.starts_with("cnn") {
            slice.fill(0.0);
        }
    });
    let out = cnn_forward(&params, &Array2::zeros((32, 18)), 1, None).unwrap();
    assert!(out.iter().all(|&v| v == 0.0));
}

#[test]
fn cnn_eval_is_deterministic() {
    let config = ModelConfig::reduced();
    let params = ModelParameters::init(&config, 4).unwrap();
    let grid = Array2::from_shape_fn((5, 12), |(i, j)| (i as f64 - j as f64) * 0.2);
    let a = cnn_forward(&params, &grid, 2, None).unwrap();
    let b = cnn_forward(&params, &grid, 2, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn predict_labels_argmax_with_tie_to_zero() {
    let probs = ndarray::arr2(&[[0.9, 0.1], [0.5, 0.5], [0.2, 0.8]]);
    assert_eq!(predict_labels(&probs), vec![0, 0, 1]);
}

#[test]
fn wrong_window_length_is_a_shape_error() {
    let config = ModelConfig::reduced();
    let model = Model::new(ModelParameters::init(&config, 2).unwrap()).unwrap();
    let features = random_features(&config, 1);
    let err = model.forward(&features[..2], None);
    assert!(matches!(err, Err(ModelError::ShapeMismatch(_))));
}
