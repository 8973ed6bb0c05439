//! Forward-pass agreement between the tape-built network and an
//! independent straight-line implementation, plus small brute-force checks
//! of the attention primitives.

#[path = "support/netref.rs"]
mod netref;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use splicetrace::features::FrameFeatures;
use splicetrace::model::{
    self, Model, ModelConfig, ModelParameters, multi_head_self_attention, self_attention,
};

fn random_window(config: &ModelConfig, seed: u64) -> Vec<FrameFeatures> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..config.window_len)
        .map(|_| FrameFeatures {
            mdct_grid: Array2::from_shape_simple_fn((32, 18), || rng.random_range(-2.0..2.0f32)),
            scalefac_grid: Array2::from_shape_simple_fn((5, 12), || rng.random_range(0.0..3.0f32)),
            scalars: std::array::from_fn(|_| rng.random_range(-1.5..1.5f32)),
        })
        .collect()
}

#[test]
fn forward_matches_straight_line_reference_on_ten_instances() {
    let config = ModelConfig::reduced();
    for seed in 0..10u64 {
        let params = ModelParameters::init(&config, 1000 + seed).unwrap();
        let model = Model::new(params.clone()).unwrap();
        let window = random_window(&config, 2000 + seed);

        let ours = model.forward(&window, None).unwrap();
        let reference = netref::forward(&params, &window);

        let mut max_diff = 0.0f64;
        for (l, row) in reference.iter().enumerate() {
            for c in 0..2 {
                max_diff = max_diff.max((ours[(l, c)] - row[c]).abs());
            }
        }
        assert!(
            max_diff < 1e-10,
            "instance {seed}: max probability deviation {max_diff:e}"
        );
    }
}

#[test]
fn self_attention_matches_brute_force_evaluation() {
    let (n, d_model, d_h) = (4usize, 12usize, 4usize);
    let mut rng = ChaCha20Rng::seed_from_u64(42);
    let z = Array2::from_shape_simple_fn((n, d_model), || rng.random_range(-1.0..1.0));
    let u_qkv = Array2::from_shape_simple_fn((d_model, 3 * d_h), || rng.random_range(-0.7..0.7));

    let ours = self_attention(&z, &u_qkv, d_h);

    // Straight-line evaluation: project, score, normalize, mix.
    let slice = |off: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                (0..d_h)
                    .map(|j| (0..d_model).map(|k| z[(i, k)] * u_qkv[(k, off + j)]).sum())
                    .collect()
            })
            .collect()
    };
    let (q, k, v) = (slice(0), slice(d_h), slice(2 * d_h));
    for i in 0..n {
        let mut scores: Vec<f64> = (0..n)
            .map(|j| {
                q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (d_h as f64).sqrt()
            })
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for c in 0..d_h {
            let expect: f64 = (0..n).map(|j| scores[j] / sum * v[j][c]).sum();
            assert!((ours[(i, c)] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn msa_matches_brute_force_on_small_instance() {
    let (n, d, h) = (5usize, 12usize, 3usize);
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let z = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0));
    let u_qkv = Array2::from_shape_simple_fn((d, 3 * d), || rng.random_range(-0.5..0.5));
    let u_msa = Array2::from_shape_simple_fn((d, d), || rng.random_range(-0.5..0.5));

    let ours = multi_head_self_attention(&z, &u_qkv, &u_msa, h);
    assert_eq!(ours.shape(), [n, d]);

    // Brute force: per head, slice the fused projection columns and run the
    // same three equations; concatenate; project.
    let d_head = d / h;
    let mut concat = vec![vec![0.0f64; d]; n];
    for head in 0..h {
        let slice = |off: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|i| {
                    (0..d_head)
                        .map(|j| {
                            (0..d)
                                .map(|k| z[(i, k)] * u_qkv[(k, off + head * d_head + j)])
                                .sum()
                        })
                        .collect()
                })
                .collect()
        };
        let (q, k, v) = (slice(0), slice(d), slice(2 * d));
        for i in 0..n {
            let mut scores: Vec<f64> = (0..n)
                .map(|j| {
                    q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>()
                        / (d_head as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for c in 0..d_head {
                concat[i][head * d_head + c] =
                    (0..n).map(|j| scores[j] / sum * v[j][c]).sum();
            }
        }
    }
    for i in 0..n {
        for j in 0..d {
            let expect: f64 = (0..d).map(|c| concat[i][c] * u_msa[(c, j)]).sum();
            assert!((ours[(i, j)] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn reference_agrees_on_overfit_sized_config_too() {
    // One instance of the larger preset guards the geometry code paths
    // (different CNN channel counts, 20-frame windows).
    let config = ModelConfig::overfit();
    let params = ModelParameters::init(&config, 5).unwrap();
    let model = Model::new(params.clone()).unwrap();
    let window = random_window(&config, 6);
    let ours = model.forward(&window, None).unwrap();
    let reference = netref::forward(&params, &window);
    for (l, row) in reference.iter().enumerate() {
        for c in 0..2 {
            assert!((ours[(l, c)] - row[c]).abs() < 1e-10);
        }
    }
}

#[test]
fn probabilities_are_normalized_everywhere() {
    let config = ModelConfig::reduced();
    let params = ModelParameters::init(&config, 77).unwrap();
    let model = Model::new(params).unwrap();
    for seed in 0..5 {
        let probs = model.forward(&random_window(&config, seed), None).unwrap();
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn assembled_input_shape_and_token_rows() {
    let config = ModelConfig::reduced();
    let params = ModelParameters::init(&config, 3).unwrap();
    let tokens = params.class_tokens.clone();
    let model = Model::new(params).unwrap();
    let window = random_window(&config, 4);
    let assembled = model::assemble_input(&model, &window).unwrap();
    assert_eq!(assembled.shape(), [2 * config.window_len, config.d_model]);
    for l in 0..config.window_len {
        for j in 0..config.d_model {
            assert_eq!(assembled[(2 * l, j)], tokens[(l, j)]);
        }
    }
}
