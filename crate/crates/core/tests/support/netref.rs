//! Straight-line reference implementation of the network forward pass,
//! written with plain nested loops over `Vec<f64>` and no shared code with
//! the tape engine. Dropout-free (evaluation mode).

use splicetrace::features::FrameFeatures;
use splicetrace::model::{ConvLayer, DenseLayer, ModelParameters};

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Channel-major feature map: maps[c][y][x].
type Maps = Vec<Vec<Vec<f64>>>;

fn conv3_same_gelu(input: &Maps, layer: &ConvLayer) -> Maps {
    let c_in = input.len();
    let h = input[0].len();
    let w = input[0][0].len();
    let c_out = layer.bias.len();
    let mut out = vec![vec![vec![0.0; w]; h]; c_out];
    for co in 0..c_out {
        for y in 0..h {
            for x in 0..w {
                let mut acc = layer.bias[co];
                for ci in 0..c_in {
                    for dy in 0..3i64 {
                        for dx in 0..3i64 {
                            let sy = y as i64 + dy - 1;
                            let sx = x as i64 + dx - 1;
                            if sy < 0 || sy >= h as i64 || sx < 0 || sx >= w as i64 {
                                continue;
                            }
                            let k = (dy * 3 + dx) as usize;
                            acc += input[ci][sy as usize][sx as usize]
                                * layer.weight[(ci * 9 + k, co)];
                        }
                    }
                }
                out[co][y][x] = gelu(acc);
            }
        }
    }
    out
}

fn maxpool_ceil(input: &Maps) -> Maps {
    let c = input.len();
    let h = input[0].len();
    let w = input[0][0].len();
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![vec![vec![0.0; w2]; h2]; c];
    for ci in 0..c {
        for y2 in 0..h2 {
            for x2 in 0..w2 {
                let mut best = f64::NEG_INFINITY;
                for y in 2 * y2..(2 * y2 + 2).min(h) {
                    for x in 2 * x2..(2 * x2 + 2).min(w) {
                        best = best.max(input[ci][y][x]);
                    }
                }
                out[ci][y2][x2] = best;
            }
        }
    }
    out
}

fn dense_gelu(input: &[f64], layer: &DenseLayer) -> Vec<f64> {
    let mut out = Vec::with_capacity(layer.bias.len());
    for j in 0..layer.bias.len() {
        let mut acc = layer.bias[j];
        for (i, v) in input.iter().enumerate() {
            acc += v * layer.weight[(i, j)];
        }
        out.push(gelu(acc));
    }
    out
}

fn dense(input: &[f64], layer: &DenseLayer) -> Vec<f64> {
    let mut out = Vec::with_capacity(layer.bias.len());
    for j in 0..layer.bias.len() {
        let mut acc = layer.bias[j];
        for (i, v) in input.iter().enumerate() {
            acc += v * layer.weight[(i, j)];
        }
        out.push(acc);
    }
    out
}

fn cnn(params: &splicetrace::model::CnnParams, grid: &[Vec<f64>]) -> Vec<f64> {
    let mut maps: Maps = vec![grid.to_vec()];
    for stage in 0..3 {
        maps = conv3_same_gelu(&maps, &params.convs[2 * stage]);
        maps = conv3_same_gelu(&maps, &params.convs[2 * stage + 1]);
        maps = maxpool_ceil(&maps);
    }
    let mut flat = Vec::new();
    for channel in &maps {
        for row in channel {
            flat.extend_from_slice(row);
        }
    }
    let h1 = dense_gelu(&flat, &params.fc1);
    dense_gelu(&h1, &params.fc2)
}

fn layer_norm(row: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    row.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) * inv * gamma[j] + beta[j])
        .collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Scaled dot-product attention of one head over the q/k/v column slices.
fn attention_head(
    rows: &[Vec<f64>],
    u_qkv: &ndarray::Array2<f64>,
    d: usize,
    d_head: usize,
    head: usize,
) -> Vec<Vec<f64>> {
    let n = rows.len();
    let project = |offset: usize| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|row| {
                (0..d_head)
                    .map(|j| {
                        let col = offset + head * d_head + j;
                        row.iter()
                            .enumerate()
                            .map(|(i, v)| v * u_qkv[(i, col)])
                            .sum()
                    })
                    .collect()
            })
            .collect()
    };
    let q = project(0);
    let k = project(d);
    let v = project(2 * d);
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut out = vec![vec![0.0; d_head]; n];
    for i in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|j| {
                q[i].iter()
                    .zip(&k[j])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    * scale
            })
            .collect();
        let weights = softmax(&scores);
        for (j, wj) in weights.iter().enumerate() {
            for c in 0..d_head {
                out[i][c] += wj * v[j][c];
            }
        }
    }
    out
}

/// Full forward pass of one window, evaluation mode, returning per-frame
/// class probabilities.
pub fn forward(params: &ModelParameters, window: &[FrameFeatures]) -> Vec<[f64; 2]> {
    let config = &params.config;
    let l = config.window_len;
    let d = config.d_model;
    assert_eq!(window.len(), l);

    // Frame vectors.
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(2 * l);
    let pe: Vec<Vec<f64>> = (0..l)
        .map(|pos| {
            (0..d)
                .map(|j| {
                    let angle =
                        pos as f64 / 10000f64.powf(2.0 * (j / 2) as f64 / d as f64);
                    if j % 2 == 0 {
                        angle.sin()
                    } else {
                        angle.cos()
                    }
                })
                .collect()
        })
        .collect();

    for (idx, frame) in window.iter().enumerate() {
        let grid1: Vec<Vec<f64>> = (0..32)
            .map(|y| (0..18).map(|x| f64::from(frame.mdct_grid[(y, x)])).collect())
            .collect();
        let grid2: Vec<Vec<f64>> = (0..5)
            .map(|y| (0..12).map(|x| f64::from(frame.scalefac_grid[(y, x)])).collect())
            .collect();
        let mut z = cnn(&params.cnn1, &grid1);
        z.extend(cnn(&params.cnn2, &grid2));
        for s in 0..config.n_scalars {
            z.push(f64::from(frame.scalars[s]));
        }
        assert_eq!(z.len(), d);
        let z_prime: Vec<f64> = z.iter().zip(&pe[idx]).map(|(a, b)| a + b).collect();
        rows.push((0..d).map(|j| params.class_tokens[(idx, j)]).collect());
        rows.push(z_prime);
    }

    // Transformer blocks (pre-norm, residual, GELU feed-forward).
    for block in &params.blocks {
        let normed: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                layer_norm(
                    r,
                    block.ln1_gamma.as_slice().unwrap(),
                    block.ln1_beta.as_slice().unwrap(),
                )
            })
            .collect();
        let d_head = config.d_head();
        let heads: Vec<Vec<Vec<f64>>> = (0..config.n_heads)
            .map(|h| attention_head(&normed, &block.u_qkv, d, d_head, h))
            .collect();
        for (i, row) in rows.iter_mut().enumerate() {
            let mut concat = Vec::with_capacity(d);
            for head in &heads {
                concat.extend_from_slice(&head[i]);
            }
            for j in 0..d {
                let mut acc = 0.0;
                for (c, v) in concat.iter().enumerate() {
                    acc += v * block.u_msa[(c, j)];
                }
                row[j] += acc;
            }
        }
        let normed2: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                layer_norm(
                    r,
                    block.ln2_gamma.as_slice().unwrap(),
                    block.ln2_beta.as_slice().unwrap(),
                )
            })
            .collect();
        for (i, row) in rows.iter_mut().enumerate() {
            let hidden = dense_gelu(&normed2[i], &block.ffn1);
            let out = dense(&hidden, &block.ffn2);
            for j in 0..d {
                row[j] += out[j];
            }
        }
    }

    // Final normalization, class-token rows, shared MLP head.
    (0..l)
        .map(|i| {
            let normed = layer_norm(
                &rows[2 * i],
                params.final_ln_gamma.as_slice().unwrap(),
                params.final_ln_beta.as_slice().unwrap(),
            );
            let hidden = dense_gelu(&normed, &params.head1);
            let logits = dense(&hidden, &params.head2);
            let p = softmax(&logits);
            [p[0], p[1]]
        })
        .collect()
}
