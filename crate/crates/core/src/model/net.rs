//! Tape-graph construction for the full network: batched CNN encoders,
//! class-token interleaving, transformer blocks and the MLP head.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array2, ArrayD, Ix2};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::params::{cnn_input_dims, cnn_stage_dims, ModelConfig, ModelParameters};
use super::tape::{Tape, Var};

/// Precomputed index maps for one CNN at a fixed batch size.
pub(crate) struct CnnGeom {
    batch: usize,
    /// Per conv layer: (h, w, c_in, c_out, im2col indices, to-map indices).
    convs: Vec<ConvGeom>,
    /// Per pool stage: (c, h, w) before pooling.
    pools: Vec<(usize, usize, usize)>,
    pub flat: usize,
}

struct ConvGeom {
    h: usize,
    w: usize,
    c_in: usize,
    c_out: usize,
    im2col: Arc<Vec<i32>>,
    to_map: Arc<Vec<i32>>,
}

fn im2col_indices(batch: usize, c_in: usize, h: usize, w: usize) -> Vec<i32> {
    let mut idx = Vec::with_capacity(batch * h * w * c_in * 9);
    for b in 0..batch {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                for ci in 0..c_in {
                    for dy in -1..=1i64 {
                        for dx in -1..=1i64 {
                            let (sy, sx) = (y + dy, x + dx);
                            if sy < 0 || sy >= h as i64 || sx < 0 || sx >= w as i64 {
                                idx.push(-1);
                            } else {
                                let flat = (b * c_in + ci) * h * w
                                    + sy as usize * w
                                    + sx as usize;
                                idx.push(flat as i32);
                            }
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Permutation from the matmul layout (batch*h*w, c_out) back to the
/// feature-map layout (batch*c_out, h*w).
fn to_map_indices(batch: usize, c_out: usize, hw: usize) -> Vec<i32> {
    let mut idx = Vec::with_capacity(batch * c_out * hw);
    for b in 0..batch {
        for co in 0..c_out {
            for p in 0..hw {
                idx.push(((b * hw + p) * c_out + co) as i32);
            }
        }
    }
    idx
}

impl CnnGeom {
    pub(crate) fn new(which: usize, channels: &[usize; 6], batch: usize) -> Self {
        let (h0, w0) = cnn_input_dims(which);
        let dims = cnn_stage_dims(h0, w0);
        let mut convs = Vec::with_capacity(6);
        let mut pools = Vec::with_capacity(3);
        let mut c_in = 1usize;
        for stage in 0..3 {
            let (h, w) = dims[stage];
            for conv_in_stage in 0..2 {
                let c_out = channels[stage * 2 + conv_in_stage];
                convs.push(ConvGeom {
                    h,
                    w,
                    c_in,
                    c_out,
                    im2col: Arc::new(im2col_indices(batch, c_in, h, w)),
                    to_map: Arc::new(to_map_indices(batch, c_out, h * w)),
                });
                c_in = c_out;
            }
            pools.push((c_in, h, w));
        }
        CnnGeom {
            batch,
            convs,
            pools,
            flat: c_in * dims[3].0 * dims[3].1,
        }
    }
}

/// Max-pool gather indices, chosen by the actual forward values (ties take
/// the first cell in scan order, which keeps everything deterministic).
fn pool_indices(value: &ArrayD<f64>, rows: usize, h: usize, w: usize) -> (Vec<i32>, usize, usize) {
    let v = value.view().into_dimensionality::<Ix2>().expect("pool input");
    assert_eq!(v.shape(), [rows, h * w]);
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    let mut idx = Vec::with_capacity(rows * h2 * w2);
    for r in 0..rows {
        for y2 in 0..h2 {
            for x2 in 0..w2 {
                let mut best = None::<(f64, usize)>;
                for y in 2 * y2..(2 * y2 + 2).min(h) {
                    for x in 2 * x2..(2 * x2 + 2).min(w) {
                        let p = y * w + x;
                        let val = v[(r, p)];
                        if best.map_or(true, |(bv, _)| val > bv) {
                            best = Some((val, p));
                        }
                    }
                }
                idx.push((r * h * w + best.unwrap().1) as i32);
            }
        }
    }
    (idx, h2, w2)
}

/// Dropout source: present only in train mode with a positive rate.
pub struct DropoutPlan<'r> {
    pub rate: f64,
    pub rng: Option<&'r mut ChaCha20Rng>,
}

impl DropoutPlan<'_> {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        let Some(rng) = self.rng.as_deref_mut() else {
            return x;
        };
        if self.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let shape = tape.value(x).raw_dim();
        let mask = ArrayD::from_shape_simple_fn(shape, || {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        tape.dropout(x, mask)
    }
}

/// Leaf handles of all parameters plus the graph outputs.
pub struct WindowGraph {
    /// (name, leaf) in parameter visit order.
    pub params: Vec<(String, Var)>,
    /// The assembled (2L, d_model) transformer input [c_1, z'_1, ...].
    pub assembled: Var,
    /// (L, 2) class probabilities.
    pub probs: Var,
}

/// The three input tensors of one window, flattened per frame and converted
/// to f64: mdct (L, 576), scalefactors (L, 60), scalars (L, n_scalars).
pub struct WindowInput {
    pub mdct: Array2<f64>,
    pub scalefac: Array2<f64>,
    pub scalars: Array2<f64>,
}

impl WindowInput {
    pub fn from_features(
        features: &[crate::features::FrameFeatures],
        n_scalars: usize,
    ) -> Self {
        let l = features.len();
        let mdct = Array2::from_shape_fn((l, 576), |(i, j)| {
            f64::from(features[i].mdct_grid.as_slice().unwrap()[j])
        });
        let scalefac = Array2::from_shape_fn((l, 60), |(i, j)| {
            f64::from(features[i].scalefac_grid.as_slice().unwrap()[j])
        });
        let scalars =
            Array2::from_shape_fn((l, n_scalars), |(i, j)| f64::from(features[i].scalars[j]));
        WindowInput {
            mdct,
            scalefac,
            scalars,
        }
    }
}

pub(crate) struct Geometry {
    pub cnn1: CnnGeom,
    pub cnn2: CnnGeom,
    /// Row order that interleaves [tokens; frames] into [c_1, z'_1, ...].
    pub interleave: Arc<Vec<i32>>,
    /// Extraction of the L class-token rows from the (2L, d) output.
    pub class_rows: Arc<Vec<i32>>,
}

impl Geometry {
    pub(crate) fn new(config: &ModelConfig) -> Self {
        let l = config.window_len;
        let d = config.d_model;
        let mut interleave = Vec::with_capacity(2 * l * d);
        for i in 0..l {
            for j in 0..d {
                interleave.push((i * d + j) as i32); // token row i
            }
            for j in 0..d {
                interleave.push(((l + i) * d + j) as i32); // frame row i
            }
        }
        let mut class_rows = Vec::with_capacity(l * d);
        for i in 0..l {
            for j in 0..d {
                class_rows.push(((2 * i) * d + j) as i32);
            }
        }
        Geometry {
            cnn1: CnnGeom::new(1, &config.cnn1_channels, l),
            cnn2: CnnGeom::new(2, &config.cnn2_channels, l),
            interleave: Arc::new(interleave),
            class_rows: Arc::new(class_rows),
        }
    }
}

struct CnnVars {
    convs: Vec<(Var, Var)>,
    fc1: (Var, Var),
    fc2: (Var, Var),
}

fn cnn_apply(
    tape: &mut Tape,
    geom: &CnnGeom,
    vars: &CnnVars,
    input: Var,
    dropout: &mut DropoutPlan<'_>,
) -> Var {
    let batch = geom.batch;
    let mut x = input; // (batch*1, h*w)
    let mut conv_iter = geom.convs.iter().zip(&vars.convs);
    for stage in 0..3 {
        for _ in 0..2 {
            let (g, (w_var, b_var)) = conv_iter.next().unwrap();
            let cols = tape.gather(x, g.im2col.clone(), &[batch * g.h * g.w, g.c_in * 9]);
            let mm = tape.matmul(cols, *w_var);
            let biased = tape.add_row(mm, *b_var);
            let act = tape.gelu(biased);
            x = tape.gather(act, g.to_map.clone(), &[batch * g.c_out, g.h * g.w]);
        }
        let (c, h, w) = geom.pools[stage];
        let (idx, h2, w2) = pool_indices(tape.value(x), batch * c, h, w);
        x = tape.gather(x, Arc::new(idx), &[batch * c, h2 * w2]);
    }
    let flat = tape.reshape(x, &[batch, geom.flat]);
    let fc1 = tape.matmul(flat, vars.fc1.0);
    let fc1 = tape.add_row(fc1, vars.fc1.1);
    let fc1 = tape.gelu(fc1);
    let fc1 = dropout.apply(tape, fc1);
    let fc2 = tape.matmul(fc1, vars.fc2.0);
    let fc2 = tape.add_row(fc2, vars.fc2.1);
    let fc2 = tape.gelu(fc2);
    dropout.apply(tape, fc2)
}

/// Multi-head self-attention on the tape: per-head slices of the fused
/// projection, scaled dot-product attention, concatenation, output
/// projection.
pub(crate) fn msa_apply(
    tape: &mut Tape,
    z: Var,
    u_qkv: Var,
    u_msa: Var,
    n_heads: usize,
    d_head: usize,
) -> Var {
    let d = n_heads * d_head;
    let qkv = tape.matmul(z, u_qkv);
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let q = tape.slice_cols(qkv, h * d_head, d_head);
        let k = tape.slice_cols(qkv, d + h * d_head, d_head);
        let v = tape.slice_cols(qkv, 2 * d + h * d_head, d_head);
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scaled = tape.scale(scores, 1.0 / (d_head as f64).sqrt());
        let attn = tape.softmax_rows(scaled);
        heads.push(tape.matmul(attn, v));
    }
    let cat = tape.concat_cols(&heads);
    tape.matmul(cat, u_msa)
}

/// Build the full forward graph of one window. Returns parameter leaves in
/// visit order plus the (L, 2) probability output.
pub fn build_graph(
    tape: &mut Tape,
    params: &ModelParameters,
    geom: &Geometry,
    pe: &Array2<f64>,
    input: &WindowInput,
    mut dropout: DropoutPlan<'_>,
) -> WindowGraph {
    let config = &params.config;
    let l = config.window_len;
    let d = config.d_model;
    assert_eq!(input.mdct.nrows(), l, "window length");
    assert_eq!(input.scalars.ncols(), config.n_scalars, "scalar width");

    // Parameter leaves in visit order, addressable by name.
    let mut param_vars: Vec<(String, Var)> = Vec::new();
    params.visit(|name, tensor| {
        let var = tape.leaf(tensor.clone());
        param_vars.push((name.to_string(), var));
    });
    let by_name: HashMap<&str, Var> = param_vars
        .iter()
        .map(|(n, v)| (n.as_str(), *v))
        .collect();
    let get = |name: &str| -> Var { *by_name.get(name).unwrap_or_else(|| panic!("{name}")) };
    let cnn_vars = |tag: &str| CnnVars {
        convs: (0..6)
            .map(|i| {
                (
                    get(&format!("{tag}.conv{i}.weight")),
                    get(&format!("{tag}.conv{i}.bias")),
                )
            })
            .collect(),
        fc1: (get(&format!("{tag}.fc1.weight")), get(&format!("{tag}.fc1.bias"))),
        fc2: (get(&format!("{tag}.fc2.weight")), get(&format!("{tag}.fc2.bias"))),
    };

    // Frame feature vectors z_l: CNN over the two grids plus raw scalars.
    let mdct_in = tape.leaf2(input.mdct.clone());
    let sf_in = tape.leaf2(input.scalefac.clone());
    let scalars_in = tape.leaf2(input.scalars.clone());
    let v1 = cnn_vars("cnn1");
    let v2 = cnn_vars("cnn2");
    let cnn1_out = cnn_apply(tape, &geom.cnn1, &v1, mdct_in, &mut dropout);
    let cnn2_out = cnn_apply(tape, &geom.cnn2, &v2, sf_in, &mut dropout);
    let z = tape.concat_cols(&[cnn1_out, cnn2_out, scalars_in]); // (L, d)

    // Positional encoding on the frame vectors only; class tokens are used
    // as-is and carry position through their own identity.
    let pe_leaf = tape.leaf2(pe.clone());
    let z_prime = tape.add(z, pe_leaf);
    let tokens = get("class_tokens");
    let stacked = tape.concat_rows(&[tokens, z_prime]); // (2L, d)
    let assembled = tape.gather(stacked, geom.interleave.clone(), &[2 * l, d]);
    let mut x = assembled;

    for i in 0..config.n_layers {
        let b = |suffix: &str| get(&format!("block{i}.{suffix}"));
        let h1 = tape.layer_norm_rows(x, b("ln1.gamma"), b("ln1.beta"));
        let msa = msa_apply(tape, h1, b("u_qkv"), b("u_msa"), config.n_heads, config.d_head());
        let msa = dropout.apply(tape, msa);
        x = tape.add(x, msa);
        let h2 = tape.layer_norm_rows(x, b("ln2.gamma"), b("ln2.beta"));
        let f = tape.matmul(h2, b("ffn1.weight"));
        let f = tape.add_row(f, b("ffn1.bias"));
        let f = tape.gelu(f);
        let f = tape.matmul(f, b("ffn2.weight"));
        let f = tape.add_row(f, b("ffn2.bias"));
        let f = dropout.apply(tape, f);
        x = tape.add(x, f);
    }

    let x = tape.layer_norm_rows(x, get("final_ln.gamma"), get("final_ln.beta"));
    let cls = tape.gather(x, geom.class_rows.clone(), &[l, d]);
    let h = tape.matmul(cls, get("head1.weight"));
    let h = tape.add_row(h, get("head1.bias"));
    let h = tape.gelu(h);
    let logits = tape.matmul(h, get("head2.weight"));
    let logits = tape.add_row(logits, get("head2.bias"));
    let probs = tape.softmax_rows(logits);

    WindowGraph {
        params: param_vars,
        assembled,
        probs,
    }
}

/// Standalone single-grid CNN pass (the per-frame operation). Builds a
/// batch-1 geometry on the fly.
pub(crate) fn cnn_forward_single(
    params: &ModelParameters,
    grid: &Array2<f64>,
    which: usize,
    dropout_rng: Option<&mut ChaCha20Rng>,
) -> ndarray::Array1<f64> {
    let channels = match which {
        1 => &params.config.cnn1_channels,
        _ => &params.config.cnn2_channels,
    };
    let geom = CnnGeom::new(which, channels, 1);
    let mut tape = Tape::new();
    let cnn = match which {
        1 => &params.cnn1,
        _ => &params.cnn2,
    };
    let vars = CnnVars {
        convs: cnn
            .convs
            .iter()
            .map(|c| {
                (
                    tape.leaf(c.weight.clone().into_dyn()),
                    tape.leaf(c.bias.clone().into_dyn()),
                )
            })
            .collect(),
        fc1: (
            tape.leaf(cnn.fc1.weight.clone().into_dyn()),
            tape.leaf(cnn.fc1.bias.clone().into_dyn()),
        ),
        fc2: (
            tape.leaf(cnn.fc2.weight.clone().into_dyn()),
            tape.leaf(cnn.fc2.bias.clone().into_dyn()),
        ),
    };
    let flat_in = grid
        .clone()
        .into_shape_with_order((1, grid.len()))
        .unwrap();
    let input = tape.leaf2(flat_in);
    let mut plan = DropoutPlan {
        rate: params.config.dropout,
        rng: dropout_rng,
    };
    let out = cnn_apply(&mut tape, &geom, &vars, input, &mut plan);
    let v = tape.value(out).view().into_dimensionality::<Ix2>().unwrap();
    v.row(0).to_owned()
}
