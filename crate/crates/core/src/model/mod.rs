//! The classifier network.
//!
//! Per frame, two small VGG-style CNNs encode the MDCT grid (to 233
//! features) and the scalefactor grid (to 49); together with 18 scalar
//! codec fields they form a 300-dimensional frame vector. Frame vectors get
//! sinusoidal positional encoding and are interleaved with L trainable
//! class tokens into a 2L x 300 sequence, processed by 8 pre-norm
//! transformer blocks (15 heads, GELU feed-forward), after which a shared
//! MLP (300 -> 800 -> 2, softmax) classifies each class-token output row as
//! single- or multiply-compressed.

mod net;
mod params;
mod tape;

pub use net::{build_graph, DropoutPlan, WindowGraph, WindowInput};
pub use params::{
    load_weights, save_weights, BlockParams, CnnParams, ConvLayer, DenseLayer, ModelConfig,
    ModelParameters, WEIGHTS_VERSION,
};
pub use tape::{gelu_grad_scalar, gelu_scalar, Gradients, Tape, Var};

use ndarray::{Array1, Array2, Ix2};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::features::FrameFeatures;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("weight file: {0}")]
    BadWeights(String),
    #[error("i/o: {0}")]
    Io(String),
}

/// Fixed sinusoidal positional encoding: `pe[l, 2i] = sin(l / 10000^(2i/d))`
/// and `pe[l, 2i+1] = cos(...)`. Rows are pairwise distinct and values stay
/// in [-1, 1].
pub fn positional_encoding(len: usize, d_model: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, d_model), |(pos, j)| {
        let i = j / 2;
        let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// A ready-to-run model: parameters plus the precomputed index geometry and
/// positional encoding for its window length.
pub struct Model {
    pub params: ModelParameters,
    geom: net::Geometry,
    pe: Array2<f64>,
}

impl Model {
    pub fn new(params: ModelParameters) -> Result<Self, ModelError> {
        params.audit()?;
        let geom = net::Geometry::new(&params.config);
        let pe = positional_encoding(params.config.window_len, params.config.d_model);
        Ok(Model { params, geom, pe })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    /// Rebuild cached geometry after the parameters were mutated in place
    /// (cheap unless the config changed).
    pub fn refresh(&mut self) -> Result<(), ModelError> {
        self.params.audit()?;
        self.geom = net::Geometry::new(&self.params.config);
        self.pe = positional_encoding(self.params.config.window_len, self.params.config.d_model);
        Ok(())
    }

    /// Build the forward graph of one window on `tape`. With `dropout_rng`
    /// set, dropout is active (train mode) and masks are drawn from the rng.
    pub fn build_graph(
        &self,
        tape: &mut Tape,
        features: &[FrameFeatures],
        dropout_rng: Option<&mut ChaCha20Rng>,
    ) -> Result<WindowGraph, ModelError> {
        if features.len() != self.params.config.window_len {
            return Err(ModelError::ShapeMismatch(format!(
                "window has {} frames, model expects {}",
                features.len(),
                self.params.config.window_len
            )));
        }
        let input = WindowInput::from_features(features, self.params.config.n_scalars);
        let plan = DropoutPlan {
            rate: self.params.config.dropout,
            rng: dropout_rng,
        };
        Ok(net::build_graph(
            tape,
            &self.params,
            &self.geom,
            &self.pe,
            &input,
            plan,
        ))
    }

    /// Forward pass of one window. Eval mode when `dropout_rng` is `None`;
    /// returns the (L, 2) probability matrix with rows summing to 1.
    pub fn forward(
        &self,
        features: &[FrameFeatures],
        dropout_rng: Option<&mut ChaCha20Rng>,
    ) -> Result<Array2<f64>, ModelError> {
        let mut tape = Tape::new();
        let graph = self.build_graph(&mut tape, features, dropout_rng)?;
        Ok(tape
            .value(graph.probs)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned())
    }
}

/// Binary decisions from the probability matrix: argmax per row, exact ties
/// resolve to 0 (single compressed), the conservative call for forensics.
pub fn predict_labels(probs: &Array2<f64>) -> Vec<u8> {
    probs
        .rows()
        .into_iter()
        .map(|row| u8::from(row[1] > row[0]))
        .collect()
}

/// Single-head self-attention: `[q|k|v] = Z U_qkv`, `A = softmax(q k^T /
/// sqrt(d_h))`, output `A v`. `u_qkv` has shape (d_model, 3 * d_h).
pub fn self_attention(z: &Array2<f64>, u_qkv: &Array2<f64>, d_h: usize) -> Array2<f64> {
    assert_eq!(u_qkv.ncols(), 3 * d_h, "u_qkv must be (d, 3*d_h)");
    assert_eq!(z.ncols(), u_qkv.nrows(), "inner dimension");
    let mut tape = Tape::new();
    let zv = tape.leaf2(z.clone());
    let uv = tape.leaf2(u_qkv.clone());
    let qkv = tape.matmul(zv, uv);
    let q = tape.slice_cols(qkv, 0, d_h);
    let k = tape.slice_cols(qkv, d_h, d_h);
    let v = tape.slice_cols(qkv, 2 * d_h, d_h);
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt);
    let scaled = tape.scale(scores, 1.0 / (d_h as f64).sqrt());
    let a = tape.softmax_rows(scaled);
    let out = tape.matmul(a, v);
    tape.value(out)
        .view()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .to_owned()
}

/// Multi-head self-attention with a fused projection (d, 3d) and output
/// projection (d, d). Output shape equals the input shape.
pub fn multi_head_self_attention(
    z: &Array2<f64>,
    u_qkv: &Array2<f64>,
    u_msa: &Array2<f64>,
    n_heads: usize,
) -> Array2<f64> {
    let d = z.ncols();
    assert_eq!(u_qkv.shape(), [d, 3 * d], "fused u_qkv");
    assert_eq!(u_msa.shape(), [d, d], "u_msa");
    assert_eq!(d % n_heads, 0, "head count must divide d_model");
    let mut tape = Tape::new();
    let zv = tape.leaf2(z.clone());
    let uq = tape.leaf2(u_qkv.clone());
    let um = tape.leaf2(u_msa.clone());
    let out = net::msa_apply(&mut tape, zv, uq, um, n_heads, d / n_heads);
    tape.value(out)
        .view()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .to_owned()
}

/// The assembled transformer input of one window: CNN features plus scalars
/// and positional encoding, interleaved with the class tokens. Rows are
/// ordered [c_1, z'_1, c_2, z'_2, ...], shape (2L, d_model). Eval mode.
pub fn assemble_input(
    model: &Model,
    features: &[FrameFeatures],
) -> Result<Array2<f64>, ModelError> {
    let mut tape = Tape::new();
    let graph = model.build_graph(&mut tape, features, None)?;
    Ok(tape
        .value(graph.assembled)
        .view()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .to_owned())
}

/// One CNN forward pass over a single grid, as a standalone operation.
/// `which` selects CNN-1 (MDCT grid) or CNN-2 (scalefactor grid). Output
/// length is `cnn1_out` or `cnn2_out`. Dropout is active only with an rng.
pub fn cnn_forward(
    params: &ModelParameters,
    grid: &Array2<f64>,
    which: usize,
    dropout_rng: Option<&mut ChaCha20Rng>,
) -> Result<Array1<f64>, ModelError> {
    let (h, w) = params::cnn_input_dims(which);
    if grid.shape() != [h, w] {
        return Err(ModelError::ShapeMismatch(format!(
            "cnn{} input must be ({h}, {w}), got {:?}",
            which,
            grid.shape()
        )));
    }
    let out = net::cnn_forward_single(params, grid, which, dropout_rng);
    Ok(out)
}

#[cfg(test)]
mod tests;
