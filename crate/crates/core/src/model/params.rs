//! Model configuration, trainable parameters, initialization, the shape
//! audit and the versioned weight container.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture hyperparameters. The CNN output widths plus the scalar
/// count must equal `d_model`, and `n_heads` must divide `d_model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Frames per analysis window (L).
    pub window_len: usize,
    pub cnn1_out: usize,
    pub cnn2_out: usize,
    /// How many of the 18 scalar features feed the frame vector. The full
    /// model uses all 18; reduced test configs may truncate.
    pub n_scalars: usize,
    pub mlp_hidden: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    /// Filter counts of the six convolution layers per CNN.
    pub cnn1_channels: [usize; 6],
    pub cnn2_channels: [usize; 6],
}

impl ModelConfig {
    /// The full-size configuration.
    pub fn full() -> Self {
        ModelConfig {
            d_model: 300,
            n_layers: 8,
            n_heads: 15,
            window_len: 20,
            cnn1_out: 233,
            cnn2_out: 49,
            n_scalars: 18,
            mlp_hidden: 800,
            ffn_hidden: 1200,
            dropout: 0.2,
            cnn1_channels: [32, 32, 64, 64, 128, 128],
            cnn2_channels: [16, 16, 32, 32, 64, 64],
        }
    }

    /// Tiny configuration for numerical oracles: d_model 12, 3 heads, 2
    /// layers, windows of 4 frames.
    pub fn reduced() -> Self {
        ModelConfig {
            d_model: 12,
            n_layers: 2,
            n_heads: 3,
            window_len: 4,
            cnn1_out: 6,
            cnn2_out: 4,
            n_scalars: 2,
            mlp_hidden: 10,
            ffn_hidden: 24,
            dropout: 0.2,
            cnn1_channels: [2, 2, 3, 3, 4, 4],
            cnn2_channels: [2, 2, 2, 2, 3, 3],
        }
    }

    /// Mid-size configuration for the overfit check and scaled experiments:
    /// d_model 60, 5 heads, 2 layers, full 20-frame windows.
    pub fn overfit() -> Self {
        ModelConfig {
            d_model: 60,
            n_layers: 2,
            n_heads: 5,
            window_len: 20,
            cnn1_out: 30,
            cnn2_out: 12,
            n_scalars: 18,
            mlp_hidden: 64,
            ffn_hidden: 240,
            dropout: 0.0,
            cnn1_channels: [4, 4, 8, 8, 8, 8],
            cnn2_channels: [2, 2, 4, 4, 4, 4],
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.cnn1_out + self.cnn2_out + self.n_scalars != self.d_model {
            return Err(ModelError::BadConfig(format!(
                "cnn1_out {} + cnn2_out {} + n_scalars {} != d_model {}",
                self.cnn1_out, self.cnn2_out, self.n_scalars, self.d_model
            )));
        }
        if self.n_scalars > crate::features::N_SCALARS {
            return Err(ModelError::BadConfig(format!(
                "n_scalars {} exceeds available scalar features",
                self.n_scalars
            )));
        }
        if self.window_len == 0 || self.n_layers == 0 {
            return Err(ModelError::BadConfig("empty model".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// (fan_in, fan_out)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// (c_in * 9, c_out): 3x3 kernels flattened kernel-major.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnParams {
    pub convs: Vec<ConvLayer>,
    pub fc1: DenseLayer,
    pub fc2: DenseLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    /// Fused projection (d_model, 3 * d_model): columns [0, d) are the
    /// queries of all heads, [d, 2d) the keys, [2d, 3d) the values; head h
    /// occupies the column slice [h*d_head, (h+1)*d_head) of its third.
    pub u_qkv: Array2<f64>,
    /// (d_model, d_model) output projection of the concatenated heads.
    pub u_msa: Array2<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
    pub ffn1: DenseLayer,
    pub ffn2: DenseLayer,
}

/// Every trainable tensor of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub cnn1: CnnParams,
    pub cnn2: CnnParams,
    /// (L, d_model) trainable class tokens c_1..c_L.
    pub class_tokens: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub final_ln_gamma: Array1<f64>,
    pub final_ln_beta: Array1<f64>,
    pub head1: DenseLayer,
    pub head2: DenseLayer,
}

/// Spatial sizes of the CNN stages under 2x2 ceiling max-pooling.
pub(crate) fn cnn_stage_dims(mut h: usize, mut w: usize) -> [(usize, usize); 4] {
    let mut dims = [(0, 0); 4];
    dims[0] = (h, w);
    for d in dims.iter_mut().skip(1) {
        h = h.div_ceil(2);
        w = w.div_ceil(2);
        *d = (h, w);
    }
    dims
}

pub(crate) fn cnn_input_dims(which: usize) -> (usize, usize) {
    match which {
        1 => (crate::features::MDCT_ROWS, crate::features::MDCT_COLS),
        2 => (crate::features::SCALEFAC_ROWS, crate::features::SCALEFAC_COLS),
        _ => unreachable!(),
    }
}

/// Flattened feature count after the last pool stage.
pub(crate) fn cnn_flat_len(which: usize, channels: &[usize; 6]) -> usize {
    let (h, w) = cnn_input_dims(which);
    let dims = cnn_stage_dims(h, w);
    channels[5] * dims[3].0 * dims[3].1
}

fn uniform_fan_in(rng: &mut ChaCha20Rng, fan_in: usize, shape: (usize, usize)) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn(shape, |_| rng.random_range(-bound..bound))
}

fn dense(rng: &mut ChaCha20Rng, fan_in: usize, fan_out: usize) -> DenseLayer {
    DenseLayer {
        weight: uniform_fan_in(rng, fan_in, (fan_in, fan_out)),
        bias: Array1::zeros(fan_out),
    }
}

fn cnn_params(rng: &mut ChaCha20Rng, which: usize, channels: &[usize; 6], out: usize) -> CnnParams {
    let mut convs = Vec::with_capacity(6);
    let mut c_in = 1usize;
    for &c_out in channels {
        let fan_in = c_in * 9;
        convs.push(ConvLayer {
            weight: uniform_fan_in(rng, fan_in, (fan_in, c_out)),
            bias: Array1::zeros(c_out),
        });
        c_in = c_out;
    }
    let flat = cnn_flat_len(which, channels);
    CnnParams {
        convs,
        fc1: dense(rng, flat, out),
        fc2: dense(rng, out, out),
    }
}

impl ModelParameters {
    /// Fresh parameters: weights uniform symmetric scaled by fan-in, biases
    /// zero, layer norms identity, class tokens from N(0, 0.02^2).
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        use rand::SeedableRng;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let d = config.d_model;

        let cnn1 = cnn_params(&mut rng, 1, &config.cnn1_channels, config.cnn1_out);
        let cnn2 = cnn_params(&mut rng, 2, &config.cnn2_channels, config.cnn2_out);

        let token_dist = Normal::new(0.0, 0.02).unwrap();
        let class_tokens =
            Array2::from_shape_fn((config.window_len, d), |_| token_dist.sample(&mut rng));

        let blocks = (0..config.n_layers)
            .map(|_| BlockParams {
                ln1_gamma: Array1::ones(d),
                ln1_beta: Array1::zeros(d),
                u_qkv: uniform_fan_in(&mut rng, d, (d, 3 * d)),
                u_msa: uniform_fan_in(&mut rng, d, (d, d)),
                ln2_gamma: Array1::ones(d),
                ln2_beta: Array1::zeros(d),
                ffn1: dense(&mut rng, d, config.ffn_hidden),
                ffn2: dense(&mut rng, config.ffn_hidden, d),
            })
            .collect();

        Ok(ModelParameters {
            cnn1,
            cnn2,
            class_tokens,
            blocks,
            final_ln_gamma: Array1::ones(d),
            final_ln_beta: Array1::zeros(d),
            head1: dense(&mut rng, d, config.mlp_hidden),
            head2: dense(&mut rng, config.mlp_hidden, 2),
            config: config.clone(),
        })
    }

    /// Visit every trainable tensor in a fixed, documented order. The same
    /// order drives gradient extraction, the Adam state and the weight file.
    pub fn visit(&self, mut f: impl FnMut(&str, &ArrayD<f64>)) {
        let dyn1 = |a: &Array1<f64>| a.clone().into_dyn();
        let dyn2 = |a: &Array2<f64>| a.clone().into_dyn();
        for (tag, cnn) in [("cnn1", &self.cnn1), ("cnn2", &self.cnn2)] {
            for (i, conv) in cnn.convs.iter().enumerate() {
                f(&format!("{tag}.conv{i}.weight"), &dyn2(&conv.weight));
                f(&format!("{tag}.conv{i}.bias"), &dyn1(&conv.bias));
            }
            f(&format!("{tag}.fc1.weight"), &dyn2(&cnn.fc1.weight));
            f(&format!("{tag}.fc1.bias"), &dyn1(&cnn.fc1.bias));
            f(&format!("{tag}.fc2.weight"), &dyn2(&cnn.fc2.weight));
            f(&format!("{tag}.fc2.bias"), &dyn1(&cnn.fc2.bias));
        }
        f("class_tokens", &dyn2(&self.class_tokens));
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("block{i}.ln1.gamma"), &dyn1(&b.ln1_gamma));
            f(&format!("block{i}.ln1.beta"), &dyn1(&b.ln1_beta));
            f(&format!("block{i}.u_qkv"), &dyn2(&b.u_qkv));
            f(&format!("block{i}.u_msa"), &dyn2(&b.u_msa));
            f(&format!("block{i}.ln2.gamma"), &dyn1(&b.ln2_gamma));
            f(&format!("block{i}.ln2.beta"), &dyn1(&b.ln2_beta));
            f(&format!("block{i}.ffn1.weight"), &dyn2(&b.ffn1.weight));
            f(&format!("block{i}.ffn1.bias"), &dyn1(&b.ffn1.bias));
            f(&format!("block{i}.ffn2.weight"), &dyn2(&b.ffn2.weight));
            f(&format!("block{i}.ffn2.bias"), &dyn1(&b.ffn2.bias));
        }
        f("final_ln.gamma", &dyn1(&self.final_ln_gamma));
        f("final_ln.beta", &dyn1(&self.final_ln_beta));
        f("head1.weight", &dyn2(&self.head1.weight));
        f("head1.bias", &dyn1(&self.head1.bias));
        f("head2.weight", &dyn2(&self.head2.weight));
        f("head2.bias", &dyn1(&self.head2.bias));
    }

    /// Names and copies of all tensors in visit order.
    pub fn tensors(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        self.visit(|name, t| out.push((name.to_string(), t.clone())));
        out
    }

    /// Apply `f` to every tensor in visit order, mutably.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        for (tag, cnn) in [("cnn1", &mut self.cnn1), ("cnn2", &mut self.cnn2)] {
            for (i, conv) in cnn.convs.iter_mut().enumerate() {
                f(&format!("{tag}.conv{i}.weight"), conv.weight.as_slice_mut().unwrap());
                f(&format!("{tag}.conv{i}.bias"), conv.bias.as_slice_mut().unwrap());
            }
            f(&format!("{tag}.fc1.weight"), cnn.fc1.weight.as_slice_mut().unwrap());
            f(&format!("{tag}.fc1.bias"), cnn.fc1.bias.as_slice_mut().unwrap());
            f(&format!("{tag}.fc2.weight"), cnn.fc2.weight.as_slice_mut().unwrap());
            f(&format!("{tag}.fc2.bias"), cnn.fc2.bias.as_slice_mut().unwrap());
        }
        f("class_tokens", self.class_tokens.as_slice_mut().unwrap());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{i}.ln1.gamma"), b.ln1_gamma.as_slice_mut().unwrap());
            f(&format!("block{i}.ln1.beta"), b.ln1_beta.as_slice_mut().unwrap());
            f(&format!("block{i}.u_qkv"), b.u_qkv.as_slice_mut().unwrap());
            f(&format!("block{i}.u_msa"), b.u_msa.as_slice_mut().unwrap());
            f(&format!("block{i}.ln2.gamma"), b.ln2_gamma.as_slice_mut().unwrap());
            f(&format!("block{i}.ln2.beta"), b.ln2_beta.as_slice_mut().unwrap());
            f(&format!("block{i}.ffn1.weight"), b.ffn1.weight.as_slice_mut().unwrap());
            f(&format!("block{i}.ffn1.bias"), b.ffn1.bias.as_slice_mut().unwrap());
            f(&format!("block{i}.ffn2.weight"), b.ffn2.weight.as_slice_mut().unwrap());
            f(&format!("block{i}.ffn2.bias"), b.ffn2.bias.as_slice_mut().unwrap());
        }
        f("final_ln.gamma", self.final_ln_gamma.as_slice_mut().unwrap());
        f("final_ln.beta", self.final_ln_beta.as_slice_mut().unwrap());
        f("head1.weight", self.head1.weight.as_slice_mut().unwrap());
        f("head1.bias", self.head1.bias.as_slice_mut().unwrap());
        f("head2.weight", self.head2.weight.as_slice_mut().unwrap());
        f("head2.bias", self.head2.bias.as_slice_mut().unwrap());
    }

    /// Validate every tensor shape against the configuration.
    pub fn audit(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        let c = &self.config;
        let d = c.d_model;
        let expect = |name: &str, got: &[usize], want: &[usize]| -> Result<(), ModelError> {
            if got != want {
                return Err(ModelError::ShapeMismatch(format!(
                    "{name}: shape {got:?}, expected {want:?}"
                )));
            }
            Ok(())
        };

        for (which, tag, cnn, channels, out) in [
            (1usize, "cnn1", &self.cnn1, &c.cnn1_channels, c.cnn1_out),
            (2, "cnn2", &self.cnn2, &c.cnn2_channels, c.cnn2_out),
        ] {
            if cnn.convs.len() != 6 {
                return Err(ModelError::ShapeMismatch(format!(
                    "{tag}: expected 6 conv layers, got {}",
                    cnn.convs.len()
                )));
            }
            let mut c_in = 1usize;
            for (i, conv) in cnn.convs.iter().enumerate() {
                expect(
                    &format!("{tag}.conv{i}.weight"),
                    conv.weight.shape(),
                    &[c_in * 9, channels[i]],
                )?;
                expect(&format!("{tag}.conv{i}.bias"), conv.bias.shape(), &[channels[i]])?;
                c_in = channels[i];
            }
            let flat = cnn_flat_len(which, channels);
            expect(&format!("{tag}.fc1.weight"), cnn.fc1.weight.shape(), &[flat, out])?;
            expect(&format!("{tag}.fc1.bias"), cnn.fc1.bias.shape(), &[out])?;
            expect(&format!("{tag}.fc2.weight"), cnn.fc2.weight.shape(), &[out, out])?;
            expect(&format!("{tag}.fc2.bias"), cnn.fc2.bias.shape(), &[out])?;
        }

        expect("class_tokens", self.class_tokens.shape(), &[c.window_len, d])?;
        if self.blocks.len() != c.n_layers {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {} transformer blocks, got {}",
                c.n_layers,
                self.blocks.len()
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            expect(&format!("block{i}.ln1.gamma"), b.ln1_gamma.shape(), &[d])?;
            expect(&format!("block{i}.ln1.beta"), b.ln1_beta.shape(), &[d])?;
            expect(&format!("block{i}.u_qkv"), b.u_qkv.shape(), &[d, 3 * d])?;
            expect(&format!("block{i}.u_msa"), b.u_msa.shape(), &[d, d])?;
            expect(&format!("block{i}.ln2.gamma"), b.ln2_gamma.shape(), &[d])?;
            expect(&format!("block{i}.ln2.beta"), b.ln2_beta.shape(), &[d])?;
            expect(&format!("block{i}.ffn1.weight"), b.ffn1.weight.shape(), &[d, c.ffn_hidden])?;
            expect(&format!("block{i}.ffn1.bias"), b.ffn1.bias.shape(), &[c.ffn_hidden])?;
            expect(&format!("block{i}.ffn2.weight"), b.ffn2.weight.shape(), &[c.ffn_hidden, d])?;
            expect(&format!("block{i}.ffn2.bias"), b.ffn2.bias.shape(), &[d])?;
        }
        expect("final_ln.gamma", self.final_ln_gamma.shape(), &[d])?;
        expect("final_ln.beta", self.final_ln_beta.shape(), &[d])?;
        expect("head1.weight", self.head1.weight.shape(), &[d, c.mlp_hidden])?;
        expect("head1.bias", self.head1.bias.shape(), &[c.mlp_hidden])?;
        expect("head2.weight", self.head2.weight.shape(), &[c.mlp_hidden, 2])?;
        expect("head2.bias", self.head2.bias.shape(), &[2])?;
        Ok(())
    }

    /// Overwrite tensors from a name -> tensor list (visit-order not
    /// required); missing or extra names are errors.
    pub fn assign(&mut self, tensors: Vec<(String, ArrayD<f64>)>) -> Result<(), ModelError> {
        use std::collections::HashMap;
        let mut map: HashMap<String, ArrayD<f64>> = tensors.into_iter().collect();
        let mut missing = Vec::new();
        self.visit_mut(|name, slice| match map.remove(name) {
            Some(t) if t.len() == slice.len() => {
                slice.copy_from_slice(t.as_slice().unwrap());
            }
            Some(t) => missing.push(format!("{name}: wrong size {}", t.len())),
            None => missing.push(format!("{name}: missing")),
        });
        if !missing.is_empty() {
            return Err(ModelError::ShapeMismatch(missing.join(", ")));
        }
        if !map.is_empty() {
            let extras: Vec<String> = map.into_keys().collect();
            return Err(ModelError::ShapeMismatch(format!(
                "unknown tensors: {}",
                extras.join(", ")
            )));
        }
        Ok(())
    }
}

// --- weight container ------------------------------------------------------
//
// Layout (little-endian):
//   magic b"STWT", u16 version, then the config as JSON (u32 length prefix),
//   u32 tensor count, and per tensor: u16 name length, name bytes, u8 rank,
//   u64 dims, f64 data.

pub const WEIGHTS_VERSION: u16 = 1;
const WEIGHTS_MAGIC: &[u8; 4] = b"STWT";

pub fn save_weights(w: &mut impl Write, params: &ModelParameters) -> Result<(), ModelError> {
    let io = |e: std::io::Error| ModelError::Io(e.to_string());
    w.write_all(WEIGHTS_MAGIC).map_err(io)?;
    w.write_all(&WEIGHTS_VERSION.to_le_bytes()).map_err(io)?;
    let config = serde_json::to_vec(&params.config).expect("config serializes");
    w.write_all(&(config.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&config).map_err(io)?;

    let tensors = params.tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in &tensors {
        w.write_all(&(name.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&[t.ndim() as u8]).map_err(io)?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes()).map_err(io)?;
        }
        for v in t.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

pub fn load_weights(r: &mut impl Read) -> Result<ModelParameters, ModelError> {
    let io = |e: std::io::Error| ModelError::Io(e.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(ModelError::BadWeights("bad magic".into()));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v).map_err(io)?;
    if u16::from_le_bytes(v) != WEIGHTS_VERSION {
        return Err(ModelError::BadWeights("unsupported version".into()));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4).map_err(io)?;
    let mut config_buf = vec![0u8; u32::from_le_bytes(len4) as usize];
    r.read_exact(&mut config_buf).map_err(io)?;
    let config: ModelConfig = serde_json::from_slice(&config_buf)
        .map_err(|e| ModelError::BadWeights(format!("config: {e}")))?;

    r.read_exact(&mut len4).map_err(io)?;
    let count = u32::from_le_bytes(len4) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let mut l2 = [0u8; 2];
        r.read_exact(&mut l2).map_err(io)?;
        let mut name = vec![0u8; u16::from_le_bytes(l2) as usize];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| ModelError::BadWeights("name".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank).map_err(io)?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut d8 = [0u8; 8];
            r.read_exact(&mut d8).map_err(io)?;
            dims.push(u64::from_le_bytes(d8) as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = vec![0u8; n * 8];
        r.read_exact(&mut data).map_err(io)?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((
            name,
            ArrayD::from_shape_vec(IxDyn(&dims), values)
                .map_err(|e| ModelError::BadWeights(e.to_string()))?,
        ));
    }

    let mut params = ModelParameters::init(&config, 0)?;
    params.assign(tensors)?;
    params.audit()?;
    Ok(params)
}
