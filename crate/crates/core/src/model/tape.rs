//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records a computation as a flat list of nodes; calling
//! [`Tape::backward`] walks the list in reverse and produces exact gradients
//! for every leaf. The op set is small and concrete: dense matrix products,
//! row-broadcast adds, GELU, row softmax, layer normalization, dropout with
//! an explicit mask, index gathers (which cover convolution im2col, pooling
//! and row shuffles), concatenation and slicing, and the few scalar ops the
//! cross-entropy loss needs. Everything is double precision and fully
//! deterministic.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

const GELU_COEF: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044_715;

/// GELU in its tanh form: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_COEF * (x + GELU_CUBIC * x * x * x)).tanh())
}

/// Derivative of [`gelu_scalar`].
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_COEF * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_COEF * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

enum Op {
    Leaf,
    Add(usize, usize),
    /// Matrix plus a broadcast row vector.
    AddRow(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Gelu(usize),
    SoftmaxRows(usize),
    LayerNormRows {
        x: usize,
        gamma: usize,
        beta: usize,
    },
    Dropout {
        x: usize,
        mask: ArrayD<f64>,
    },
    /// out.flat[i] = idx[i] < 0 ? 0 : x.flat[idx[i]]
    Gather {
        x: usize,
        idx: Arc<Vec<i32>>,
    },
    Reshape(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    /// out[i] = x[i, idx[i]]
    PickPerRow {
        x: usize,
        idx: Arc<Vec<usize>>,
    },
    /// ln(max(x, floor)) elementwise; gradient is zero where clamped.
    LnClamped {
        x: usize,
        floor: f64,
    },
    Mean(usize),
    Neg(usize),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    fn value2(&self, v: Var) -> ndarray::ArrayView2<'_, f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-D node")
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf2(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn add_row(&mut self, mat: Var, row: Var) -> Var {
        let m = self.value2(mat);
        let r = self.nodes[row.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("row vector");
        assert_eq!(m.ncols(), r.len(), "add_row width");
        let value = (&m + &r).into_dyn();
        self.push(value, Op::AddRow(mat.0, row.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value * c;
        self.push(value, Op::Scale(a.0, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value2(a);
        let vb = self.value2(b);
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dim");
        let value = va.dot(&vb).into_dyn();
        self.push(value, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value2(a).t().to_owned().into_dyn();
        self.push(value, Op::Transpose(a.0))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(gelu_scalar);
        self.push(value, Op::Gelu(a.0))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value2(a);
        let mut out = v.to_owned();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(out.into_dyn(), Op::SoftmaxRows(a.0))
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let v = self.value2(x);
        let g = self.nodes[gamma.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("gamma");
        let b = self.nodes[beta.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("beta");
        let n = v.ncols() as f64;
        let mut out = v.to_owned();
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (*cell - mean) * inv * g[j] + b[j];
            }
        }
        self.push(
            out.into_dyn(),
            Op::LayerNormRows {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
            },
        )
    }

    /// Dropout with a pre-scaled mask (entries 0 or 1/(1-p)).
    pub fn dropout(&mut self, x: Var, mask: ArrayD<f64>) -> Var {
        assert_eq!(self.value(x).shape(), mask.shape(), "dropout mask shape");
        let value = &self.nodes[x.0].value * &mask;
        self.push(value, Op::Dropout { x: x.0, mask })
    }

    /// Arbitrary index gather; `idx[i] < 0` produces a zero (used for
    /// padding). `shape` is the output shape.
    pub fn gather(&mut self, x: Var, idx: Arc<Vec<i32>>, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(idx.len(), n, "gather index count");
        let src = self.nodes[x.0]
            .value
            .as_slice()
            .expect("contiguous source");
        let data: Vec<f64> = idx
            .iter()
            .map(|&i| if i < 0 { 0.0 } else { src[i as usize] })
            .collect();
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).unwrap();
        self.push(value, Op::Gather { x: x.0, idx })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.nodes[x.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size");
        self.push(value, Op::Reshape(x.0))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value2(p)).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols");
        self.push(value.into_dyn(), Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value2(p)).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows");
        self.push(value.into_dyn(), Op::ConcatRows(parts.iter().map(|p| p.0).collect()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value2(x);
        let value = v.slice(ndarray::s![.., start..start + len]).to_owned();
        self.push(value.into_dyn(), Op::SliceCols { x: x.0, start, len })
    }

    pub fn pick_per_row(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Var {
        let v = self.value2(x);
        assert_eq!(v.nrows(), idx.len(), "pick_per_row length");
        let data: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| v[(i, j)]).collect();
        let value = Array1::from_vec(data).into_dyn();
        self.push(value, Op::PickPerRow { x: x.0, idx })
    }

    pub fn ln_clamped(&mut self, x: Var, floor: f64) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v.max(floor).ln());
        self.push(value, Op::LnClamped { x: x.0, floor })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let m = v.sum() / v.len() as f64;
        self.push(ndarray::arr0(m).into_dyn(), Op::Mean(x.0))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let value = -&self.nodes[x.0].value;
        self.push(value, Op::Neg(x.0))
    }

    /// Reverse pass from `root` (any shape; seeded with ones). Returns one
    /// gradient slot per node; only leaf gradients are retained, interior
    /// gradients are freed as soon as they have been propagated.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g); // keep for the caller
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*b], g);
                }
                Op::AddRow(mat, row) => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let row_grad = g2.sum_axis(Axis(0)).into_dyn();
                    accumulate(&mut grads[*row], row_grad);
                    accumulate(&mut grads[*mat], g);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads[*a], &g * *c);
                }
                Op::MatMul(a, b) => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let va = self.nodes[*a].value.view().into_dimensionality::<Ix2>().unwrap();
                    let vb = self.nodes[*b].value.view().into_dimensionality::<Ix2>().unwrap();
                    accumulate(&mut grads[*a], g2.dot(&vb.t()).into_dyn());
                    accumulate(&mut grads[*b], va.t().dot(&g2).into_dyn());
                }
                Op::Transpose(a) => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    accumulate(&mut grads[*a], g2.t().to_owned().into_dyn());
                }
                Op::Gelu(a) => {
                    let dx = self.nodes[*a].value.mapv(gelu_grad_scalar);
                    accumulate(&mut grads[*a], &g * &dx);
                }
                Op::SoftmaxRows(a) => {
                    let s = self.nodes[i].value.view().into_dimensionality::<Ix2>().unwrap();
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut out = Array2::<f64>::zeros(s.raw_dim());
                    for r in 0..s.nrows() {
                        let srow = s.row(r);
                        let grow = g2.row(r);
                        let dot: f64 = srow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
                        for c in 0..s.ncols() {
                            out[(r, c)] = srow[c] * (grow[c] - dot);
                        }
                    }
                    accumulate(&mut grads[*a], out.into_dyn());
                }
                Op::LayerNormRows { x, gamma, beta } => {
                    let v = self.nodes[*x].value.view().into_dimensionality::<Ix2>().unwrap();
                    let gam = self.nodes[*gamma]
                        .value
                        .view()
                        .into_dimensionality::<Ix1>()
                        .unwrap();
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let n = v.ncols() as f64;
                    let mut dx = Array2::<f64>::zeros(v.raw_dim());
                    let mut dgamma = Array1::<f64>::zeros(gam.len());
                    let mut dbeta = Array1::<f64>::zeros(gam.len());
                    for r in 0..v.nrows() {
                        let row = v.row(r);
                        let grow = g2.row(r);
                        let mean = row.sum() / n;
                        let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        // dxhat, plus reductions for the mean/variance terms
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for c in 0..row.len() {
                            let xhat = (row[c] - mean) * inv;
                            let dxhat = grow[c] * gam[c];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            dgamma[c] += grow[c] * xhat;
                            dbeta[c] += grow[c];
                        }
                        for c in 0..row.len() {
                            let xhat = (row[c] - mean) * inv;
                            let dxhat = grow[c] * gam[c];
                            dx[(r, c)] =
                                inv * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                        }
                    }
                    accumulate(&mut grads[*x], dx.into_dyn());
                    accumulate(&mut grads[*gamma], dgamma.into_dyn());
                    accumulate(&mut grads[*beta], dbeta.into_dyn());
                }
                Op::Dropout { x, mask } => {
                    accumulate(&mut grads[*x], &g * mask);
                }
                Op::Gather { x, idx } => {
                    let src_shape = self.nodes[*x].value.raw_dim();
                    let mut dx = ArrayD::<f64>::zeros(src_shape);
                    {
                        let flat = dx.as_slice_mut().unwrap();
                        let gflat = g.as_slice().expect("contiguous gather grad");
                        for (out_i, &src_i) in idx.iter().enumerate() {
                            if src_i >= 0 {
                                flat[src_i as usize] += gflat[out_i];
                            }
                        }
                    }
                    accumulate(&mut grads[*x], dx);
                }
                Op::Reshape(x) => {
                    let shape = self.nodes[*x].value.raw_dim();
                    accumulate(&mut grads[*x], g.into_shape_with_order(shape).unwrap());
                }
                Op::ConcatCols(parts) => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut start = 0usize;
                    for &p in parts {
                        let w = self.nodes[p].value.shape()[1];
                        let part = g2.slice(ndarray::s![.., start..start + w]).to_owned();
                        accumulate(&mut grads[p], part.into_dyn());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut start = 0usize;
                    for &p in parts {
                        let h = self.nodes[p].value.shape()[0];
                        let part = g2.slice(ndarray::s![start..start + h, ..]).to_owned();
                        accumulate(&mut grads[p], part.into_dyn());
                        start += h;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let shape = self.nodes[*x].value.raw_dim();
                    let mut dx = ArrayD::<f64>::zeros(shape);
                    {
                        let mut view = dx.view_mut().into_dimensionality::<Ix2>().unwrap();
                        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                        view.slice_mut(ndarray::s![.., *start..*start + *len])
                            .assign(&g2);
                    }
                    accumulate(&mut grads[*x], dx);
                }
                Op::PickPerRow { x, idx } => {
                    let shape = self.nodes[*x].value.raw_dim();
                    let mut dx = ArrayD::<f64>::zeros(shape);
                    {
                        let mut view = dx.view_mut().into_dimensionality::<Ix2>().unwrap();
                        let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                        for (r, &c) in idx.iter().enumerate() {
                            view[(r, c)] += g1[r];
                        }
                    }
                    accumulate(&mut grads[*x], dx);
                }
                Op::LnClamped { x, floor } => {
                    let v = &self.nodes[*x].value;
                    let dx = v.mapv(|x| if x > *floor { 1.0 / x } else { 0.0 });
                    accumulate(&mut grads[*x], &g * &dx);
                }
                Op::Mean(x) => {
                    let v = &self.nodes[*x].value;
                    let scale = g.sum() / v.len() as f64;
                    accumulate(&mut grads[*x], ArrayD::from_elem(v.raw_dim(), scale));
                }
                Op::Neg(x) => {
                    accumulate(&mut grads[*x], -&g);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(slot: &mut Option<ArrayD<f64>>, g: ArrayD<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Gradients returned by [`Tape::backward`]; leaf slots hold the gradient of
/// the root with respect to that leaf.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.grads[v.0].take()
    }
}
