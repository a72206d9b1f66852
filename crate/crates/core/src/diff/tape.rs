use std::sync::Arc;

use rayon::prelude::*;

use super::{DiffError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Reduction applied along one axis by [`Tape::reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// Population variance (divide by n, not n - 1).
    Var,
}

/// Sparse interpolation taps from source spatial positions to output positions.
///
/// Position `p` of the output is a weighted sum over `taps(p)` of the source's
/// spatial elements, applied identically to every channel. Positions with no
/// taps produce zero; callers track their own validity flags for those.
/// Tables are immutable once built and shared between tapes via `Arc`.
#[derive(Debug)]
pub struct GatherTable {
    src_spatial: usize,
    offsets: Vec<u32>,
    idx: Vec<u32>,
    w: Vec<f64>,
}

impl GatherTable {
    /// Builds a table from per-output-position tap lists over a source with
    /// `src_spatial` spatial elements per channel.
    pub fn new(src_spatial: usize, taps: &[Vec<(u32, f64)>]) -> GatherTable {
        let mut offsets = Vec::with_capacity(taps.len() + 1);
        let mut idx = Vec::new();
        let mut w = Vec::new();
        offsets.push(0u32);
        for t in taps {
            for &(i, wi) in t {
                assert!((i as usize) < src_spatial, "tap index out of range");
                idx.push(i);
                w.push(wi);
            }
            offsets.push(idx.len() as u32);
        }
        GatherTable {
            src_spatial,
            offsets,
            idx,
            w,
        }
    }

    pub fn out_spatial(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn src_spatial(&self) -> usize {
        self.src_spatial
    }

    fn taps(&self, p: usize) -> (&[u32], &[f64]) {
        let a = self.offsets[p] as usize;
        let b = self.offsets[p + 1] as usize;
        (&self.idx[a..b], &self.w[a..b])
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Matmul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Transpose(Var),
    Relu(Var),
    Abs(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    SumAll(Var),
    Reduce {
        x: Var,
        axis: usize,
        kind: ReduceKind,
    },
    Concat {
        axis: usize,
        inputs: Vec<Var>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConvTranspose3d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Gather {
        src: Var,
        table: Arc<GatherTable>,
    },
    MaskedVariance {
        inputs: Vec<Var>,
        masks: Arc<Vec<Vec<bool>>>,
    },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    g: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when `v` did not influence
    /// the loss (equivalent to all zeros).
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.g[v.idx()].as_deref()
    }

    /// Gradient as a tensor, zeros when `v` did not influence the loss.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.idx()];
        match &self.g[v.idx()] {
            Some(d) => Tensor::new(shape, d.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

/// Append-only arena of tensor ops supporting one reverse sweep.
///
/// Every op validates operand shapes and rejects non-finite values, so a
/// finite loss guarantees a finite graph. `needs_grad` propagates from leaves;
/// subgraphs that no gradient-carrying leaf feeds are skipped in backward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn ceil_div(a: i64, b: i64) -> i64 {
    (a + b - 1).div_euclid(b)
}

/// Valid output range along one dim: `o` with `0 <= o*stride + off < n_in`.
fn out_range(n_in: usize, off: i64, stride: usize, n_out: usize) -> (usize, usize) {
    let s = stride as i64;
    let lo = ceil_div(-off, s).max(0);
    let hi = ceil_div(n_in as i64 - off, s).min(n_out as i64);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Gradients flow to it only when
    /// `needs_grad` is set.
    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Result<Var, DiffError> {
        self.push(value, needs_grad, Op::Leaf, "leaf")
    }

    /// Registers a constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Result<Var, DiffError> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.idx()].value.shape()
    }

    fn push(
        &mut self,
        value: Tensor,
        needs_grad: bool,
        op: Op,
        name: &'static str,
    ) -> Result<Var, DiffError> {
        if !value.all_finite() {
            return Err(DiffError::NonFinite { op: name });
        }
        if self.nodes.len() >= u32::MAX as usize {
            return Err(DiffError::BadArg {
                op: name,
                msg: "tape is full".into(),
            });
        }
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Ok(Var((self.nodes.len() - 1) as u32))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.idx()].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, DiffError> {
        self.same_shape(name, a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(self.shape(a), data).expect("elementwise shape");
        let g = self.needs(a) || self.needs(b);
        self.push(t, g, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        if !c.is_finite() {
            return Err(DiffError::NonFinite { op: "add_scalar" });
        }
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x + c).collect();
        let t = Tensor::new(self.shape(a), data).expect("shape");
        let g = self.needs(a);
        self.push(t, g, Op::AddScalar(a), "add_scalar")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        if !c.is_finite() {
            return Err(DiffError::NonFinite { op: "scale" });
        }
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a), data).expect("shape");
        let g = self.needs(a);
        self.push(t, g, Op::Scale(a, c), "scale")
    }

    /// Adds a length-C row vector to every row of a rank-2 tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        let (r, c) = match *self.shape(a) {
            [r, c] => (r, c),
            _ => {
                return Err(DiffError::ShapeMismatch {
                    op: "add_row",
                    lhs: self.shape(a).to_vec(),
                    rhs: self.shape(row).to_vec(),
                })
            }
        };
        if self.value(row).numel() != c {
            return Err(DiffError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let rowd = self.value(row).data();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let ar = &self.value(a).data()[i * c..(i + 1) * c];
            data.extend(ar.iter().zip(rowd).map(|(x, y)| x + y));
        }
        let t = Tensor::new(&[r, c], data).expect("shape");
        let g = self.needs(a) || self.needs(row);
        self.push(t, g, Op::AddRow(a, row), "add_row")
    }

    /// Rank-2 matrix product `[r,k] x [k,c] -> [r,c]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ra, ka) = match *self.shape(a) {
            [r, k] => (r, k),
            _ => {
                return Err(DiffError::ShapeMismatch {
                    op: "matmul",
                    lhs: self.shape(a).to_vec(),
                    rhs: self.shape(b).to_vec(),
                })
            }
        };
        let (kb, cb) = match *self.shape(b) {
            [k, c] => (k, c),
            _ => {
                return Err(DiffError::ShapeMismatch {
                    op: "matmul",
                    lhs: self.shape(a).to_vec(),
                    rhs: self.shape(b).to_vec(),
                })
            }
        };
        if ka != kb {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), ra, ka, cb);
        let t = Tensor::new(&[ra, cb], out).expect("shape");
        let g = self.needs(a) || self.needs(b);
        self.push(t, g, Op::Matmul(a, b), "matmul")
    }

    /// Batched matrix product over the leading axis: `a` is `[B, r, k]` and
    /// `b` is `[B, k, c]`, or `[B, c, k]` with `transpose_b` set (computing
    /// `a · bᵀ` per batch element).
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var, DiffError> {
        let shape_err = |t: &Tape| DiffError::ShapeMismatch {
            op: "bmm",
            lhs: t.shape(a).to_vec(),
            rhs: t.shape(b).to_vec(),
        };
        let (ba, r, ka) = match *self.shape(a) {
            [n, r, k] => (n, r, k),
            _ => return Err(shape_err(self)),
        };
        let (bb, kb, c) = match *self.shape(b) {
            [n, x, y] if transpose_b => (n, y, x),
            [n, x, y] => (n, x, y),
            _ => return Err(shape_err(self)),
        };
        if ba != bb || ka != kb {
            return Err(shape_err(self));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; ba * r * c];
        out.par_chunks_mut(r * c).enumerate().for_each(|(n, o)| {
            let am = &ad[n * r * ka..(n + 1) * r * ka];
            let bm = &bd[n * ka * c..(n + 1) * ka * c];
            for i in 0..r {
                for j in 0..c {
                    let mut s = 0.0;
                    for kk in 0..ka {
                        let bv = if transpose_b { bm[j * ka + kk] } else { bm[kk * c + j] };
                        s += am[i * ka + kk] * bv;
                    }
                    o[i * c + j] = s;
                }
            }
        });
        let t = Tensor::new(&[ba, r, c], out).expect("shape");
        let g = self.needs(a) || self.needs(b);
        self.push(t, g, Op::Bmm { a, b, transpose_b }, "bmm")
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        let (r, c) = match *self.shape(a) {
            [r, c] => (r, c),
            _ => {
                return Err(DiffError::BadArg {
                    op: "transpose",
                    msg: format!("needs rank 2, got shape {:?}", self.shape(a)),
                })
            }
        };
        let t = Tensor::new(&[c, r], transpose_raw(self.value(a).data(), r, c)).expect("shape");
        let g = self.needs(a);
        self.push(t, g, Op::Transpose(a), "transpose")
    }

    fn map_elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var, DiffError> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| f(*x)).collect();
        let t = Tensor::new(self.shape(a), data).expect("shape");
        let g = self.needs(a);
        self.push(t, g, op, name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        self.map_elementwise("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, DiffError> {
        self.map_elementwise("abs", a, f64::abs, Op::Abs(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        self.map_elementwise("sigmoid", a, stable_sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        self.map_elementwise("tanh", a, f64::tanh, Op::Tanh(a))
    }

    /// Softmax along `axis`, max-shifted per lane for stability.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(DiffError::BadArg {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let (outer, n, inner) = lane_dims(&shape, axis);
        let x = self.value(a).data();
        let mut data = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let mut m = f64::NEG_INFINITY;
                for i in 0..n {
                    m = m.max(x[at(i)]);
                }
                let mut z = 0.0;
                for i in 0..n {
                    let e = (x[at(i)] - m).exp();
                    data[at(i)] = e;
                    z += e;
                }
                for i in 0..n {
                    data[at(i)] /= z;
                }
            }
        }
        let t = Tensor::new(&shape, data).expect("shape");
        let g = self.needs(a);
        self.push(t, g, Op::Softmax(a, axis), "softmax")
    }

    /// Layer normalization over the last axis with per-channel affine.
    pub fn layernorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, DiffError> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| DiffError::BadArg {
            op: "layernorm",
            msg: "input must have rank >= 1".into(),
        })?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(DiffError::ShapeMismatch {
                op: "layernorm",
                lhs: shape.clone(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(DiffError::BadArg {
                op: "layernorm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let rows = xd.len() / c;
        let mut data = vec![0.0; xd.len()];
        for r in 0..rows {
            let xr = &xd[r * c..(r + 1) * c];
            let mean = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..c {
                data[r * c + i] = gd[i] * (xr[i] - mean) * inv + bd[i];
            }
        }
        let t = Tensor::new(&shape, data).expect("shape");
        let g = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(t, g, Op::LayerNorm { x, gamma, beta, eps }, "layernorm")
    }

    /// Sum of every element, shape `[1]`.
    pub fn sum_all(&mut self, a: Var) -> Result<Var, DiffError> {
        let s: f64 = self.value(a).data().iter().sum();
        let g = self.needs(a);
        self.push(Tensor::scalar(s), g, Op::SumAll(a), "sum_all")
    }

    /// Reduction along one axis, keeping it with extent 1.
    pub fn reduce(&mut self, a: Var, axis: usize, kind: ReduceKind) -> Result<Var, DiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(DiffError::BadArg {
                op: "reduce",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let (outer, n, inner) = lane_dims(&shape, axis);
        if n == 0 {
            return Err(DiffError::BadArg {
                op: "reduce",
                msg: "cannot reduce an empty axis".into(),
            });
        }
        let x = self.value(a).data();
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let sum: f64 = (0..n).map(|i| x[at(i)]).sum();
                data[o * inner + j] = match kind {
                    ReduceKind::Sum => sum,
                    ReduceKind::Mean => sum / n as f64,
                    ReduceKind::Var => {
                        let m = sum / n as f64;
                        (0..n).map(|i| (x[at(i)] - m).powi(2)).sum::<f64>() / n as f64
                    }
                };
            }
        }
        let t = Tensor::new(&out_shape, data).expect("shape");
        let g = self.needs(a);
        self.push(t, g, Op::Reduce { x: a, axis, kind }, "reduce")
    }

    /// Concatenation along `axis`; inputs agree on every other extent.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, DiffError> {
        if inputs.is_empty() {
            return Err(DiffError::BadArg {
                op: "concat",
                msg: "needs at least one input".into(),
            });
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(DiffError::BadArg {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {first:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = lane_dims(&out_shape, axis);
        let mut data = vec![0.0; outer * total * inner];
        let mut base = 0;
        for &v in inputs {
            let ni = self.shape(v)[axis];
            let xd = self.value(v).data();
            for o in 0..outer {
                let src = &xd[o * ni * inner..(o + 1) * ni * inner];
                let dst = &mut data[(o * total + base) * inner..(o * total + base + ni) * inner];
                dst.copy_from_slice(src);
            }
            base += ni;
        }
        let t = Tensor::new(&out_shape, data).expect("shape");
        let g = inputs.iter().any(|&v| self.needs(v));
        self.push(
            t,
            g,
            Op::Concat {
                axis,
                inputs: inputs.to_vec(),
            },
            "concat",
        )
    }

    /// Contiguous sub-range `start..start+len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, DiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(DiffError::BadArg {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of shape {shape:?}", start + len),
            });
        }
        let (outer, n, inner) = lane_dims(&shape, axis);
        let xd = self.value(a).data();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = &xd[(o * n + start) * inner..(o * n + start + len) * inner];
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let t = Tensor::new(&out_shape, data).expect("shape");
        let g = self.needs(a);
        self.push(t, g, Op::Slice { x: a, axis, start }, "slice")
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let t = self.value(a).clone().reshaped(shape)?;
        let g = self.needs(a);
        self.push(t, g, Op::Reshape(a), "reshape")
    }

    /// 2D convolution: `x [B,Ci,H,W]`, `w [Co,Ci,kh,kw]`, `b [Co]`, zero
    /// padding `pad` on both spatial sides.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, DiffError> {
        let (bn, ci, h, wd) = rank4(self.shape(x), "conv2d", self.shape(w))?;
        let (co, ciw, kh, kw) = rank4(self.shape(w), "conv2d", self.shape(x))?;
        if ci != ciw || self.value(b).numel() != co {
            return Err(DiffError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        let (ho, wo) = match (
            conv_out_extent(h, kh, stride, pad),
            conv_out_extent(wd, kw, stride, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(DiffError::BadArg {
                    op: "conv2d",
                    msg: format!("kernel {kh}x{kw} stride {stride} pad {pad} too large for {h}x{wd}"),
                })
            }
        };
        let out = conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            [bn, ci, h, wd],
            [co, kh, kw],
            stride,
            pad,
            [ho, wo],
        );
        let t = Tensor::new(&[bn, co, ho, wo], out).expect("shape");
        let g = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(t, g, Op::Conv2d { x, w, b, stride, pad }, "conv2d")
    }

    /// Transposed 2D convolution: `x [B,Ci,H,W]`, `w [Ci,Co,kh,kw]`, output
    /// extent `(H-1)*stride - 2*pad + kh`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, DiffError> {
        let (bn, ci, h, wd) = rank4(self.shape(x), "conv_transpose2d", self.shape(w))?;
        let (ciw, co, kh, kw) = rank4(self.shape(w), "conv_transpose2d", self.shape(x))?;
        if ci != ciw || self.value(b).numel() != co || stride == 0 {
            return Err(DiffError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        let ho = (h - 1) * stride + kh;
        let wo = (wd - 1) * stride + kw;
        if ho < 2 * pad || wo < 2 * pad {
            return Err(DiffError::BadArg {
                op: "conv_transpose2d",
                msg: format!("pad {pad} exceeds output extent"),
            });
        }
        let (ho, wo) = (ho - 2 * pad, wo - 2 * pad);
        let out = convt2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            [bn, ci, h, wd],
            [co, kh, kw],
            stride,
            pad,
            [ho, wo],
        );
        let t = Tensor::new(&[bn, co, ho, wo], out).expect("shape");
        let g = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            t,
            g,
            Op::ConvTranspose2d { x, w, b, stride, pad },
            "conv_transpose2d",
        )
    }

    /// 3D convolution: `x [B,Ci,D,H,W]`, `w [Co,Ci,kd,kh,kw]`, `b [Co]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, DiffError> {
        let (bn, ci, d, h, wd) = rank5(self.shape(x), "conv3d", self.shape(w))?;
        let (co, ciw, kd, kh, kw) = rank5(self.shape(w), "conv3d", self.shape(x))?;
        if ci != ciw || self.value(b).numel() != co {
            return Err(DiffError::ShapeMismatch {
                op: "conv3d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        let ext = (
            conv_out_extent(d, kd, stride, pad),
            conv_out_extent(h, kh, stride, pad),
            conv_out_extent(wd, kw, stride, pad),
        );
        let (do_, ho, wo) = match ext {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(DiffError::BadArg {
                    op: "conv3d",
                    msg: format!(
                        "kernel {kd}x{kh}x{kw} stride {stride} pad {pad} too large for {d}x{h}x{wd}"
                    ),
                })
            }
        };
        let out = conv3d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            [bn, ci, d, h, wd],
            [co, kd, kh, kw],
            stride,
            pad,
            [do_, ho, wo],
        );
        let t = Tensor::new(&[bn, co, do_, ho, wo], out).expect("shape");
        let g = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(t, g, Op::Conv3d { x, w, b, stride, pad }, "conv3d")
    }

    /// Transposed 3D convolution: `x [B,Ci,D,H,W]`, `w [Ci,Co,kd,kh,kw]`.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, DiffError> {
        let (bn, ci, d, h, wd) = rank5(self.shape(x), "conv_transpose3d", self.shape(w))?;
        let (ciw, co, kd, kh, kw) = rank5(self.shape(w), "conv_transpose3d", self.shape(x))?;
        if ci != ciw || self.value(b).numel() != co || stride == 0 {
            return Err(DiffError::ShapeMismatch {
                op: "conv_transpose3d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        let do_ = (d - 1) * stride + kd;
        let ho = (h - 1) * stride + kh;
        let wo = (wd - 1) * stride + kw;
        if do_ < 2 * pad || ho < 2 * pad || wo < 2 * pad {
            return Err(DiffError::BadArg {
                op: "conv_transpose3d",
                msg: format!("pad {pad} exceeds output extent"),
            });
        }
        let (do_, ho, wo) = (do_ - 2 * pad, ho - 2 * pad, wo - 2 * pad);
        let out = convt3d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            [bn, ci, d, h, wd],
            [co, kd, kh, kw],
            stride,
            pad,
            [do_, ho, wo],
        );
        let t = Tensor::new(&[bn, co, do_, ho, wo], out).expect("shape");
        let g = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            t,
            g,
            Op::ConvTranspose3d { x, w, b, stride, pad },
            "conv_transpose3d",
        )
    }

    /// Applies interpolation taps per channel: `src [1,C,*]` with
    /// `src_spatial` trailing elements maps to `out_shape` `[1,C,*]` with
    /// `table.out_spatial()` trailing elements.
    pub fn gather(
        &mut self,
        src: Var,
        table: Arc<GatherTable>,
        out_shape: &[usize],
    ) -> Result<Var, DiffError> {
        let shape = self.shape(src).to_vec();
        if shape.len() < 2 || shape[0] != 1 {
            return Err(DiffError::BadArg {
                op: "gather",
                msg: format!("source must be [1,C,..], got {shape:?}"),
            });
        }
        let c = shape[1];
        let spatial: usize = shape[2..].iter().product();
        if spatial != table.src_spatial() {
            return Err(DiffError::BadArg {
                op: "gather",
                msg: format!(
                    "table expects {} source positions, source has {spatial}",
                    table.src_spatial()
                ),
            });
        }
        let p = table.out_spatial();
        if out_shape.len() < 2
            || out_shape[0] != 1
            || out_shape[1] != c
            || out_shape[2..].iter().product::<usize>() != p
        {
            return Err(DiffError::BadArg {
                op: "gather",
                msg: format!("output shape {out_shape:?} does not match [1,{c},{p}]"),
            });
        }
        let srcd = self.value(src).data();
        let mut data = vec![0.0; c * p];
        data.par_chunks_mut(p).enumerate().for_each(|(ch, out)| {
            let s = &srcd[ch * spatial..(ch + 1) * spatial];
            for (pos, o) in out.iter_mut().enumerate() {
                let (idx, w) = table.taps(pos);
                let mut acc = 0.0;
                for (&i, &wi) in idx.iter().zip(w) {
                    acc += s[i as usize] * wi;
                }
                *o = acc;
            }
        });
        let t = Tensor::new(out_shape, data).expect("shape");
        let g = self.needs(src);
        self.push(t, g, Op::Gather { src, table }, "gather")
    }

    /// Per-element population variance across inputs, restricted to inputs
    /// whose mask covers the position. Inputs share one shape `[1,C,*]`;
    /// masks are per-input over the spatial extent, broadcast across C.
    /// Positions covered by no input produce zero.
    pub fn masked_variance(
        &mut self,
        inputs: &[Var],
        masks: Arc<Vec<Vec<bool>>>,
    ) -> Result<Var, DiffError> {
        if inputs.is_empty() || inputs.len() != masks.len() {
            return Err(DiffError::BadArg {
                op: "masked_variance",
                msg: format!("{} inputs vs {} masks", inputs.len(), masks.len()),
            });
        }
        let shape = self.shape(inputs[0]).to_vec();
        if shape.len() < 2 || shape[0] != 1 {
            return Err(DiffError::BadArg {
                op: "masked_variance",
                msg: format!("inputs must be [1,C,..], got {shape:?}"),
            });
        }
        let c = shape[1];
        let spatial: usize = shape[2..].iter().product();
        for &v in inputs {
            if self.shape(v) != shape.as_slice() {
                return Err(DiffError::ShapeMismatch {
                    op: "masked_variance",
                    lhs: shape.clone(),
                    rhs: self.shape(v).to_vec(),
                });
            }
        }
        for m in masks.iter() {
            if m.len() != spatial {
                return Err(DiffError::BadArg {
                    op: "masked_variance",
                    msg: format!("mask length {} vs spatial extent {spatial}", m.len()),
                });
            }
        }
        let xs: Vec<&[f64]> = inputs.iter().map(|&v| self.value(v).data()).collect();
        let mut data = vec![0.0; c * spatial];
        data.par_chunks_mut(spatial).enumerate().for_each(|(ch, out)| {
            for (p, o) in out.iter_mut().enumerate() {
                let mut n = 0.0;
                let mut sum = 0.0;
                for (x, m) in xs.iter().zip(masks.iter()) {
                    if m[p] {
                        n += 1.0;
                        sum += x[ch * spatial + p];
                    }
                }
                if n > 0.0 {
                    let mean = sum / n;
                    let mut ss = 0.0;
                    for (x, m) in xs.iter().zip(masks.iter()) {
                        if m[p] {
                            let d = x[ch * spatial + p] - mean;
                            ss += d * d;
                        }
                    }
                    *o = ss / n;
                }
            }
        });
        let t = Tensor::new(&shape, data).expect("shape");
        let g = inputs.iter().any(|&v| self.needs(v));
        self.push(
            t,
            g,
            Op::MaskedVariance {
                inputs: inputs.to_vec(),
                masks,
            },
            "masked_variance",
        )
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// gradient-carrying leaf on the path; leaves off the path read as zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        if self.value(loss).numel() != 1 {
            return Err(DiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let n = self.nodes.len();
        let mut g: Vec<Option<Vec<f64>>> = vec![None; n];
        g[loss.idx()] = Some(vec![1.0]);
        for i in (0..=loss.idx()).rev() {
            if !self.nodes[i].needs_grad {
                g[i] = None;
                continue;
            }
            let gi = match g[i].take() {
                Some(v) => v,
                None => continue,
            };
            let keep_leaf = matches!(self.nodes[i].op, Op::Leaf);
            self.backprop_node(i, &gi, &mut g);
            if keep_leaf {
                g[i] = Some(gi);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { g, shapes })
    }

    fn backprop_node(&self, i: usize, gi: &[f64], g: &mut [Option<Vec<f64>>]) {
        let acc = |g: &mut [Option<Vec<f64>>], v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.needs(v) {
                return;
            }
            let slot = &mut g[v.idx()];
            if slot.is_none() {
                *slot = Some(vec![0.0; self.value(v).numel()]);
            }
            f(slot.as_mut().unwrap());
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(g, *a, &mut |d| axpy(d, gi, 1.0));
                acc(g, *b, &mut |d| axpy(d, gi, 1.0));
            }
            Op::Sub(a, b) => {
                acc(g, *a, &mut |d| axpy(d, gi, 1.0));
                acc(g, *b, &mut |d| axpy(d, gi, -1.0));
            }
            Op::Mul(a, b) => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                acc(g, *a, &mut |d| {
                    for ((d, gi), b) in d.iter_mut().zip(gi).zip(bd) {
                        *d += gi * b;
                    }
                });
                acc(g, *b, &mut |d| {
                    for ((d, gi), a) in d.iter_mut().zip(gi).zip(ad) {
                        *d += gi * a;
                    }
                });
            }
            Op::AddScalar(a) => acc(g, *a, &mut |d| axpy(d, gi, 1.0)),
            Op::Scale(a, c) => {
                let c = *c;
                acc(g, *a, &mut |d| axpy(d, gi, c));
            }
            Op::AddRow(a, row) => {
                let c = self.value(*row).numel();
                acc(g, *a, &mut |d| axpy(d, gi, 1.0));
                acc(g, *row, &mut |d| {
                    for (k, gv) in gi.iter().enumerate() {
                        d[k % c] += gv;
                    }
                });
            }
            Op::Matmul(a, b) => {
                let [r, k] = match *self.shape(*a) {
                    [r, k] => [r, k],
                    _ => unreachable!(),
                };
                let c = self.shape(*b)[1];
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                acc(g, *a, &mut |d| {
                    // ga = g . b^T
                    for i in 0..r {
                        for kk in 0..k {
                            let mut s = 0.0;
                            for j in 0..c {
                                s += gi[i * c + j] * bd[kk * c + j];
                            }
                            d[i * k + kk] += s;
                        }
                    }
                });
                acc(g, *b, &mut |d| {
                    // gb = a^T . g
                    for kk in 0..k {
                        for i in 0..r {
                            let av = ad[i * k + kk];
                            if av == 0.0 {
                                continue;
                            }
                            let gr = &gi[i * c..(i + 1) * c];
                            let dr = &mut d[kk * c..(kk + 1) * c];
                            for (dv, gv) in dr.iter_mut().zip(gr) {
                                *dv += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Bmm { a, b, transpose_b } => {
                let (bn, r, k) = match *self.shape(*a) {
                    [n, r, k] => (n, r, k),
                    _ => unreachable!(),
                };
                let c = gi.len() / (bn * r);
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let tb = *transpose_b;
                acc(g, *a, &mut |d| {
                    for n in 0..bn {
                        let gm = &gi[n * r * c..(n + 1) * r * c];
                        let bm = &bd[n * k * c..(n + 1) * k * c];
                        let dm = &mut d[n * r * k..(n + 1) * r * k];
                        for i in 0..r {
                            for kk in 0..k {
                                let mut s = 0.0;
                                for j in 0..c {
                                    let bv = if tb { bm[j * k + kk] } else { bm[kk * c + j] };
                                    s += gm[i * c + j] * bv;
                                }
                                dm[i * k + kk] += s;
                            }
                        }
                    }
                });
                acc(g, *b, &mut |d| {
                    for n in 0..bn {
                        let gm = &gi[n * r * c..(n + 1) * r * c];
                        let am = &ad[n * r * k..(n + 1) * r * k];
                        let dm = &mut d[n * k * c..(n + 1) * k * c];
                        if tb {
                            // stored b is [c, k]: gb = gᵀ·a
                            for j in 0..c {
                                for kk in 0..k {
                                    let mut s = 0.0;
                                    for i in 0..r {
                                        s += gm[i * c + j] * am[i * k + kk];
                                    }
                                    dm[j * k + kk] += s;
                                }
                            }
                        } else {
                            for kk in 0..k {
                                for j in 0..c {
                                    let mut s = 0.0;
                                    for i in 0..r {
                                        s += am[i * k + kk] * gm[i * c + j];
                                    }
                                    dm[kk * c + j] += s;
                                }
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let [r, c] = match *self.shape(*a) {
                    [r, c] => [r, c],
                    _ => unreachable!(),
                };
                acc(g, *a, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += gi[j * r + i];
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let xd = self.value(*a).data();
                acc(g, *a, &mut |d| {
                    for ((d, gv), x) in d.iter_mut().zip(gi).zip(xd) {
                        if *x > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let xd = self.value(*a).data();
                acc(g, *a, &mut |d| {
                    for ((d, gv), x) in d.iter_mut().zip(gi).zip(xd) {
                        *d += gv * if *x > 0.0 {
                            1.0
                        } else if *x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yd = self.nodes[i].value.data();
                acc(g, *a, &mut |d| {
                    for ((d, gv), y) in d.iter_mut().zip(gi).zip(yd) {
                        *d += gv * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(a) => {
                let yd = self.nodes[i].value.data();
                acc(g, *a, &mut |d| {
                    for ((d, gv), y) in d.iter_mut().zip(gi).zip(yd) {
                        *d += gv * (1.0 - y * y);
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let yd = self.nodes[i].value.data();
                let (outer, n, inner) = lane_dims(self.shape(*a), *axis);
                acc(g, *a, &mut |d| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |ii: usize| (o * n + ii) * inner + j;
                            let dot: f64 = (0..n).map(|ii| gi[at(ii)] * yd[at(ii)]).sum();
                            for ii in 0..n {
                                d[at(ii)] += yd[at(ii)] * (gi[at(ii)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xd = self.value(*x).data();
                let gd = self.value(*gamma).data();
                let c = self.value(*gamma).numel();
                let rows = xd.len() / c;
                // Recompute per-row stats; cheaper than storing them.
                let mut xhat = vec![0.0; xd.len()];
                let mut inv = vec![0.0; rows];
                for r in 0..rows {
                    let xr = &xd[r * c..(r + 1) * c];
                    let mean = xr.iter().sum::<f64>() / c as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    inv[r] = 1.0 / (var + eps).sqrt();
                    for k in 0..c {
                        xhat[r * c + k] = (xr[k] - mean) * inv[r];
                    }
                }
                acc(g, *x, &mut |d| {
                    for r in 0..rows {
                        let gr = &gi[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let gy: Vec<f64> = gr.iter().zip(gd).map(|(g, w)| g * w).collect();
                        let m1 = gy.iter().sum::<f64>() / c as f64;
                        let m2 = gy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for k in 0..c {
                            d[r * c + k] += (gy[k] - m1 - xh[k] * m2) * inv[r];
                        }
                    }
                });
                acc(g, *gamma, &mut |d| {
                    for r in 0..rows {
                        for k in 0..c {
                            d[k] += gi[r * c + k] * xhat[r * c + k];
                        }
                    }
                });
                acc(g, *beta, &mut |d| {
                    for r in 0..rows {
                        for k in 0..c {
                            d[k] += gi[r * c + k];
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let gv = gi[0];
                acc(g, *a, &mut |d| {
                    for dv in d.iter_mut() {
                        *dv += gv;
                    }
                });
            }
            Op::Reduce { x, axis, kind } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = lane_dims(shape, *axis);
                let xd = self.value(*x).data();
                let kind = *kind;
                acc(g, *x, &mut |d| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |ii: usize| (o * n + ii) * inner + j;
                            let gv = gi[o * inner + j];
                            match kind {
                                ReduceKind::Sum => {
                                    for ii in 0..n {
                                        d[at(ii)] += gv;
                                    }
                                }
                                ReduceKind::Mean => {
                                    let s = gv / n as f64;
                                    for ii in 0..n {
                                        d[at(ii)] += s;
                                    }
                                }
                                ReduceKind::Var => {
                                    let mean: f64 =
                                        (0..n).map(|ii| xd[at(ii)]).sum::<f64>() / n as f64;
                                    let s = 2.0 * gv / n as f64;
                                    for ii in 0..n {
                                        d[at(ii)] += s * (xd[at(ii)] - mean);
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat { axis, inputs } => {
                let out_shape = self.nodes[i].value.shape();
                let (outer, total, inner) = lane_dims(out_shape, *axis);
                let mut base = 0;
                for &v in inputs {
                    let ni = self.shape(v)[*axis];
                    acc(g, v, &mut |d| {
                        for o in 0..outer {
                            let src = &gi[(o * total + base) * inner..(o * total + base + ni) * inner];
                            let dst = &mut d[o * ni * inner..(o + 1) * ni * inner];
                            for (dv, gv) in dst.iter_mut().zip(src) {
                                *dv += gv;
                            }
                        }
                    });
                    base += ni;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = lane_dims(shape, *axis);
                let len = self.nodes[i].value.shape()[*axis];
                let start = *start;
                acc(g, *x, &mut |d| {
                    for o in 0..outer {
                        let dst = &mut d[(o * n + start) * inner..(o * n + start + len) * inner];
                        let src = &gi[o * len * inner..(o + 1) * len * inner];
                        for (dv, gv) in dst.iter_mut().zip(src) {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(g, *a, &mut |d| axpy(d, gi, 1.0)),
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs: [usize; 4] = self.shape(*x).try_into().unwrap();
                let ws: [usize; 4] = self.shape(*w).try_into().unwrap();
                let os: [usize; 4] = self.nodes[i].value.shape().try_into().unwrap();
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                acc(g, *x, &mut |d| {
                    conv2d_grad_x(d, gi, wd, xs, ws, *stride, *pad, os);
                });
                acc(g, *w, &mut |d| {
                    conv2d_grad_w(d, gi, xd, xs, ws, *stride, *pad, os);
                });
                acc(g, *b, &mut |d| {
                    conv_grad_b(d, gi, os[0], os[1], os[2] * os[3]);
                });
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let xs: [usize; 4] = self.shape(*x).try_into().unwrap();
                let ws: [usize; 4] = self.shape(*w).try_into().unwrap();
                let os: [usize; 4] = self.nodes[i].value.shape().try_into().unwrap();
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                acc(g, *x, &mut |d| {
                    convt2d_grad_x(d, gi, wd, xs, ws, *stride, *pad, os);
                });
                acc(g, *w, &mut |d| {
                    convt2d_grad_w(d, gi, xd, xs, ws, *stride, *pad, os);
                });
                acc(g, *b, &mut |d| {
                    conv_grad_b(d, gi, os[0], os[1], os[2] * os[3]);
                });
            }
            Op::Conv3d { x, w, b, stride, pad } => {
                let xs: [usize; 5] = self.shape(*x).try_into().unwrap();
                let ws: [usize; 5] = self.shape(*w).try_into().unwrap();
                let os: [usize; 5] = self.nodes[i].value.shape().try_into().unwrap();
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                acc(g, *x, &mut |d| {
                    conv3d_grad_x(d, gi, wd, xs, ws, *stride, *pad, os);
                });
                acc(g, *w, &mut |d| {
                    conv3d_grad_w(d, gi, xd, xs, ws, *stride, *pad, os);
                });
                acc(g, *b, &mut |d| {
                    conv_grad_b(d, gi, os[0], os[1], os[2] * os[3] * os[4]);
                });
            }
            Op::ConvTranspose3d { x, w, b, stride, pad } => {
                let xs: [usize; 5] = self.shape(*x).try_into().unwrap();
                let ws: [usize; 5] = self.shape(*w).try_into().unwrap();
                let os: [usize; 5] = self.nodes[i].value.shape().try_into().unwrap();
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                acc(g, *x, &mut |d| {
                    convt3d_grad_x(d, gi, wd, xs, ws, *stride, *pad, os);
                });
                acc(g, *w, &mut |d| {
                    convt3d_grad_w(d, gi, xd, xs, ws, *stride, *pad, os);
                });
                acc(g, *b, &mut |d| {
                    conv_grad_b(d, gi, os[0], os[1], os[2] * os[3] * os[4]);
                });
            }
            Op::Gather { src, table } => {
                let shape = self.shape(*src);
                let spatial: usize = shape[2..].iter().product();
                let p = table.out_spatial();
                acc(g, *src, &mut |d| {
                    d.par_chunks_mut(spatial).enumerate().for_each(|(ch, dc)| {
                        let gc = &gi[ch * p..(ch + 1) * p];
                        for (pos, gv) in gc.iter().enumerate() {
                            if *gv == 0.0 {
                                continue;
                            }
                            let (idx, w) = table.taps(pos);
                            for (&si, &wi) in idx.iter().zip(w) {
                                dc[si as usize] += gv * wi;
                            }
                        }
                    });
                });
            }
            Op::MaskedVariance { inputs, masks } => {
                let shape = self.shape(inputs[0]);
                let spatial: usize = shape[2..].iter().product();
                let xs: Vec<&[f64]> = inputs.iter().map(|&v| self.value(v).data()).collect();
                // d var / d x_i = 2 (x_i - mean) / n for in-mask inputs.
                for (vi, &v) in inputs.iter().enumerate() {
                    let masks = masks.clone();
                    let xs = &xs;
                    acc(g, v, &mut |d| {
                        d.par_chunks_mut(spatial).enumerate().for_each(|(ch, dc)| {
                            for (p, dv) in dc.iter_mut().enumerate() {
                                if !masks[vi][p] {
                                    continue;
                                }
                                let gv = gi[ch * spatial + p];
                                if gv == 0.0 {
                                    continue;
                                }
                                let mut n = 0.0;
                                let mut sum = 0.0;
                                for (x, m) in xs.iter().zip(masks.iter()) {
                                    if m[p] {
                                        n += 1.0;
                                        sum += x[ch * spatial + p];
                                    }
                                }
                                let mean = sum / n;
                                *dv += gv * 2.0 * (xs[vi][ch * spatial + p] - mean) / n;
                            }
                        });
                    });
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn rank4(
    s: &[usize],
    op: &'static str,
    other: &[usize],
) -> Result<(usize, usize, usize, usize), DiffError> {
    match *s {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(DiffError::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: other.to_vec(),
        }),
    }
}

fn rank5(
    s: &[usize],
    op: &'static str,
    other: &[usize],
) -> Result<(usize, usize, usize, usize, usize), DiffError> {
    match *s {
        [a, b, c, d, e] => Ok((a, b, c, d, e)),
        _ => Err(DiffError::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: other.to_vec(),
        }),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let or = &mut out[i * c..(i + 1) * c];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let br = &b[kk * c..(kk + 1) * c];
            for (o, bv) in or.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    [bn, ci, h, wd]: [usize; 4],
    [co, kh, kw]: [usize; 3],
    stride: usize,
    pad: usize,
    [ho, wo]: [usize; 2],
) -> Vec<f64> {
    let mut out = vec![0.0; bn * co * ho * wo];
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(plane, op)| {
        let (n, c_out) = (plane / co, plane % co);
        op.fill(b[c_out]);
        for c_in in 0..ci {
            let xp = &x[(n * ci + c_in) * h * wd..(n * ci + c_in + 1) * h * wd];
            for ky in 0..kh {
                let offy = ky as i64 - pad as i64;
                let (ylo, yhi) = out_range(h, offy, stride, ho);
                for kx in 0..kw {
                    let offx = kx as i64 - pad as i64;
                    let (xlo, xhi) = out_range(wd, offx, stride, wo);
                    if xlo >= xhi {
                        continue;
                    }
                    let wv = w[((c_out * ci + c_in) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let iy = (oy * stride) as i64 + offy;
                        let xrow = &xp[iy as usize * wd..(iy as usize + 1) * wd];
                        let orow = &mut op[oy * wo..(oy + 1) * wo];
                        if stride == 1 {
                            let ix0 = (xlo as i64 + offx) as usize;
                            let xs = &xrow[ix0..ix0 + (xhi - xlo)];
                            let os = &mut orow[xlo..xhi];
                            for (o, xv) in os.iter_mut().zip(xs) {
                                *o += wv * xv;
                            }
                        } else {
                            for ox in xlo..xhi {
                                let ix = (ox * stride) as i64 + offx;
                                orow[ox] += wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_grad_x(
    gx: &mut [f64],
    go: &[f64],
    w: &[f64],
    [bn, ci, h, wd]: [usize; 4],
    [_co_w, _ci_w, kh, kw]: [usize; 4],
    stride: usize,
    pad: usize,
    [_bn_o, co, ho, wo]: [usize; 4],
) -> () {
    let _ = bn;
    gx.par_chunks_mut(h * wd).enumerate().for_each(|(plane, gp)| {
        let (n, c_in) = (plane / ci, plane % ci);
        for c_out in 0..co {
            let gop = &go[(n * co + c_out) * ho * wo..(n * co + c_out + 1) * ho * wo];
            for ky in 0..kh {
                let offy = ky as i64 - pad as i64;
                let (ylo, yhi) = out_range(h, offy, stride, ho);
                for kx in 0..kw {
                    let offx = kx as i64 - pad as i64;
                    let (xlo, xhi) = out_range(wd, offx, stride, wo);
                    if xlo >= xhi {
                        continue;
                    }
                    let wv = w[((c_out * ci + c_in) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let iy = ((oy * stride) as i64 + offy) as usize;
                        let grow = &gop[oy * wo..(oy + 1) * wo];
                        let xrow = &mut gp[iy * wd..(iy + 1) * wd];
                        if stride == 1 {
                            let ix0 = (xlo as i64 + offx) as usize;
                            let xs = &mut xrow[ix0..ix0 + (xhi - xlo)];
                            for (d, gv) in xs.iter_mut().zip(&grow[xlo..xhi]) {
                                *d += wv * gv;
                            }
                        } else {
                            for ox in xlo..xhi {
                                let ix = ((ox * stride) as i64 + offx) as usize;
                                xrow[ix] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn conv2d_grad_w(
    gw: &mut [f64],
    go: &[f64],
    x: &[f64],
    [bn, ci, h, wd]: [usize; 4],
    [_co_w, _ci_w, kh, kw]: [usize; 4],
    stride: usize,
    pad: usize,
    [_bn_o, co, ho, wo]: [usize; 4],
) {
    gw.par_chunks_mut(ci * kh * kw).enumerate().for_each(|(c_out, gwc)| {
        for n in 0..bn {
            let gop = &go[(n * co + c_out) * ho * wo..(n * co + c_out + 1) * ho * wo];
            for c_in in 0..ci {
                let xp = &x[(n * ci + c_in) * h * wd..(n * ci + c_in + 1) * h * wd];
                for ky in 0..kh {
                    let offy = ky as i64 - pad as i64;
                    let (ylo, yhi) = out_range(h, offy, stride, ho);
                    for kx in 0..kw {
                        let offx = kx as i64 - pad as i64;
                        let (xlo, xhi) = out_range(wd, offx, stride, wo);
                        if xlo >= xhi {
                            continue;
                        }
                        let mut s = 0.0;
                        for oy in ylo..yhi {
                            let iy = ((oy * stride) as i64 + offy) as usize;
                            let grow = &gop[oy * wo..(oy + 1) * wo];
                            let xrow = &xp[iy * wd..(iy + 1) * wd];
                            if stride == 1 {
                                let ix0 = (xlo as i64 + offx) as usize;
                                for (gv, xv) in grow[xlo..xhi].iter().zip(&xrow[ix0..]) {
                                    s += gv * xv;
                                }
                            } else {
                                for ox in xlo..xhi {
                                    let ix = ((ox * stride) as i64 + offx) as usize;
                                    s += grow[ox] * xrow[ix];
                                }
                            }
                        }
                        gwc[(c_in * kh + ky) * kw + kx] += s;
                    }
                }
            }
        }
    });
}

fn conv_grad_b(gb: &mut [f64], go: &[f64], bn: usize, co: usize, spatial: usize) {
    for n in 0..bn {
        for (c, gbc) in gb.iter_mut().enumerate().take(co) {
            let p = &go[(n * co + c) * spatial..(n * co + c + 1) * spatial];
            *gbc += p.iter().sum::<f64>();
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn convt2d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    [bn, ci, h, wd]: [usize; 4],
    [co, kh, kw]: [usize; 3],
    stride: usize,
    pad: usize,
    [ho, wo]: [usize; 2],
) -> Vec<f64> {
    // Gather form: out[oy,ox] sums x[iy,ix]*w[ky,kx] over ky,kx with
    // iy = (oy + pad - ky)/stride exact.
    let mut out = vec![0.0; bn * co * ho * wo];
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(plane, op)| {
        let (n, c_out) = (plane / co, plane % co);
        op.fill(b[c_out]);
        for c_in in 0..ci {
            let xp = &x[(n * ci + c_in) * h * wd..(n * ci + c_in + 1) * h * wd];
            let wp = &w[(c_in * co + c_out) * kh * kw..(c_in * co + c_out + 1) * kh * kw];
            for oy in 0..ho {
                for ky in 0..kh {
                    let ty = oy as i64 + pad as i64 - ky as i64;
                    if ty < 0 || ty % stride as i64 != 0 {
                        continue;
                    }
                    let iy = (ty / stride as i64) as usize;
                    if iy >= h {
                        continue;
                    }
                    let xrow = &xp[iy * wd..(iy + 1) * wd];
                    let orow = &mut op[oy * wo..(oy + 1) * wo];
                    for kx in 0..kw {
                        let wv = wp[ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for (ox, o) in orow.iter_mut().enumerate() {
                            let tx = ox as i64 + pad as i64 - kx as i64;
                            if tx < 0 || tx % stride as i64 != 0 {
                                continue;
                            }
                            let ix = (tx / stride as i64) as usize;
                            if ix < wd {
                                *o += xrow[ix] * wv;
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
fn convt2d_grad_x(
    gx: &mut [f64],
    go: &[f64],
    w: &[f64],
    [bn, ci, h, wd]: [usize; 4],
    [_ci_w, _co_w, kh, kw]: [usize; 4],
    stride: usize,
    pad: usize,
    [_bn_o, co, ho, wo]: [usize; 4],
) {
    let _ = bn;
    // gx[iy,ix] sums go[iy*s+ky-pad, ix*s+kx-pad]*w[ky,kx]: a plain conv.
    gx.par_chunks_mut(h * wd).enumerate().for_each(|(plane, gp)| {
        let (n, c_in) = (plane / ci, plane % ci);
        for c_out in 0..co {
            let gop = &go[(n * co + c_out) * ho * wo..(n * co + c_out + 1) * ho * wo];
            let wp = &w[(c_in * co + c_out) * kh * kw..(c_in * co + c_out + 1) * kh * kw];
            for iy in 0..h {
                for ky in 0..kh {
                    let oy = iy as i64 * stride as i64 + ky as i64 - pad as i64;
                    if oy < 0 || oy >= ho as i64 {
                        continue;
                    }
                    let grow = &gop[oy as usize * wo..(oy as usize + 1) * wo];
                    let xrow = &mut gp[iy * wd..(iy + 1) * wd];
                    for kx in 0..kw {
                        let wv = wp[ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for (ix, d) in xrow.iter_mut().enumerate() {
                            let ox = ix as i64 * stride as i64 + kx as i64 - pad as i64;
                            if ox >= 0 && ox < wo as i64 {
                                *d += wv * grow[ox as usize];
                            }
                        }
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn convt2d_grad_w(
    gw: &mut [f64],
    go: &[f64],
    x: &[f64],
    [bn, ci, h, wd]: [usize; 4],
    [_ci_w, co_w, kh, kw]: [usize; 4],
    stride: usize,
    pad: usize,
    [_bn_o, co, ho, wo]: [usize; 4],
) {
    let _ = co_w;
    gw.par_chunks_mut(co * kh * kw).enumerate().for_each(|(c_in, gwc)| {
        for n in 0..bn {
            let xp = &x[(n * ci + c_in) * h * wd..(n * ci + c_in + 1) * h * wd];
            for c_out in 0..co {
                let gop = &go[(n * co + c_out) * ho * wo..(n * co + c_out + 1) * ho * wo];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut s = 0.0;
                        for iy in 0..h {
                            let oy = iy as i64 * stride as i64 + ky as i64 - pad as i64;
                            if oy < 0 || oy >= ho as i64 {
                                continue;
                            }
                            let grow = &gop[oy as usize * wo..(oy as usize + 1) * wo];
                            let xrow = &xp[iy * wd..(iy + 1) * wd];
                            for (ix, xv) in xrow.iter().enumerate() {
                                let ox = ix as i64 * stride as i64 + kx as i64 - pad as i64;
                                if ox >= 0 && ox < wo as i64 {
                                    s += xv * grow[ox as usize];
                                }
                            }
                        }
                        gwc[(c_out * kh + ky) * kw + kx] += s;
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn conv3d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    [bn, ci, d, h, wd]: [usize; 5],
    [co, kd, kh, kw]: [usize; 4],
    stride: usize,
    pad: usize,
    [do_, ho, wo]: [usize; 3],
) -> Vec<f64> {
    let mut out = vec![0.0; bn * co * do_ * ho * wo];
    out.par_chunks_mut(do_ * ho * wo).enumerate().for_each(|(plane, op)| {
        let (n, c_out) = (plane / co, plane % co);
        op.fill(b[c_out]);
        for c_in in 0..ci {
            let xp = &x[(n * ci + c_in) * d * h * wd..(n * ci + c_in + 1) * d * h * wd];
            for kz in 0..kd {
                let offz = kz as i64 - pad as i64;
                let (zlo, zhi) = out_range(d, offz, stride, do_);
                for ky in 0..kh {
                    let offy = ky as i64 - pad as i64;
                    let (ylo, yhi) = out_range(h, offy, stride, ho);
                    for kx in 0..kw {
                        let offx = kx as i64 - pad as i64;
                        let (xlo, xhi) = out_range(wd, offx, stride, wo);
                        if xlo >= xhi {
                            continue;
                        }
                        let wv = w[(((c_out * ci + c_in) * kd + kz) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oz in zlo..zhi {
                            let iz = ((oz * stride) as i64 + offz) as usize;
                            for oy in ylo..yhi {
                                let iy = ((oy * stride) as i64 + offy) as usize;
                                let xrow = &xp[(iz * h + iy) * wd..(iz * h + iy + 1) * wd];
                                let orow = &mut op[(oz * ho + oy) * wo..(oz * ho + oy + 1) * wo];
                                if stride == 1 {
                                    let ix0 = (xlo as i64 + offx) as usize;
                                    for (o, xv) in
                                        orow[xlo..xhi].iter_mut().zip(&xrow[ix0..])
                                    {
                                        *o += wv * xv;
                                    }
                                } else {
                                    for ox in xlo..xhi {
                                        let ix = ((ox * stride) as i64 + offx) as usize;
                                        orow[ox] += wv * xrow[ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3d_grad_x(
    gx: &mut [f64],
    go: &[f64],
    w: &[f64],
    [bn, ci, d, h, wd]: [usize; 5],
    [_co_w, _ci_w, kd, kh, kw]: [usize; 5],
    stride: usize,
    pad: usize,
    [_bn_o, co, do_, ho, wo]: [usize; 5],
) {
    let _ = bn;
    gx.par_chunks_mut(d * h * wd).enumerate().for_each(|(plane, gp)| {
        let (n, c_in) = (plane / ci, plane % ci);
        for c_out in 0..co {
            let gop =
                &go[(n * co + c_out) * do_ * ho * wo..(n * co + c_out + 1) * do_ * ho * wo];
            for kz in 0..kd {
                let offz = kz as i64 - pad as i64;
                let (zlo, zhi) = out_range(d, offz, stride, do_);
                for ky in 0..kh {
                    let offy = ky as i64 - pad as i64;
                    let (ylo, yhi) = out_range(h, offy, stride, ho);
                    for kx in 0..kw {
                        let offx = kx as i64 - pad as i64;
                        let (xlo, xhi) = out_range(wd, offx, stride, wo);
                        if xlo >= xhi {
                            continue;
                        }
                        let wv = w[(((c_out * ci + c_in) * kd + kz) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oz in zlo..zhi {
                            let iz = ((oz * stride) as i64 + offz) as usize;
                            for oy in ylo..yhi {
                                let iy = ((oy * stride) as i64 + offy) as usize;
                                let grow = &gop[(oz * ho + oy) * wo..(oz * ho + oy + 1) * wo];
                                let xrow = &mut gp[(iz * h + iy) * wd..(iz * h + iy + 1) * wd];
                                if stride == 1 {
                                    let ix0 = (xlo as i64 + offx) as usize;
                                    for (dv, gv) in
                                        xrow[ix0..ix0 + (xhi - xlo)].iter_mut().zip(&grow[xlo..xhi])
                                    {
                                        *dv += wv * gv;
                                    }
                                } else {
                                    for ox in xlo..xhi {
                                        let ix = ((ox * stride) as i64 + offx) as usize;
                                        xrow[ix] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn conv3d_grad_w(
    gw: &mut [f64],
    go: &[f64],
    x: &[f64],
    [bn, ci, d, h, wd]: [usize; 5],
    [_co_w, _ci_w, kd, kh, kw]: [usize; 5],
    stride: usize,
    pad: usize,
    [_bn_o, co, do_, ho, wo]: [usize; 5],
) {
    gw.par_chunks_mut(ci * kd * kh * kw).enumerate().for_each(|(c_out, gwc)| {
        for n in 0..bn {
            let gop =
                &go[(n * co + c_out) * do_ * ho * wo..(n * co + c_out + 1) * do_ * ho * wo];
            for c_in in 0..ci {
                let xp = &x[(n * ci + c_in) * d * h * wd..(n * ci + c_in + 1) * d * h * wd];
                for kz in 0..kd {
                    let offz = kz as i64 - pad as i64;
                    let (zlo, zhi) = out_range(d, offz, stride, do_);
                    for ky in 0..kh {
                        let offy = ky as i64 - pad as i64;
                        let (ylo, yhi) = out_range(h, offy, stride, ho);
                        for kx in 0..kw {
                            let offx = kx as i64 - pad as i64;
                            let (xlo, xhi) = out_range(wd, offx, stride, wo);
                            if xlo >= xhi {
                                continue;
                            }
                            let mut s = 0.0;
                            for oz in zlo..zhi {
                                let iz = ((oz * stride) as i64 + offz) as usize;
                                for oy in ylo..yhi {
                                    let iy = ((oy * stride) as i64 + offy) as usize;
                                    let grow =
                                        &gop[(oz * ho + oy) * wo..(oz * ho + oy + 1) * wo];
                                    let xrow =
                                        &xp[(iz * h + iy) * wd..(iz * h + iy + 1) * wd];
                                    if stride == 1 {
                                        let ix0 = (xlo as i64 + offx) as usize;
                                        for (gv, xv) in grow[xlo..xhi].iter().zip(&xrow[ix0..]) {
                                            s += gv * xv;
                                        }
                                    } else {
                                        for ox in xlo..xhi {
                                            let ix = ((ox * stride) as i64 + offx) as usize;
                                            s += grow[ox] * xrow[ix];
                                        }
                                    }
                                }
                            }
                            gwc[((c_in * kd + kz) * kh + ky) * kw + kx] += s;
                        }
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn convt3d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    [bn, ci, d, h, wd]: [usize; 5],
    [co, kd, kh, kw]: [usize; 4],
    stride: usize,
    pad: usize,
    [do_, ho, wo]: [usize; 3],
) -> Vec<f64> {
    let s = stride as i64;
    let mut out = vec![0.0; bn * co * do_ * ho * wo];
    out.par_chunks_mut(do_ * ho * wo).enumerate().for_each(|(plane, op)| {
        let (n, c_out) = (plane / co, plane % co);
        op.fill(b[c_out]);
        for c_in in 0..ci {
            let xp = &x[(n * ci + c_in) * d * h * wd..(n * ci + c_in + 1) * d * h * wd];
            let wp = &w[(c_in * co + c_out) * kd * kh * kw..(c_in * co + c_out + 1) * kd * kh * kw];
            for oz in 0..do_ {
                for kz in 0..kd {
                    let tz = oz as i64 + pad as i64 - kz as i64;
                    if tz < 0 || tz % s != 0 {
                        continue;
                    }
                    let iz = (tz / s) as usize;
                    if iz >= d {
                        continue;
                    }
                    for oy in 0..ho {
                        for ky in 0..kh {
                            let ty = oy as i64 + pad as i64 - ky as i64;
                            if ty < 0 || ty % s != 0 {
                                continue;
                            }
                            let iy = (ty / s) as usize;
                            if iy >= h {
                                continue;
                            }
                            let xrow = &xp[(iz * h + iy) * wd..(iz * h + iy + 1) * wd];
                            let orow = &mut op[(oz * ho + oy) * wo..(oz * ho + oy + 1) * wo];
                            for kx in 0..kw {
                                let wv = wp[(kz * kh + ky) * kw + kx];
                                if wv == 0.0 {
                                    continue;
                                }
                                for (ox, o) in orow.iter_mut().enumerate() {
                                    let tx = ox as i64 + pad as i64 - kx as i64;
                                    if tx < 0 || tx % s != 0 {
                                        continue;
                                    }
                                    let ix = (tx / s) as usize;
                                    if ix < wd {
                                        *o += xrow[ix] * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
fn convt3d_grad_x(
    gx: &mut [f64],
    go: &[f64],
    w: &[f64],
    [bn, ci, d, h, wd]: [usize; 5],
    [_ci_w, _co_w, kd, kh, kw]: [usize; 5],
    stride: usize,
    pad: usize,
    [_bn_o, co, do_, ho, wo]: [usize; 5],
) {
    let _ = bn;
    let s = stride as i64;
    gx.par_chunks_mut(d * h * wd).enumerate().for_each(|(plane, gp)| {
        let (n, c_in) = (plane / ci, plane % ci);
        for c_out in 0..co {
            let gop =
                &go[(n * co + c_out) * do_ * ho * wo..(n * co + c_out + 1) * do_ * ho * wo];
            let wp = &w[(c_in * co + c_out) * kd * kh * kw..(c_in * co + c_out + 1) * kd * kh * kw];
            for iz in 0..d {
                for kz in 0..kd {
                    let oz = iz as i64 * s + kz as i64 - pad as i64;
                    if oz < 0 || oz >= do_ as i64 {
                        continue;
                    }
                    for iy in 0..h {
                        for ky in 0..kh {
                            let oy = iy as i64 * s + ky as i64 - pad as i64;
                            if oy < 0 || oy >= ho as i64 {
                                continue;
                            }
                            let grow = &gop[(oz as usize * ho + oy as usize) * wo
                                ..(oz as usize * ho + oy as usize + 1) * wo];
                            let xrow = &mut gp[(iz * h + iy) * wd..(iz * h + iy + 1) * wd];
                            for kx in 0..kw {
                                let wv = wp[(kz * kh + ky) * kw + kx];
                                if wv == 0.0 {
                                    continue;
                                }
                                for (ix, dv) in xrow.iter_mut().enumerate() {
                                    let ox = ix as i64 * s + kx as i64 - pad as i64;
                                    if ox >= 0 && ox < wo as i64 {
                                        *dv += wv * grow[ox as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn convt3d_grad_w(
    gw: &mut [f64],
    go: &[f64],
    x: &[f64],
    [bn, ci, d, h, wd]: [usize; 5],
    [_ci_w, co_w, kd, kh, kw]: [usize; 5],
    stride: usize,
    pad: usize,
    [_bn_o, co, do_, ho, wo]: [usize; 5],
) {
    let _ = co_w;
    let s = stride as i64;
    gw.par_chunks_mut(co * kd * kh * kw).enumerate().for_each(|(c_in, gwc)| {
        for n in 0..bn {
            let xp = &x[(n * ci + c_in) * d * h * wd..(n * ci + c_in + 1) * d * h * wd];
            for c_out in 0..co {
                let gop =
                    &go[(n * co + c_out) * do_ * ho * wo..(n * co + c_out + 1) * do_ * ho * wo];
                for kz in 0..kd {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut sum = 0.0;
                            for iz in 0..d {
                                let oz = iz as i64 * s + kz as i64 - pad as i64;
                                if oz < 0 || oz >= do_ as i64 {
                                    continue;
                                }
                                for iy in 0..h {
                                    let oy = iy as i64 * s + ky as i64 - pad as i64;
                                    if oy < 0 || oy >= ho as i64 {
                                        continue;
                                    }
                                    let grow = &gop[(oz as usize * ho + oy as usize) * wo
                                        ..(oz as usize * ho + oy as usize + 1) * wo];
                                    let xrow =
                                        &xp[(iz * h + iy) * wd..(iz * h + iy + 1) * wd];
                                    for (ix, xv) in xrow.iter().enumerate() {
                                        let ox = ix as i64 * s + kx as i64 - pad as i64;
                                        if ox >= 0 && ox < wo as i64 {
                                            sum += xv * grow[ox as usize];
                                        }
                                    }
                                }
                            }
                            gwc[((c_out * kd + kz) * kh + ky) * kw + kx] += sum;
                        }
                    }
                }
            }
        }
    });
}
