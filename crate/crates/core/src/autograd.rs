//! Reverse-mode differentiation over small dense arrays.
//!
//! A [`Graph`] is a tape: every primitive appends a node whose parents have
//! smaller indices, so walking the tape backwards is a reverse topological
//! order and each node is visited exactly once. Gradients from fan-out are
//! summed into the parent before the parent is visited.
//!
//! All arithmetic is `f64`. Parameters are kept on the `f32` grid between
//! optimizer steps (see [`Tensor::round_to_f32`]) so they survive binary32
//! storage unchanged.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = f64::from(*v as f32);
        }
    }

    fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    PairSum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    SliceCols { x: Var, start: usize },
    Rows { x: Var, index: Vec<usize> },
    Gather { x: Var, index: Vec<usize> },
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    LogSumExp(Var),
    Sum(Var),
    Mean { x: Var, axis: usize },
    Max { x: Var, argmax: Vec<usize> },
    SpanMax { x: Var, argmax: Vec<usize> },
    L2Normalize { x: Var, eps: f64 },
    LayerNorm { x: Var, eps: f64 },
    Dropout { x: Var, mask: Vec<f64> },
    Bilinear { x: Var, u: Var, y: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Splits `shape` around `axis` into `(outer, len, inner)` block sizes.
fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log(sum(exp(x)))` with the maximum shifted out. Empty input yields
/// negative infinity.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softplus(x: f64) -> f64 {
    stable_softplus(x)
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[x.0].value;
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| f(v)).collect(),
        };
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            return Err(Error::dim(name, &va.shape, &vb.shape));
        }
        let value = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != 2 || vb.rank() != 2 || va.shape[1] != vb.shape[0] {
            return Err(Error::dim("matmul", &va.shape, &vb.shape));
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&va.data, &vb.data, &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.rank() != 2 {
            return Err(Error::dim("transpose", &v.shape, &[]));
        }
        let (m, n) = (v.shape[0], v.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v.data[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data: out,
            },
            Op::Transpose(x),
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x + b` with `b` (rank 1) broadcast over every leading index of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        if vb.rank() != 1 || vx.rank() == 0 || vx.cols() != vb.len() {
            return Err(Error::dim("add_bias", &vx.shape, &vb.shape));
        }
        let c = vb.len();
        let data = vx.data.iter().enumerate().map(|(i, &v)| v + vb.data[i % c]).collect();
        let value = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(value, Op::AddBias(x, b), rg))
    }

    /// `out[i, j, :] = a[i, :] + b[j, :]` for `a: [m, r]`, `b: [n, r]`.
    pub fn pair_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != 2 || vb.rank() != 2 || va.shape[1] != vb.shape[1] {
            return Err(Error::dim("pair_sum", &va.shape, &vb.shape));
        }
        let (m, n, r) = (va.shape[0], vb.shape[0], va.shape[1]);
        let mut out = Vec::with_capacity(m * n * r);
        for i in 0..m {
            for j in 0..n {
                for k in 0..r {
                    out.push(va.data[i * r + k] + vb.data[j * r + k]);
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n, r],
                data: out,
            },
            Op::PairSum(a, b),
            rg,
        ))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != v.len() {
            return Err(Error::dim("reshape", &v.shape, shape));
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: v.data.clone(),
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", &base, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_blocks(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let v = &self.nodes[p.0].value;
                let block = v.shape[axis] * inner;
                data.extend_from_slice(&v.data[o * block..(o + 1) * block]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.rank() != 2 || start >= end || end > v.shape[1] {
            return Err(Error::dim("slice_cols", &v.shape, &[start, end]));
        }
        let (m, n) = (v.shape[0], v.shape[1]);
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&v.data[i * n + start..i * n + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![m, end - start],
                data,
            },
            Op::SliceCols { x, start },
            rg,
        ))
    }

    /// Selected rows of a matrix, repeats allowed.
    pub fn rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.rank() != 2 || index.iter().any(|&i| i >= v.shape[0]) {
            return Err(Error::dim("rows", &v.shape, &[index.len()]));
        }
        let n = v.shape[1];
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            data.extend_from_slice(&v.data[i * n..(i + 1) * n]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![index.len(), n],
                data,
            },
            Op::Rows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Flat-index gather into a rank-1 result.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if index.iter().any(|&i| i >= v.len()) {
            return Err(Error::dim("gather", &v.shape, &[index.len()]));
        }
        let data = index.iter().map(|&i| v.data[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![index.len()],
                data,
            },
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), stable_sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), stable_softplus)
    }

    /// Log-sum-exp over every element, giving a scalar.
    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.is_empty() {
            return Err(Error::dim("log_sum_exp", &v.shape, &[]));
        }
        let value = Tensor::scalar(log_sum_exp(&v.data));
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSumExp(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.nodes[x.0].value.data.iter().sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if axis >= v.rank() || v.shape[axis] == 0 {
            return Err(Error::dim("mean_axis", &v.shape, &[axis]));
        }
        let (outer, len, inner) = axis_blocks(&v.shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += v.data[base + i];
                }
            }
        }
        data.iter_mut().for_each(|d| *d /= len as f64);
        let mut shape = v.shape.clone();
        shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Mean { x, axis }, rg))
    }

    /// Maximum along `axis`. The gradient flows to the first maximal entry.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if axis >= v.rank() || v.shape[axis] == 0 {
            return Err(Error::dim("max_axis", &v.shape, &[axis]));
        }
        let (outer, len, inner) = axis_blocks(&v.shape, axis);
        let mut data = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    let val = v.data[base + i];
                    if val > data[o * inner + i] || l == 0 {
                        data[o * inner + i] = val;
                        argmax[o * inner + i] = base + i;
                    }
                }
            }
        }
        let mut shape = v.shape.clone();
        shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Max { x, argmax }, rg))
    }

    /// Column-wise maximum over each row range `start..=end` (0-based,
    /// inclusive) of a matrix, one output row per range.
    pub fn span_max(&mut self, x: Var, ranges: &[(usize, usize)]) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.rank() != 2 || ranges.iter().any(|&(s, e)| s > e || e >= v.shape[0]) {
            return Err(Error::dim("span_max", &v.shape, &[ranges.len()]));
        }
        let d = v.shape[1];
        let mut data = Vec::with_capacity(ranges.len() * d);
        let mut argmax = Vec::with_capacity(ranges.len() * d);
        for &(s, e) in ranges {
            for k in 0..d {
                let mut best = s * d + k;
                for row in s + 1..=e {
                    if v.data[row * d + k] > v.data[best] {
                        best = row * d + k;
                    }
                }
                data.push(v.data[best]);
                argmax.push(best);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![ranges.len(), d],
                data,
            },
            Op::SpanMax { x, argmax },
            rg,
        ))
    }

    /// Divides each vector along the last axis by its Euclidean norm
    /// (floored at `eps`).
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.rank() == 0 {
            return Err(Error::dim("l2_normalize", &v.shape, &[]));
        }
        let c = v.cols();
        let mut data = v.data.clone();
        for row in data.chunks_mut(c) {
            let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt().max(eps);
            row.iter_mut().for_each(|a| *a /= norm);
        }
        let value = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::L2Normalize { x, eps }, rg))
    }

    /// Zero-mean, unit-variance normalization over the last axis, without
    /// affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.rank() == 0 {
            return Err(Error::dim("layer_norm", &v.shape, &[]));
        }
        let c = v.cols();
        let mut data = v.data.clone();
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / c as f64;
            let sd = (var + eps).sqrt();
            row.iter_mut().for_each(|a| *a = (*a - mean) / sd);
        }
        let value = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::LayerNorm { x, eps }, rg))
    }

    /// Multiplies by an explicit keep mask, already scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if mask.len() != v.len() {
            return Err(Error::dim("dropout", &v.shape, &[mask.len()]));
        }
        let data = v.data.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    /// `out[i, j, k] = sum_ab x[i, a] * u[a, k, b] * y[j, b]` for
    /// `x: [m, h1]`, `u: [h1, r, h2]`, `y: [n, h2]`.
    pub fn bilinear(&mut self, x: Var, u: Var, y: Var) -> Result<Var> {
        let (vx, vu, vy) = (&self.nodes[x.0].value, &self.nodes[u.0].value, &self.nodes[y.0].value);
        if vx.rank() != 2 || vu.rank() != 3 || vy.rank() != 2 {
            return Err(Error::dim("bilinear", &vx.shape, &vu.shape));
        }
        if vx.shape[1] != vu.shape[0] {
            return Err(Error::dim("bilinear", &vx.shape, &vu.shape));
        }
        if vy.shape[1] != vu.shape[2] {
            return Err(Error::dim("bilinear", &vu.shape, &vy.shape));
        }
        let (m, n, r) = (vx.shape[0], vy.shape[0], vu.shape[1]);
        let t = bilinear_left(vx, vu);
        let h2 = vu.shape[2];
        let mut out = vec![0.0; m * n * r];
        for i in 0..m {
            for j in 0..n {
                let yj = &vy.data[j * h2..(j + 1) * h2];
                for k in 0..r {
                    let tik = &t[(i * r + k) * h2..(i * r + k + 1) * h2];
                    out[(i * n + j) * r + k] = tik.iter().zip(yj).map(|(a, b)| a * b).sum();
                }
            }
        }
        let rg = self.rg(x) || self.rg(u) || self.rg(y);
        Ok(self.push(
            Tensor {
                shape: vec![m, n, r],
                data: out,
            },
            Op::Bilinear { x, u, y },
            rg,
        ))
    }

    /// Populates gradients of `root` with respect to every node that
    /// depends on a trainable leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::filled(&rv.shape, 1.0));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.data.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                slot @ None => {
                    *slot = Some(Tensor {
                        shape: self.nodes[v.0].value.shape.clone(),
                        data: delta,
                    })
                }
            }
        };
        let gd = &g.data;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                if self.rg(*a) {
                    // dA = G * B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gd[i * n + j] * vb.data[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    acc(*a, da);
                }
                if self.rg(*b) {
                    // dB = A^T * G
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = va.data[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * gd[i * n + j];
                            }
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (out.shape[0], out.shape[1]);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[j * m + i] = gd[i * n + j];
                    }
                }
                acc(*x, dx);
            }
            Op::Add(a, b) => {
                acc(*a, gd.clone());
                acc(*b, gd.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gd.clone());
                acc(*b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, gd.iter().zip(&vb.data).map(|(g, y)| g * y).collect());
                acc(*b, gd.iter().zip(&va.data).map(|(g, x)| g * x).collect());
            }
            Op::AddBias(x, b) => {
                acc(*x, gd.clone());
                let c = val(*b).len();
                let mut db = vec![0.0; c];
                for (i, v) in gd.iter().enumerate() {
                    db[i % c] += v;
                }
                acc(*b, db);
            }
            Op::PairSum(a, b) => {
                let (m, n, r) = (out.shape[0], out.shape[1], out.shape[2]);
                let mut da = vec![0.0; m * r];
                let mut db = vec![0.0; n * r];
                for i in 0..m {
                    for j in 0..n {
                        for k in 0..r {
                            let v = gd[(i * n + j) * r + k];
                            da[i * r + k] += v;
                            db[j * r + k] += v;
                        }
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Scale(x, c) => acc(*x, gd.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, gd.clone()),
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_blocks(&out.shape, *axis);
                let total = out.shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).shape[*axis] * inner;
                    let mut dp = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        let base = o * total + offset;
                        dp.extend_from_slice(&gd[base..base + len]);
                    }
                    acc(*p, dp);
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let vx = val(*x);
                let (m, n) = (vx.shape[0], vx.shape[1]);
                let w = out.shape[1];
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                acc(*x, dx);
            }
            Op::Rows { x, index } => {
                let vx = val(*x);
                let n = vx.shape[1];
                let mut dx = vec![0.0; vx.len()];
                for (r, &i) in index.iter().enumerate() {
                    for c in 0..n {
                        dx[i * n + c] += gd[r * n + c];
                    }
                }
                acc(*x, dx);
            }
            Op::Gather { x, index } => {
                let mut dx = vec![0.0; val(*x).len()];
                for (r, &i) in index.iter().enumerate() {
                    dx[i] += gd[r];
                }
                acc(*x, dx);
            }
            Op::Tanh(x) => acc(*x, gd.iter().zip(&out.data).map(|(g, y)| g * (1.0 - y * y)).collect()),
            Op::Sigmoid(x) => acc(*x, gd.iter().zip(&out.data).map(|(g, y)| g * y * (1.0 - y)).collect()),
            Op::Exp(x) => acc(*x, gd.iter().zip(&out.data).map(|(g, y)| g * y).collect()),
            Op::Log(x) => acc(*x, gd.iter().zip(&val(*x).data).map(|(g, v)| g / v).collect()),
            Op::Softplus(x) => acc(
                *x,
                gd.iter()
                    .zip(&val(*x).data)
                    .map(|(g, v)| g * stable_sigmoid(*v))
                    .collect(),
            ),
            Op::LogSumExp(x) => {
                let y = out.data[0];
                let g0 = gd[0];
                acc(*x, val(*x).data.iter().map(|v| g0 * (v - y).exp()).collect());
            }
            Op::Sum(x) => acc(*x, vec![gd[0]; val(*x).len()]),
            Op::Mean { x, axis } => {
                let vx = val(*x);
                let (outer, len, inner) = axis_blocks(&vx.shape, *axis);
                let mut dx = vec![0.0; vx.len()];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            dx[(o * len + l) * inner + i] = gd[o * inner + i] / len as f64;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Max { x, argmax } | Op::SpanMax { x, argmax } => {
                let mut dx = vec![0.0; val(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += gd[o];
                }
                acc(*x, dx);
            }
            Op::L2Normalize { x, eps } => {
                let vx = val(*x);
                let c = vx.cols();
                let mut dx = vec![0.0; vx.len()];
                for (r, row) in vx.data.chunks(c).enumerate() {
                    let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let y = &out.data[r * c..(r + 1) * c];
                    let gr = &gd[r * c..(r + 1) * c];
                    if norm <= *eps {
                        for k in 0..c {
                            dx[r * c + k] = gr[k] / eps;
                        }
                        continue;
                    }
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        dx[r * c + k] = (gr[k] - y[k] * dot) / norm;
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm { x, eps } => {
                let vx = val(*x);
                let c = vx.cols();
                let mut dx = vec![0.0; vx.len()];
                for (r, row) in vx.data.chunks(c).enumerate() {
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / c as f64;
                    let sd = (var + eps).sqrt();
                    let y = &out.data[r * c..(r + 1) * c];
                    let gr = &gd[r * c..(r + 1) * c];
                    let g_mean = gr.iter().sum::<f64>() / c as f64;
                    let gy_mean = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for k in 0..c {
                        dx[r * c + k] = (gr[k] - g_mean - y[k] * gy_mean) / sd;
                    }
                }
                acc(*x, dx);
            }
            Op::Dropout { x, mask } => acc(*x, gd.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::Bilinear { x, u, y } => {
                let (vx, vu, vy) = (val(*x), val(*u), val(*y));
                let (m, h1) = (vx.shape[0], vx.shape[1]);
                let (r, h2) = (vu.shape[1], vu.shape[2]);
                let n = vy.shape[0];
                // dT[i,k,b] = sum_j G[i,j,k] y[j,b]
                let mut dt = vec![0.0; m * r * h2];
                for i in 0..m {
                    for j in 0..n {
                        let yj = &vy.data[j * h2..(j + 1) * h2];
                        for k in 0..r {
                            let gv = gd[(i * n + j) * r + k];
                            if gv == 0.0 {
                                continue;
                            }
                            let row = &mut dt[(i * r + k) * h2..(i * r + k + 1) * h2];
                            row.iter_mut().zip(yj).for_each(|(a, b)| *a += gv * b);
                        }
                    }
                }
                if self.rg(*y) {
                    let t = bilinear_left(vx, vu);
                    let mut dy = vec![0.0; n * h2];
                    for i in 0..m {
                        for j in 0..n {
                            for k in 0..r {
                                let gv = gd[(i * n + j) * r + k];
                                if gv == 0.0 {
                                    continue;
                                }
                                let tik = &t[(i * r + k) * h2..(i * r + k + 1) * h2];
                                let row = &mut dy[j * h2..(j + 1) * h2];
                                row.iter_mut().zip(tik).for_each(|(a, b)| *a += gv * b);
                            }
                        }
                    }
                    acc(*y, dy);
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; m * h1];
                    for i in 0..m {
                        for a in 0..h1 {
                            let ua = &vu.data[a * r * h2..(a + 1) * r * h2];
                            let dti = &dt[i * r * h2..(i + 1) * r * h2];
                            dx[i * h1 + a] = ua.iter().zip(dti).map(|(p, q)| p * q).sum();
                        }
                    }
                    acc(*x, dx);
                }
                if self.rg(*u) {
                    let mut du = vec![0.0; h1 * r * h2];
                    for i in 0..m {
                        let dti = &dt[i * r * h2..(i + 1) * r * h2];
                        for a in 0..h1 {
                            let xa = vx.data[i * h1 + a];
                            if xa == 0.0 {
                                continue;
                            }
                            let row = &mut du[a * r * h2..(a + 1) * r * h2];
                            row.iter_mut().zip(dti).for_each(|(p, q)| *p += xa * q);
                        }
                    }
                    acc(*u, du);
                }
            }
        }
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, bv)| *o += aip * bv);
        }
    }
}

/// `t[i, k, b] = sum_a x[i, a] * u[a, k, b]`.
fn bilinear_left(x: &Tensor, u: &Tensor) -> Vec<f64> {
    let (m, h1) = (x.shape[0], x.shape[1]);
    let block = u.shape[1] * u.shape[2];
    let mut t = vec![0.0; m * block];
    for i in 0..m {
        let ti = &mut t[i * block..(i + 1) * block];
        for a in 0..h1 {
            let xa = x.data[i * h1 + a];
            if xa == 0.0 {
                continue;
            }
            let ua = &u.data[a * block..(a + 1) * block];
            ti.iter_mut().zip(ua).for_each(|(o, v)| *o += xa * v);
        }
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub const SOURCE_TRAINING: AdamConfig = AdamConfig {
        lr: 1e-3,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };

    pub const FINE_TUNING: AdamConfig = AdamConfig {
        lr: 1e-4,
        ..AdamConfig::SOURCE_TRAINING
    };

    pub fn with_lr(self, lr: f64) -> Self {
        AdamConfig { lr, ..self }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig::SOURCE_TRAINING
    }
}

/// Adam with bias correction. Moments are created lazily on the first step
/// and must keep matching the parameter shapes afterwards.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. On a non-finite gradient nothing is modified and the
    /// error names the offending parameter by position in `params`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("adam", &[params.len()], &[grads.len()]));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape != g.shape {
                return Err(Error::dim("adam", &p.shape, &g.shape));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { param: format!("#{i}") });
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.shape != p.shape)
        {
            return Err(Error::Contract("parameter layout changed between Adam steps".into()));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = beta1 * m.data[k] + (1.0 - beta1) * gk;
                v.data[k] = beta2 * v.data[k] + (1.0 - beta2) * gk * gk;
                let mhat = m.data[k] / c1;
                let vhat = v.data[k] / c2;
                p.data[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`, one
/// coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = x.clone();
    let mut out = Tensor::zeros(&x.shape);
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = f(&probe);
        probe.data[i] = orig - h;
        let down = f(&probe);
        probe.data[i] = orig;
        out.data[i] = (up - down) / (2.0 * h);
    }
    out
}

/// `|a - b| / max(|a|, |b|, floor)`, maximized over elements.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data
        .iter()
        .zip(&numeric.data)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// `||a - b|| / max(||a||, ||b||)` over a whole tensor; zero when both vanish.
pub fn norm_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff: f64 = analytic
        .data
        .iter()
        .zip(&numeric.data)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.data.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.data.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
