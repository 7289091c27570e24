//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every forward op in topological order; [`Tape::backward`]
//! replays the records once in reverse and accumulates gradients onto leaves.
//! Tensors are immutable once written: ops only ever read earlier nodes and
//! append new ones, so the graph is acyclic by construction.
//!
//! Shapes are explicit. There is no general broadcasting; the only implicit
//! expansion is a trailing-shape operand applied across the leading batch axis
//! (`add_bcast` / `mul_bcast`). Everything else must reshape first.

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Add(TensorId, TensorId),
    AddBcast(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    MulBcast(TensorId, TensorId),
    Scale(TensorId, f64),
    ScaleBy(TensorId, TensorId),
    Relu(TensorId),
    Gelu(TensorId),
    Log(TensorId),
    SoftmaxRows(TensorId),
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    },
    MeanAxis(TensorId, usize),
    MeanAll(TensorId),
    SumAll(TensorId),
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    SliceRows(TensorId, usize, usize),
    SliceCols(TensorId, usize, usize),
    NormalizeRows(TensorId),
    CosineRows(TensorId, TensorId),
    GatherCols(TensorId, Vec<usize>),
    Reshape(TensorId),
}

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
    name: Option<String>,
}

/// Records forward ops and runs one reverse pass.
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

pub(crate) const NORM_EPS: f64 = 1e-12;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major matrix product `a[n,k] @ b[k,m]`.
pub fn matmul_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let ci = &mut c[i * m..(i + 1) * m];
        let ai = &a[i * k..(i + 1) * k];
        for (p, &aip) in ai.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let bp = &b[p * m..(p + 1) * m];
            for (cv, &bv) in ci.iter_mut().zip(bp) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `a[n,k] @ b[m,k]^T -> [n,m]` (both operands row-major, untransposed in memory).
pub fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let bj = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (av, bv) in ai.iter().zip(bj) {
                s += av * bv;
            }
            c[i * m + j] = s;
        }
    }
    c
}

/// `a[n,k]^T @ b[n,m] -> [k,m]`.
pub fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * m];
    for i in 0..n {
        let ai = &a[i * k..(i + 1) * k];
        let bi = &b[i * m..(i + 1) * m];
        for (p, &aip) in ai.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let cp = &mut c[p * m..(p + 1) * m];
            for (cv, &bv) in cp.iter_mut().zip(bi) {
                *cv += aip * bv;
            }
        }
    }
    c
}

fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = c * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            spent: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Gradient buffer of a node, present on leaves after `backward`.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), numel(&shape));
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            requires_grad,
            op,
            name: None,
        });
        id
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Trainable leaf. `name` is carried so optimizer errors can point at it.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, name: &str) -> TensorId {
        let id = self.push(data, shape, true, Op::Leaf);
        self.nodes[id.0].name = Some(name.to_string());
        id
    }

    /// Constant input; gradients never flow into it.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> TensorId {
        self.push(data, shape, false, Op::Leaf)
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[id.0].shape;
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(Error::BadShape {
                op,
                expected: "2-D tensor",
                got: s.clone(),
            }),
        }
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (n, k) = self.dims2(a, "matmul")?;
        let (k2, m) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data = matmul_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, vec![n, m], rg, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (n, m) = self.dims2(a, "transpose")?;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = src[i * m + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(data, vec![m, n], rg, Op::Transpose(a)))
    }

    fn elementwise(
        &mut self,
        a: TensorId,
        b: TensorId,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, shape, rg, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn bcast_check(&self, a: TensorId, b: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa.len() < 2 || sb.len() + 1 != sa.len() || sa[1..] != sb[..] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok((sa[0], numel(sb)))
    }

    /// `a[n, rest..] + b[rest..]`: `b` is added to every leading-axis slice.
    pub fn add_bcast(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (n, w) = self.bcast_check(a, b, "add_bcast")?;
        let bd = &self.nodes[b.0].data;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % w])
            .collect();
        let _ = n;
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, shape, rg, Op::AddBcast(a, b)))
    }

    /// `a[n, rest..] * b[rest..]` elementwise over every leading-axis slice.
    pub fn mul_bcast(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (_, w) = self.bcast_check(a, b, "mul_bcast")?;
        let bd = &self.nodes[b.0].data;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bd[i % w])
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, shape, rg, Op::MulBcast(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(data, shape, rg, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.scale(a, -1.0)
    }

    /// Multiply every element of `a` by the scalar node `s` (shape `[1]`).
    pub fn scale_by(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        if numel(&self.nodes[s.0].shape) != 1 {
            return Err(Error::BadShape {
                op: "scale_by",
                expected: "scalar (one element)",
                got: self.nodes[s.0].shape.clone(),
            });
        }
        let sv = self.nodes[s.0].data[0];
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x * sv).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(data, shape, rg, Op::ScaleBy(a, s)))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(data, shape, rg, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| gelu_scalar(x))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(data, shape, rg, Op::Gelu(a))
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].data.iter().any(|&x| x <= 0.0) {
            return Err(Error::NonFinite("log of non-positive value"));
        }
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x.ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        Ok(self.push(data, shape, rg, Op::Log(a)))
    }

    /// Numerically stable softmax along the last axis of a 2-D tensor.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (n, m) = self.dims2(a, "softmax_rows")?;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = &src[i * m..(i + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                data[i * m + j] = e;
                z += e;
            }
            for j in 0..m {
                data[i * m + j] /= z;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(data, vec![n, m], rg, Op::SoftmaxRows(a)))
    }

    /// Layer norm along the last axis with affine `gamma`/`beta` of width `d`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (n, d) = self.dims2(x, "layer_norm")?;
        if numel(&self.nodes[gamma.0].shape) != d || numel(&self.nodes[beta.0].shape) != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            data,
            vec![n, d],
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
        ))
    }

    /// Mean along one axis of a 2-D tensor; output is 1-D.
    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let (n, m) = self.dims2(a, "mean_axis")?;
        let src = &self.nodes[a.0].data;
        let data = match axis {
            0 => {
                let mut out = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        out[j] += src[i * m + j];
                    }
                }
                for v in out.iter_mut() {
                    *v /= n as f64;
                }
                out
            }
            1 => {
                let mut out = vec![0.0; n];
                for i in 0..n {
                    out[i] = src[i * m..(i + 1) * m].iter().sum::<f64>() / m as f64;
                }
                out
            }
            _ => {
                return Err(Error::BadShape {
                    op: "mean_axis",
                    expected: "axis 0 or 1",
                    got: vec![axis],
                })
            }
        };
        let len = data.len();
        let rg = self.rg(a);
        Ok(self.push(data, vec![len], rg, Op::MeanAxis(a, axis)))
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let src = &self.nodes[a.0].data;
        let mean = src.iter().sum::<f64>() / src.len() as f64;
        let rg = self.rg(a);
        self.push(vec![mean], vec![1], rg, Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s = self.nodes[a.0].data.iter().sum::<f64>();
        let rg = self.rg(a);
        self.push(vec![s], vec![1], rg, Op::SumAll(a))
    }

    /// Stack 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty());
        let (_, m) = self.dims2(parts[0], "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let (np, mp) = self.dims2(p, "concat_rows")?;
            if mp != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            rows += np;
            rg |= self.rg(p);
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        Ok(self.push(data, vec![rows, m], rg, Op::ConcatRows(parts.to_vec())))
    }

    /// Stack 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty());
        let (n, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        let mut rg = false;
        for &p in parts {
            let (np, mp) = self.dims2(p, "concat_cols")?;
            if np != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            widths.push(mp);
            total += mp;
            rg |= self.rg(p);
        }
        let mut data = vec![0.0; n * total];
        for i in 0..n {
            let mut off = 0;
            for (pi, &p) in parts.iter().enumerate() {
                let w = widths[pi];
                let src = &self.nodes[p.0].data[i * w..(i + 1) * w];
                data[i * total + off..i * total + off + w].copy_from_slice(src);
                off += w;
            }
        }
        Ok(self.push(data, vec![n, total], rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (n, m) = self.dims2(a, "slice_rows")?;
        if start + len > n {
            return Err(Error::BadShape {
                op: "slice_rows",
                expected: "slice within row extent",
                got: vec![start, len, n],
            });
        }
        let data = self.nodes[a.0].data[start * m..(start + len) * m].to_vec();
        let rg = self.rg(a);
        Ok(self.push(data, vec![len, m], rg, Op::SliceRows(a, start, len)))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (n, m) = self.dims2(a, "slice_cols")?;
        if start + len > m {
            return Err(Error::BadShape {
                op: "slice_cols",
                expected: "slice within column extent",
                got: vec![start, len, m],
            });
        }
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; n * len];
        for i in 0..n {
            data[i * len..(i + 1) * len].copy_from_slice(&src[i * m + start..i * m + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(data, vec![n, len], rg, Op::SliceCols(a, start, len)))
    }

    /// Rows scaled to unit L2 norm. Errors on (near-)zero rows rather than
    /// silently dividing by the epsilon guard.
    pub fn normalize_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (n, d) = self.dims2(a, "normalize_rows")?;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
            if norm < NORM_EPS {
                return Err(Error::ZeroNorm("normalize_rows"));
            }
            for j in 0..d {
                data[i * d + j] = row[j] / norm;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(data, vec![n, d], rg, Op::NormalizeRows(a)))
    }

    /// Row-wise cosine similarity of two `[n, d]` tensors, output `[n]`.
    pub fn cosine_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (n, d) = self.dims2(a, "cosine_rows")?;
        let (n2, d2) = self.dims2(b, "cosine_rows")?;
        if n != n2 || d != d2 {
            return Err(Error::ShapeMismatch {
                op: "cosine_rows",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut data = vec![0.0; n];
        for i in 0..n {
            let u = &ad[i * d..(i + 1) * d];
            let v = &bd[i * d..(i + 1) * d];
            let nu = u.iter().map(|&x| x * x).sum::<f64>().sqrt();
            let nv = v.iter().map(|&x| x * x).sum::<f64>().sqrt();
            if nu < NORM_EPS || nv < NORM_EPS {
                return Err(Error::ZeroNorm("cosine_rows"));
            }
            let dot = u.iter().zip(v).map(|(&x, &y)| x * y).sum::<f64>();
            data[i] = dot / (nu * nv);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, vec![n], rg, Op::CosineRows(a, b)))
    }

    /// Pick one column per row: `out[i] = a[i, idx[i]]`.
    pub fn gather_cols(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (n, m) = self.dims2(a, "gather_cols")?;
        if idx.len() != n {
            return Err(Error::BadShape {
                op: "gather_cols",
                expected: "one index per row",
                got: vec![idx.len(), n],
            });
        }
        for &j in idx {
            if j >= m {
                return Err(Error::LabelOutOfRange {
                    label: j,
                    classes: m,
                });
            }
        }
        let src = &self.nodes[a.0].data;
        let data: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| src[i * m + j])
            .collect();
        let rg = self.rg(a);
        Ok(self.push(data, vec![n], rg, Op::GatherCols(a, idx.to_vec())))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if numel(&shape) != self.nodes[a.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape,
            });
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.rg(a);
        Ok(self.push(data, shape, rg, Op::Reshape(a)))
    }

    /// Repeat a `[d]` or `[1, d]` tensor into `[n, d]` rows.
    pub fn broadcast_rows(&mut self, a: TensorId, n: usize) -> Result<TensorId> {
        let w = numel(&self.nodes[a.0].shape);
        let flat = self.reshape(a, vec![1, w])?;
        let parts = vec![flat; n];
        self.concat_rows(&parts)
    }

    fn accum(&mut self, id: TensorId, contrib: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (gv, &cv) in g.iter_mut().zip(contrib) {
                    *gv += cv;
                }
            }
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    /// Reverse pass from a scalar loss. Visits each node exactly once,
    /// accumulates gradients on `requires_grad` leaves (zero for leaves the
    /// loss never touched), and frees every intermediate gradient buffer as
    /// it goes. A tape can only run backward once; build a fresh forward
    /// pass for another.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.spent {
            return Err(Error::TapeConsumed);
        }
        if numel(&self.nodes[loss.0].shape) != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.spent = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for node in self.nodes.iter_mut() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                self.nodes[i].grad = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // leaves keep their accumulated gradient
            }
            let g = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue, // not an ancestor of the loss
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => unreachable!(),
                Op::Matmul(a, b) => {
                    let (n, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let m = self.nodes[b.0].shape[1];
                    if self.rg(a) {
                        let da = matmul_nt(&g, &self.nodes[b.0].data, n, m, k);
                        self.accum(a, &da);
                    }
                    if self.rg(b) {
                        let db = matmul_tn(&self.nodes[a.0].data, &g, n, k, m);
                        self.accum(b, &db);
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let mut da = vec![0.0; n * m];
                    for r in 0..m {
                        for c in 0..n {
                            da[c * m + r] = g[r * n + c];
                        }
                    }
                    self.accum(a, &da);
                }
                Op::Add(a, b) => {
                    self.accum(a, &g);
                    self.accum(b, &g);
                }
                Op::Sub(a, b) => {
                    self.accum(a, &g);
                    let neg: Vec<f64> = g.iter().map(|&x| -x).collect();
                    self.accum(b, &neg);
                }
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        let da: Vec<f64> = g
                            .iter()
                            .zip(&self.nodes[b.0].data)
                            .map(|(&x, &y)| x * y)
                            .collect();
                        self.accum(a, &da);
                    }
                    if self.rg(b) {
                        let db: Vec<f64> = g
                            .iter()
                            .zip(&self.nodes[a.0].data)
                            .map(|(&x, &y)| x * y)
                            .collect();
                        self.accum(b, &db);
                    }
                }
                Op::AddBcast(a, b) => {
                    self.accum(a, &g);
                    if self.rg(b) {
                        let w = self.nodes[b.0].data.len();
                        let mut db = vec![0.0; w];
                        for (idx, &gv) in g.iter().enumerate() {
                            db[idx % w] += gv;
                        }
                        self.accum(b, &db);
                    }
                }
                Op::MulBcast(a, b) => {
                    let w = self.nodes[b.0].data.len();
                    if self.rg(a) {
                        let bd = &self.nodes[b.0].data;
                        let da: Vec<f64> = g
                            .iter()
                            .enumerate()
                            .map(|(idx, &gv)| gv * bd[idx % w])
                            .collect();
                        self.accum(a, &da);
                    }
                    if self.rg(b) {
                        let ad = &self.nodes[a.0].data;
                        let mut db = vec![0.0; w];
                        for (idx, &gv) in g.iter().enumerate() {
                            db[idx % w] += gv * ad[idx];
                        }
                        self.accum(b, &db);
                    }
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.iter().map(|&x| x * c).collect();
                    self.accum(a, &da);
                }
                Op::ScaleBy(a, s) => {
                    let sv = self.nodes[s.0].data[0];
                    if self.rg(a) {
                        let da: Vec<f64> = g.iter().map(|&x| x * sv).collect();
                        self.accum(a, &da);
                    }
                    if self.rg(s) {
                        let ds = g
                            .iter()
                            .zip(&self.nodes[a.0].data)
                            .map(|(&gv, &av)| gv * av)
                            .sum::<f64>();
                        self.accum(s, &[ds]);
                    }
                }
                Op::Relu(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    self.accum(a, &da);
                }
                Op::Gelu(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&gv, &x)| gv * gelu_grad_scalar(x))
                        .collect();
                    self.accum(a, &da);
                }
                Op::Log(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&gv, &x)| gv / x)
                        .collect();
                    self.accum(a, &da);
                }
                Op::SoftmaxRows(a) => {
                    let (n, m) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let y = &self.nodes[i].data;
                    let mut da = vec![0.0; n * m];
                    for r in 0..n {
                        let yr = &y[r * m..(r + 1) * m];
                        let gr = &g[r * m..(r + 1) * m];
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for c in 0..m {
                            da[r * m + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    self.accum(a, &da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    eps,
                } => {
                    let (n, d) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let src = self.nodes[x.0].data.clone();
                    let gam = self.nodes[gamma.0].data.clone();
                    let mut dx = vec![0.0; n * d];
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..n {
                        let row = &src[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                        let gg: Vec<f64> = gr.iter().zip(&gam).map(|(&a, &b)| a * b).collect();
                        let mean_gg = gg.iter().sum::<f64>() / d as f64;
                        let mean_gg_xhat =
                            gg.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            dx[r * d + c] = (gg[c] - mean_gg - xhat[c] * mean_gg_xhat) * inv_std;
                            dg[c] += gr[c] * xhat[c];
                            db[c] += gr[c];
                        }
                    }
                    self.accum(x, &dx);
                    self.accum(gamma, &dg);
                    self.accum(beta, &db);
                }
                Op::MeanAxis(a, axis) => {
                    let (n, m) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let mut da = vec![0.0; n * m];
                    match axis {
                        0 => {
                            for r in 0..n {
                                for c in 0..m {
                                    da[r * m + c] = g[c] / n as f64;
                                }
                            }
                        }
                        _ => {
                            for r in 0..n {
                                for c in 0..m {
                                    da[r * m + c] = g[r] / m as f64;
                                }
                            }
                        }
                    }
                    self.accum(a, &da);
                }
                Op::MeanAll(a) => {
                    let len = self.nodes[a.0].data.len();
                    let da = vec![g[0] / len as f64; len];
                    self.accum(a, &da);
                }
                Op::SumAll(a) => {
                    let len = self.nodes[a.0].data.len();
                    let da = vec![g[0]; len];
                    self.accum(a, &da);
                }
                Op::ConcatRows(parts) => {
                    let m = self.nodes[i].shape[1];
                    let mut row = 0;
                    for p in parts {
                        let np = self.nodes[p.0].shape[0];
                        let seg = g[row * m..(row + np) * m].to_vec();
                        self.accum(p, &seg);
                        row += np;
                    }
                }
                Op::ConcatCols(parts) => {
                    let n = self.nodes[i].shape[0];
                    let total = self.nodes[i].shape[1];
                    let mut off = 0;
                    for p in parts {
                        let w = self.nodes[p.0].shape[1];
                        let mut seg = vec![0.0; n * w];
                        for r in 0..n {
                            seg[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        self.accum(p, &seg);
                        off += w;
                    }
                }
                Op::SliceRows(a, start, len) => {
                    let m = self.nodes[a.0].shape[1];
                    let n = self.nodes[a.0].shape[0];
                    let mut da = vec![0.0; n * m];
                    da[start * m..(start + len) * m].copy_from_slice(&g);
                    self.accum(a, &da);
                }
                Op::SliceCols(a, start, len) => {
                    let (n, m) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let mut da = vec![0.0; n * m];
                    for r in 0..n {
                        da[r * m + start..r * m + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    self.accum(a, &da);
                }
                Op::NormalizeRows(a) => {
                    let (n, d) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let y = self.nodes[i].data.clone();
                    let src = &self.nodes[a.0].data;
                    let mut da = vec![0.0; n * d];
                    for r in 0..n {
                        let u = &src[r * d..(r + 1) * d];
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let norm = u.iter().map(|&v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for c in 0..d {
                            da[r * d + c] = (gr[c] - yr[c] * dot) / norm;
                        }
                    }
                    self.accum(a, &da);
                }
                Op::CosineRows(a, b) => {
                    let d = self.nodes[a.0].shape[1];
                    let n = self.nodes[a.0].shape[0];
                    let (ad, bd) = (self.nodes[a.0].data.clone(), self.nodes[b.0].data.clone());
                    let mut da = vec![0.0; n * d];
                    let mut db = vec![0.0; n * d];
                    for r in 0..n {
                        let u = &ad[r * d..(r + 1) * d];
                        let v = &bd[r * d..(r + 1) * d];
                        let nu = u.iter().map(|&x| x * x).sum::<f64>().sqrt();
                        let nv = v.iter().map(|&x| x * x).sum::<f64>().sqrt();
                        let c = self.nodes[i].data[r];
                        for j in 0..d {
                            let uh = u[j] / nu;
                            let vh = v[j] / nv;
                            da[r * d + j] = g[r] * (vh - c * uh) / nu;
                            db[r * d + j] = g[r] * (uh - c * vh) / nv;
                        }
                    }
                    self.accum(a, &da);
                    self.accum(b, &db);
                }
                Op::GatherCols(a, idx) => {
                    let m = self.nodes[a.0].shape[1];
                    let n = self.nodes[a.0].shape[0];
                    let mut da = vec![0.0; n * m];
                    for (r, &j) in idx.iter().enumerate() {
                        da[r * m + j] = g[r];
                    }
                    self.accum(a, &da);
                }
                Op::Reshape(a) => {
                    self.accum(a, &g);
                }
            }
        }
        Ok(())
    }

    /// Collect `(name, grad)` for every named leaf that received a gradient.
    pub fn named_grads(&self) -> Vec<(String, Vec<f64>)> {
        self.nodes
            .iter()
            .filter_map(|n| match (&n.op, &n.name, &n.grad) {
                (Op::Leaf, Some(name), Some(g)) => Some((name.clone(), g.clone())),
                _ => None,
            })
            .collect()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_logits() {
        let mut t = Tape::new();
        let a = t.constant(vec![0.0, 0.0, 0.0], vec![1, 3]);
        let s = t.softmax_rows(a).unwrap();
        for &v in t.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let a = t.constant(vec![3.0, -1.0, 0.5, 10.0, 10.0, -40.0], vec![2, 3]);
        let s = t.softmax_rows(a).unwrap();
        for r in 0..2 {
            let sum: f64 = t.data(s)[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(t.data(s)[r * 3..(r + 1) * 3].iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn cosine_invariant_to_positive_scaling() {
        let v = vec![0.3, -1.2, 2.2, 0.01];
        for &c in &[0.5, 2.0, 1e6, 1e-6] {
            let mut t = Tape::new();
            let a = t.constant(v.clone(), vec![1, 4]);
            let b = t.constant(v.iter().map(|x| x * c).collect(), vec![1, 4]);
            let s = t.cosine_rows(a, b).unwrap();
            assert!((t.data(s)[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_last_axis_of_ones() {
        let mut t = Tape::new();
        let a = t.constant(vec![1.0; 6], vec![2, 3]);
        let m = t.mean_axis(a, 1).unwrap();
        assert_eq!(t.shape(m), &[2]);
        assert_eq!(t.data(m), &[1.0, 1.0]);
    }

    #[test]
    fn grad_of_linear_is_the_input() {
        // loss = sum(w * x) with fixed x -> grad(w) = x
        let mut t = Tape::new();
        let w = t.leaf(vec![0.5, -2.0, 3.0], vec![1, 3], "w");
        let x = t.constant(vec![1.0, 2.0, -4.0], vec![1, 3]);
        let prod = t.mul(w, x).unwrap();
        let loss = t.sum_all(prod);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[1.0, 2.0, -4.0]);
    }

    #[test]
    fn grad_zero_when_loss_independent() {
        let mut t = Tape::new();
        let w = t.leaf(vec![1.0, 2.0], vec![1, 2], "w");
        let x = t.constant(vec![5.0], vec![1]);
        let loss = t.sum_all(x);
        t.backward(loss).unwrap();
        // w never fed the loss: its gradient is populated with zeros
        assert_eq!(t.grad(w).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn second_backward_errors() {
        let mut t = Tape::new();
        let w = t.leaf(vec![1.0], vec![1], "w");
        let loss = t.sum_all(w);
        t.backward(loss).unwrap();
        assert!(matches!(t.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let w = t.leaf(vec![1.0, 2.0], vec![1, 2], "w");
        assert!(matches!(t.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(vec![0.0; 6], vec![2, 3]);
        let b = t.constant(vec![0.0; 8], vec![2, 4]);
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
    }

    #[test]
    fn matmul_against_hand_computed() {
        let mut t = Tape::new();
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let b = t.constant(vec![5.0, 6.0, 7.0, 8.0], vec![2, 2]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut t = Tape::new();
        let a = t.constant(vec![1.0, 2.0], vec![1, 2]);
        let b = t.constant(vec![3.0, 4.0, 5.0, 6.0], vec![2, 2]);
        let cat = t.concat_rows(&[a, b]).unwrap();
        let back = t.slice_rows(cat, 1, 2).unwrap();
        assert_eq!(t.data(back), t.data(b));
    }

    #[test]
    fn backward_deterministic_bitwise() {
        let run = || {
            let mut t = Tape::new();
            let w = t.leaf(vec![0.1, -0.7, 0.33, 1.9], vec![2, 2], "w");
            let x = t.constant(vec![0.5, 0.25, -1.5, 2.0], vec![2, 2]);
            let h = t.matmul(w, x).unwrap();
            let h = t.gelu(h);
            let s = t.softmax_rows(h).unwrap();
            let l = t.log(s).unwrap();
            let loss = t.mean_all(l);
            t.backward(loss).unwrap();
            t.grad(w).unwrap().to_vec()
        };
        let g1 = run();
        let g2 = run();
        assert_eq!(g1, g2); // bitwise identical
    }
}
