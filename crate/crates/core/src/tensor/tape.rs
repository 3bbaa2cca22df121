use std::cell::{Ref, RefCell};

use rand::Rng;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        d_in: usize,
        d_out: usize,
    },
    Softmax(Var),
    TopK {
        x: Var,
        mask: Vec<bool>,
    },
    RowNormalize {
        x: Var,
        sums: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Exp(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Concat {
        a: Var,
        b: Var,
        da: usize,
        db: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    GatherFlat {
        x: Var,
        idx: Vec<usize>,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    SegmentMean {
        x: Var,
        seg: usize,
    },
    Sum(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: f64,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    AttentionPool {
        x: Var,
        query: Var,
        seq: usize,
        probs: Vec<f64>,
    },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable operations for one forward/backward pass.
///
/// Nodes are append-only; a tape is meant to live for a single step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(shape_err(op, a, b));
    }
    Ok(())
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::numeric(format!("{op}: non-finite input")));
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&x| f(x)).collect(),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push(&self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        self.push_raw(value, op, requires_grad)
    }

    fn with<T>(&self, f: impl FnOnce(&[Node]) -> T) -> T {
        f(&self.nodes.borrow())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with(|n| {
            let (x, y) = (&n[a.0].value, &n[b.0].value);
            same_shape("add", x, y).map(|_| zip(x, y, |p, q| p + q))
        })?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with(|n| {
            let (x, y) = (&n[a.0].value, &n[b.0].value);
            same_shape("sub", x, y).map(|_| zip(x, y, |p, q| p - q))
        })?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with(|n| {
            let (x, y) = (&n[a.0].value, &n[b.0].value);
            same_shape("mul", x, y).map(|_| zip(x, y, |p, q| p * q))
        })?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = self.with(|n| map(&n[a.0].value, |x| c * x));
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// Adds a constant tensor (no gradient flows to it).
    pub fn add_const(&self, a: Var, c: &Tensor) -> Result<Var> {
        let value = self.with(|n| {
            let x = &n[a.0].value;
            same_shape("add_const", x, c).map(|_| zip(x, c, |p, q| p + q))
        })?;
        Ok(self.push(value, Op::AddConst(a), &[a]))
    }

    /// Elementwise product with a constant tensor (masks, dropout).
    pub fn mul_const(&self, a: Var, c: &Tensor) -> Result<Var> {
        let value = self.with(|n| {
            let x = &n[a.0].value;
            same_shape("mul_const", x, c).map(|_| zip(x, c, |p, q| p * q))
        })?;
        Ok(self.push(value, Op::MulConst(a, c.data.clone()), &[a]))
    }

    /// `x[.., j] + b[j]` over the trailing dimension.
    pub fn add_row(&self, x: Var, b: Var) -> Result<Var> {
        let value = self.with(|n| {
            let (xv, bv) = (&n[x.0].value, &n[b.0].value);
            if bv.shape.len() != 1 || bv.numel() != xv.last_dim() {
                return Err(shape_err("add_row", xv, bv));
            }
            let d = bv.numel();
            let mut out = xv.clone();
            for (i, o) in out.data.iter_mut().enumerate() {
                *o += bv.data[i % d];
            }
            Ok(out)
        })?;
        Ok(self.push(value, Op::AddRow(x, b), &[x, b]))
    }

    /// `x[.., j] * g[j]` over the trailing dimension.
    pub fn mul_row(&self, x: Var, g: Var) -> Result<Var> {
        let value = self.with(|n| {
            let (xv, gv) = (&n[x.0].value, &n[g.0].value);
            if gv.shape.len() != 1 || gv.numel() != xv.last_dim() {
                return Err(shape_err("mul_row", xv, gv));
            }
            let d = gv.numel();
            let mut out = xv.clone();
            for (i, o) in out.data.iter_mut().enumerate() {
                *o *= gv.data[i % d];
            }
            Ok(out)
        })?;
        Ok(self.push(value, Op::MulRow(x, g), &[x, g]))
    }

    /// Multiplies every entry by a one-element variable.
    pub fn mul_scalar(&self, x: Var, s: Var) -> Result<Var> {
        let value = self.with(|n| {
            let (xv, sv) = (&n[x.0].value, &n[s.0].value);
            if sv.numel() != 1 {
                return Err(shape_err("mul_scalar", xv, sv));
            }
            let c = sv.data[0];
            Ok(map(xv, |v| v * c))
        })?;
        Ok(self.push(value, Op::MulScalar(x, s), &[x, s]))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, m, k, nn) = self.with(|n| {
            let (av, bv) = (&n[a.0].value, &n[b.0].value);
            match (av.shape.as_slice(), bv.shape.as_slice()) {
                ([m, k], [k2, nn]) if k == k2 => {
                    let mut out = vec![0.0; m * nn];
                    kernels::matmul(&av.data, &bv.data, *m, *k, *nn, &mut out);
                    Ok((
                        Tensor {
                            shape: vec![*m, *nn],
                            data: out,
                        },
                        *m,
                        *k,
                        *nn,
                    ))
                }
                _ => Err(shape_err("matmul", av, bv)),
            }
        })?;
        Ok(self.push(value, Op::Matmul { a, b, m, k, n: nn }, &[a, b]))
    }

    /// `x · wᵀ + b` with `x: [rows × d_in]`, `w: [d_out × d_in]`, `b: [d_out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (value, rows, d_in, d_out) = self.with(|n| {
            let (xv, wv) = (&n[x.0].value, &n[w.0].value);
            let (d_out, d_in) = match wv.shape.as_slice() {
                [o, i] => (*o, *i),
                _ => return Err(shape_err("linear", xv, wv)),
            };
            if xv.last_dim() != d_in || xv.shape.is_empty() {
                return Err(shape_err("linear", xv, wv));
            }
            let rows = xv.rows();
            let mut out = vec![0.0; rows * d_out];
            kernels::matmul_nt(&xv.data, &wv.data, rows, d_out, d_in, &mut out);
            if let Some(b) = b {
                let bv = &n[b.0].value;
                if bv.numel() != d_out {
                    return Err(shape_err("linear bias", wv, bv));
                }
                for r in 0..rows {
                    kernels::axpy(1.0, &bv.data, &mut out[r * d_out..(r + 1) * d_out]);
                }
            }
            let mut shape = xv.shape.clone();
            *shape.last_mut().unwrap() = d_out;
            Ok((Tensor { shape, data: out }, rows, d_in, d_out))
        })?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            value,
            Op::Linear {
                x,
                w,
                b,
                rows,
                d_in,
                d_out,
            },
            &parents,
        ))
    }

    /// Softmax over the trailing dimension, stabilized by max-subtraction.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let value = self.with(|n| {
            let xv = &n[x.0].value;
            check_finite("softmax", xv)?;
            if xv.last_dim() == 0 {
                return Err(Error::param("softmax over an empty dimension"));
            }
            let d = xv.last_dim();
            let mut out = xv.clone();
            for (src, dst) in xv.data.chunks(d).zip(out.data.chunks_mut(d)) {
                kernels::softmax(src, dst);
            }
            Ok(out)
        })?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Keeps the `k` largest entries of each trailing-dimension row
    /// (lowest index wins ties) and zeroes the rest.
    pub fn top_k_mask(&self, x: Var, k: usize) -> Result<Var> {
        let (value, mask) = self.with(|n| {
            let xv = &n[x.0].value;
            let d = xv.last_dim();
            if k == 0 || k > d {
                return Err(Error::param(format!("top_k: k={k} outside 1..={d}")));
            }
            check_finite("top_k_mask", xv)?;
            let mut mask = vec![false; xv.numel()];
            let mut out = Tensor::zeros(xv.shape.clone());
            for r in 0..xv.rows() {
                for j in kernels::top_k(xv.row(r), k) {
                    mask[r * d + j] = true;
                    out.data[r * d + j] = xv.data[r * d + j];
                }
            }
            Ok((out, mask))
        })?;
        Ok(self.push(value, Op::TopK { x, mask }, &[x]))
    }

    /// Divides each trailing-dimension row by its sum.
    pub fn row_normalize(&self, x: Var) -> Result<Var> {
        let (value, sums) = self.with(|n| {
            let xv = &n[x.0].value;
            let d = xv.last_dim();
            let mut out = xv.clone();
            let mut sums = Vec::with_capacity(xv.rows());
            for row in out.data.chunks_mut(d) {
                let s: f64 = row.iter().sum();
                if s == 0.0 || !s.is_finite() {
                    return Err(Error::numeric("row_normalize: row sum is zero"));
                }
                row.iter_mut().for_each(|v| *v /= s);
                sums.push(s);
            }
            Ok((out, sums))
        })?;
        Ok(self.push(value, Op::RowNormalize { x, sums }, &[x]))
    }

    pub fn layernorm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (value, xhat, inv_std) = self.with(|n| {
            let (xv, gv, bv) = (&n[x.0].value, &n[gain.0].value, &n[bias.0].value);
            let d = xv.last_dim();
            if gv.numel() != d || bv.numel() != d || d == 0 {
                return Err(shape_err("layernorm", xv, gv));
            }
            let rows = xv.rows();
            let mut xhat = vec![0.0; xv.numel()];
            let mut inv_std = Vec::with_capacity(rows);
            let mut out = Tensor::zeros(xv.shape.clone());
            for r in 0..rows {
                let row = xv.row(r);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                if !inv.is_finite() {
                    return Err(Error::numeric("layernorm: zero variance with eps = 0"));
                }
                inv_std.push(inv);
                for j in 0..d {
                    let h = (row[j] - mean) * inv;
                    xhat[r * d + j] = h;
                    out.data[r * d + j] = h * gv.data[j] + bv.data[j];
                }
            }
            Ok((out, xhat, inv_std))
        })?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Var {
        let value = self.with(|n| map(&n[x.0].value, kernels::gelu));
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn exp(&self, x: Var) -> Var {
        let value = self.with(|n| map(&n[x.0].value, f64::exp));
        self.push(value, Op::Exp(x), &[x])
    }

    /// Clamps to `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.with(|n| map(&n[x.0].value, |v| v.clamp(lo, hi)));
        self.push(value, Op::Clamp { x, lo, hi }, &[x])
    }

    /// Concatenates along the trailing dimension.
    pub fn concat(&self, a: Var, b: Var) -> Result<Var> {
        let (value, da, db) = self.with(|n| {
            let (av, bv) = (&n[a.0].value, &n[b.0].value);
            let (da, db) = (av.last_dim(), bv.last_dim());
            if av.rows() != bv.rows() || av.shape.len() != bv.shape.len() {
                return Err(shape_err("concat", av, bv));
            }
            let mut data = Vec::with_capacity(av.numel() + bv.numel());
            for r in 0..av.rows() {
                data.extend_from_slice(av.row(r));
                data.extend_from_slice(bv.row(r));
            }
            let mut shape = av.shape.clone();
            if shape.is_empty() {
                shape.push(0);
            }
            *shape.last_mut().unwrap() = da + db;
            Ok((Tensor { shape, data }, da, db))
        })?;
        Ok(self.push(value, Op::Concat { a, b, da, db }, &[a, b]))
    }

    /// Selects rows of a rank-2 tensor; also serves as embedding lookup.
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let value = self.with(|n| {
            let xv = &n[x.0].value;
            if xv.shape.len() != 2 {
                return Err(Error::param("gather_rows expects a rank-2 tensor"));
            }
            let (rows, d) = (xv.shape[0], xv.shape[1]);
            let mut data = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                if i >= rows {
                    return Err(Error::param(format!("gather_rows: index {i} >= {rows}")));
                }
                data.extend_from_slice(xv.row(i));
            }
            Ok(Tensor {
                shape: vec![idx.len(), d],
                data,
            })
        })?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    pub fn embedding_lookup(&self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// `out[idx[r]] += part[r]` summed over all parts, producing `[rows × d]`.
    pub fn scatter_add_rows(&self, rows: usize, d: usize, parts: &[(Var, Vec<usize>)]) -> Result<Var> {
        let value = self.with(|n| {
            let mut out = Tensor::zeros(vec![rows, d]);
            for (p, idx) in parts {
                let pv = &n[p.0].value;
                if pv.last_dim() != d || pv.rows() != idx.len() {
                    return Err(Error::Shape {
                        op: "scatter_add_rows",
                        lhs: pv.shape.clone(),
                        rhs: vec![idx.len(), d],
                    });
                }
                for (r, &i) in idx.iter().enumerate() {
                    if i >= rows {
                        return Err(Error::param(format!("scatter_add_rows: index {i} >= {rows}")));
                    }
                    kernels::axpy(1.0, pv.row(r), &mut out.data[i * d..(i + 1) * d]);
                }
            }
            Ok(out)
        })?;
        let parents: Vec<Var> = parts.iter().map(|(p, _)| *p).collect();
        Ok(self.push(
            value,
            Op::ScatterRows {
                parts: parts.to_vec(),
            },
            &parents,
        ))
    }

    /// Picks entries of the flattened tensor, producing a vector.
    pub fn gather_flat(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let value = self.with(|n| {
            let xv = &n[x.0].value;
            idx.iter()
                .map(|&i| {
                    xv.data
                        .get(i)
                        .copied()
                        .ok_or_else(|| Error::param(format!("gather_flat: index {i} out of range")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Tensor::vector)
        })?;
        Ok(self.push(
            value,
            Op::GatherFlat {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Multiplies row `r` of `x` by `s[r]`.
    pub fn scale_rows(&self, x: Var, s: Var) -> Result<Var> {
        let value = self.with(|n| {
            let (xv, sv) = (&n[x.0].value, &n[s.0].value);
            if sv.numel() != xv.rows() {
                return Err(shape_err("scale_rows", xv, sv));
            }
            let d = xv.last_dim();
            let mut out = xv.clone();
            for (r, row) in out.data.chunks_mut(d).enumerate() {
                row.iter_mut().for_each(|v| *v *= sv.data[r]);
            }
            Ok(out)
        })?;
        Ok(self.push(value, Op::ScaleRows { x, s }, &[x, s]))
    }

    /// Mean over consecutive groups of `seg` rows: `[B·seg × d] → [B × d]`.
    pub fn segment_mean(&self, x: Var, seg: usize) -> Result<Var> {
        let value = self.with(|n| {
            let xv = &n[x.0].value;
            let (rows, d) = (xv.rows(), xv.last_dim());
            if seg == 0 || rows % seg != 0 {
                return Err(Error::param(format!("segment_mean: {rows} rows not divisible by {seg}")));
            }
            let groups = rows / seg;
            let mut out = Tensor::zeros(vec![groups, d]);
            for r in 0..rows {
                kernels::axpy(1.0 / seg as f64, xv.row(r), &mut out.data[(r / seg) * d..(r / seg + 1) * d]);
            }
            Ok(out)
        })?;
        Ok(self.push(value, Op::SegmentMean { x, seg }, &[x]))
    }

    /// Mean over a sequence of token rows.
    pub fn mean_pool(&self, x: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        let pooled = self.segment_mean(x, rows)?;
        self.reshape(pooled, vec![self.value(x).last_dim()])
    }

    pub fn sum(&self, x: Var) -> Var {
        let value = self.with(|n| Tensor::scalar(n[x.0].value.data.iter().sum()));
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&self, x: Var) -> Var {
        let count = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / count as f64)
    }

    /// Scales each trailing-dimension row to unit Euclidean norm.
    /// Zero rows are an error rather than silently regularized.
    pub fn l2_normalize_rows(&self, x: Var) -> Result<Var> {
        let (value, norms) = self.with(|n| {
            let xv = &n[x.0].value;
            let d = xv.last_dim();
            let mut out = xv.clone();
            let mut norms = Vec::with_capacity(xv.rows());
            for row in out.data.chunks_mut(d) {
                let norm = kernels::dot(row, row).sqrt();
                if norm == 0.0 || !norm.is_finite() {
                    return Err(Error::numeric("l2_normalize_rows: zero-norm row"));
                }
                row.iter_mut().for_each(|v| *v /= norm);
                norms.push(norm);
            }
            Ok((out, norms))
        })?;
        Ok(self.push(value, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    /// `u·v / (‖u‖‖v‖)` for two equal-length vectors.
    pub fn cosine_similarity(&self, u: Var, v: Var) -> Result<Var> {
        let un = self.l2_normalize_rows(u)?;
        let vn = self.l2_normalize_rows(v)?;
        let prod = self.mul(un, vn)?;
        Ok(self.sum(prod))
    }

    /// Label-smoothed cross entropy, averaged over rows of `logits: [N × C]`
    /// (a single `[C]` row is also accepted). Target distribution per row is
    /// `(1 − smoothing)·onehot(target) + smoothing / C`.
    pub fn cross_entropy_smoothed(&self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::param(format!("smoothing {smoothing} outside [0, 1)")));
        }
        let (value, probs) = self.with(|n| {
            let lv = &n[logits.0].value;
            check_finite("cross_entropy", lv)?;
            let c = lv.last_dim();
            let rows = lv.rows();
            if rows != targets.len() {
                return Err(Error::param(format!(
                    "cross_entropy: {} targets for {rows} rows",
                    targets.len()
                )));
            }
            let mut probs = vec![0.0; lv.numel()];
            let mut total = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                if t >= c {
                    return Err(Error::param(format!("target {t} out of range for {c} classes")));
                }
                let row = lv.row(r);
                let lse = kernels::log_sum_exp(row);
                kernels::softmax(row, &mut probs[r * c..(r + 1) * c]);
                for (j, &x) in row.iter().enumerate() {
                    let q = smoothing / c as f64 + if j == t { 1.0 - smoothing } else { 0.0 };
                    if q != 0.0 {
                        total -= q * (x - lse);
                    }
                }
            }
            Ok((Tensor::scalar(total / rows as f64), probs))
        })?;
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
            &[logits],
        ))
    }

    /// Multi-head scaled dot-product attention over `batch` sequences of
    /// length `seq`, with `q, k, v: [batch·seq × d]`. `causal` masks keys
    /// after the query position.
    pub fn attention(&self, q: Var, k: Var, v: Var, seq: usize, heads: usize, causal: bool) -> Result<Var> {
        let (value, probs) = self.with(|n| {
            let (qv, kv, vv) = (&n[q.0].value, &n[k.0].value, &n[v.0].value);
            same_shape("attention", qv, kv)?;
            same_shape("attention", qv, vv)?;
            let (rows, d) = (qv.rows(), qv.last_dim());
            if heads == 0 || d % heads != 0 || seq == 0 || rows % seq != 0 {
                return Err(Error::param(format!(
                    "attention: {rows}x{d} incompatible with seq={seq}, heads={heads}"
                )));
            }
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let batch = rows / seq;
            let mut probs = vec![0.0; batch * heads * seq * seq];
            let mut out = Tensor::zeros(qv.shape.clone());
            let mut scores = vec![0.0; seq];
            for b in 0..batch {
                for h in 0..heads {
                    let off = h * dh;
                    for i in 0..seq {
                        let qi = &qv.data[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                        let visible = if causal { i + 1 } else { seq };
                        for j in 0..visible {
                            let kj = &kv.data[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                            scores[j] = kernels::dot(qi, kj) * scale;
                        }
                        let base = ((b * heads + h) * seq + i) * seq;
                        kernels::softmax(&scores[..visible], &mut probs[base..base + visible]);
                        let oi = (b * seq + i) * d + off;
                        for j in 0..visible {
                            let p = probs[base + j];
                            let vj = &vv.data[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                            kernels::axpy(p, vj, &mut out.data[oi..oi + dh]);
                        }
                    }
                }
            }
            Ok((out, probs))
        })?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Single learnable query attending over each sequence of `seq` rows:
    /// `[batch·seq × d] → [batch × d]`.
    pub fn attention_pool(&self, x: Var, query: Var, seq: usize) -> Result<Var> {
        let (value, probs) = self.with(|n| {
            let (xv, qv) = (&n[x.0].value, &n[query.0].value);
            let (rows, d) = (xv.rows(), xv.last_dim());
            if qv.numel() != d {
                return Err(shape_err("attention_pool", xv, qv));
            }
            if seq == 0 || rows % seq != 0 || rows == 0 {
                return Err(Error::param("attention_pool: empty or ragged sequence"));
            }
            let scale = 1.0 / (d as f64).sqrt();
            let batch = rows / seq;
            let mut probs = vec![0.0; rows];
            let mut out = Tensor::zeros(vec![batch, d]);
            let mut scores = vec![0.0; seq];
            for b in 0..batch {
                for (l, s) in scores.iter_mut().enumerate() {
                    *s = kernels::dot(xv.row(b * seq + l), &qv.data) * scale;
                }
                kernels::softmax(&scores, &mut probs[b * seq..(b + 1) * seq]);
                for l in 0..seq {
                    kernels::axpy(probs[b * seq + l], xv.row(b * seq + l), &mut out.data[b * d..(b + 1) * d]);
                }
            }
            Ok((out, probs))
        })?;
        Ok(self.push(
            value,
            Op::AttentionPool {
                x,
                query,
                seq,
                probs,
            },
            &[x, query],
        ))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.with(|n| n[x.0].value.clone().reshape(shape))?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Inverted dropout: zeroes entries with probability `p` and rescales
    /// survivors by `1 / (1 − p)`.
    pub fn dropout<R: Rng + ?Sized>(&self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::param(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let shape = self.shape(x);
        let numel = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..numel)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.mul_const(x, &Tensor { shape, data: mask })
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::param("backward: loss must have exactly one element"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, node)| {
                g.map(|data| Tensor {
                    shape: node.value.shape.clone(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let numel = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; numel]))
}

fn backprop(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(s) = slot(nodes, grads, *a) {
                kernels::axpy(1.0, g, s);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                kernels::axpy(1.0, g, s);
            }
        }
        Op::Sub(a, b) => {
            if let Some(s) = slot(nodes, grads, *a) {
                kernels::axpy(1.0, g, s);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                kernels::axpy(-1.0, g, s);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(s) = slot(nodes, grads, *a) {
                for ((si, gi), bi) in s.iter_mut().zip(g).zip(&bv.data) {
                    *si += gi * bi;
                }
            }
            if let Some(s) = slot(nodes, grads, *b) {
                for ((si, gi), ai) in s.iter_mut().zip(g).zip(&av.data) {
                    *si += gi * ai;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(s) = slot(nodes, grads, *a) {
                kernels::axpy(*c, g, s);
            }
        }
        Op::AddConst(a) | Op::Reshape(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                kernels::axpy(1.0, g, s);
            }
        }
        Op::MulConst(a, c) => {
            if let Some(s) = slot(nodes, grads, *a) {
                for ((si, gi), ci) in s.iter_mut().zip(g).zip(c) {
                    *si += gi * ci;
                }
            }
        }
        Op::AddRow(x, b) => {
            if let Some(s) = slot(nodes, grads, *x) {
                kernels::axpy(1.0, g, s);
            }
            let d = val(*b).numel();
            if let Some(s) = slot(nodes, grads, *b) {
                for row in g.chunks(d) {
                    kernels::axpy(1.0, row, s);
                }
            }
        }
        Op::MulRow(x, gain) => {
            let (xv, gv) = (val(*x), val(*gain));
            let d = gv.numel();
            if let Some(s) = slot(nodes, grads, *x) {
                for (j, (si, gi)) in s.iter_mut().zip(g).enumerate() {
                    *si += gi * gv.data[j % d];
                }
            }
            if let Some(s) = slot(nodes, grads, *gain) {
                for (j, (gi, xi)) in g.iter().zip(&xv.data).enumerate() {
                    s[j % d] += gi * xi;
                }
            }
        }
        Op::MulScalar(x, sc) => {
            let (xv, sv) = (val(*x), val(*sc));
            let c = sv.data[0];
            if let Some(s) = slot(nodes, grads, *x) {
                kernels::axpy(c, g, s);
            }
            if let Some(s) = slot(nodes, grads, *sc) {
                s[0] += kernels::dot(g, &xv.data);
            }
        }
        Op::Matmul { a, b, m, k, n } => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(s) = slot(nodes, grads, *a) {
                kernels::matmul_nt(g, &bv.data, *m, *k, *n, s);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                kernels::matmul_tn(&av.data, g, *m, *k, *n, s);
            }
        }
        Op::Linear {
            x,
            w,
            b,
            rows,
            d_in,
            d_out,
        } => {
            let (xv, wv) = (val(*x), val(*w));
            if let Some(s) = slot(nodes, grads, *x) {
                kernels::matmul(g, &wv.data, *rows, *d_out, *d_in, s);
            }
            if let Some(s) = slot(nodes, grads, *w) {
                kernels::matmul_tn(g, &xv.data, *rows, *d_out, *d_in, s);
            }
            if let Some(b) = b {
                if let Some(s) = slot(nodes, grads, *b) {
                    for row in g.chunks(*d_out) {
                        kernels::axpy(1.0, row, s);
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let d = y.last_dim();
            if let Some(s) = slot(nodes, grads, *x) {
                for ((gr, yr), sr) in g.chunks(d).zip(y.data.chunks(d)).zip(s.chunks_mut(d)) {
                    let inner = kernels::dot(gr, yr);
                    for j in 0..d {
                        sr[j] += yr[j] * (gr[j] - inner);
                    }
                }
            }
        }
        Op::TopK { x, mask } => {
            if let Some(s) = slot(nodes, grads, *x) {
                for ((si, gi), &m) in s.iter_mut().zip(g).zip(mask) {
                    if m {
                        *si += gi;
                    }
                }
            }
        }
        Op::RowNormalize { x, sums } => {
            let y = &node.value;
            let d = y.last_dim();
            if let Some(s) = slot(nodes, grads, *x) {
                for (r, ((gr, yr), sr)) in g.chunks(d).zip(y.data.chunks(d)).zip(s.chunks_mut(d)).enumerate() {
                    let inner = kernels::dot(gr, yr);
                    for j in 0..d {
                        sr[j] += (gr[j] - inner) / sums[r];
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gv = val(*gain);
            let d = gv.numel();
            if let Some(s) = slot(nodes, grads, *x) {
                let mut dxhat = vec![0.0; d];
                for (r, sr) in s.chunks_mut(d).enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        dxhat[j] = gr[j] * gv.data[j];
                    }
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dh = kernels::dot(&dxhat, hr);
                    let c = inv_std[r] / d as f64;
                    for j in 0..d {
                        sr[j] += c * (d as f64 * dxhat[j] - sum_d - hr[j] * sum_dh);
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *gain) {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        s[j] += gr[j] * hr[j];
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *bias) {
                for gr in g.chunks(d) {
                    kernels::axpy(1.0, gr, s);
                }
            }
        }
        Op::Gelu(x) => {
            let xv = val(*x);
            if let Some(s) = slot(nodes, grads, *x) {
                for ((si, gi), &xi) in s.iter_mut().zip(g).zip(&xv.data) {
                    *si += gi * kernels::gelu_grad(xi);
                }
            }
        }
        Op::Exp(x) => {
            if let Some(s) = slot(nodes, grads, *x) {
                for ((si, gi), yi) in s.iter_mut().zip(g).zip(&node.value.data) {
                    *si += gi * yi;
                }
            }
        }
        Op::Clamp { x, lo, hi } => {
            let xv = val(*x);
            if let Some(s) = slot(nodes, grads, *x) {
                for ((si, gi), &xi) in s.iter_mut().zip(g).zip(&xv.data) {
                    if xi >= *lo && xi <= *hi {
                        *si += gi;
                    }
                }
            }
        }
        Op::Concat { a, b, da, db } => {
            let w = da + db;
            if let Some(s) = slot(nodes, grads, *a) {
                for (r, sr) in s.chunks_mut(*da).enumerate() {
                    kernels::axpy(1.0, &g[r * w..r * w + da], sr);
                }
            }
            if let Some(s) = slot(nodes, grads, *b) {
                for (r, sr) in s.chunks_mut(*db).enumerate() {
                    kernels::axpy(1.0, &g[r * w + da..(r + 1) * w], sr);
                }
            }
        }
        Op::GatherRows { x, idx } => {
            let d = val(*x).last_dim();
            if let Some(s) = slot(nodes, grads, *x) {
                for (r, &src) in idx.iter().enumerate() {
                    kernels::axpy(1.0, &g[r * d..(r + 1) * d], &mut s[src * d..(src + 1) * d]);
                }
            }
        }
        Op::ScatterRows { parts } => {
            let d = node.value.last_dim();
            for (p, idx) in parts {
                if let Some(s) = slot(nodes, grads, *p) {
                    for (r, &dst) in idx.iter().enumerate() {
                        kernels::axpy(1.0, &g[dst * d..(dst + 1) * d], &mut s[r * d..(r + 1) * d]);
                    }
                }
            }
        }
        Op::GatherFlat { x, idx } => {
            if let Some(s) = slot(nodes, grads, *x) {
                for (gi, &src) in g.iter().zip(idx) {
                    s[src] += gi;
                }
            }
        }
        Op::ScaleRows { x, s: sc } => {
            let (xv, sv) = (val(*x), val(*sc));
            let d = xv.last_dim();
            if let Some(s) = slot(nodes, grads, *x) {
                for (r, sr) in s.chunks_mut(d).enumerate() {
                    kernels::axpy(sv.data[r], &g[r * d..(r + 1) * d], sr);
                }
            }
            if let Some(s) = slot(nodes, grads, *sc) {
                for (r, si) in s.iter_mut().enumerate() {
                    *si += kernels::dot(&g[r * d..(r + 1) * d], xv.row(r));
                }
            }
        }
        Op::SegmentMean { x, seg } => {
            let d = node.value.last_dim();
            if let Some(s) = slot(nodes, grads, *x) {
                for (r, sr) in s.chunks_mut(d).enumerate() {
                    let b = r / seg;
                    kernels::axpy(1.0 / *seg as f64, &g[b * d..(b + 1) * d], sr);
                }
            }
        }
        Op::Sum(x) => {
            if let Some(s) = slot(nodes, grads, *x) {
                s.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::L2NormalizeRows { x, norms } => {
            let y = &node.value;
            let d = y.last_dim();
            if let Some(s) = slot(nodes, grads, *x) {
                for (r, sr) in s.chunks_mut(d).enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let yr = y.row(r);
                    let inner = kernels::dot(gr, yr);
                    for j in 0..d {
                        sr[j] += (gr[j] - yr[j] * inner) / norms[r];
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            smoothing,
            probs,
        } => {
            let c = val(*logits).last_dim();
            let rows = targets.len() as f64;
            if let Some(s) = slot(nodes, grads, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let q = smoothing / c as f64 + if j == t { 1.0 - smoothing } else { 0.0 };
                        s[r * c + j] += g[0] * (probs[r * c + j] - q) / rows;
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            seq,
            heads,
            probs,
        } => {
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let (rows, d) = (qv.rows(), qv.last_dim());
            let (seq, heads) = (*seq, *heads);
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let batch = rows / seq;
            let mut dq = vec![0.0; rows * d];
            let mut dk = vec![0.0; rows * d];
            let mut dv = vec![0.0; rows * d];
            let mut dp = vec![0.0; seq];
            for b in 0..batch {
                for h in 0..heads {
                    let off = h * dh;
                    for i in 0..seq {
                        let base = ((b * heads + h) * seq + i) * seq;
                        let oi = (b * seq + i) * d + off;
                        let go = &g[oi..oi + dh];
                        let mut inner = 0.0;
                        for j in 0..seq {
                            let p = probs[base + j];
                            if p == 0.0 {
                                dp[j] = 0.0;
                                continue;
                            }
                            let vj = (b * seq + j) * d + off;
                            dp[j] = kernels::dot(go, &vv.data[vj..vj + dh]);
                            inner += p * dp[j];
                            kernels::axpy(p, go, &mut dv[vj..vj + dh]);
                        }
                        for j in 0..seq {
                            let p = probs[base + j];
                            if p == 0.0 {
                                continue;
                            }
                            let ds = p * (dp[j] - inner) * scale;
                            let kj = (b * seq + j) * d + off;
                            kernels::axpy(ds, &kv.data[kj..kj + dh], &mut dq[oi..oi + dh]);
                            kernels::axpy(ds, &qv.data[oi..oi + dh], &mut dk[kj..kj + dh]);
                        }
                    }
                }
            }
            for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                if let Some(s) = slot(nodes, grads, var) {
                    kernels::axpy(1.0, &buf, s);
                }
            }
        }
        Op::AttentionPool { x, query, seq, probs } => {
            let (xv, qv) = (val(*x), val(*query));
            let (rows, d) = (xv.rows(), xv.last_dim());
            let scale = 1.0 / (d as f64).sqrt();
            let seq = *seq;
            let mut dx = vec![0.0; rows * d];
            let mut dq = vec![0.0; d];
            let mut dp = vec![0.0; seq];
            for b in 0..rows / seq {
                let gb = &g[b * d..(b + 1) * d];
                let mut inner = 0.0;
                for l in 0..seq {
                    let r = b * seq + l;
                    dp[l] = kernels::dot(gb, xv.row(r));
                    inner += probs[r] * dp[l];
                    kernels::axpy(probs[r], gb, &mut dx[r * d..(r + 1) * d]);
                }
                for l in 0..seq {
                    let r = b * seq + l;
                    let ds = probs[r] * (dp[l] - inner) * scale;
                    kernels::axpy(ds, &qv.data, &mut dx[r * d..(r + 1) * d]);
                    kernels::axpy(ds, xv.row(r), &mut dq);
                }
            }
            if let Some(s) = slot(nodes, grads, *x) {
                kernels::axpy(1.0, &dx, s);
            }
            if let Some(s) = slot(nodes, grads, *query) {
                kernels::axpy(1.0, &dq, s);
            }
        }
    }
}
