//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! execution order, so the node list is topologically sorted by
//! construction. [`Tape::backward`] walks it once in reverse.
//!
//! Binary element-wise ops accept a right operand whose shape is a trailing
//! suffix of the left operand's shape (leading-batch broadcasting only).
//! Everything else requires explicit reshapes.

use thiserror::Error;

use crate::params::{ParamId, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::Invalid {
                op: "tensor",
                msg: format!("zero-sized dimension in {shape:?}"),
            });
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Invalid {
                op: "tensor",
                msg: format!("shape {shape:?} does not hold {} values", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Invalid {
                op: "from_rows",
                msg: "ragged rows".into(),
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared_rhs: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Concat { parts: Vec<Var>, outer: usize, widths: Vec<usize>, inner: usize },
    Slice { x: Var, outer: usize, axis_len: usize, start: usize, len: usize, inner: usize },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Relu { x: Var },
    Exp { x: Var },
    Log { x: Var },
    Sqrt { x: Var },
    Abs { x: Var },
    Atan2 { y: Var, x: Var },
    Sum { x: Var },
    Mean { x: Var },
    SumLast { x: Var, d: usize },
    GatherRows { x: Var, rows: Vec<usize>, width: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Variance epsilon used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Records a single forward pass. Not shareable across threads; build one
/// tape per window.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    probes: Option<Vec<(String, Tensor)>>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    // -inf is the attention-mask sentinel and is allowed through.
    if data.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(TensorError::NonFinite { op });
    }
    Ok(())
}

/// `c[m×n] += a[m×k] · b[k×n]`
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `da[m×k] += g[m×n] · b[k×n]ᵀ`
fn gemm_acc_nt(g: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for (p, dv) in darow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            *dv += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `db[k×n] += a[m×k]ᵀ · g[m×n]`
fn gemm_acc_tn(a: &[f64], g: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (dv, &gv) in dbrow.iter_mut().zip(grow) {
                *dv += aip * gv;
            }
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Moves `src` (shape `shape`) into the layout given by `axes`, writing
/// output element order. `inverse` scatters instead of gathers.
fn permute_data(src: &[f64], shape: &[usize], axes: &[usize], dst: &mut [f64], inverse: bool) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut src_off = 0usize;
    for out_i in 0..src.len() {
        if inverse {
            dst[src_off] += src[out_i];
        } else {
            dst[out_i] = src[src_off];
        }
        // increment the output multi-index (odometer), tracking source offset
        for d in (0..rank).rev() {
            idx[d] += 1;
            src_off += in_strides[axes[d]];
            if idx[d] < out_shape[d] {
                break;
            }
            src_off -= in_strides[axes[d]] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that keeps named copies of intermediate tensors passed to
    /// [`Tape::probe`] (attention maps for inspection dumps).
    pub fn with_probes() -> Self {
        Self {
            nodes: Vec::new(),
            probes: Some(Vec::new()),
        }
    }

    pub fn probing(&self) -> bool {
        self.probes.is_some()
    }

    /// Stores `t` under `name` when probing is enabled.
    pub fn record_probe(&mut self, name: String, t: Tensor) {
        if let Some(p) = self.probes.as_mut() {
            p.push((name, t));
        }
    }

    pub fn take_probes(&mut self) -> Vec<(String, Tensor)> {
        self.probes.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, needs_grad: bool) -> Result<Var> {
        check_finite(op, &value.data)?;
        self.nodes.push(Node {
            value,
            op: kind,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf { param: None }, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Copies a parameter onto the tape as a gradient-tracking leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.get(id).clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf { param: Some(id) },
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Matrix product. `a` is `[.., m, k]`; `b` is either `[.., k, n]` with
    /// the same leading batch dims, or a plain `[k, n]` shared by the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || TensorError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_rhs = lead_b.is_empty();
        if !shared_rhs && lead_a != lead_b {
            return Err(err());
        }
        let batch: usize = lead_a.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = &self.nodes[a.0].value.data;
            let bd = &self.nodes[b.0].value.data;
            if shared_rhs {
                gemm_acc(ad, bd, &mut out, batch * m, k, n);
            } else {
                for i in 0..batch {
                    gemm_acc(
                        &ad[i * m * k..(i + 1) * m * k],
                        &bd[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let ng = self.ng(a) || self.ng(b);
        self.push(
            "matmul",
            Tensor { shape, data: out },
            Op::MatMul { a, b, batch, m, k, n, shared_rhs },
            ng,
        )
    }

    fn suffix_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.suffix_broadcast(name, a, b)?;
        let av = &self.nodes[a.0].value;
        let bd = &self.nodes[b.0].value.data;
        let nb = bd.len();
        let data: Vec<f64> = av
            .data
            .chunks(nb)
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect();
        let shape = av.shape.clone();
        let ng = self.ng(a) || self.ng(b);
        self.push(name, Tensor { shape, data }, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&e| e * c).collect(),
        };
        let ng = self.ng(x);
        self.push("scale", t, Op::Scale { x, c }, ng)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&e| f(e)).collect(),
        };
        let ng = self.ng(x);
        self.push(name, t, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |e| e.max(0.0), Op::Relu { x })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp { x })
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log { x })
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, f64::sqrt, Op::Sqrt { x })
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, f64::abs, Op::Abs { x })
    }

    /// Element-wise `atan2(y, x)`; shapes must match exactly.
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        if self.shape(y) != self.shape(x) {
            return Err(TensorError::Shape {
                op: "atan2",
                lhs: self.shape(y).to_vec(),
                rhs: self.shape(x).to_vec(),
            });
        }
        let yv = &self.nodes[y.0].value;
        let xv = &self.nodes[x.0].value;
        let t = Tensor {
            shape: yv.shape.clone(),
            data: yv.data.iter().zip(&xv.data).map(|(a, b)| a.atan2(*b)).collect(),
        };
        let ng = self.ng(y) || self.ng(x);
        self.push("atan2", t, Op::Atan2 { y, x }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.data.iter().sum();
        let ng = self.ng(x);
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = &self.nodes[x.0].value.data;
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let ng = self.ng(x);
        self.push("mean", Tensor::scalar(s), Op::Mean { x }, ng)
    }

    /// Sums over the last axis, dropping it (a rank-1 input becomes `[1]`).
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let d = *v.shape.last().expect("rank >= 1");
        let data: Vec<f64> = v.data.chunks(d).map(|c| c.iter().sum()).collect();
        let mut shape = v.shape[..v.shape.len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.ng(x);
        self.push("sum_last", Tensor { shape, data }, Op::SumLast { x, d }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.nodes[x.0].value.clone().reshaped(shape)?;
        let ng = self.ng(x);
        self.push("reshape", v, Op::Reshape { x }, ng)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("axes {axes:?} do not permute rank {}", shape.len()),
            });
        }
        let src = &self.nodes[x.0].value.data;
        let mut data = vec![0.0; src.len()];
        permute_data(src, &shape, axes, &mut data, false);
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        let ng = self.ng(x);
        self.push(
            "permute",
            Tensor { shape: out_shape, data },
            Op::Permute { x, axes: axes.to_vec() },
            ng,
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: "rank < 2".into(),
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range"),
            });
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[axis]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                let d = &self.nodes[p.0].value.data;
                data.extend_from_slice(&d[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            "concat",
            Tensor { shape, data },
            Op::Concat { parts: parts.to_vec(), outer, widths, inner },
            ng,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("[{start}, {}) out of range on axis {axis} of {shape:?}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let src = &self.nodes[x.0].value.data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.ng(x);
        self.push(
            "slice",
            Tensor { shape: out_shape, data },
            Op::Slice { x, outer, axis_len, start, len, inner },
            ng,
        )
    }

    /// Selects rows of `x` viewed as `[rows, width]` where `width` is the
    /// product of all but the first axis. Indices may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width: usize = shape[1..].iter().product();
        if rows.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("row index out of range for {shape:?}"),
            });
        }
        let src = &self.nodes[x.0].value.data;
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let ng = self.ng(x);
        self.push(
            "gather_rows",
            Tensor { shape: out_shape, data },
            Op::GatherRows { x, rows: rows.to_vec(), width },
            ng,
        )
    }

    /// Softmax over the last axis. Rows that are entirely `-inf` become
    /// all-zero rows; see [`fully_masked_rows`].
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let n = *v.shape.last().expect("rank >= 1");
        let mut data = vec![0.0; v.data.len()];
        for (src, dst) in v.data.chunks(n).zip(data.chunks_mut(n)) {
            let mx = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mx).exp();
                z += *d;
            }
            for d in dst.iter_mut() {
                *d /= z;
            }
        }
        let shape = v.shape.clone();
        let ng = self.ng(x);
        self.push("softmax", Tensor { shape, data }, Op::Softmax { x }, ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().expect("rank >= 1");
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value.data;
        let b = &self.nodes[bias.0].value.data;
        let rows = xv.data.len() / d;
        let mut xhat = vec![0.0; xv.data.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.data.len()];
        for r in 0..rows {
            let src = &xv.data[r * d..(r + 1) * d];
            let mu = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (src[j] - mu) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = xv.shape.clone();
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            "layer_norm",
            Tensor { shape, data: out },
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            ng,
        )
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let len = |v: Var| nodes[v.0].value.data.len();

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |v: Var| &nodes[v.0].value.data;
            let ng = |v: Var| nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf { .. } => unreachable!(),
                &Op::MatMul { a, b, batch, m, k, n, shared_rhs } => {
                    if ng(a) {
                        let bd = val(b);
                        accumulate(&mut grads[a.0], len(a), |da| {
                            if shared_rhs {
                                gemm_acc_nt(&g, bd, da, batch * m, k, n);
                            } else {
                                for t in 0..batch {
                                    gemm_acc_nt(
                                        &g[t * m * n..(t + 1) * m * n],
                                        &bd[t * k * n..(t + 1) * k * n],
                                        &mut da[t * m * k..(t + 1) * m * k],
                                        m,
                                        k,
                                        n,
                                    );
                                }
                            }
                        });
                    }
                    if ng(b) {
                        let ad = val(a);
                        accumulate(&mut grads[b.0], len(b), |db| {
                            if shared_rhs {
                                gemm_acc_tn(ad, &g, db, batch * m, k, n);
                            } else {
                                for t in 0..batch {
                                    gemm_acc_tn(
                                        &ad[t * m * k..(t + 1) * m * k],
                                        &g[t * m * n..(t + 1) * m * n],
                                        &mut db[t * k * n..(t + 1) * k * n],
                                        m,
                                        k,
                                        n,
                                    );
                                }
                            }
                        });
                    }
                }
                &Op::Add { a, b } | &Op::Sub { a, b } => {
                    let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                    if ng(a) {
                        accumulate(&mut grads[a.0], len(a), |da| {
                            da.iter_mut().zip(&g).for_each(|(d, gv)| *d += gv)
                        });
                    }
                    if ng(b) {
                        let nb = len(b);
                        accumulate(&mut grads[b.0], nb, |db| {
                            for chunk in g.chunks(nb) {
                                db.iter_mut().zip(chunk).for_each(|(d, gv)| *d += sign * gv);
                            }
                        });
                    }
                }
                &Op::Mul { a, b } => {
                    let (ad, bd) = (val(a), val(b));
                    let nb = bd.len();
                    if ng(a) {
                        accumulate(&mut grads[a.0], len(a), |da| {
                            for (dchunk, gchunk) in da.chunks_mut(nb).zip(g.chunks(nb)) {
                                for j in 0..nb {
                                    dchunk[j] += gchunk[j] * bd[j];
                                }
                            }
                        });
                    }
                    if ng(b) {
                        accumulate(&mut grads[b.0], nb, |db| {
                            for (achunk, gchunk) in ad.chunks(nb).zip(g.chunks(nb)) {
                                for j in 0..nb {
                                    db[j] += gchunk[j] * achunk[j];
                                }
                            }
                        });
                    }
                }
                &Op::Div { a, b } => {
                    let (ad, bd) = (val(a), val(b));
                    let nb = bd.len();
                    if ng(a) {
                        accumulate(&mut grads[a.0], len(a), |da| {
                            for (dchunk, gchunk) in da.chunks_mut(nb).zip(g.chunks(nb)) {
                                for j in 0..nb {
                                    dchunk[j] += gchunk[j] / bd[j];
                                }
                            }
                        });
                    }
                    if ng(b) {
                        accumulate(&mut grads[b.0], nb, |db| {
                            for (achunk, gchunk) in ad.chunks(nb).zip(g.chunks(nb)) {
                                for j in 0..nb {
                                    db[j] -= gchunk[j] * achunk[j] / (bd[j] * bd[j]);
                                }
                            }
                        });
                    }
                }
                &Op::Scale { x, c } => {
                    accumulate(&mut grads[x.0], len(x), |dx| {
                        dx.iter_mut().zip(&g).for_each(|(d, gv)| *d += c * gv)
                    });
                }
                Op::Concat { parts, outer, widths, inner } => {
                    let total: usize = widths.iter().sum();
                    let mut off = 0;
                    for (&p, &w) in parts.iter().zip(widths) {
                        if ng(p) {
                            accumulate(&mut grads[p.0], len(p), |dp| {
                                for o in 0..*outer {
                                    let src = &g[(o * total + off) * inner..(o * total + off + w) * inner];
                                    let dst = &mut dp[o * w * inner..(o + 1) * w * inner];
                                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                                }
                            });
                        }
                        off += w;
                    }
                }
                &Op::Slice { x, outer, axis_len, start, len: sl, inner } => {
                    accumulate(&mut grads[x.0], len(x), |dx| {
                        for o in 0..outer {
                            let base = (o * axis_len + start) * inner;
                            let src = &g[o * sl * inner..(o + 1) * sl * inner];
                            dx[base..base + sl * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    });
                }
                &Op::Reshape { x } => {
                    accumulate(&mut grads[x.0], len(x), |dx| {
                        dx.iter_mut().zip(&g).for_each(|(d, gv)| *d += gv)
                    });
                }
                Op::Permute { x, axes } => {
                    let in_shape = nodes[x.0].value.shape.clone();
                    accumulate(&mut grads[x.0], len(*x), |dx| {
                        permute_data(&g, &in_shape, axes, dx, true);
                    });
                }
                &Op::Softmax { x } => {
                    let y = &node.value.data;
                    let n = *node.value.shape.last().unwrap();
                    accumulate(&mut grads[x.0], len(x), |dx| {
                        for ((dxr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                dxr[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let d = val(*gain).len();
                    let gd = val(*gain);
                    if ng(*gain) {
                        accumulate(&mut grads[gain.0], d, |dg| {
                            for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                                for j in 0..d {
                                    dg[j] += gr[j] * hr[j];
                                }
                            }
                        });
                    }
                    if ng(*bias) {
                        accumulate(&mut grads[bias.0], d, |db| {
                            for gr in g.chunks(d) {
                                for j in 0..d {
                                    db[j] += gr[j];
                                }
                            }
                        });
                    }
                    if ng(*x) {
                        accumulate(&mut grads[x.0], len(*x), |dx| {
                            let mut dh = vec![0.0; d];
                            for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                                for j in 0..d {
                                    dh[j] = gr[j] * gd[j];
                                }
                                let m1 = dh.iter().sum::<f64>() / d as f64;
                                let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                                let is = inv_std[r];
                                let dxr = &mut dx[r * d..(r + 1) * d];
                                for j in 0..d {
                                    dxr[j] += is * (dh[j] - m1 - hr[j] * m2);
                                }
                            }
                        });
                    }
                }
                &Op::Relu { x } => {
                    let xd = val(x);
                    accumulate(&mut grads[x.0], len(x), |dx| {
                        for j in 0..dx.len() {
                            if xd[j] > 0.0 {
                                dx[j] += g[j];
                            }
                        }
                    });
                }
                &Op::Exp { x } => {
                    let y = &node.value.data;
                    accumulate(&mut grads[x.0], len(x), |dx| {
                        for j in 0..dx.len() {
                            dx[j] += g[j] * y[j];
                        }
                    });
                }
                &Op::Log { x } => {
                    let xd = val(x);
                    accumulate(&mut grads[x.0], len(x), |dx| {
                        for j in 0..dx.len() {
                            dx[j] += g[j] / xd[j];
                        }
                    });
                }
                &Op::Sqrt { x } => {
                    let y = &node.value.data;
                    accumulate(&mut grads[x.0], len(x), |dx| {
                        for j in 0..dx.len() {
                            if y[j] > 0.0 {
                                dx[j] += g[j] * 0.5 / y[j];
                            }
                        }
                    });
                }
                &Op::Abs { x } => {
                    let xd = val(x);
                    accumulate(&mut grads[x.0], len(x), |dx| {
                        for j in 0..dx.len() {
                            dx[j] += g[j] * xd[j].signum() * f64::from(xd[j] != 0.0);
                        }
                    });
                }
                &Op::Atan2 { y, x } => {
                    let (yd, xd) = (val(y), val(x));
                    let r2: Vec<f64> = yd.iter().zip(xd).map(|(a, b)| a * a + b * b).collect();
                    if ng(y) {
                        accumulate(&mut grads[y.0], len(y), |dy| {
                            for j in 0..dy.len() {
                                if r2[j] > 0.0 {
                                    dy[j] += g[j] * xd[j] / r2[j];
                                }
                            }
                        });
                    }
                    if ng(x) {
                        accumulate(&mut grads[x.0], len(x), |dx| {
                            for j in 0..dx.len() {
                                if r2[j] > 0.0 {
                                    dx[j] -= g[j] * yd[j] / r2[j];
                                }
                            }
                        });
                    }
                }
                &Op::Sum { x } => {
                    accumulate(&mut grads[x.0], len(x), |dx| dx.iter_mut().for_each(|d| *d += g[0]));
                }
                &Op::Mean { x } => {
                    let s = g[0] / len(x) as f64;
                    accumulate(&mut grads[x.0], len(x), |dx| dx.iter_mut().for_each(|d| *d += s));
                }
                &Op::SumLast { x, d } => {
                    accumulate(&mut grads[x.0], len(x), |dx| {
                        for (r, chunk) in dx.chunks_mut(d).enumerate() {
                            chunk.iter_mut().for_each(|v| *v += g[r]);
                        }
                    });
                }
                Op::GatherRows { x, rows, width } => {
                    accumulate(&mut grads[x.0], len(*x), |dx| {
                        for (i, &r) in rows.iter().enumerate() {
                            let src = &g[i * width..(i + 1) * width];
                            dx[r * width..(r + 1) * width]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    });
                }
            }
        }

        let mut leaves = Vec::new();
        for (i, node) in nodes.into_iter().enumerate() {
            if let Op::Leaf { param } = node.op {
                if node.needs_grad {
                    let data = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.data.len()]);
                    leaves.push(LeafGrad {
                        var: Var(i),
                        param,
                        grad: Tensor { shape: node.value.shape, data },
                    });
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

struct LeafGrad {
    var: Var,
    param: Option<ParamId>,
    grad: Tensor,
}

/// Gradients of a scalar loss with respect to every gradient-tracking leaf.
pub struct Gradients {
    leaves: Vec<LeafGrad>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.iter().find(|l| l.var == v).map(|l| &l.grad)
    }

    /// Sums leaf gradients into one flat buffer per parameter. Parameters
    /// used more than once on the tape get the total.
    pub fn into_param_grads(self, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros(store);
        for leaf in self.leaves {
            if let Some(id) = leaf.param {
                out.0[id.index()]
                    .iter_mut()
                    .zip(&leaf.grad.data)
                    .for_each(|(d, s)| *d += s);
            }
        }
        out
    }
}

/// Flat per-parameter gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads(pub Vec<Vec<f64>>);

impl ParamGrads {
    pub fn zeros(store: &ParamStore) -> Self {
        Self(store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect())
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.0.iter_mut().flatten().for_each(|x| *x *= c);
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.0[id.index()]
    }
}

/// Indices of rows (over the last axis) that contain only `-inf`.
pub fn fully_masked_rows(t: &Tensor) -> Vec<usize> {
    let n = *t.shape().last().expect("rank >= 1");
    t.data()
        .chunks(n)
        .enumerate()
        .filter(|(_, r)| r.iter().all(|&v| v == f64::NEG_INFINITY))
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let y = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);

        let p = tape.constant(t(&[2, 2], &[1., 0., 0., 0.])).unwrap();
        let v = tape.constant(t(&[2, 1], &[5., 7.])).unwrap();
        let y = tape.matmul(p, v).unwrap();
        assert_eq!(tape.value(y).data(), &[5., 0.]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0., 0.])).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[2], &[3.7, f64::NEG_INFINITY])).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);

        let x = tape.constant(t(&[3], &[1., 2., 3.])).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        for (a, b) in tape.value(y).data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-5);
        }
    }

    #[test]
    fn softmax_fully_masked_row_is_zero_and_flagged() {
        let mut tape = Tape::new();
        let ninf = f64::NEG_INFINITY;
        let raw = t(&[2, 2], &[ninf, ninf, 1.0, 2.0]);
        assert_eq!(fully_masked_rows(&raw), vec![0]);
        let x = tape.constant(raw).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(&tape.value(y).data()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::filled(&[3], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(&[3])).unwrap();
        let x = tape.constant(t(&[3], &[1., 1., 1.])).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 0., 0.]);

        let g = tape.constant(Tensor::filled(&[2], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(&[2])).unwrap();
        let x = tape.constant(t(&[2], &[-1., 1.])).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        assert_abs_diff_eq!(tape.value(y).data()[0], -1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(tape.value(y).data()[1], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn backward_sum_and_quadratic() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[3], &[0.3, -2.0, 5.0]), true).unwrap();
        let s = tape.sum(w).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(w).unwrap().data(), &[1., 1., 1.]);

        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1., 2.]), true).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(w).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(&[2]), true).unwrap();
        assert!(matches!(tape.backward(w), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn nan_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[-1.0])).unwrap();
        assert!(matches!(tape.sqrt(x), Err(TensorError::NonFinite { op: "sqrt" })));
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64)).unwrap();
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        assert_eq!(tape.value(p).get(&[3, 1, 2]), tape.value(x).get(&[1, 2, 3]));
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn broadcast_is_suffix_only() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2])).unwrap();
        assert!(tape.add(a, b).is_err());
        let c = tape.constant(Tensor::filled(&[3], 1.0)).unwrap();
        let y = tape.add(a, c).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0; 6]);
    }
}
