//! Recorded forward computation with reverse-mode gradient propagation.
//!
//! A [`Trace`] owns the value of every intermediate produced during one
//! forward pass. Each primitive checks its shape rule, computes its output
//! eagerly and appends a node; [`Trace::backward`] then walks the nodes in
//! reverse, visiting each exactly once, and accumulates input gradients
//! additively. Parameters enter the trace through [`Trace::param`], which
//! records a single node per [`ParamId`] so every use of a shared weight
//! contributes to the same gradient.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};

static NEXT_TRACE_ID: AtomicU64 = AtomicU64::new(1);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Trace`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    trace: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    MeanAxis { input: Var, axis: usize },
    Sum(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { input: Var, inv_std: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Gather { input: Var, index: Vec<Option<usize>> },
    Reshape(Var),
    ScalarFn { input: Var, jacobian: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Concat { .. } => "concat_axis",
            Op::Slice { .. } => "slice",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Sum(_) => "sum",
            Op::Softmax(_) => "softmax_axis",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Gather { .. } => "gather",
            Op::Reshape(_) => "reshape",
            Op::ScalarFn { .. } => "scalar_fn",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of the primitives applied during one forward pass.
#[derive(Debug)]
pub struct Trace {
    id: u64,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Default for Trace {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Trace::backward`].
#[derive(Debug)]
pub struct Gradients {
    trace: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influenced the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.trace != self.trace {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }
}

/// `c (+)= a · b` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the callers pass slices whose lengths cover the strided
    // index ranges `m×k`, `k×n` and `m×n`; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Trace {
    pub fn new() -> Self {
        Trace {
            id: NEXT_TRACE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        if v.trace != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(&self.nodes[v.index].value)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op });
        Ok(Var {
            trace: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Value held by `v`.
    ///
    /// Panics if `v` was produced by a different trace.
    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v).expect("var belongs to this trace")
    }

    /// Leaf input (data or constant). Its gradient is reported by
    /// [`Gradients::get`] but never written to a parameter store.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t.detached(), Op::Leaf)
    }

    /// Trainable leaf. Repeated calls with the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(v) = self.params.get(&id) {
            return Ok(*v);
        }
        let v = self.push(store.get(id).detached(), Op::Param(id))?;
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), &mut out, false);
        self.push(Tensor::from_parts_unchecked(vec![m, n], out), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.check(a)?;
        if ta.rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", ta.shape())));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let src = ta.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::from_parts_unchecked(vec![n, m], out), Op::Transpose(a))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::from_parts_unchecked(ta.shape().to_vec(), data);
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn row_broadcast(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (ta, tr) = (self.check(a)?, self.check(row)?);
        if tr.numel() != ta.cols() {
            return Err(Error::shape(
                op,
                format!("row of {} values against {:?}", tr.numel(), ta.shape()),
            ));
        }
        Ok(())
    }

    /// Adds a row vector (e.g. a bias) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row)?;
        let (ta, tr) = (self.value(a), self.value(row));
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tr.data()[i % c])
            .collect();
        let t = Tensor::from_parts_unchecked(ta.shape().to_vec(), data);
        self.push(t, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row)?;
        let (ta, tr) = (self.value(a), self.value(row));
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * tr.data()[i % c])
            .collect();
        let t = Tensor::from_parts_unchecked(ta.shape().to_vec(), data);
        self.push(t, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        if !factor.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let ta = self.check(a)?;
        let data = ta.data().iter().map(|x| x * factor).collect();
        let t = Tensor::from_parts_unchecked(ta.shape().to_vec(), data);
        self.push(t, Op::Scale(a, factor))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat_axis", "no inputs"))?;
        let base = self.check(*first)?.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape(
                "concat_axis",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.check(*v)?.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat_axis",
                    format!("{s:?} vs {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let t = Tensor::from_parts_unchecked(shape, out);
        self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Keeps indices `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let ta = self.check(a)?;
        let shape = ta.shape();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, ext, inner) = axis_split(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = end - start;
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * ext * inner;
            out.extend_from_slice(&ta.data()[base + start * inner..base + end * inner]);
        }
        let t = Tensor::from_parts_unchecked(out_shape, out);
        self.push(
            t,
            Op::Slice {
                input: a,
                axis,
                start,
            },
        )
    }

    /// Mean over `axis`; the axis is removed (a rank-1 input yields shape `[1]`).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.check(a)?;
        let shape = ta.shape();
        if axis >= shape.len() {
            return Err(Error::shape(
                "mean_axis",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, ext, inner) = axis_split(shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let src = &ta.data()[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], src);
            }
        }
        let inv = 1.0 / ext as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape: Vec<usize> = shape.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let t = Tensor::from_parts_unchecked(out_shape, out);
        self.push(t, Op::MeanAxis { input: a, axis })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.check(a)?;
        let c = ta.cols();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            let inv = 1.0 / z;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let t = Tensor::from_parts_unchecked(ta.shape().to_vec(), out);
        self.push(t, Op::Softmax(a))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.check(a)?;
        let c = ta.cols();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::from_parts_unchecked(ta.shape().to_vec(), out);
        self.push(t, Op::LogSoftmax(a))
    }

    /// Normalizes the last axis to zero mean and unit variance, with `eps`
    /// added to the variance. No affine transform.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ta = self.check(a)?;
        let c = ta.cols();
        let mut out = ta.data().to_vec();
        let mut inv_std = Vec::with_capacity(ta.rows());
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let t = Tensor::from_parts_unchecked(ta.shape().to_vec(), out);
        self.push(t, Op::LayerNorm { input: a, inv_std })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.check(a)?;
        let data = ta
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let t = Tensor::from_parts_unchecked(ta.shape().to_vec(), data);
        self.push(t, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.check(a)?;
        let data = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::from_parts_unchecked(ta.shape().to_vec(), data);
        self.push(t, Op::Relu(a))
    }

    /// Builds a tensor of `shape` whose element `i` is the flat input element
    /// `index[i]`, or zero for `None`.
    pub fn gather(&mut self, a: Var, shape: &[usize], index: Vec<Option<usize>>) -> Result<Var> {
        let ta = self.check(a)?;
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != index.len() {
            return Err(Error::shape(
                "gather",
                format!("{} indices for output {shape:?}", index.len()),
            ));
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= ta.numel()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range for {:?}", ta.shape()),
            ));
        }
        let src = ta.data();
        let data = index.iter().map(|i| i.map_or(0.0, |i| src[i])).collect();
        let t = Tensor::from_parts_unchecked(shape.to_vec(), data);
        self.push(t, Op::Gather { input: a, index })
    }

    /// Row lookup: output row `r` is `table` row `ids[r]`.
    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.check(table)?;
        if tt.rank() != 2 || ids.is_empty() {
            return Err(Error::shape(
                "embed_lookup",
                format!("{} ids into {:?}", ids.len(), tt.shape()),
            ));
        }
        let (n, d) = (tt.shape()[0], tt.shape()[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::shape(
                "embed_lookup",
                format!("id {bad} out of range for {n} rows"),
            ));
        }
        let index = ids
            .iter()
            .flat_map(|&r| (0..d).map(move |c| Some(r * d + c)))
            .collect();
        self.gather(table, &[ids.len(), d], index)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.check(a)?.detached().reshaped(shape.to_vec())?;
        self.push(t, Op::Reshape(a))
    }

    /// Scalar node whose value and gradient with respect to `input` were
    /// computed externally (used by the CTC loss).
    pub(crate) fn scalar_fn(&mut self, input: Var, value: f64, jacobian: Vec<f64>) -> Result<Var> {
        let ti = self.check(input)?;
        if jacobian.len() != ti.numel() {
            return Err(Error::shape(
                "scalar_fn",
                format!("jacobian of {} for {:?}", jacobian.len(), ti.shape()),
            ));
        }
        self.push(Tensor::scalar(value), Op::ScalarFn { input, jacobian })
    }

    /// Propagates gradients from the scalar `loss` back through every
    /// recorded op, accumulating parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let tl = self.check(loss)?;
        if !tl.is_scalar() {
            return Err(Error::NotScalar(tl.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![1.0]);

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop(node, &g, &mut grads);
            if let Op::Param(id) = node.op {
                store.get_mut(id).accumulate_grad(&g);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            trace: self.id,
            grads,
        })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.index].value;
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let n = self.nodes[v.index].value.numel();
                grads[v.index].get_or_insert_with(|| vec![0.0; n])
            }};
        }
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                // dA = G · Bᵀ ; dB = Aᵀ · G
                gemm(m, n, k, g, (n, 1), tb.data(), (1, n), acc!(*a), true);
                gemm(k, m, n, ta.data(), (1, k), g, (n, 1), acc!(*b), true);
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                let ga = acc!(*a);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(acc!(*a), g);
                add_into(acc!(*b), g);
            }
            Op::Sub(a, b) => {
                add_into(acc!(*a), g);
                for (d, s) in acc!(*b).iter_mut().zip(g) {
                    *d -= s;
                }
            }
            Op::AddRow(a, row) => {
                add_into(acc!(*a), g);
                let c = val(*row).numel();
                let gr = acc!(*row);
                for chunk in g.chunks(c) {
                    add_into(gr, chunk);
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                for ((d, gi), y) in acc!(*a).iter_mut().zip(g).zip(db) {
                    *d += gi * y;
                }
                for ((d, gi), x) in acc!(*b).iter_mut().zip(g).zip(da) {
                    *d += gi * x;
                }
            }
            Op::MulRow(a, row) => {
                let (xa, r) = (val(*a).data(), val(*row).data());
                let c = r.len();
                for (i, (d, gi)) in acc!(*a).iter_mut().zip(g).enumerate() {
                    *d += gi * r[i % c];
                }
                let gr = acc!(*row);
                for (i, (gi, x)) in g.iter().zip(xa).enumerate() {
                    gr[i % c] += gi * x;
                }
            }
            Op::Scale(a, f) => {
                for (d, gi) in acc!(*a).iter_mut().zip(g) {
                    *d += gi * f;
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for o in 0..outer {
                    for v in inputs {
                        let block = val(*v).shape()[*axis] * inner;
                        add_into(
                            &mut acc!(*v)[o * block..(o + 1) * block],
                            &g[offset..offset + block],
                        );
                        offset += block;
                    }
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, ext, inner) = axis_split(val(*input).shape(), *axis);
                let len = out.shape()[*axis] * inner;
                let gi = acc!(*input);
                for o in 0..outer {
                    let base = o * ext * inner + start * inner;
                    add_into(&mut gi[base..base + len], &g[o * len..(o + 1) * len]);
                }
            }
            Op::MeanAxis { input, axis } => {
                let (outer, ext, inner) = axis_split(val(*input).shape(), *axis);
                let inv = 1.0 / ext as f64;
                let gi = acc!(*input);
                for o in 0..outer {
                    for e in 0..ext {
                        let dst = &mut gi[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d += s * inv;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                acc!(*a).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Softmax(a) => {
                let c = out.cols();
                let ga = acc!(*a);
                for ((y, gy), dx) in out
                    .data()
                    .chunks(c)
                    .zip(g.chunks(c))
                    .zip(ga.chunks_mut(c))
                {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for ((d, yi), gi) in dx.iter_mut().zip(y).zip(gy) {
                        *d += yi * (gi - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                let ga = acc!(*a);
                for ((y, gy), dx) in out
                    .data()
                    .chunks(c)
                    .zip(g.chunks(c))
                    .zip(ga.chunks_mut(c))
                {
                    let total: f64 = gy.iter().sum();
                    for ((d, yi), gi) in dx.iter_mut().zip(y).zip(gy) {
                        *d += gi - yi.exp() * total;
                    }
                }
            }
            Op::LayerNorm { input, inv_std } => {
                let c = out.cols();
                let n = c as f64;
                let ga = acc!(*input);
                for (r, ((y, gy), dx)) in out
                    .data()
                    .chunks(c)
                    .zip(g.chunks(c))
                    .zip(ga.chunks_mut(c))
                    .enumerate()
                {
                    let mean_g = gy.iter().sum::<f64>() / n;
                    let mean_gy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((d, yi), gi) in dx.iter_mut().zip(y).zip(gy) {
                        *d += inv_std[r] * (gi - mean_g - yi * mean_gy);
                    }
                }
            }
            Op::Gelu(a) => {
                let xs = val(*a).data();
                for ((d, gi), &x) in acc!(*a).iter_mut().zip(g).zip(xs) {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    *d += gi * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                }
            }
            Op::Relu(a) => {
                let xs = val(*a).data();
                for ((d, gi), &x) in acc!(*a).iter_mut().zip(g).zip(xs) {
                    if x > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Gather { input, index } => {
                let gi = acc!(*input);
                for (src, gv) in index.iter().zip(g) {
                    if let Some(s) = src {
                        gi[*s] += gv;
                    }
                }
            }
            Op::Reshape(a) => add_into(acc!(*a), g),
            Op::ScalarFn { input, jacobian } => {
                for (d, j) in acc!(*input).iter_mut().zip(jacobian) {
                    *d += g[0] * j;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        ParamStore::new()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tr = Trace::new();
        let x = tr.input(Tensor::new([2], vec![0.0, 0.0]).unwrap()).unwrap();
        let y = tr.softmax(x).unwrap();
        assert_eq!(tr.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut tr = Trace::new();
        let i = tr.input(Tensor::identity(3).unwrap()).unwrap();
        let x = Tensor::from_rows(&[[1.0, -2.0], [3.5, 0.25], [7.0, 9.0]]).unwrap();
        let xv = tr.input(x.clone()).unwrap();
        let y = tr.matmul(i, xv).unwrap();
        assert_eq!(tr.value(y).data(), x.data());
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut tr = Trace::new();
        let x = tr.input(Tensor::filled([1, 5], 3.25).unwrap()).unwrap();
        let y = tr.layer_norm(x, 1e-5).unwrap();
        assert!(tr.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tr = Trace::new();
        let x = tr.input(Tensor::new([4], vec![1.0, -2.0, 3.0, 0.5]).unwrap()).unwrap();
        let s = tr.sum(x).unwrap();
        let g = tr.backward(s, &mut store()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn dot_self_gradient_is_twice_x() {
        let mut tr = Trace::new();
        let xs = [1.5, -2.0, 0.25];
        let x = tr.input(Tensor::new([3], xs.to_vec()).unwrap()).unwrap();
        let sq = tr.mul(x, x).unwrap();
        let s = tr.sum(sq).unwrap();
        let g = tr.backward(s, &mut store()).unwrap();
        let expect: Vec<f64> = xs.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap(), expect.as_slice());
    }

    #[test]
    fn shared_leaf_accumulates_both_uses() {
        let mut ps = store();
        let id = ps.insert("w", Tensor::new([2], vec![2.0, 3.0]).unwrap()).unwrap();
        let mut tr = Trace::new();
        let a = tr.param(&ps, id).unwrap();
        let b = tr.param(&ps, id).unwrap();
        assert_eq!(a, b);
        let s1 = tr.scale(a, 3.0).unwrap();
        let s2 = tr.scale(b, 5.0).unwrap();
        let t = tr.add(s1, s2).unwrap();
        let loss = tr.sum(t).unwrap();
        tr.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.get(id).grad().unwrap(), &[8.0, 8.0]);
        // second call accumulates
        tr.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.get(id).grad().unwrap(), &[16.0, 16.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tr = Trace::new();
        let a = tr.input(Tensor::zeros([2, 3]).unwrap()).unwrap();
        let b = tr.input(Tensor::zeros([2, 3]).unwrap()).unwrap();
        let err = tr.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut tr = Trace::new();
        let err = tr.input(Tensor::new([1], vec![f64::NAN]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn backward_requires_scalar_on_same_trace() {
        let mut tr = Trace::new();
        let a = tr.input(Tensor::zeros([2]).unwrap()).unwrap();
        assert!(matches!(tr.backward(a, &mut store()), Err(Error::NotScalar(_))));
        let mut other = Trace::new();
        let s = other.input(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(tr.backward(s, &mut store()), Err(Error::ForeignVar)));
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tr = Trace::new();
        let a = tr.input(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap()).unwrap();
        let b = tr.input(Tensor::from_rows(&[[5.0], [6.0]]).unwrap()).unwrap();
        let c = tr.concat(&[a, b], 1).unwrap();
        assert_eq!(tr.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = tr.slice(c, 1, 2, 3).unwrap();
        assert_eq!(tr.value(s).data(), &[5.0, 6.0]);
        let r = tr.concat(&[a, a], 0).unwrap();
        assert_eq!(tr.value(r).shape(), &[4, 2]);
    }

    #[test]
    fn mean_axis_removes_axis() {
        let mut tr = Trace::new();
        let a = tr
            .input(Tensor::new([2, 2, 2], (0..8).map(f64::from).collect()).unwrap())
            .unwrap();
        let m = tr.mean_axis(a, 1).unwrap();
        assert_eq!(tr.value(m).shape(), &[2, 2]);
        assert_eq!(tr.value(m).data(), &[1.0, 2.0, 5.0, 6.0]);
    }
}
