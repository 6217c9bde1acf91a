//! Wengert-list reverse-mode autodiff.
//!
//! Every primitive appends one node holding its output value and whatever it
//! needs for the adjoint. `backward` walks the list in exact reverse order,
//! so the record is topologically ordered by construction.

use std::collections::HashMap;

use rand::Rng;

use super::tensor::numel_of;
use super::{EngineError, ParamId, ParameterSet, Tensor};

/// Stand-in for `-inf` in masked logits. IEEE infinity would turn the
/// max-subtraction in softmax into `inf - inf = NaN`.
pub const MASK_SENTINEL: f32 = -1e9;

pub const BATCH_NORM_EPS: f32 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f32 = 0.1;
pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Scale(f32),
    AddScalar(f32),
    Clamp(f32, f32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
struct Axis {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Axis {
    fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    #[inline]
    fn at(&self, o: usize, l: usize, i: usize) -> usize {
        (o * self.len + l) * self.inner + i
    }
}

/// Exponential moving averages used by batch norm in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }
}

enum Op {
    Leaf,
    Param,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
    },
    Unary {
        kind: Unary,
        x: Var,
    },
    Softmax {
        x: Var,
        axis: Axis,
    },
    LogSoftmax {
        x: Var,
        axis: Axis,
    },
    SumAxis {
        x: Var,
        axis: Axis,
    },
    MaxAxis {
        x: Var,
        axis: Axis,
        arg: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        map: Vec<usize>,
    },
    Narrow {
        x: Var,
        width: usize,
        start: usize,
        len: usize,
    },
    Concat {
        parts: Vec<Var>,
        widths: Vec<usize>,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
        width: usize,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
        width: usize,
    },
    MaskedFill {
        x: Var,
        masked: Vec<usize>,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        rows: usize,
        cols: usize,
        per_row: bool,
        batch_stats: bool,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param => vec![],
            Op::MatMul { a, b, .. } | Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Unary { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::SumAxis { x, .. }
            | Op::MaxAxis { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Narrow { x, .. }
            | Op::Pick { x, .. }
            | Op::MaskedFill { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::GatherRows { table, .. } => vec![*table],
            Op::Norm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    param_nodes: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Adjoint of `var`; zero when the loss does not depend on it.
    pub fn wrt(&self, tape: &Tape, var: Var) -> Vec<f32> {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; tape.value(var).numel()])
    }

    /// Adds the adjoint of every parameter leaf into the parameter set.
    pub fn accumulate_into(&self, params: &mut ParameterSet) {
        for &(pid, var) in &self.param_nodes {
            if let Some(g) = &self.grads[var.0] {
                let dst = &mut params.get_mut(pid).grad;
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// For every flat index of `out_shape`, the flat index of the broadcast
/// operand with shape `in_shape`.
fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..in_shape.len()).rev() {
        strides[i + pad] = if in_shape[i] == 1 { 0 } else { s };
        s *= in_shape[i];
    }
    let n = numel_of(out_shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// `c[m x n] += a[m x k] * b[k x n]`
fn mm_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    gemm(m, k, n, a, (k, 1), b, (n, 1), c);
}

/// `c[m x k] += a[m x n] * b[k x n]^T`
fn mm_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, n: usize, k: usize) {
    gemm(m, n, k, a, (n, 1), b, (1, n), c);
}

/// `c[k x n] += a[m x k]^T * g[m x n]`
fn mm_tn(a: &[f32], g: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    gemm(k, m, n, a, (1, k), g, (n, 1), c);
}

/// `c[m x n] += a[m x k] * b[k x n]` for strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    sa: (usize, usize),
    b: &[f32],
    sb: (usize, usize),
    c: &mut [f32],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every index reached through the
    // given strides, and `c` does not alias the inputs.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shape_err<T>(msg: String) -> Result<T, EngineError> {
    Err(EngineError::Shape(msg))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, EngineError> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(EngineError::NonFinite(format!(
                "output of {} at tape position {}",
                op_name(&op),
                self.nodes.len()
            )));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param => true,
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf that is not a registered parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Loads a parameter onto the tape. Repeated loads of the same
    /// parameter return the same node, so adjoints accumulate in one place.
    pub fn param(&mut self, params: &ParameterSet, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: params.get(id).value.clone(),
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    /// `[.., m, k] x [k, n]` or batched `[b, m, k] x [b, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}"));
        }
        let k = sa[sa.len() - 1];
        let m = sa[sa.len() - 2];
        let (batch, n, shared_b, out_shape) = if sb.len() == 2 {
            if sb[0] != k {
                return shape_err(format!("matmul inner extents differ: {sa:?} x {sb:?}"));
            }
            let rows: usize = sa[..sa.len() - 1].iter().product();
            let mut out = sa[..sa.len() - 1].to_vec();
            out.push(sb[1]);
            // Shared right operand: fold leading axes into rows.
            (1, sb[1], true, (rows, out))
        } else if sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sb[1] == k {
            (sa[0], sb[2], false, (m, vec![sa[0], m, sb[2]]))
        } else {
            return shape_err(format!("matmul shape mismatch: {sa:?} x {sb:?}"));
        };
        let (m, out_shape) = out_shape;
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for bi in 0..batch {
                let boff = if shared_b { 0 } else { bi * k * n };
                mm_nn(
                    &ad[bi * m * k..(bi + 1) * m * k],
                    &bd[boff..boff + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        self.push(
            Tensor::from_parts_unchecked(out_shape, out),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
        )
    }

    // ---- elementwise ----------------------------------------------------

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, EngineError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| EngineError::Shape(format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let f = |x: f32, y: f32| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        if kind == Binary::Div && self.data(b).contains(&0.0) {
            return Err(EngineError::Domain("division by zero".into()));
        }
        let ad = self.data(a);
        let bd = self.data(b);
        let out: Vec<f32> = if sa == sb {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(&out_shape, &sa);
            let mb = broadcast_map(&out_shape, &sb);
            ma.iter().zip(&mb).map(|(&i, &j)| f(ad[i], bd[j])).collect()
        };
        self.push(
            Tensor::from_parts_unchecked(out_shape, out),
            Op::Binary { kind, a, b },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.binary(Binary::Div, a, b)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var, EngineError> {
        let xd = self.data(x);
        if kind == Unary::Log {
            if let Some(bad) = xd.iter().find(|&&v| v <= 0.0) {
                return Err(EngineError::Domain(format!(
                    "log of non-positive value {bad}"
                )));
            }
        }
        let out: Vec<f32> = match kind {
            Unary::Relu => xd.iter().map(|&v| v.max(0.0)).collect(),
            Unary::Sigmoid => xd.iter().map(|&v| sigmoid(v)).collect(),
            Unary::Tanh => xd.iter().map(|&v| v.tanh()).collect(),
            Unary::Exp => xd.iter().map(|&v| v.exp()).collect(),
            Unary::Log => xd.iter().map(|&v| v.ln()).collect(),
            Unary::Scale(s) => xd.iter().map(|&v| v * s).collect(),
            Unary::AddScalar(s) => xd.iter().map(|&v| v + s).collect(),
            Unary::Clamp(lo, hi) => xd.iter().map(|&v| v.clamp(lo, hi)).collect(),
        };
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::from_parts_unchecked(shape, out),
            Op::Unary { kind, x },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, EngineError> {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, EngineError> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, EngineError> {
        self.unary(Unary::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, EngineError> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, EngineError> {
        self.unary(Unary::Log, x)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var, EngineError> {
        self.unary(Unary::Scale(s), x)
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Result<Var, EngineError> {
        self.unary(Unary::AddScalar(s), x)
    }

    /// Clamp into `[lo, hi]`; the adjoint is zero outside the open interval.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Result<Var, EngineError> {
        self.unary(Unary::Clamp(lo, hi), x)
    }

    // ---- reductions and normalisations ---------------------------------

    fn check_axis(&self, x: Var, axis: usize) -> Result<Axis, EngineError> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return shape_err(format!("axis {axis} out of range for {shape:?}"));
        }
        Ok(Axis::of(shape, axis))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, EngineError> {
        let ax = self.check_axis(x, axis)?;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for o in 0..ax.outer {
            for i in 0..ax.inner {
                let mx = (0..ax.len)
                    .map(|l| xd[ax.at(o, l, i)])
                    .fold(f32::NEG_INFINITY, f32::max);
                let mut total = 0.0;
                for l in 0..ax.len {
                    let e = (xd[ax.at(o, l, i)] - mx).exp();
                    out[ax.at(o, l, i)] = e;
                    total += e;
                }
                for l in 0..ax.len {
                    out[ax.at(o, l, i)] /= total;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::from_parts_unchecked(shape, out),
            Op::Softmax { x, axis: ax },
        )
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, EngineError> {
        let ax = self.check_axis(x, axis)?;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for o in 0..ax.outer {
            for i in 0..ax.inner {
                let mx = (0..ax.len)
                    .map(|l| xd[ax.at(o, l, i)])
                    .fold(f32::NEG_INFINITY, f32::max);
                let total: f32 = (0..ax.len).map(|l| (xd[ax.at(o, l, i)] - mx).exp()).sum();
                let lse = mx + total.ln();
                for l in 0..ax.len {
                    out[ax.at(o, l, i)] = xd[ax.at(o, l, i)] - lse;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::from_parts_unchecked(shape, out),
            Op::LogSoftmax { x, axis: ax },
        )
    }

    /// Sum over `axis`, dropping it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, EngineError> {
        let ax = self.check_axis(x, axis)?;
        let xd = self.data(x);
        let mut out = vec![0.0; ax.outer * ax.inner];
        for o in 0..ax.outer {
            for l in 0..ax.len {
                for i in 0..ax.inner {
                    out[o * ax.inner + i] += xd[ax.at(o, l, i)];
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        self.push(
            Tensor::from_parts_unchecked(shape, out),
            Op::SumAxis { x, axis: ax },
        )
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, EngineError> {
        let len = self.check_axis(x, axis)?.len;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / len as f32)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var, EngineError> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.sum_axis(flat, 0)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, EngineError> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f32)
    }

    /// Maximum over `axis`. The adjoint goes to the arg-max; ties resolve
    /// to the lowest index along the axis.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var, EngineError> {
        let ax = self.check_axis(x, axis)?;
        let xd = self.data(x);
        let mut out = vec![0.0; ax.outer * ax.inner];
        let mut arg = vec![0usize; ax.outer * ax.inner];
        for o in 0..ax.outer {
            for i in 0..ax.inner {
                let mut best = 0;
                for l in 1..ax.len {
                    if xd[ax.at(o, l, i)] > xd[ax.at(o, best, i)] {
                        best = l;
                    }
                }
                out[o * ax.inner + i] = xd[ax.at(o, best, i)];
                arg[o * ax.inner + i] = best;
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        self.push(
            Tensor::from_parts_unchecked(shape, out),
            Op::MaxAxis { x, axis: ax, arg },
        )
    }

    /// Per-row normalisation of the last axis with learned affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, EngineError> {
        let shape = self.shape(x).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| EngineError::Shape("layer_norm on scalar".into()))?;
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return shape_err(format!("layer_norm affine must be [{cols}]"));
        }
        let rows = numel_of(&shape) / cols;
        let xd = self.data(x);
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f32>() / cols as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                xhat[r * cols + c] = (row[c] - mean) * is;
            }
        }
        let out = self.affine_out(&xhat, gamma, beta, rows, cols);
        self.push(
            Tensor::from_parts_unchecked(shape, out),
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                rows,
                cols,
                per_row: true,
                batch_stats: true,
            },
        )
    }

    fn affine_out(
        &self,
        xhat: &[f32],
        gamma: Var,
        beta: Var,
        rows: usize,
        cols: usize,
    ) -> Vec<f32> {
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = g[c] * xhat[r * cols + c] + b[c];
            }
        }
        out
    }

    /// Batch normalisation of `x: [batch, features]`.
    ///
    /// Train mode normalises by the batch statistics (biased variance) and
    /// folds them into `stats` with momentum 0.1 (unbiased variance); eval
    /// mode normalises by `stats`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
    ) -> Result<Var, EngineError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return shape_err(format!(
                "batch_norm expects [batch, features], got {shape:?}"
            ));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] || stats.mean.len() != cols {
            return shape_err(format!("batch_norm affine/statistics must be [{cols}]"));
        }
        if mode == Mode::Train && rows < 2 {
            return Err(EngineError::Invalid(
                "batch_norm in train mode needs a batch of at least 2".into(),
            ));
        }
        let xd = self.data(x);
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; cols];
        for c in 0..cols {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = (0..rows).map(|r| xd[r * cols + c]).sum::<f32>() / rows as f32;
                    let var = (0..rows)
                        .map(|r| (xd[r * cols + c] - mean).powi(2))
                        .sum::<f32>()
                        / rows as f32;
                    stats.mean[c] =
                        (1.0 - BATCH_NORM_MOMENTUM) * stats.mean[c] + BATCH_NORM_MOMENTUM * mean;
                    let unbiased = var * rows as f32 / (rows - 1) as f32;
                    stats.var[c] =
                        (1.0 - BATCH_NORM_MOMENTUM) * stats.var[c] + BATCH_NORM_MOMENTUM * unbiased;
                    (mean, var)
                }
                Mode::Eval => (stats.mean[c], stats.var[c]),
            };
            let is = 1.0 / (var + BATCH_NORM_EPS).sqrt();
            inv_std[c] = is;
            for r in 0..rows {
                xhat[r * cols + c] = (xd[r * cols + c] - mean) * is;
            }
        }
        let out = self.affine_out(&xhat, gamma, beta, rows, cols);
        self.push(
            Tensor::from_parts_unchecked(shape, out),
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                rows,
                cols,
                per_row: false,
                batch_stats: mode == Mode::Train,
            },
        )
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, EngineError> {
        if numel_of(shape) != self.value(x).numel() {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape(x)));
        }
        let data = self.data(x).to_vec();
        self.push(
            Tensor::from_parts_unchecked(shape.to_vec(), data),
            Op::Reshape { x },
        )
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, EngineError> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return shape_err(format!("invalid permutation {perm:?} for {shape:?}"));
        }
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = numel_of(&shape);
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..n {
            map.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                off += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        let xd = self.data(x);
        let out = map.iter().map(|&i| xd[i]).collect();
        self.push(
            Tensor::from_parts_unchecked(out_shape, out),
            Op::Permute { x, map },
        )
    }

    /// Columns `start..start + len` of the last axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var, EngineError> {
        let shape = self.shape(x).to_vec();
        let width = *shape
            .last()
            .ok_or_else(|| EngineError::Shape("narrow on scalar".into()))?;
        if len == 0 || start + len > width {
            return shape_err(format!(
                "narrow {start}..{} out of range {width}",
                start + len
            ));
        }
        let rows = numel_of(&shape) / width;
        let xd = self.data(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xd[r * width + start..r * width + start + len]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        self.push(
            Tensor::from_parts_unchecked(out_shape, out),
            Op::Narrow {
                x,
                width,
                start,
                len,
            },
        )
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, EngineError> {
        let first = parts
            .first()
            .ok_or_else(|| EngineError::Shape("concat of nothing".into()))?;
        let lead = {
            let s = self.shape(*first);
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return shape_err(format!("concat leading axes differ: {lead:?} vs {s:?}"));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(
            Tensor::from_parts_unchecked(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
        )
    }

    /// Rows of `table: [vocab, width]` selected by `idx`, giving `[idx.len(), width]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var, EngineError> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return shape_err(format!("gather_rows expects a matrix, got {shape:?}"));
        }
        let (vocab, width) = (shape[0], shape[1]);
        if let Some(bad) = idx.iter().find(|&&i| i >= vocab) {
            return Err(EngineError::Index(format!(
                "row {bad} out of range {vocab}"
            )));
        }
        if idx.is_empty() {
            return shape_err("gather_rows with no indices".into());
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&td[i * width..(i + 1) * width]);
        }
        self.push(
            Tensor::from_parts_unchecked(vec![idx.len(), width], out),
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
                width,
            },
        )
    }

    /// One element per row of the last axis: `out[r] = x[r, idx[r]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var, EngineError> {
        let shape = self.shape(x).to_vec();
        let width = *shape
            .last()
            .ok_or_else(|| EngineError::Shape("pick on scalar".into()))?;
        let rows = numel_of(&shape) / width;
        if idx.len() != rows {
            return shape_err(format!("pick needs {rows} indices, got {}", idx.len()));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= width) {
            return Err(EngineError::Index(format!(
                "column {bad} out of range {width}"
            )));
        }
        let xd = self.data(x);
        let out = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| xd[r * width + c])
            .collect();
        self.push(
            Tensor::from_parts_unchecked(shape[..shape.len() - 1].to_vec(), out),
            Op::Pick {
                x,
                idx: idx.to_vec(),
                width,
            },
        )
    }

    /// Sets selected entries of the last axis to `value`, row by row.
    ///
    /// `mask[r]` lists the columns to overwrite in row `r`; a rank-1 input
    /// is a single row. Masked entries receive no gradient.
    pub fn masked_fill(
        &mut self,
        x: Var,
        mask: &[Vec<usize>],
        value: f32,
    ) -> Result<Var, EngineError> {
        let shape = self.shape(x).to_vec();
        let width = *shape
            .last()
            .ok_or_else(|| EngineError::Shape("masked_fill on scalar".into()))?;
        let rows = numel_of(&shape) / width;
        if mask.len() != rows {
            return shape_err(format!("mask has {} rows, tensor has {rows}", mask.len()));
        }
        let mut out = self.data(x).to_vec();
        let mut masked = Vec::new();
        for (r, cols) in mask.iter().enumerate() {
            for &c in cols {
                if c >= width {
                    return Err(EngineError::Index(format!(
                        "mask index {c} out of range {width}"
                    )));
                }
                out[r * width + c] = value;
                masked.push(r * width + c);
            }
        }
        masked.sort_unstable();
        masked.dedup();
        self.push(
            Tensor::from_parts_unchecked(shape, out),
            Op::MaskedFill { x, masked },
        )
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng>(
        &mut self,
        x: Var,
        rate: f32,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var, EngineError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(EngineError::Invalid(format!(
                "dropout rate {rate} not in [0, 1)"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let shape = self.shape(x).to_vec();
        let mask: Vec<f32> = (0..numel_of(&shape))
            .map(|_| {
                if rng.gen::<f32>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let m = self.constant(Tensor::from_parts_unchecked(shape, mask));
        self.mul(x, m)
    }

    // ---- reverse sweep --------------------------------------------------

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, EngineError> {
        if self.value(loss).numel() != 1 {
            return Err(EngineError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut param_nodes: Vec<(ParamId, Var)> =
            self.params.iter().map(|(&p, &v)| (p, v)).collect();
        param_nodes.sort_by_key(|(p, _)| p.0);
        Ok(Gradients { grads, param_nodes })
    }

    /// Runs `backward` and adds parameter adjoints into `params`.
    pub fn backward_into(&self, loss: Var, params: &mut ParameterSet) -> Result<(), EngineError> {
        self.backward(loss)?.accumulate_into(params);
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let out = node.value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {{
                let n = self.nodes[$v.0].value.numel();
                grads[$v.0].get_or_insert_with(|| vec![0.0; n])
            }};
        }
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let ad = self.data(a);
                let bd = self.data(b);
                if wants(a) {
                    let ga = acc!(a);
                    for bi in 0..batch {
                        let boff = if shared_b { 0 } else { bi * k * n };
                        mm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bd[boff..boff + k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if wants(b) {
                    let gb = acc!(b);
                    for bi in 0..batch {
                        let boff = if shared_b { 0 } else { bi * k * n };
                        mm_tn(
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[boff..boff + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            &Op::Binary { kind, a, b } => {
                let sa = self.shape(a);
                let sb = self.shape(b);
                let os = node.value.shape();
                let same = sa == sb;
                let ma = if same {
                    Vec::new()
                } else {
                    broadcast_map(os, sa)
                };
                let mb = if same {
                    Vec::new()
                } else {
                    broadcast_map(os, sb)
                };
                let ia = |i: usize| if same { i } else { ma[i] };
                let ib = |i: usize| if same { i } else { mb[i] };
                let ad = self.data(a);
                let bd = self.data(b);
                if wants(a) {
                    let ga = acc!(a);
                    for (i, &gi) in g.iter().enumerate() {
                        ga[ia(i)] += match kind {
                            Binary::Add | Binary::Sub => gi,
                            Binary::Mul => gi * bd[ib(i)],
                            Binary::Div => gi / bd[ib(i)],
                        };
                    }
                }
                if wants(b) {
                    let gb = acc!(b);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[ib(i)] += match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * ad[ia(i)],
                            Binary::Div => {
                                let y = bd[ib(i)];
                                -gi * ad[ia(i)] / (y * y)
                            }
                        };
                    }
                }
            }
            &Op::Unary { kind, x } => {
                if !wants(x) {
                    return;
                }
                let xd = self.data(x);
                let gx = acc!(x);
                for i in 0..g.len() {
                    gx[i] += g[i]
                        * match kind {
                            Unary::Relu => {
                                if xd[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sigmoid => out[i] * (1.0 - out[i]),
                            Unary::Tanh => 1.0 - out[i] * out[i],
                            Unary::Exp => out[i],
                            Unary::Log => 1.0 / xd[i],
                            Unary::Scale(s) => s,
                            Unary::AddScalar(_) => 1.0,
                            Unary::Clamp(lo, hi) => {
                                if xd[i] > lo && xd[i] < hi {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                }
            }
            &Op::Softmax { x, axis } => {
                if !wants(x) {
                    return;
                }
                let gx = acc!(x);
                for o in 0..axis.outer {
                    for i in 0..axis.inner {
                        let dot: f32 = (0..axis.len)
                            .map(|l| g[axis.at(o, l, i)] * out[axis.at(o, l, i)])
                            .sum();
                        for l in 0..axis.len {
                            let j = axis.at(o, l, i);
                            gx[j] += out[j] * (g[j] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax { x, axis } => {
                if !wants(x) {
                    return;
                }
                let gx = acc!(x);
                for o in 0..axis.outer {
                    for i in 0..axis.inner {
                        let total: f32 = (0..axis.len).map(|l| g[axis.at(o, l, i)]).sum();
                        for l in 0..axis.len {
                            let j = axis.at(o, l, i);
                            gx[j] += g[j] - out[j].exp() * total;
                        }
                    }
                }
            }
            &Op::SumAxis { x, axis } => {
                if !wants(x) {
                    return;
                }
                let gx = acc!(x);
                for o in 0..axis.outer {
                    for l in 0..axis.len {
                        for i in 0..axis.inner {
                            gx[axis.at(o, l, i)] += g[o * axis.inner + i];
                        }
                    }
                }
            }
            Op::MaxAxis { x, axis, arg } => {
                if !wants(*x) {
                    return;
                }
                let gx = acc!(*x);
                for o in 0..axis.outer {
                    for i in 0..axis.inner {
                        let k = o * axis.inner + i;
                        gx[axis.at(o, arg[k], i)] += g[k];
                    }
                }
            }
            &Op::Reshape { x } => {
                if wants(x) {
                    let gx = acc!(x);
                    for (d, s) in gx.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Permute { x, map } => {
                if wants(*x) {
                    let gx = acc!(*x);
                    for (o, &i) in map.iter().enumerate() {
                        gx[i] += g[o];
                    }
                }
            }
            &Op::Narrow {
                x,
                width,
                start,
                len,
            } => {
                if wants(x) {
                    let gx = acc!(x);
                    let rows = g.len() / len;
                    for r in 0..rows {
                        for c in 0..len {
                            gx[r * width + start + c] += g[r * len + c];
                        }
                    }
                }
            }
            Op::Concat { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if wants(p) {
                        let gp = acc!(p);
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + off + c];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::GatherRows { table, idx, width } => {
                if wants(*table) {
                    let gt = acc!(*table);
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..*width {
                            gt[i * width + c] += g[r * width + c];
                        }
                    }
                }
            }
            Op::Pick { x, idx, width } => {
                if wants(*x) {
                    let gx = acc!(*x);
                    for (r, &c) in idx.iter().enumerate() {
                        gx[r * width + c] += g[r];
                    }
                }
            }
            Op::MaskedFill { x, masked } => {
                if wants(*x) {
                    let gx = acc!(*x);
                    let mut next = masked.iter().peekable();
                    for (i, &gi) in g.iter().enumerate() {
                        if next.peek() == Some(&&i) {
                            next.next();
                            continue;
                        }
                        gx[i] += gi;
                    }
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                rows,
                cols,
                per_row,
                batch_stats,
            } => {
                let (rows, cols) = (*rows, *cols);
                if wants(*gamma) {
                    let gg = acc!(*gamma);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = acc!(*beta);
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += g[r * cols + c];
                        }
                    }
                }
                if wants(*x) {
                    let gamma_d = self.data(*gamma).to_vec();
                    let gx = acc!(*x);
                    if *per_row {
                        for r in 0..rows {
                            let is = inv_std[r];
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for c in 0..cols {
                                let dxh = g[r * cols + c] * gamma_d[c];
                                s1 += dxh;
                                s2 += dxh * xhat[r * cols + c];
                            }
                            let nf = cols as f32;
                            for c in 0..cols {
                                let dxh = g[r * cols + c] * gamma_d[c];
                                gx[r * cols + c] +=
                                    is / nf * (nf * dxh - s1 - xhat[r * cols + c] * s2);
                            }
                        }
                    } else {
                        for c in 0..cols {
                            let is = inv_std[c];
                            if *batch_stats {
                                let mut s1 = 0.0;
                                let mut s2 = 0.0;
                                for r in 0..rows {
                                    let dxh = g[r * cols + c] * gamma_d[c];
                                    s1 += dxh;
                                    s2 += dxh * xhat[r * cols + c];
                                }
                                let nf = rows as f32;
                                for r in 0..rows {
                                    let dxh = g[r * cols + c] * gamma_d[c];
                                    gx[r * cols + c] +=
                                        is / nf * (nf * dxh - s1 - xhat[r * cols + c] * s2);
                                }
                            } else {
                                for r in 0..rows {
                                    gx[r * cols + c] += g[r * cols + c] * gamma_d[c] * is;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param => "param",
        Op::MatMul { .. } => "matmul",
        Op::Binary { .. } => "binary",
        Op::Unary { .. } => "unary",
        Op::Softmax { .. } => "softmax",
        Op::LogSoftmax { .. } => "log_softmax",
        Op::SumAxis { .. } => "sum",
        Op::MaxAxis { .. } => "max",
        Op::Reshape { .. } => "reshape",
        Op::Permute { .. } => "permute",
        Op::Narrow { .. } => "narrow",
        Op::Concat { .. } => "concat",
        Op::GatherRows { .. } => "gather_rows",
        Op::Pick { .. } => "pick",
        Op::MaskedFill { .. } => "masked_fill",
        Op::Norm { .. } => "norm",
    }
}
