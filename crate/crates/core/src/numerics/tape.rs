//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! A forward pass records every primitive on the tape; `backward` replays
//! the tape in reverse, accumulating vector-Jacobian products into per-node
//! gradient buffers. Parameters are registered by name and memoized, so a
//! module applied at every timestep shares one node (and one gradient
//! accumulator) per parameter.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::StageError;
use crate::numerics::tensor::{Parameter, Tensor};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-12;
const ARCCOS_EPS: f64 = 1e-7;
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

enum Op {
    Matmul { a: ValueId, b: ValueId, out: ValueId, m: usize, k: usize, n: usize },
    MatmulNT { a: ValueId, b: ValueId, out: ValueId, m: usize, k: usize, n: usize },
    Conv2d { input: ValueId, weight: ValueId, out: ValueId, dims: ConvDims },
    Binary { kind: BinKind, a: ValueId, b: ValueId, out: ValueId },
    Scale { a: ValueId, c: f64, out: ValueId },
    AddScalar { a: ValueId, out: ValueId },
    SumAxes { a: ValueId, out: ValueId, axes: Vec<usize> },
    Concat { inputs: Vec<ValueId>, axis: usize, out: ValueId },
    Slice { a: ValueId, out: ValueId, axis: usize, start: usize, len: usize },
    Reshape { a: ValueId, out: ValueId },
    Unary { kind: UnaryKind, a: ValueId, out: ValueId },
    SoftmaxLast { a: ValueId, out: ValueId },
    CausalSoftmax { a: ValueId, out: ValueId, s: usize },
    LayerNorm { a: ValueId, gamma: ValueId, beta: ValueId, out: ValueId, rows: usize, cols: usize, stats: Vec<(f64, f64)> },
    GroupNorm { a: ValueId, gamma: ValueId, beta: ValueId, out: ValueId, spatial: usize, channels: usize, groups: usize, stats: Vec<(f64, f64)> },
    Dropout { a: ValueId, out: ValueId, mask: Vec<f64> },
    L2NormLast { a: ValueId, out: ValueId, rows: usize, cols: usize },
    PitchYawToVec { a: ValueId, out: ValueId, rows: usize },
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub ih: usize,
    pub iw: usize,
    pub ic: usize,
    pub oh: usize,
    pub ow: usize,
    pub oc: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Sigmoid,
    Tanh,
    Relu,
    Selu,
    Sqrt,
    ArccosClamped,
}

pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, ValueId)>,
    by_name: HashMap<String, ValueId>,
    mode: Mode,
    rng: Option<ChaCha8Rng>,
}

impl Tape {
    /// Eval-mode tape: dropout is the identity, no randomness anywhere.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            by_name: HashMap::new(),
            mode: Mode::Eval,
            rng: None,
        }
    }

    /// Train-mode tape with a seeded stream for dropout masks.
    pub fn for_training(seed: u64) -> Self {
        let mut t = Tape::new();
        t.mode = Mode::Train;
        t.rng = Some(ChaCha8Rng::seed_from_u64(seed));
        t
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, needs_grad: bool) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { data, shape, needs_grad });
        self.grads.push(None);
        id
    }

    /// Register a constant input (no gradient tracked).
    pub fn leaf(&mut self, t: &Tensor) -> ValueId {
        self.push(t.data.clone(), t.shape.clone(), false)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<ValueId, StageError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(StageError::Numeric(format!(
                "constant shape {:?} implies {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(self.push(data, shape.to_vec(), false))
    }

    pub fn scalar(&mut self, v: f64) -> ValueId {
        self.push(vec![v], vec![], false)
    }

    /// Register a trainable parameter. Registration is memoized by name, so
    /// every use of the same parameter within one forward pass shares a
    /// single tape node and gradient accumulator.
    pub fn param(&mut self, p: &Parameter) -> ValueId {
        if let Some(&id) = self.by_name.get(&p.name) {
            return id;
        }
        let id = self.push(p.tensor.data.clone(), p.tensor.shape.clone(), true);
        self.params.push((p.name.clone(), id));
        self.by_name.insert(p.name.clone(), id);
        id
    }

    pub fn data(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn to_tensor(&self, id: ValueId) -> Tensor {
        Tensor {
            shape: self.shape(id).to_vec(),
            data: self.data(id).to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── Primitive builders ───────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, StageError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(StageError::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        let id = self.push(out, vec![m, n], needs);
        if needs {
            self.ops.push(Op::Matmul { a, b, out: id, m, k, n });
        }
        Ok(id)
    }

    /// `a` is m×k, `b` is n×k; result is a·bᵀ of shape m×n.
    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, StageError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(StageError::ShapeMismatch { op: "matmul_nt", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        let id = self.push(out, vec![m, n], needs);
        if needs {
            self.ops.push(Op::MatmulNT { a, b, out: id, m, k, n });
        }
        Ok(id)
    }

    /// 2-D convolution on a channels-last map: input [ih, iw, ic],
    /// weight [kh, kw, ic, oc]. Bias is added separately via `add`.
    pub fn conv2d(&mut self, input: ValueId, weight: ValueId, stride: usize, pad: usize) -> Result<ValueId, StageError> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        if si.len() != 3 || sw.len() != 4 || si[2] != sw[2] {
            return Err(StageError::ShapeMismatch { op: "conv2d", lhs: si.to_vec(), rhs: sw.to_vec() });
        }
        let (ih, iw, ic) = (si[0], si[1], si[2]);
        let (kh, kw, oc) = (sw[0], sw[1], sw[3]);
        if ih + 2 * pad < kh || iw + 2 * pad < kw {
            return Err(StageError::ShapeMismatch { op: "conv2d", lhs: si.to_vec(), rhs: sw.to_vec() });
        }
        let oh = (ih + 2 * pad - kh) / stride + 1;
        let ow = (iw + 2 * pad - kw) / stride + 1;
        let dims = ConvDims { ih, iw, ic, oh, ow, oc, kh, kw, stride, pad };
        let mut out = vec![0.0; oh * ow * oc];
        conv2d_forward(self.data(input), self.data(weight), &mut out, &dims);
        let needs = self.needs(input) || self.needs(weight);
        let id = self.push(out, vec![oh, ow, oc], needs);
        if needs {
            self.ops.push(Op::Conv2d { input, weight, out: id, dims });
        }
        Ok(id)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, StageError> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, StageError> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, StageError> {
        self.binary(BinKind::Mul, a, b)
    }

    fn binary(&mut self, kind: BinKind, a: ValueId, b: ValueId) -> Result<ValueId, StageError> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        };
        let out_shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let (da, db) = (self.data(a), self.data(b));
        let data = if self.shape(a) == self.shape(b) {
            // fast path: same shape
            match kind {
                BinKind::Add => da.iter().zip(db).map(|(x, y)| x + y).collect(),
                BinKind::Sub => da.iter().zip(db).map(|(x, y)| x - y).collect(),
                BinKind::Mul => da.iter().zip(db).map(|(x, y)| x * y).collect(),
            }
        } else {
            broadcast_apply(da, self.shape(a), db, self.shape(b), &out_shape, kind)
        };
        let needs = self.needs(a) || self.needs(b);
        let id = self.push(data, out_shape, needs);
        if needs {
            self.ops.push(Op::Binary { kind, a, b, out: id });
        }
        Ok(id)
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> ValueId {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        let id = self.push(data, shape, needs);
        if needs {
            self.ops.push(Op::Scale { a, c, out: id });
        }
        id
    }

    pub fn add_scalar(&mut self, a: ValueId, c: f64) -> ValueId {
        let data: Vec<f64> = self.data(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        let id = self.push(data, shape, needs);
        if needs {
            self.ops.push(Op::AddScalar { a, out: id });
        }
        id
    }

    /// Sum over the given axes; those axes are removed from the shape.
    pub fn sum_axes(&mut self, a: ValueId, axes: &[usize]) -> Result<ValueId, StageError> {
        let shape = self.shape(a).to_vec();
        for &ax in axes {
            if ax >= shape.len() {
                return Err(StageError::ShapeMismatch { op: "sum_over_axes", lhs: shape, rhs: axes.to_vec() });
            }
        }
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        let out_shape: Vec<usize> =
            shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
        let map = reduction_map(&shape, &axes, &out_shape);
        let numel_out: usize = out_shape.iter().product::<usize>().max(1);
        let mut out = vec![0.0; numel_out];
        let data = self.data(a);
        for (i, &v) in data.iter().enumerate() {
            out[map[i]] += v;
        }
        let needs = self.needs(a);
        let id = self.push(out, out_shape, needs);
        if needs {
            self.ops.push(Op::SumAxes { a, out: id, axes });
        }
        Ok(id)
    }

    pub fn sum_all(&mut self, a: ValueId) -> Result<ValueId, StageError> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum_axes(a, &axes)
    }

    pub fn mean_all(&mut self, a: ValueId) -> Result<ValueId, StageError> {
        let n = self.data(a).len().max(1);
        let s = self.sum_all(a)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn concat(&mut self, inputs: &[ValueId], axis: usize) -> Result<ValueId, StageError> {
        if inputs.is_empty() {
            return Err(StageError::Numeric("concat of zero tensors".into()));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(StageError::ShapeMismatch { op: "concat", lhs: first, rhs: vec![axis] });
        }
        let mut axis_total = 0;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(StageError::ShapeMismatch { op: "concat", lhs: first, rhs: s.to_vec() });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for &id in inputs {
            let alen = self.shape(id)[axis];
            let data = self.data(id);
            for o in 0..outer {
                let src = &data[o * alen * inner..(o + 1) * alen * inner];
                let dst_start = (o * axis_total + offset) * inner;
                out[dst_start..dst_start + alen * inner].copy_from_slice(src);
            }
            offset += alen;
        }
        let needs = inputs.iter().any(|&i| self.needs(i));
        let id = self.push(out, out_shape, needs);
        if needs {
            self.ops.push(Op::Concat { inputs: inputs.to_vec(), axis, out: id });
        }
        Ok(id)
    }

    pub fn slice(&mut self, a: ValueId, axis: usize, start: usize, len: usize) -> Result<ValueId, StageError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(StageError::ShapeMismatch { op: "slice", lhs: shape, rhs: vec![axis, start, len] });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let alen = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        let data = self.data(a);
        for o in 0..outer {
            let src_start = (o * alen + start) * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&data[src_start..src_start + len * inner]);
        }
        let needs = self.needs(a);
        let id = self.push(out, out_shape, needs);
        if needs {
            self.ops.push(Op::Slice { a, out: id, axis, start, len });
        }
        Ok(id)
    }

    pub fn reshape(&mut self, a: ValueId, shape: &[usize]) -> Result<ValueId, StageError> {
        let n: usize = shape.iter().product();
        if n != self.data(a).len() {
            return Err(StageError::ShapeMismatch { op: "reshape", lhs: self.shape(a).to_vec(), rhs: shape.to_vec() });
        }
        let data = self.data(a).to_vec();
        let needs = self.needs(a);
        let id = self.push(data, shape.to_vec(), needs);
        if needs {
            self.ops.push(Op::Reshape { a, out: id });
        }
        Ok(id)
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: ValueId) -> ValueId {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn selu(&mut self, a: ValueId) -> ValueId {
        self.unary(UnaryKind::Selu, a)
    }

    pub fn sqrt(&mut self, a: ValueId) -> ValueId {
        self.unary(UnaryKind::Sqrt, a)
    }

    /// arccos of the input clamped to [-1+1e-7, 1-1e-7]; gradient is zero
    /// where the clamp is active.
    pub fn arccos_clamped(&mut self, a: ValueId) -> ValueId {
        self.unary(UnaryKind::ArccosClamped, a)
    }

    fn unary(&mut self, kind: UnaryKind, a: ValueId) -> ValueId {
        let data: Vec<f64> = self.data(a).iter().map(|&x| unary_forward(kind, x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        let id = self.push(data, shape, needs);
        if needs {
            self.ops.push(Op::Unary { kind, a, out: id });
        }
        id
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, a: ValueId) -> Result<ValueId, StageError> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(StageError::ShapeMismatch { op: "softmax_last_axis", lhs: shape, rhs: vec![] });
        }
        let cols = shape[shape.len() - 1];
        let rows = self.data(a).len() / cols.max(1);
        let mut out = vec![0.0; self.data(a).len()];
        let data = self.data(a);
        for r in 0..rows {
            softmax_row(&data[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
        }
        let needs = self.needs(a);
        let id = self.push(out, shape, needs);
        if needs {
            self.ops.push(Op::SoftmaxLast { a, out: id });
        }
        Ok(id)
    }

    /// Row-wise softmax of a square score matrix where row i attends only to
    /// columns j <= i. Masked weights are exactly zero: the computation never
    /// reads entries beyond the prefix, so causality is bit-exact.
    pub fn causal_softmax(&mut self, a: ValueId) -> Result<ValueId, StageError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(StageError::ShapeMismatch { op: "causal_softmax", lhs: shape, rhs: vec![] });
        }
        let s = shape[0];
        let data = self.data(a);
        let mut out = vec![0.0; s * s];
        for i in 0..s {
            softmax_row(&data[i * s..i * s + i + 1], &mut out[i * s..i * s + i + 1]);
        }
        let needs = self.needs(a);
        let id = self.push(out, shape, needs);
        if needs {
            self.ops.push(Op::CausalSoftmax { a, out: id, s });
        }
        Ok(id)
    }

    /// Layer norm over the last axis with per-feature affine (gamma, beta).
    pub fn layer_norm(&mut self, a: ValueId, gamma: ValueId, beta: ValueId) -> Result<ValueId, StageError> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or(StageError::ShapeMismatch {
            op: "layer_norm",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(StageError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let rows = self.data(a).len() / cols;
        let mut out = vec![0.0; rows * cols];
        let mut stats = Vec::with_capacity(rows);
        {
            let data = self.data(a);
            let g = &self.nodes[gamma.0].data;
            let b = &self.nodes[beta.0].data;
            for r in 0..rows {
                let row = &data[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
                let rstd = 1.0 / (var + LN_EPS).sqrt();
                stats.push((mean, rstd));
                for c in 0..cols {
                    out[r * cols + c] = (row[c] - mean) * rstd * g[c] + b[c];
                }
            }
        }
        let needs = self.needs(a) || self.needs(gamma) || self.needs(beta);
        let id = self.push(out, shape, needs);
        if needs {
            self.ops.push(Op::LayerNorm { a, gamma, beta, out: id, rows, cols, stats });
        }
        Ok(id)
    }

    /// Group norm over a channels-last map [.., c]: statistics are shared
    /// across all positions and the channels within each group.
    pub fn group_norm(&mut self, a: ValueId, gamma: ValueId, beta: ValueId, groups: usize) -> Result<ValueId, StageError> {
        let shape = self.shape(a).to_vec();
        let channels = *shape.last().ok_or(StageError::ShapeMismatch {
            op: "group_norm",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        if groups == 0 || channels % groups != 0 {
            return Err(StageError::Config(format!(
                "group_norm: {groups} groups do not divide {channels} channels"
            )));
        }
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(StageError::ShapeMismatch {
                op: "group_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let spatial = self.data(a).len() / channels;
        let cs = channels / groups;
        let group_n = (spatial * cs) as f64;
        let mut stats = Vec::with_capacity(groups);
        let mut out = vec![0.0; self.data(a).len()];
        {
            let data = self.data(a);
            let g = &self.nodes[gamma.0].data;
            let b = &self.nodes[beta.0].data;
            for grp in 0..groups {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for p in 0..spatial {
                    for c in grp * cs..(grp + 1) * cs {
                        let v = data[p * channels + c];
                        sum += v;
                        sq += v * v;
                    }
                }
                let mean = sum / group_n;
                let var = (sq / group_n - mean * mean).max(0.0);
                let rstd = 1.0 / (var + LN_EPS).sqrt();
                stats.push((mean, rstd));
                for p in 0..spatial {
                    for c in grp * cs..(grp + 1) * cs {
                        let i = p * channels + c;
                        out[i] = (data[i] - mean) * rstd * g[c] + b[c];
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(gamma) || self.needs(beta);
        let id = self.push(out, shape, needs);
        if needs {
            self.ops.push(Op::GroupNorm { a, gamma, beta, out: id, spatial, channels, groups, stats });
        }
        Ok(id)
    }

    /// Inverted dropout: identity in eval mode; in train mode keeps each
    /// entry with probability `keep` and scales survivors by 1/keep.
    pub fn dropout(&mut self, a: ValueId, keep: f64) -> Result<ValueId, StageError> {
        if !(0.0 < keep && keep <= 1.0) {
            return Err(StageError::Config(format!("dropout keep probability {keep} outside (0, 1]")));
        }
        if self.mode == Mode::Eval || keep == 1.0 {
            return Ok(a);
        }
        let rng = self.rng.as_mut().expect("train-mode tape always has an rng");
        let mask: Vec<f64> = (0..self.nodes[a.0].data.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data: Vec<f64> = self.nodes[a.0].data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        let id = self.push(data, shape, needs);
        if needs {
            self.ops.push(Op::Dropout { a, out: id, mask });
        }
        Ok(id)
    }

    /// Per-row Euclidean norm over the last axis: [r, c] -> [r].
    pub fn l2_norm_last(&mut self, a: ValueId) -> Result<ValueId, StageError> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or(StageError::ShapeMismatch {
            op: "l2_norm",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        let rows = self.data(a).len() / cols;
        let data = self.data(a);
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            out[r] = data[r * cols..(r + 1) * cols].iter().map(|x| x * x).sum::<f64>().sqrt();
        }
        let out_shape: Vec<usize> = shape[..shape.len() - 1].to_vec();
        let needs = self.needs(a);
        let id = self.push(out, out_shape, needs);
        if needs {
            self.ops.push(Op::L2NormLast { a, out: id, rows, cols });
        }
        Ok(id)
    }

    /// Angles [n, 2] (pitch, yaw) -> unit gaze vectors [n, 3]:
    /// g = (-cos p * sin y, -sin p, -cos p * cos y).
    pub fn pitch_yaw_to_vec(&mut self, a: ValueId) -> Result<ValueId, StageError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || shape[1] != 2 {
            return Err(StageError::ShapeMismatch { op: "pitch_yaw_to_vec", lhs: shape, rhs: vec![0, 2] });
        }
        let rows = shape[0];
        let data = self.data(a);
        let mut out = vec![0.0; rows * 3];
        for r in 0..rows {
            let (p, y) = (data[2 * r], data[2 * r + 1]);
            out[3 * r] = -p.cos() * y.sin();
            out[3 * r + 1] = -p.sin();
            out[3 * r + 2] = -p.cos() * y.cos();
        }
        let needs = self.needs(a);
        let id = self.push(out, vec![rows, 3], needs);
        if needs {
            self.ops.push(Op::PitchYawToVec { a, out: id, rows });
        }
        Ok(id)
    }

    /// x·W + b with `b` broadcast over rows.
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId, StageError> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Fails if the loss is not scalar or
    /// not finite; afterwards every parameter gradient is checked finite.
    pub fn backward(&mut self, loss: ValueId) -> Result<(), StageError> {
        if self.data(loss).len() != 1 {
            return Err(StageError::Numeric(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let lv = self.data(loss)[0];
        if !lv.is_finite() {
            return Err(StageError::Numeric(format!("loss is not finite: {lv}")));
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..self.ops.len()).rev() {
            backward_op(&self.nodes, &mut self.grads, &self.ops[idx]);
        }
        for (name, id) in &self.params {
            if let Some(g) = &self.grads[id.0] {
                if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                    return Err(StageError::Numeric(format!(
                        "non-finite gradient {bad} for parameter {name}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Gradients for every registered parameter, in registration order.
    /// Parameters unreached by the loss get zeros.
    pub fn param_grads(&self) -> Vec<(String, Vec<f64>)> {
        self.params
            .iter()
            .map(|(name, id)| {
                let g = self.grads[id.0]
                    .clone()
                    .unwrap_or_else(|| vec![0.0; self.nodes[id.0].data.len()]);
                (name.clone(), g)
            })
            .collect()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

// ── Forward helpers ──────────────────────────────────────────────────

// Largest f64 strictly below 1.0; sigmoid saturates to the open interval.
const ONE_MINUS_ULP: f64 = 1.0 - f64::EPSILON / 2.0;

fn unary_forward(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Sigmoid => (1.0 / (1.0 + (-x).exp())).clamp(1e-300, ONE_MINUS_ULP),
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Relu => x.max(0.0),
        UnaryKind::Selu => {
            if x > 0.0 {
                SELU_LAMBDA * x
            } else {
                SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
            }
        }
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::ArccosClamped => x.clamp(-1.0 + ARCCOS_EPS, 1.0 - ARCCOS_EPS).acos(),
    }
}

fn unary_grad(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Tanh => 1.0 - y * y,
        UnaryKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::Selu => {
            if x > 0.0 {
                SELU_LAMBDA
            } else {
                SELU_LAMBDA * SELU_ALPHA * x.exp()
            }
        }
        UnaryKind::Sqrt => {
            if y > 1e-300 {
                0.5 / y
            } else {
                0.0
            }
        }
        UnaryKind::ArccosClamped => {
            if x.abs() < 1.0 - ARCCOS_EPS {
                -1.0 / (1.0 - x * x).sqrt()
            } else {
                0.0
            }
        }
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// C += A·B, A m×k, B k×n.
pub(crate) fn matmul_nn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C += A·Bᵀ, A m×k, B n×k.
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// C += Aᵀ·B, A m×k, B m×n, C k×n.
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let arow = &a[p * k..(p + 1) * k];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn conv2d_forward(input: &[f64], weight: &[f64], out: &mut [f64], d: &ConvDims) {
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let obase = (oy * d.ow + ox) * d.oc;
            for ky in 0..d.kh {
                let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                if iy < 0 || iy >= d.ih as isize {
                    continue;
                }
                for kx in 0..d.kw {
                    let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                    if ix < 0 || ix >= d.iw as isize {
                        continue;
                    }
                    let ibase = (iy as usize * d.iw + ix as usize) * d.ic;
                    let wbase = (ky * d.kw + kx) * d.ic * d.oc;
                    for icx in 0..d.ic {
                        let xv = input[ibase + icx];
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &weight[wbase + icx * d.oc..wbase + (icx + 1) * d.oc];
                        let orow = &mut out[obase..obase + d.oc];
                        for (ov, &wv) in orow.iter_mut().zip(wrow) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward(
    input: &[f64],
    weight: &[f64],
    dout: &[f64],
    dinput: Option<&mut Vec<f64>>,
    dweight: Option<&mut Vec<f64>>,
    d: &ConvDims,
) {
    let mut di = dinput;
    let mut dw = dweight;
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let obase = (oy * d.ow + ox) * d.oc;
            let dorow = &dout[obase..obase + d.oc];
            for ky in 0..d.kh {
                let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                if iy < 0 || iy >= d.ih as isize {
                    continue;
                }
                for kx in 0..d.kw {
                    let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                    if ix < 0 || ix >= d.iw as isize {
                        continue;
                    }
                    let ibase = (iy as usize * d.iw + ix as usize) * d.ic;
                    let wbase = (ky * d.kw + kx) * d.ic * d.oc;
                    for icx in 0..d.ic {
                        let wrow = &weight[wbase + icx * d.oc..wbase + (icx + 1) * d.oc];
                        if let Some(di) = di.as_deref_mut() {
                            di[ibase + icx] +=
                                dorow.iter().zip(wrow).map(|(g, w)| g * w).sum::<f64>();
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            let xv = input[ibase + icx];
                            if xv != 0.0 {
                                let dwrow = &mut dw[wbase + icx * d.oc..wbase + (icx + 1) * d.oc];
                                for (dwv, &g) in dwrow.iter_mut().zip(dorow) {
                                    *dwv += xv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// ── Broadcasting ─────────────────────────────────────────────────────

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, StageError> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(StageError::ShapeMismatch {
                op: match op {
                    "add" => "add",
                    "sub" => "sub",
                    _ => "mul",
                },
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Row-major strides padded to ndim, with 0 where the dim broadcasts.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let ndim = out_shape.len();
    let offset = ndim - shape.len();
    let mut strides = vec![0usize; ndim];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn broadcast_apply(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    kind: BinKind,
) -> Vec<f64> {
    let numel: usize = out_shape.iter().product();
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let ndim = out_shape.len();
    let mut idx = vec![0usize; ndim];
    let mut ia = 0usize;
    let mut ib = 0usize;
    let mut out = Vec::with_capacity(numel);
    for _ in 0..numel {
        let v = match kind {
            BinKind::Add => a[ia] + b[ib],
            BinKind::Sub => a[ia] - b[ib],
            BinKind::Mul => a[ia] * b[ib],
        };
        out.push(v);
        // odometer increment
        for d in (0..ndim).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Accumulate dout (out_shape) into dst (dst_shape), summing broadcast dims.
/// `extra` optionally multiplies each contribution (for Mul gradients).
fn broadcast_accumulate(
    dst: &mut [f64],
    dst_shape: &[usize],
    dout: &[f64],
    out_shape: &[usize],
    extra: Option<(&[f64], &[usize])>,
) {
    let numel: usize = out_shape.iter().product();
    let sd = broadcast_strides(dst_shape, out_shape);
    let se = extra.map(|(_, sh)| broadcast_strides(sh, out_shape));
    let ndim = out_shape.len();
    let mut idx = vec![0usize; ndim];
    let mut id = 0usize;
    let mut ie = 0usize;
    for item in dout.iter().take(numel) {
        let mut v = *item;
        if let Some((e, _)) = extra {
            v *= e[ie];
        }
        dst[id] += v;
        for d in (0..ndim).rev() {
            idx[d] += 1;
            id += sd[d];
            if let Some(se) = &se {
                ie += se[d];
            }
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            id -= sd[d] * out_shape[d];
            if let Some(se) = &se {
                ie -= se[d] * out_shape[d];
            }
        }
    }
}

/// For each input flat index, the output flat index after removing `axes`.
fn reduction_map(shape: &[usize], axes: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let numel: usize = shape.iter().product();
    let mut out_strides = vec![0usize; shape.len()];
    {
        let mut acc = 1usize;
        let mut oi = out_shape.len();
        for d in (0..shape.len()).rev() {
            if axes.contains(&d) {
                out_strides[d] = 0;
            } else {
                oi -= 1;
                out_strides[d] = acc;
                acc *= out_shape[oi];
            }
        }
    }
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    let mut cur = 0usize;
    for _ in 0..numel {
        map.push(cur);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            cur += out_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
            cur -= out_strides[d] * shape[d];
        }
    }
    map
}

// ── Backward dispatch ────────────────────────────────────────────────

fn take_dout(grads: &mut [Option<Vec<f64>>], out: ValueId) -> Option<Vec<f64>> {
    grads[out.0].clone()
}

fn ensure(grads: &mut [Option<Vec<f64>>], id: ValueId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn backward_op(nodes: &[Node], grads: &mut [Option<Vec<f64>>], op: &Op) {
    match op {
        Op::Matmul { a, b, out, m, k, n } => {
            let Some(dout) = take_dout(grads, *out) else { return };
            if nodes[a.0].needs_grad {
                let bv = &nodes[b.0].data;
                let da = ensure(grads, *a, *m * *k);
                matmul_nt_acc(&dout, bv, da, *m, *n, *k);
            }
            if nodes[b.0].needs_grad {
                let av = &nodes[a.0].data;
                let db = ensure(grads, *b, *k * *n);
                matmul_tn_acc(av, &dout, db, *m, *k, *n);
            }
        }
        Op::MatmulNT { a, b, out, m, k, n } => {
            let Some(dout) = take_dout(grads, *out) else { return };
            if nodes[a.0].needs_grad {
                let bv = &nodes[b.0].data;
                let da = ensure(grads, *a, *m * *k);
                matmul_nn_acc(&dout, bv, da, *m, *n, *k);
            }
            if nodes[b.0].needs_grad {
                let av = &nodes[a.0].data;
                let db = ensure(grads, *b, *n * *k);
                matmul_tn_acc(&dout, av, db, *m, *n, *k);
            }
        }
        Op::Conv2d { input, weight, out, dims } => {
            let Some(dout) = take_dout(grads, *out) else { return };
            let need_i = nodes[input.0].needs_grad;
            let need_w = nodes[weight.0].needs_grad;
            let mut di = if need_i { Some(vec![0.0; nodes[input.0].data.len()]) } else { None };
            let mut dw = if need_w { Some(vec![0.0; nodes[weight.0].data.len()]) } else { None };
            conv2d_backward(
                &nodes[input.0].data,
                &nodes[weight.0].data,
                &dout,
                di.as_mut(),
                dw.as_mut(),
                dims,
            );
            if let Some(di) = di {
                let g = ensure(grads, *input, di.len());
                g.iter_mut().zip(&di).for_each(|(a, b)| *a += b);
            }
            if let Some(dw) = dw {
                let g = ensure(grads, *weight, dw.len());
                g.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
            }
        }
        Op::Binary { kind, a, b, out } => {
            let Some(dout) = take_dout(grads, *out) else { return };
            let out_shape = nodes[out.0].shape.clone();
            let same = nodes[a.0].shape == nodes[b.0].shape;
            if nodes[a.0].needs_grad {
                match kind {
                    BinKind::Add | BinKind::Sub => {
                        if same {
                            let da = ensure(grads, *a, nodes[a.0].data.len());
                            da.iter_mut().zip(&dout).for_each(|(g, d)| *g += d);
                        } else {
                            let shape = nodes[a.0].shape.clone();
                            let da = ensure(grads, *a, nodes[a.0].data.len());
                            broadcast_accumulate(da, &shape, &dout, &out_shape, None);
                        }
                    }
                    BinKind::Mul => {
                        if same {
                            let bv = &nodes[b.0].data;
                            let da = ensure(grads, *a, nodes[a.0].data.len());
                            da.iter_mut().zip(dout.iter().zip(bv)).for_each(|(g, (d, x))| *g += d * x);
                        } else {
                            let shape = nodes[a.0].shape.clone();
                            let bshape = nodes[b.0].shape.clone();
                            let bdata = nodes[b.0].data.clone();
                            let da = ensure(grads, *a, nodes[a.0].data.len());
                            broadcast_accumulate(da, &shape, &dout, &out_shape, Some((&bdata, &bshape)));
                        }
                    }
                }
            }
            if nodes[b.0].needs_grad {
                match kind {
                    BinKind::Add | BinKind::Sub => {
                        let sign = if *kind == BinKind::Sub { -1.0 } else { 1.0 };
                        if same {
                            let db = ensure(grads, *b, nodes[b.0].data.len());
                            db.iter_mut().zip(&dout).for_each(|(g, d)| *g += sign * d);
                        } else {
                            let signed: Vec<f64> = dout.iter().map(|d| sign * d).collect();
                            let shape = nodes[b.0].shape.clone();
                            let db = ensure(grads, *b, nodes[b.0].data.len());
                            broadcast_accumulate(db, &shape, &signed, &out_shape, None);
                        }
                    }
                    BinKind::Mul => {
                        if same {
                            let av = &nodes[a.0].data;
                            let db = ensure(grads, *b, nodes[b.0].data.len());
                            db.iter_mut().zip(dout.iter().zip(av)).for_each(|(g, (d, x))| *g += d * x);
                        } else {
                            let shape = nodes[b.0].shape.clone();
                            let ashape = nodes[a.0].shape.clone();
                            let adata = nodes[a.0].data.clone();
                            let db = ensure(grads, *b, nodes[b.0].data.len());
                            broadcast_accumulate(db, &shape, &dout, &out_shape, Some((&adata, &ashape)));
                        }
                    }
                }
            }
        }
        Op::Scale { a, c, out } => {
            let Some(dout) = take_dout(grads, *out) else { return };
            let da = ensure(grads, *a, nodes[a.0].data.len());
            da.iter_mut().zip(&dout).for_each(|(g, d)| *g += c * d);
        }
        Op::AddScalar { a, out } => {
            let Some(dout) = take_dout(grads, *out) else { return };
            let da = ensure(grads, *a, nodes[a.0].data.len());
            da.iter_mut().zip(&dout).for_each(|(g, d)| *g += d);
        }
        Op::SumAxes { a, out, axes } => {
            let Some(dout) = take_dout(grads, *out) else { return };
            let shape = nodes[a.0].shape.clone();
            let out_shape = nodes[out.0].shape.clone();
            let map = reduction_map(&shape, axes, &out_shape);
            let da = ensure(grads, *a, nodes[a.0].data.len());
            for (i, &m) in map.iter().enumerate() {
                da[i] += dout[m];
            }
        }
        Op::Concat { inputs, axis, out } => {
            let Some(dout) = take_dout(grads, *out) else { return };
            let out_shape = nodes[out.0].shape.clone();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let total = out_shape[*axis];
            let mut offset = 0;
            for &inp in inputs {
                let alen = nodes[inp.0].shape[*axis];
                if nodes[inp.0].needs_grad {
                    let dst = ensure(grads, inp, nodes[inp.0].data.len());
                    for o in 0..outer {
                        let src_start = (o * total + offset) * inner;
                        let dst_start = o * alen * inner;
                        for i in 0..alen * inner {
                            dst[dst_start + i] += dout[src_start + i];
                        }
                    }
                }
                offset += alen;
            }
        }
        Op::Slice { a, out, axis, start, len } => {
            let Some(dout) = take_dout(grads, *out) else { return };
            let shape = nodes[a.0].shape.clone();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let alen = shape[*axis];
            let da = ensure(grads, *a, nodes[a.0].data.len());
            for o in 0..outer {
                let dst_start = (o * alen + start) * inner;
                let src_start = o * len * inner;
                for i in 0..len * inner {
                    da[dst_start + i] += dout[src_start + i];
                }
            }
        }
        Op::Reshape { a, out } => {
            let Some(dout) = take_dout(grads, *out) else { return };
            let da = ensure(grads, *a, nodes[a.0].data.len());
            da.iter_mut().zip(&dout).for_each(|(g, d)| *g += d);
        }
        Op::Unary { kind, a, out } => {
            let Some(dout) = take_dout(grads, *out) else { return };
            let xv = nodes[a.0].data.clone();
            let yv = nodes[out.0].data.clone();
            let da = ensure(grads, *a, nodes[a.0].data.len());
            for i in 0..da.len() {
                da[i] += dout[i] * unary_grad(*kind, xv[i], yv[i]);
            }
        }
        Op::SoftmaxLast { a, out } => {
            let Some(dout) = take_dout(grads, *out) else { return };
            let y = nodes[out.0].data.clone();
            let cols = *nodes[out.0].shape.last().unwrap();
            let rows = y.len() / cols;
            let da = ensure(grads, *a, nodes[a.0].data.len());
            for r in 0..rows {
                let yr = &y[r * cols..(r + 1) * cols];
                let dr = &dout[r * cols..(r + 1) * cols];
                let dot: f64 = yr.iter().zip(dr).map(|(x, y)| x * y).sum();
                for c in 0..cols {
                    da[r * cols + c] += yr[c] * (dr[c] - dot);
                }
            }
        }
        Op::CausalSoftmax { a, out, s } => {
            let Some(dout) = take_dout(grads, *out) else { return };
            let y = nodes[out.0].data.clone();
            let da = ensure(grads, *a, nodes[a.0].data.len());
            for i in 0..*s {
                let yr = &y[i * s..i * s + i + 1];
                let dr = &dout[i * s..i * s + i + 1];
                let dot: f64 = yr.iter().zip(dr).map(|(x, y)| x * y).sum();
                for j in 0..=i {
                    da[i * s + j] += yr[j] * (dr[j] - dot);
                }
            }
        }
        Op::LayerNorm { a, gamma, beta, out, rows, cols, stats } => {
            let Some(dout) = take_dout(grads, *out) else { return };
            let x = nodes[a.0].data.clone();
            let g = nodes[gamma.0].data.clone();
            let cols = *cols;
            if nodes[gamma.0].needs_grad {
                let dg = ensure(grads, *gamma, cols);
                for r in 0..*rows {
                    let (mean, rstd) = stats[r];
                    for c in 0..cols {
                        dg[c] += dout[r * cols + c] * (x[r * cols + c] - mean) * rstd;
                    }
                }
            }
            if nodes[beta.0].needs_grad {
                let db = ensure(grads, *beta, cols);
                for r in 0..*rows {
                    for c in 0..cols {
                        db[c] += dout[r * cols + c];
                    }
                }
            }
            if nodes[a.0].needs_grad {
                let da = ensure(grads, *a, x.len());
                for r in 0..*rows {
                    let (mean, rstd) = stats[r];
                    let mut t1 = 0.0;
                    let mut t2 = 0.0;
                    for c in 0..cols {
                        let dyg = dout[r * cols + c] * g[c];
                        let xh = (x[r * cols + c] - mean) * rstd;
                        t1 += dyg;
                        t2 += dyg * xh;
                    }
                    let ncols = cols as f64;
                    for c in 0..cols {
                        let dyg = dout[r * cols + c] * g[c];
                        let xh = (x[r * cols + c] - mean) * rstd;
                        da[r * cols + c] += rstd * (dyg - t1 / ncols - xh * t2 / ncols);
                    }
                }
            }
        }
        Op::GroupNorm { a, gamma, beta, out, spatial, channels, groups, stats } => {
            let Some(dout) = take_dout(grads, *out) else { return };
            let x = nodes[a.0].data.clone();
            let g = nodes[gamma.0].data.clone();
            let (spatial, channels, groups) = (*spatial, *channels, *groups);
            let cs = channels / groups;
            if nodes[gamma.0].needs_grad {
                let dg = ensure(grads, *gamma, channels);
                for p in 0..spatial {
                    for c in 0..channels {
                        let (mean, rstd) = stats[c / cs];
                        let i = p * channels + c;
                        dg[c] += dout[i] * (x[i] - mean) * rstd;
                    }
                }
            }
            if nodes[beta.0].needs_grad {
                let db = ensure(grads, *beta, channels);
                for p in 0..spatial {
                    for c in 0..channels {
                        db[c] += dout[p * channels + c];
                    }
                }
            }
            if nodes[a.0].needs_grad {
                let da = ensure(grads, *a, x.len());
                let group_n = (spatial * cs) as f64;
                for grp in 0..groups {
                    let (mean, rstd) = stats[grp];
                    let mut t1 = 0.0;
                    let mut t2 = 0.0;
                    for p in 0..spatial {
                        for c in grp * cs..(grp + 1) * cs {
                            let i = p * channels + c;
                            let dyg = dout[i] * g[c];
                            t1 += dyg;
                            t2 += dyg * (x[i] - mean) * rstd;
                        }
                    }
                    for p in 0..spatial {
                        for c in grp * cs..(grp + 1) * cs {
                            let i = p * channels + c;
                            let dyg = dout[i] * g[c];
                            let xh = (x[i] - mean) * rstd;
                            da[i] += rstd * (dyg - t1 / group_n - xh * t2 / group_n);
                        }
                    }
                }
            }
        }
        Op::Dropout { a, out: _, mask } => {
            let out = match op {
                Op::Dropout { out, .. } => *out,
                _ => unreachable!(),
            };
            let Some(dout) = take_dout(grads, out) else { return };
            let da = ensure(grads, *a, nodes[a.0].data.len());
            for i in 0..da.len() {
                da[i] += dout[i] * mask[i];
            }
        }
        Op::L2NormLast { a, out, rows, cols } => {
            let Some(dout) = take_dout(grads, *out) else { return };
            let x = nodes[a.0].data.clone();
            let norms = nodes[out.0].data.clone();
            let da = ensure(grads, *a, x.len());
            for r in 0..*rows {
                if norms[r] < 1e-12 {
                    continue;
                }
                let inv = dout[r] / norms[r];
                for c in 0..*cols {
                    da[r * cols + c] += inv * x[r * cols + c];
                }
            }
        }
        Op::PitchYawToVec { a, out, rows } => {
            let Some(dout) = take_dout(grads, *out) else { return };
            let x = nodes[a.0].data.clone();
            let da = ensure(grads, *a, x.len());
            for r in 0..*rows {
                let (p, y) = (x[2 * r], x[2 * r + 1]);
                let (sp, cp, sy, cy) = (p.sin(), p.cos(), y.sin(), y.cos());
                let (d0, d1, d2) = (dout[3 * r], dout[3 * r + 1], dout[3 * r + 2]);
                da[2 * r] += d0 * (sp * sy) + d1 * (-cp) + d2 * (sp * cy);
                da[2 * r + 1] += d0 * (-cp * cy) + d2 * (cp * sy);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[0.0, 0.0]));
        let y = tape.softmax_last(x).unwrap();
        assert_eq!(tape.data(y), &[0.5, 0.5]);
    }

    #[test]
    fn sigmoid_and_selu_at_origin() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[0.0]));
        let s = tape.sigmoid(x);
        let e = tape.selu(x);
        assert_eq!(tape.data(s), &[0.5]);
        assert_eq!(tape.data(e), &[0.0]);
    }

    #[test]
    fn matmul_shape_and_grad_of_sum() {
        let mut tape = Tape::new();
        let a = Parameter::new("a", t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b_data = [0.5, -1.0, 2.0, 0.0, 1.5, 1.0, -0.5, 3.0, 2.5, -2.0, 0.5, 1.0];
        let b = tape.leaf(&t(&[3, 4], &b_data));
        let aid = tape.param(&a);
        let c = tape.matmul(aid, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 4]);
        let loss = tape.sum_all(c).unwrap();
        tape.backward(loss).unwrap();
        // d sum(AB) / dA = ones(2x4) · Bᵀ: each row is the row-sums of B.
        let row_sums: Vec<f64> = (0..3).map(|r| b_data[r * 4..(r + 1) * 4].iter().sum()).collect();
        let got = tape.grad(aid).unwrap();
        for r in 0..2 {
            for k in 0..3 {
                assert_relative_eq!(got[r * 3 + k], row_sums[k], max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn matmul_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 2]"));
    }

    #[test]
    fn causal_softmax_rows_sum_to_one_and_mask_is_exact_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3, 3], &[0.3, 9.0, -2.0, 0.1, 0.7, 5.0, -1.0, 0.2, 0.4]));
        let y = tape.causal_softmax(x).unwrap();
        let d = tape.data(y);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 0.0);
        assert_eq!(d[5], 0.0);
        for i in 0..3 {
            let s: f64 = d[i * 3..(i + 1) * 3].iter().sum();
            assert_relative_eq!(s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn layer_norm_centers_and_scales_before_affine() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, 10.0]));
        let g = tape.leaf(&Tensor::ones(&[4]));
        let b = tape.leaf(&Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b).unwrap();
        let d = tape.data(y);
        for r in 0..2 {
            let row = &d[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn dropout_eval_is_identity_train_scales() {
        let mut eval = Tape::new();
        let x = eval.leaf(&t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let y = eval.dropout(x, 0.5).unwrap();
        assert_eq!(x, y);

        let mut train = Tape::for_training(3);
        let x = train.leaf(&t(&[1000], &vec![1.0; 1000]));
        let y = train.dropout(x, 0.25).unwrap();
        let d = train.data(y);
        assert!(d.iter().all(|&v| v == 0.0 || v == 4.0));
        let kept = d.iter().filter(|&&v| v != 0.0).count();
        assert!(kept > 180 && kept < 320, "kept {kept} of 1000 at keep=0.25");
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&t(&[2, 3], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 5]);
        assert_eq!(tape.data(c), &[1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]);
        let back = tape.slice(c, 1, 2, 3).unwrap();
        assert_eq!(tape.data(back), tape.data(b));
    }

    #[test]
    fn arccos_clamps_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[2.0, -2.0, 0.0]));
        let y = tape.arccos_clamped(x);
        let d = tape.data(y);
        assert!(d[0] > 0.0 && d[0] < 1e-3);
        assert!((d[1] - std::f64::consts::PI).abs() < 1e-3);
        assert_relative_eq!(d[2], std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn pitch_yaw_convention_anchors() {
        use std::f64::consts::FRAC_PI_2;
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3, 2], &[0.0, 0.0, FRAC_PI_2, 0.0, 0.0, FRAC_PI_2]));
        let v = tape.pitch_yaw_to_vec(x).unwrap();
        let d = tape.data(v);
        assert_relative_eq!(d[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(d[2], -1.0, epsilon = 1e-12);
        assert_relative_eq!(d[4], -1.0, epsilon = 1e-12);
        assert_relative_eq!(d[6], -1.0, epsilon = 1e-12);
        for r in 0..3 {
            let n: f64 = d[3 * r..3 * r + 3].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert_relative_eq!(n, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn shared_parameter_registration_is_memoized() {
        let mut tape = Tape::new();
        let p = Parameter::new("shared.w", t(&[2], &[1.0, 2.0]));
        let id1 = tape.param(&p);
        let id2 = tape.param(&p);
        assert_eq!(id1, id2);
    }

    #[test]
    fn broadcast_add_bias_accumulates_rowwise() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = Parameter::new("b", t(&[3], &[10.0, 20.0, 30.0]));
        let bid = tape.param(&b);
        let y = tape.add(x, bid).unwrap();
        assert_eq!(tape.data(y), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(bid).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_nonscalar_and_nonfinite() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[f64::NAN]));
        let s = tape.sum_all(x).unwrap();
        assert!(tape.backward(s).is_err());
    }
}
