use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Node handle inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<F: Scalar>(self, x: F) -> F {
        match self {
            Activation::Relu => x.max(F::zero()),
            Activation::Tanh => Scalar::tanh(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceKind {
    Max,
    Mean,
}

/// Primitive kinds, used for fault injection and graph inspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Leaf,
    #[serde(rename = "matmul")]
    MatMul,
    #[serde(rename = "matmul_nt")]
    MatMulNt,
    Add,
    Sub,
    Mul,
    AddRowBias,
    Relu,
    Tanh,
    Sigmoid,
    SoftmaxMasked,
    Concat,
    Slice,
    Transpose,
    Reshape,
    ReduceMax,
    ReduceMean,
    Scale,
    MaskMul,
    Sum,
    SumSquares,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::MatMulNt,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddRowBias,
        OpKind::Relu,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::SoftmaxMasked,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::ReduceMax,
        OpKind::ReduceMean,
        OpKind::Scale,
        OpKind::MaskMul,
        OpKind::Sum,
        OpKind::SumSquares,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        kind_name(self)
    }
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| kind_name(*k) == s)
            .ok_or_else(|| Error::Config(format!("unknown op kind `{s}`")))
    }
}

/// Test fixture: scales the input gradients produced by one primitive's
/// backward rule, so gradient checking has a known-bad case to reject.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackwardFault {
    pub op: OpKind,
    pub scale: f64,
}

impl BackwardFault {
    pub fn new(op: OpKind) -> Self {
        BackwardFault { op, scale: 1.1 }
    }
}

enum Op<F> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Activation(Var, Activation),
    SoftmaxMasked(Var),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Reduce {
        input: Var,
        kind: ReduceKind,
        mask: Vec<bool>,
        // for max: winning row per column
        argmax: Vec<usize>,
    },
    Scale(Var, F),
    MaskMul(Var, Vec<F>),
    Sum(Var),
    SumSquares(Var),
    CrossEntropy(Var, usize),
}

impl<F> Op<F> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input | Op::Param(_) => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNt(..) => OpKind::MatMulNt,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::Activation(_, Activation::Relu) => OpKind::Relu,
            Op::Activation(_, Activation::Tanh) => OpKind::Tanh,
            Op::Activation(_, Activation::Sigmoid) => OpKind::Sigmoid,
            Op::SoftmaxMasked(..) => OpKind::SoftmaxMasked,
            Op::Concat(..) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Reduce {
                kind: ReduceKind::Max, ..
            } => OpKind::ReduceMax,
            Op::Reduce {
                kind: ReduceKind::Mean, ..
            } => OpKind::ReduceMean,
            Op::Scale(..) => OpKind::Scale,
            Op::MaskMul(..) => OpKind::MaskMul,
            Op::Sum(..) => OpKind::Sum,
            Op::SumSquares(..) => OpKind::SumSquares,
            Op::CrossEntropy(..) => OpKind::CrossEntropy,
        }
    }
}

enum Value<F> {
    Owned(Vec<F>),
    Param(ParamId),
}

struct Node<F> {
    op: Op<F>,
    shape: Vec<usize>,
    value: Value<F>,
    requires_grad: bool,
}

/// Execution record for one forward pass.
///
/// Nodes are appended in execution order, so every node's inputs precede it.
/// Parameter leaves read straight from the borrowed [`ParamStore`].
pub struct Graph<'p, F: Scalar> {
    nodes: Vec<Node<F>>,
    params: Option<&'p ParamStore<F>>,
    param_vars: HashMap<ParamId, Var>,
    fault: Option<BackwardFault>,
}

impl<F: Scalar> Default for Graph<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: None,
            param_vars: HashMap::new(),
            fault: None,
        }
    }

    pub fn with_params(params: &'p ParamStore<F>) -> Self {
        Graph {
            params: Some(params),
            ..Self::new()
        }
    }

    pub fn inject_fault(&mut self, fault: BackwardFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters read by this graph, one entry per leaf.
    pub fn param_leaves(&self) -> Vec<ParamId> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Param(id) => Some(id),
                _ => None,
            })
            .collect()
    }

    pub fn op_kinds(&self) -> Vec<OpKind> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    pub fn value(&self, v: Var) -> &[F] {
        match &self.nodes[v.0].value {
            Value::Owned(data) => data,
            Value::Param(id) => self.params.expect("param leaf without store").get(*id).data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        Tensor::from_vec(self.value(v).to_vec(), self.shape(v)).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<F>, shape: Vec<usize>, value: Vec<F>) -> Result<Var> {
        let kind = op.kind();
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: kind_name(kind) });
        }
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            shape,
            value: Value::Owned(value),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op<F>) -> Vec<Var> {
        match op {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowBias(a, b) => vec![*a, *b],
            Op::Concat(parts, _) => parts.clone(),
            Op::Activation(a, _)
            | Op::SoftmaxMasked(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Scale(a, _)
            | Op::MaskMul(a, _)
            | Op::Sum(a)
            | Op::SumSquares(a)
            | Op::CrossEntropy(a, _) => vec![*a],
            Op::Slice { input, .. } | Op::Reduce { input, .. } => vec![*input],
        }
    }

    // ---- leaves ----

    /// Records an input tensor. With `requires_grad` its gradient is kept by
    /// [`Graph::backward`].
    pub fn input(&mut self, tensor: Tensor<F>, requires_grad: bool) -> Var {
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node {
            op: Op::Input,
            shape,
            value: Value::Owned(tensor.into_data()),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<F>) -> Var {
        self.input(tensor, false)
    }

    /// Leaf reading a parameter from the attached store. Repeated calls return
    /// the same node, so gradients from every use land in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("graph has no parameter store attached");
        let t = store.get(id);
        self.nodes.push(Node {
            op: Op::Param(id),
            shape: t.shape().to_vec(),
            value: Value::Param(id),
            requires_grad: t.requires_grad(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    // ---- primitives ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_nn(self.value(a), self.value(b), m, k, n);
        self.push(Op::MatMul(a, b), vec![m, n], out)
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`. Linear layers store weights as
    /// `[out×in]` and feed row-major inputs through this.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul_nt", self.shape(a))?;
        let (n, k2) = dims2("matmul_nt", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let out = matmul_nt(self.value(a), self.value(b), m, k, n);
        self.push(Op::MatMulNt(a, b), vec![m, n], out)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Vec<F> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), self.shape(a).to_vec(), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), self.shape(a).to_vec(), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), self.shape(a).to_vec(), out)
    }

    /// Adds bias `b: [n]` to every row of `x: [m×n]` (or to `x: [n]`).
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        let n = *xs.last().expect("nonempty shape");
        if xs.len() > 2 || bs.len() != 1 || bs[0] != n {
            return Err(Error::shape("add_row_bias", xs, bs));
        }
        let bias = self.value(b);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % n])
            .collect();
        self.push(Op::AddRowBias(x, b), xs.to_vec(), out)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| kind.apply(v)).collect();
        self.push(Op::Activation(x, kind), self.shape(x).to_vec(), out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Softmax along the last axis. Positions with `mask[j] == false` get
    /// exactly zero probability; each row must keep at least one position.
    pub fn softmax_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("nonempty shape");
        if shape.len() > 2 || mask.len() != n {
            return Err(Error::shape("softmax_masked", &shape, &[mask.len()]));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Degenerate {
                op: "softmax_masked",
                reason: "every position is masked".into(),
            });
        }
        let mut out = vec![F::zero(); self.value(x).len()];
        for (row_in, row_out) in self.value(x).chunks(n).zip(out.chunks_mut(n)) {
            softmax_row(row_in, mask, row_out);
        }
        let op = Op::SoftmaxMasked(x);
        let v = self.push(op, shape, out)?;
        Ok(v)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| Error::Contract("concat needs at least one part".into()))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            let agree =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agree {
                return Err(Error::shape("concat", &first, s));
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let mut out = Vec::with_capacity(outer * axis_total * first[axis + 1..].iter().product::<usize>());
        for o in 0..outer {
            for &p in parts {
                let chunk = self.value(p).len() / outer;
                out.extend_from_slice(&self.value(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = axis_total;
        self.push(Op::Concat(parts.to_vec(), axis), shape, out)
    }

    /// Extracts `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, len]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let src = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(
            Op::Slice {
                input: x,
                axis,
                start,
                len,
            },
            out_shape,
            out,
        )
    }

    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        self.slice(x, 0, r, 1)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2("transpose", self.shape(x))?;
        let src = self.value(x);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Op::Transpose(x), vec![n, m], out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        self.push(Op::Reshape(x), shape.to_vec(), out)
    }

    /// Reduces the rows of `x: [n×h]` whose mask entry is true, giving `[h]`.
    /// Max routes its gradient to the first row attaining the maximum.
    pub fn reduce_masked(&mut self, x: Var, mask: &[bool], kind: ReduceKind) -> Result<Var> {
        let (n, h) = dims2("reduce", self.shape(x))?;
        if mask.len() != n {
            return Err(Error::shape("reduce", self.shape(x), &[mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Degenerate {
                op: "reduce",
                reason: "every row is masked".into(),
            });
        }
        let src = self.value(x);
        let mut out = vec![F::zero(); h];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Mean => {
                for (r, row) in src.chunks(h).enumerate() {
                    if mask[r] {
                        out.iter_mut().zip(row).for_each(|(o, &v)| *o = *o + v);
                    }
                }
                let c = F::of(count as f64);
                out.iter_mut().for_each(|o| *o = Scalar::div(*o, c));
            }
            ReduceKind::Max => {
                argmax = vec![usize::MAX; h];
                for (r, row) in src.chunks(h).enumerate() {
                    if !mask[r] {
                        continue;
                    }
                    for j in 0..h {
                        if argmax[j] == usize::MAX || row[j] > out[j] {
                            out[j] = row[j];
                            argmax[j] = r;
                        }
                    }
                }
            }
        }
        self.push(
            Op::Reduce {
                input: x,
                kind,
                mask: mask.to_vec(),
                argmax,
            },
            vec![h],
            out,
        )
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        self.push(Op::Scale(x, c), self.shape(x).to_vec(), out)
    }

    /// Multiplies by a constant elementwise factor (dropout masks, row zeroing).
    pub fn mask_mul(&mut self, x: Var, factors: Vec<F>) -> Result<Var> {
        if factors.len() != self.value(x).len() {
            return Err(Error::shape("mask_mul", self.shape(x), &[factors.len()]));
        }
        let out = self.zip_factors(x, &factors);
        self.push(Op::MaskMul(x, factors), self.shape(x).to_vec(), out)
    }

    fn zip_factors(&self, x: Var, factors: &[F]) -> Vec<F> {
        self.value(x).iter().zip(factors).map(|(&v, &f)| v * f).collect()
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().fold(F::zero(), |acc, &v| acc + v);
        self.push(Op::Sum(x), vec![1], vec![s])
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().fold(F::zero(), |acc, &v| acc + v * v);
        self.push(Op::SumSquares(x), vec![1], vec![s])
    }

    /// `−log softmax(logits)[target]` as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.value(logits);
        if target >= z.len() {
            return Err(Error::Label(format!("gold label {target} outside {} classes", z.len())));
        }
        let loss = log_sum_exp(z) - z[target];
        self.push(Op::CrossEntropy(logits, target), vec![1], vec![loss])
    }

    // ---- backward ----

    /// Reverse pass from a scalar node. Every node is visited once, in
    /// reverse execution order; gradients from multiple uses accumulate.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.nodes[loss.0].shape.iter().product::<usize>() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        let mut params = Vec::new();
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut contribs = match &node.op {
                Op::Input => {
                    grads[i] = Some(gout);
                    continue;
                }
                Op::Param(id) => {
                    params.push((*id, gout));
                    continue;
                }
                op => self.backward_rule(i, op, &gout),
            };
            if let Some(fault) = self.fault {
                if fault.op == node.op.kind() {
                    let s = F::of(fault.scale);
                    for (_, g) in contribs.iter_mut() {
                        g.iter_mut().for_each(|v| *v = *v * s);
                    }
                }
            }
            for (v, g) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { inputs: grads, params })
    }

    fn backward_rule(&self, out_idx: usize, op: &Op<F>, gout: &[F]) -> Vec<(Var, Vec<F>)> {
        let y = match &self.nodes[out_idx].value {
            Value::Owned(v) => v.as_slice(),
            Value::Param(_) => unreachable!("param nodes are leaves"),
        };
        match op {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                // dA = dY·Bᵀ, dB = Aᵀ·dY
                let da = matmul_nt(gout, self.value(*b), m, n, k);
                let db = matmul_tn(self.value(*a), gout, m, k, n);
                vec![(*a, da), (*b, db)]
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                // Y = A·Bᵀ: dA = dY·B, dB = dYᵀ·A
                let da = matmul_nn(gout, self.value(*b), m, n, k);
                let db = matmul_tn(gout, self.value(*a), m, n, k);
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, gout.to_vec()), (*b, gout.to_vec())],
            Op::Sub(a, b) => vec![(*a, gout.to_vec()), (*b, gout.iter().map(|&g| -g).collect())],
            Op::Mul(a, b) => {
                let da = gout.iter().zip(self.value(*b)).map(|(&g, &v)| g * v).collect();
                let db = gout.iter().zip(self.value(*a)).map(|(&g, &v)| g * v).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::AddRowBias(x, b) => {
                let n = self.shape(*b)[0];
                let mut db = vec![F::zero(); n];
                for (i, &g) in gout.iter().enumerate() {
                    db[i % n] = db[i % n] + g;
                }
                vec![(*x, gout.to_vec()), (*b, db)]
            }
            Op::Activation(x, kind) => {
                let dx = match kind {
                    Activation::Relu => gout
                        .iter()
                        .zip(self.value(*x))
                        .map(|(&g, &v)| if v > F::zero() { g } else { F::zero() })
                        .collect(),
                    Activation::Tanh => gout.iter().zip(y).map(|(&g, &t)| g * (F::one() - t * t)).collect(),
                    Activation::Sigmoid => gout.iter().zip(y).map(|(&g, &s)| g * s * (F::one() - s)).collect(),
                };
                vec![(*x, dx)]
            }
            Op::SoftmaxMasked(x) => {
                let n = *self.shape(*x).last().expect("nonempty");
                let mut dx = vec![F::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(gout.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot = yr.iter().zip(gr).fold(F::zero(), |acc, (&a, &b)| acc + a * b);
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::Concat(parts, axis) => {
                let outer: usize = self.nodes[out_idx].shape[..*axis].iter().product();
                let out_chunk = gout.len() / outer;
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let chunk = self.value(p).len() / outer;
                    let mut g = Vec::with_capacity(chunk * outer);
                    for o in 0..outer {
                        let base = o * out_chunk + offset;
                        g.extend_from_slice(&gout[base..base + chunk]);
                    }
                    offset += chunk;
                    res.push((p, g));
                }
                res
            }
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => {
                let shape = self.shape(*input);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let ext = shape[*axis];
                let mut dx = vec![F::zero(); self.value(*input).len()];
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&gout[src..src + len * inner]);
                }
                vec![(*input, dx)]
            }
            Op::Transpose(x) => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![F::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = gout[j * m + i];
                    }
                }
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, gout.to_vec())],
            Op::Reduce {
                input,
                kind,
                mask,
                argmax,
            } => {
                let h = gout.len();
                let mut dx = vec![F::zero(); self.value(*input).len()];
                match kind {
                    ReduceKind::Mean => {
                        let c = F::of(mask.iter().filter(|&&m| m).count() as f64);
                        for (r, &m) in mask.iter().enumerate() {
                            if m {
                                for j in 0..h {
                                    dx[r * h + j] = gout[j] / c;
                                }
                            }
                        }
                    }
                    ReduceKind::Max => {
                        for j in 0..h {
                            dx[argmax[j] * h + j] = gout[j];
                        }
                    }
                }
                vec![(*input, dx)]
            }
            Op::Scale(x, c) => vec![(*x, gout.iter().map(|&g| g * *c).collect())],
            Op::MaskMul(x, factors) => {
                vec![(*x, gout.iter().zip(factors).map(|(&g, &f)| g * f).collect())]
            }
            Op::Sum(x) => vec![(*x, vec![gout[0]; self.value(*x).len()])],
            Op::SumSquares(x) => {
                let two = F::of(2.0);
                vec![(*x, self.value(*x).iter().map(|&v| two * v * gout[0]).collect())]
            }
            Op::CrossEntropy(logits, target) => {
                let z = self.value(*logits);
                let lse = log_sum_exp(z);
                let dz = z
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let p = Scalar::exp(v - lse);
                        let t = if j == *target { F::one() } else { F::zero() };
                        (p - t) * gout[0]
                    })
                    .collect();
                vec![(*logits, dz)]
            }
        }
    }
}

/// Result of [`Graph::backward`]: gradients for parameter leaves and for
/// inputs recorded with `requires_grad`.
pub struct Gradients<F> {
    inputs: Vec<Option<Vec<F>>>,
    params: Vec<(ParamId, Vec<F>)>,
}

impl<F: Scalar> Gradients<F> {
    pub fn input_grad(&self, v: Var) -> Option<&[F]> {
        self.inputs.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&[F]> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[F])> + '_ {
        self.params.iter().map(|(p, g)| (*p, g.as_slice()))
    }

    /// Adds the parameter gradients into the store's grad buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<F>) -> Result<()> {
        for (id, g) in &self.params {
            store.get_mut(*id).accumulate_grad(g)?;
        }
        Ok(())
    }
}

fn kind_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::Leaf => "leaf",
        OpKind::MatMul => "matmul",
        OpKind::MatMulNt => "matmul_nt",
        OpKind::Add => "add",
        OpKind::Sub => "sub",
        OpKind::Mul => "mul",
        OpKind::AddRowBias => "add_row_bias",
        OpKind::Relu => "relu",
        OpKind::Tanh => "tanh",
        OpKind::Sigmoid => "sigmoid",
        OpKind::SoftmaxMasked => "softmax_masked",
        OpKind::Concat => "concat",
        OpKind::Slice => "slice",
        OpKind::Transpose => "transpose",
        OpKind::Reshape => "reshape",
        OpKind::ReduceMax => "reduce_max",
        OpKind::ReduceMean => "reduce_mean",
        OpKind::Scale => "scale",
        OpKind::MaskMul => "mask_mul",
        OpKind::Sum => "sum",
        OpKind::SumSquares => "sum_squares",
        OpKind::CrossEntropy => "cross_entropy",
    }
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::shape(op, shape, &[2])),
    }
}

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        Scalar::div(F::one(), F::one() + Scalar::exp(-x))
    } else {
        let e = Scalar::exp(x);
        Scalar::div(e, F::one() + e)
    }
}

pub(crate) fn log_sum_exp<F: Scalar>(z: &[F]) -> F {
    let max = z.iter().copied().fold(F::neg_infinity(), F::max);
    let s = z.iter().fold(F::zero(), |acc, &v| acc + Scalar::exp(v - max));
    max + Scalar::ln(s)
}

fn softmax_row<F: Scalar>(x: &[F], mask: &[bool], out: &mut [F]) {
    let max = x
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for ((o, &v), &m) in out.iter_mut().zip(x).zip(mask) {
        *o = if m { Scalar::exp(v - max) } else { F::zero() };
        total = total + *o;
    }
    out.iter_mut().for_each(|o| *o = Scalar::div(*o, total));
}

// [m×k]·[k×n]
fn matmul_nn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

// [m×k]·[n×k]ᵀ
fn matmul_nt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).fold(F::zero(), |acc, (&x, &y)| acc + x * y);
        }
    }
    c
}

// [m×k]ᵀ·[m×n] -> [k×n]
fn matmul_tn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            for (cv, &bv) in c[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}
