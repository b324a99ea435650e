use std::f64::consts::PI;

use super::tensor::Tensor;
use super::GradError;

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable primitives the graph understands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    MatMul,
    Add,
    Mul,
    Scale,
    Sum,
    Mean,
    Transpose,
    Reshape,
    Concat,
    Slice,
    Relu,
    Gelu,
    SoftmaxLastdim,
    LayerNorm,
    EmbeddingLookup,
    CrossEntropyLogits,
    Mse,
    Sqrt,
    L2Norm,
}

impl Primitive {
    pub const ALL: [Primitive; 19] = [
        Primitive::MatMul,
        Primitive::Add,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::Transpose,
        Primitive::Reshape,
        Primitive::Concat,
        Primitive::Slice,
        Primitive::Relu,
        Primitive::Gelu,
        Primitive::SoftmaxLastdim,
        Primitive::LayerNorm,
        Primitive::EmbeddingLookup,
        Primitive::CrossEntropyLogits,
        Primitive::Mse,
        Primitive::Sqrt,
        Primitive::L2Norm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Transpose => "transpose",
            Primitive::Reshape => "reshape",
            Primitive::Concat => "concat",
            Primitive::Slice => "slice",
            Primitive::Relu => "relu",
            Primitive::Gelu => "gelu",
            Primitive::SoftmaxLastdim => "softmax_lastdim",
            Primitive::LayerNorm => "layer_norm",
            Primitive::EmbeddingLookup => "embedding_lookup",
            Primitive::CrossEntropyLogits => "cross_entropy_logits",
            Primitive::Mse => "mse",
            Primitive::Sqrt => "sqrt",
            Primitive::L2Norm => "l2_norm",
        }
    }

    pub fn from_name(name: &str) -> Option<Primitive> {
        Primitive::ALL.into_iter().find(|p| p.name() == name)
    }
}

/// Every primitive with a registered forward and backward rule.
pub fn primitive_set() -> &'static [Primitive] {
    &Primitive::ALL
}

/// How an operand maps onto the output of a broadcasting binary op.
#[derive(Clone, Debug)]
enum Bcast {
    Same,
    /// Operand is the trailing block of the output; index is `i % n`.
    Suffix(usize),
    /// Explicit output-index → operand-index table.
    General(Vec<usize>),
}

impl Bcast {
    fn plan(out: &[usize], operand: &[usize]) -> Bcast {
        if out == operand {
            return Bcast::Same;
        }
        let n: usize = operand.iter().product();
        let stripped: Vec<usize> = operand.iter().copied().skip_while(|&d| d == 1).collect();
        if out.ends_with(&stripped) || n == 1 {
            return Bcast::Suffix(n);
        }
        let rank = out.len();
        let mut padded = vec![1usize; rank - operand.len()];
        padded.extend_from_slice(operand);
        let mut strides = vec![0usize; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            strides[d] = if padded[d] == 1 { 0 } else { acc };
            acc *= padded[d];
        }
        let total: usize = out.iter().product();
        let mut table = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for _ in 0..total {
            table.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Bcast::General(table)
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Suffix(n) => i % n,
            Bcast::General(t) => t[i],
        }
    }

    fn reduce(&self, grad: &[f64], operand_len: usize) -> Vec<f64> {
        match self {
            Bcast::Same => grad.to_vec(),
            _ => {
                let mut out = vec![0.0; operand_len];
                for (i, g) in grad.iter().enumerate() {
                    out[self.at(i)] += g;
                }
                out
            }
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId, Bcast, Bcast),
    Mul(NodeId, NodeId, Bcast, Bcast),
    Scale(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Concat(Vec<NodeId>, usize),
    Slice { input: NodeId, axis: usize, start: usize },
    Relu(NodeId),
    Gelu(NodeId),
    Softmax(NodeId),
    LayerNorm { input: NodeId, inv_std: Vec<f64> },
    Embedding { table: NodeId, ids: Vec<usize> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<f64> },
    Mse(NodeId, NodeId),
    Sqrt(NodeId),
    L2Norm(NodeId),
}

impl Op {
    fn label(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax_lastdim",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding_lookup",
            Op::CrossEntropy { .. } => "cross_entropy_logits",
            Op::Mse(..) => "mse",
            Op::Sqrt(_) => "sqrt",
            Op::L2Norm(_) => "l2_norm",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b) | Op::Add(a, b, ..) | Op::Mul(a, b, ..) | Op::Mse(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::Sqrt(a)
            | Op::L2Norm(a) => vec![*a],
            Op::Concat(v, _) => v.clone(),
            Op::Slice { input, .. } | Op::LayerNorm { input, .. } => vec![*input],
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only computation graph. Nodes are created in topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `C = op(A)·op(B)` with `A` logically `m×k` and `B` logically `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover the strided extents computed above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    let s = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (s * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let s = (2.0 / PI).sqrt();
    let t = (s * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * s * (1.0 + 3.0 * GELU_C * x * x)
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf => value.requires_grad(),
            Op::Constant => false,
            other => other.inputs().iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf node; receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t)
    }

    /// Leaf that always receives a gradient.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Constant, t.with_requires_grad(false))
    }

    /// Copy of `id`'s value with no path back to it (stop-gradient).
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.label()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(GradError::shape("matmul", format!("[{m}x{k}]·[{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        Ok(self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out)))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, mul: bool) -> Result<NodeId, GradError> {
        let name = if mul { "mul" } else { "add" };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| GradError::shape(name, format!("{sa:?} vs {sb:?}")))?;
        let ba = Bcast::plan(&out_shape, &sa);
        let bb = Bcast::plan(&out_shape, &sb);
        let total: usize = out_shape.iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = if mul {
            (0..total).map(|i| da[ba.at(i)] * db[bb.at(i)]).collect()
        } else {
            (0..total).map(|i| da[ba.at(i)] + db[bb.at(i)]).collect()
        };
        let op = if mul { Op::Mul(a, b, ba, bb) } else { Op::Add(a, b, ba, bb) };
        Ok(self.push(op, Tensor::from_parts(out_shape, out)))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.binary(a, b, false)
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.binary(a, b, true)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a);
        let out = v.data().iter().map(|x| x * s).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(Op::Scale(a, s), t)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let v = self.value(a);
        let (r, c) = v.dims2()?;
        let d = v.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.push(Op::Transpose(a), Tensor::from_parts(vec![c, r], out)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, GradError> {
        let t = self
            .value(a)
            .reshaped(shape)
            .map_err(|_| GradError::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))))?;
        Ok(self.push(Op::Reshape(a), t))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, GradError> {
        let first = parts
            .first()
            .ok_or_else(|| GradError::shape("concat", "no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(GradError::shape("concat", format!("axis {axis} on {base:?}")));
        }
        let mut total_axis = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().enumerate().all(|(d, &n)| d == axis || n == base[d]);
            if !compatible {
                return Err(GradError::shape("concat", format!("{base:?} vs {s:?}")));
            }
            total_axis += s[axis];
        }
        let (outer, inner) = outer_inner(&base, axis);
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        Ok(self.push(Op::Concat(parts.to_vec(), axis), Tensor::from_parts(shape, out)))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(
        &mut self,
        a: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId, GradError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(GradError::shape(
                "slice",
                format!("[{start}..{}] on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(Op::Slice { input: a, axis, start }, Tensor::from_parts(out_shape, out)))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = self.value(a);
        let out = v.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(op, t)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Gelu(a), gelu_fwd)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    /// Softmax over the last axis. A row that is entirely `-inf` maps to zeros.
    pub fn softmax_lastdim(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let c = *v.shape().last().unwrap();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                row.iter_mut().for_each(|x| *x = 0.0);
                continue;
            }
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(Op::Softmax(a), t)
    }

    /// Per-row standardisation over the last axis, no affine terms.
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        let v = self.value(a);
        let c = *v.shape().last().unwrap();
        let mut out = v.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / c);
        for row in out.chunks_mut(c) {
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mu) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(Op::LayerNorm { input: a, inv_std }, t)
    }

    /// Gathers rows of a rank-2 `table`.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, GradError> {
        let (v, d) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(GradError::shape("embedding_lookup", "empty id list".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(GradError::shape("embedding_lookup", format!("id {bad} >= {v}")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::from_parts(vec![ids.len(), d], out);
        Ok(self.push(Op::Embedding { table, ids: ids.to_vec() }, t))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy_logits(
        &mut self,
        logits: NodeId,
        targets: &[usize],
    ) -> Result<NodeId, GradError> {
        let (n, c) = self.value(logits).dims2()?;
        if targets.len() != n {
            return Err(GradError::shape(
                "cross_entropy_logits",
                format!("{n} rows, {} targets", targets.len()),
            ));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= c) {
            return Err(GradError::shape("cross_entropy_logits", format!("target {bad} >= {c}")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut nll = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            for (j, x) in row.iter().enumerate() {
                probs[r * c + j] = (x - max).exp() / z;
            }
            nll += z.ln() + max - row[t];
        }
        let t = Tensor::scalar(nll / n as f64);
        Ok(self.push(Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, t))
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        if self.shape(a) != self.shape(b) {
            return Err(GradError::shape(
                "mse",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let s = da.iter().zip(db).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / da.len() as f64;
        Ok(self.push(Op::Mse(a, b), Tensor::scalar(s)))
    }

    /// Euclidean norm over the last axis; a rank-1 input yields shape `[1]`.
    pub fn l2_norm(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let c = *v.shape().last().unwrap();
        let out: Vec<f64> = v.data().chunks(c).map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let shape = if v.rank() == 1 { vec![1] } else { v.shape()[..v.rank() - 1].to_vec() };
        self.push(Op::L2Norm(a), Tensor::from_parts(shape, out))
    }

    /// First node whose value contains NaN or `+inf`. `-inf` is how masks are
    /// encoded, so it is permitted.
    pub fn first_invalid_node(&self) -> Option<(NodeId, &'static str)> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            n.value
                .data()
                .iter()
                .any(|x| x.is_nan() || *x == f64::INFINITY)
                .then(|| (NodeId(i), n.op.label()))
        })
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, GradError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(GradError::NonScalarLoss { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.nodes[i].op, g) {
                (Op::Leaf, Some(g)) if self.nodes[i].needs_grad => {
                    Some(Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let mut acc = |id: NodeId, contrib: Vec<f64>| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(*b).data(), true, &mut ga, 0.0);
                    acc(*a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g, false, &mut gb, 0.0);
                    acc(*b, gb);
                }
            }
            Op::Add(a, b, ba, bb) => {
                if self.nodes[a.0].needs_grad {
                    acc(*a, ba.reduce(g, self.value(*a).numel()));
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, bb.reduce(g, self.value(*b).numel()));
                }
            }
            Op::Mul(a, b, ba, bb) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.nodes[a.0].needs_grad {
                    let prod: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * db[bb.at(i)]).collect();
                    acc(*a, ba.reduce(&prod, da.len()));
                }
                if self.nodes[b.0].needs_grad {
                    let prod: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * da[ba.at(i)]).collect();
                    acc(*b, bb.reduce(&prod, db.len()));
                }
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|x| x * s).collect()),
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().unwrap();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                acc(*a, ga);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let (outer, inner) = outer_inner(shape, *axis);
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.value(*p).shape()[*axis] * inner;
                    if self.nodes[p.0].needs_grad {
                        let mut gp = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * row + offset;
                            gp.extend_from_slice(&g[base..base + chunk]);
                        }
                        acc(*p, gp);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.value(*input).shape();
                let (outer, inner) = outer_inner(in_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut gi = vec![0.0; self.value(*input).numel()];
                for o in 0..outer {
                    let dst = (o * in_shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    gi[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                acc(*input, gi);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, g.iter().zip(x).map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 }).collect());
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                acc(*a, g.iter().zip(x).map(|(gi, xi)| gi * gelu_grad(*xi)).collect());
            }
            Op::Sqrt(a) => {
                // zero at the origin rather than +inf
                acc(*a, g.iter().zip(y).map(|(gi, yi)| if *yi > 0.0 { gi * 0.5 / yi } else { 0.0 }).collect());
            }
            Op::Softmax(a) => {
                let c = *node.value.shape().last().unwrap();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::LayerNorm { input, inv_std } => {
                let c = *node.value.shape().last().unwrap();
                let mut ga = vec![0.0; g.len()];
                for (r, ((gr, yr), out)) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)).enumerate() {
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        out[j] = inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                acc(*input, ga);
            }
            Op::Embedding { table, ids } => {
                let (v, d) = self.value(*table).dims2().unwrap();
                let mut gt = vec![0.0; v * d];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[r * d + j];
                    }
                }
                acc(*table, gt);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.value(*logits).shape()[1];
                let n = targets.len() as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * g[0] / n).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * c + t] -= g[0] / n;
                }
                acc(*logits, gl);
            }
            Op::Mse(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let k = 2.0 * g[0] / da.len() as f64;
                let diff: Vec<f64> = da.iter().zip(db).map(|(x, y)| k * (x - y)).collect();
                if self.nodes[b.0].needs_grad {
                    acc(*b, diff.iter().map(|v| -v).collect());
                }
                acc(*a, diff);
            }
            Op::L2Norm(a) => {
                let x = self.value(*a).data();
                let c = *self.value(*a).shape().last().unwrap();
                let mut ga = vec![0.0; x.len()];
                for (r, (xr, out)) in x.chunks(c).zip(ga.chunks_mut(c)).enumerate() {
                    // zero subgradient at the origin
                    if y[r] > 0.0 {
                        for j in 0..c {
                            out[j] = g[r] * xr[j] / y[r];
                        }
                    }
                }
                acc(*a, ga);
            }
        }
    }
}

/// Gradients of one backward sweep, keyed by leaf node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf, `None` if the leaf never reached the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for a leaf, zeros when unreachable.
    pub fn wrt(&self, graph: &Graph, id: NodeId) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(id)))
    }
}
