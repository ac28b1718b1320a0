//! Define-by-run computation tape with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends
//! one node holding the forward value and whatever the backward sweep needs.
//! Node inputs always precede the node itself, so `backward` is a single
//! reverse walk over the tape that visits each node exactly once. After
//! `backward` the graph is consumed: gradients stay readable, but no further
//! operations may be recorded.
//!
//! Every operation validates its output for NaN/Inf and fails immediately
//! instead of letting poison propagate.

use rand::Rng;

use crate::error::{Error, Result};

use super::{all_finite, numel_of, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    Relu { a: NodeId },
    Sigmoid { a: NodeId },
    Tanh { a: NodeId },
    Softmax { a: NodeId, axis: usize },
    TransposeLastTwo { a: NodeId },
    Concat { parts: Vec<NodeId>, axis: usize },
    Sum { a: NodeId, axis: Option<usize> },
    Mean { a: NodeId, axis: Option<usize> },
    Slice { a: NodeId, axis: usize, start: usize },
    Reshape { a: NodeId },
    /// Mask entries are either `0` or `1/(1-rate)` (inverted dropout).
    Dropout { a: NodeId, mask: Vec<f64> },
    /// Fused mean softmax cross-entropy over class logits.
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
}

/// How two elementwise operand shapes line up.
enum Bcast {
    Equal,
    /// Left operand is a single value.
    ScalarA,
    /// Right operand is a single value.
    ScalarB,
    /// Left operand has leading 1-dims and tiles along them.
    TileA,
    /// Right operand has leading 1-dims and tiles along them.
    TileB,
}

/// Equal shapes, a one-element operand, or leading dims of exactly 1 on one
/// side. Anything richer is deliberately unsupported.
fn classify_bcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Bcast)> {
    if a == b {
        return Ok((a.to_vec(), Bcast::Equal));
    }
    if numel_of(b) == 1 {
        return Ok((a.to_vec(), Bcast::ScalarB));
    }
    if numel_of(a) == 1 {
        return Ok((b.to_vec(), Bcast::ScalarA));
    }
    if a.len() == b.len() {
        if leading_ones_tile(a, b) {
            return Ok((b.to_vec(), Bcast::TileA));
        }
        if leading_ones_tile(b, a) {
            return Ok((a.to_vec(), Bcast::TileB));
        }
    }
    Err(Error::dim_pair(op, a, b))
}

/// True when `small` equals `big` with some leading dims replaced by 1.
fn leading_ones_tile(small: &[usize], big: &[usize]) -> bool {
    let mut j = 0;
    while j < small.len() && small[j] == 1 && big[j] != 1 {
        j += 1;
    }
    j > 0 && small[j..] == big[j..]
}

/// Row-major strides for `dims`.
fn strides_of(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// Pairing of the batch (leading) dims of two matmul operands, with
/// broadcast-from-1 on either side.
struct BatchMap {
    out_dims: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl BatchMap {
    fn build(op: &'static str, a_batch: &[usize], b_batch: &[usize], full_a: &[usize], full_b: &[usize]) -> Result<Self> {
        let rank = a_batch.len().max(b_batch.len());
        let pad = |dims: &[usize]| {
            let mut v = vec![1usize; rank - dims.len()];
            v.extend_from_slice(dims);
            v
        };
        let a_dims = pad(a_batch);
        let b_dims = pad(b_batch);
        let mut out_dims = Vec::with_capacity(rank);
        for (&da, &db) in a_dims.iter().zip(&b_dims) {
            if da == db || da == 1 || db == 1 {
                out_dims.push(da.max(db));
            } else {
                return Err(Error::dim_pair(op, full_a, full_b));
            }
        }
        // Stride 0 marks a broadcast axis.
        let mask = |dims: &[usize]| {
            let raw = strides_of(dims);
            dims.iter().zip(raw).map(|(&d, s)| if d == 1 { 0 } else { s }).collect::<Vec<_>>()
        };
        Ok(BatchMap { a_strides: mask(&a_dims), b_strides: mask(&b_dims), out_dims })
    }

    fn count(&self) -> usize {
        numel_of(&self.out_dims)
    }

    /// Matrix index (not byte offset) into each operand for output batch `flat`.
    fn offsets(&self, mut flat: usize) -> (usize, usize) {
        let (mut a, mut b) = (0usize, 0usize);
        for i in (0..self.out_dims.len()).rev() {
            let c = flat % self.out_dims[i];
            flat /= self.out_dims[i];
            a += c * self.a_strides[i];
            b += c * self.b_strides[i];
        }
        (a, b)
    }
}

// ── dense 2-d kernels ──────────────────────────────────────────────────

/// out[m,n] += a[m,k] @ b[k,n]
fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// out[m,k] += g[m,n] @ b[k,n]ᵀ
fn mm_acc_gbt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            orow[p] += s;
        }
    }
}

/// out[k,n] += a[m,k]ᵀ @ g[m,n]
fn mm_acc_atg(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, &gv) in orow.iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Dynamically built computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
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

    /// Registers a tensor's current value as a leaf node.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            grad: None,
            needs_grad: t.requires_grad,
        });
        id
    }

    /// As [`leaf`](Self::leaf), also remembering the handle on the tensor.
    pub fn leaf_bind(&mut self, t: &mut Tensor) -> NodeId {
        let id = self.leaf(t);
        t.node_id = Some(id);
        id
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// Materializes a node's value as a standalone tensor.
    pub fn value(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        let mut t = Tensor::zeros(&n.shape);
        t.data_mut().copy_from_slice(&n.value);
        t.node_id = Some(id);
        t
    }

    /// Gradient of the last `backward` loss with respect to node `id`.
    pub fn grad(&self, id: NodeId) -> Result<&[f64]> {
        if !self.consumed {
            return Err(Error::Contract("gradients requested before backward".into()));
        }
        self.nodes[id.0]
            .grad
            .as_deref()
            .ok_or_else(|| Error::Contract("node does not track gradients".into()))
    }

    /// Accumulates the gradient of a bound leaf into `t.grad`.
    pub fn write_grad(&self, t: &mut Tensor) -> Result<()> {
        let id = t
            .node_id
            .ok_or_else(|| Error::Contract("tensor is not bound to a graph node".into()))?;
        let g = self.grad(id)?;
        let slot = t.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        if slot.len() != g.len() {
            return Err(Error::dim("write_grad", "existing grad buffer has a different shape"));
        }
        for (dst, src) in slot.iter_mut().zip(g) {
            *dst += src;
        }
        Ok(())
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn push(&mut self, opname: &'static str, op: Op, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool) -> Result<NodeId> {
        if self.consumed {
            return Err(Error::Contract("graph already consumed by backward".into()));
        }
        if !all_finite(&value) {
            return Err(Error::numeric(opname, "produced a non-finite value"));
        }
        debug_assert_eq!(numel_of(&shape), value.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, shape, value, grad: None, needs_grad });
        Ok(id)
    }

    // ── forward operations ─────────────────────────────────────────────

    /// Matrix product over the last two axes; leading axes must agree or
    /// broadcast from 1.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::dim_pair("matmul", &ash, &bsh));
        }
        let (m, ka) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if ka != kb {
            return Err(Error::dim_pair("matmul", &ash, &bsh));
        }
        let map = BatchMap::build("matmul", &ash[..ash.len() - 2], &bsh[..bsh.len() - 2], &ash, &bsh)?;
        let mut out_shape = map.out_dims.clone();
        out_shape.push(m);
        out_shape.push(n);
        let mut value = vec![0.0; numel_of(&out_shape)];
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        for f in 0..map.count() {
            let (ao, bo) = map.offsets(f);
            mm_acc(
                &av[ao * m * ka..(ao + 1) * m * ka],
                &bv[bo * ka * n..(bo + 1) * ka * n],
                &mut value[f * m * n..(f + 1) * m * n],
                m,
                ka,
                n,
            );
        }
        let needs = self.needs(&[a, b]);
        self.push("matmul", Op::MatMul { a, b }, out_shape, value, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn binary(&mut self, opname: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<NodeId> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        let (out_shape, kind) = classify_bcast(opname, ash, bsh)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value: Vec<f64> = match kind {
            Bcast::Equal => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::ScalarA => bv.iter().map(|&y| f(av[0], y)).collect(),
            Bcast::ScalarB => av.iter().map(|&x| f(x, bv[0])).collect(),
            Bcast::TileA => {
                let na = av.len();
                bv.iter().enumerate().map(|(i, &y)| f(av[i % na], y)).collect()
            }
            Bcast::TileB => {
                let nb = bv.len();
                av.iter().enumerate().map(|(i, &x)| f(x, bv[i % nb])).collect()
            }
        };
        let needs = self.needs(&[a, b]);
        self.push(opname, op, out_shape, value, needs)
    }

    /// Multiplication by a compile-time constant (not a graph value).
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::numeric("scale", "non-finite scale factor"));
        }
        let value = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a]);
        self.push("scale", Op::Scale { a, c }, shape, value, needs)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("tanh", a, f64::tanh, Op::Tanh { a })
    }

    fn unary(&mut self, opname: &'static str, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId> {
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a]);
        self.push(opname, op, shape, value, needs)
    }

    /// Numerically stable softmax along `axis`; each slice sums to 1.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} out of range for shape {shape:?}")));
        }
        let av = &self.nodes[a.0].value;
        if !all_finite(av) {
            return Err(Error::numeric("softmax", "non-finite input"));
        }
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut value = vec![0.0; av.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| o * axis_len * inner + t * inner + i;
                let mut max = f64::NEG_INFINITY;
                for t in 0..axis_len {
                    max = max.max(av[at(t)]);
                }
                let mut sum = 0.0;
                for t in 0..axis_len {
                    let e = (av[at(t)] - max).exp();
                    value[at(t)] = e;
                    sum += e;
                }
                for t in 0..axis_len {
                    value[at(t)] /= sum;
                }
            }
        }
        let needs = self.needs(&[a]);
        self.push("softmax", Op::Softmax { a, axis }, shape, value, needs)
    }

    /// Swaps the last two axes (batched matrix transpose).
    pub fn transpose_last_two(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("transpose_last_two", format!("rank {} < 2", shape.len())));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batches: usize = shape[..shape.len() - 2].iter().product();
        let av = &self.nodes[a.0].value;
        let mut value = vec![0.0; av.len()];
        for bi in 0..batches {
            let src = &av[bi * r * c..(bi + 1) * r * c];
            let dst = &mut value[bi * r * c..(bi + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut out_shape = shape.clone();
        let len = out_shape.len();
        out_shape.swap(len - 2, len - 1);
        let needs = self.needs(&[a]);
        self.push("transpose_last_two", Op::TransposeLastTwo { a }, out_shape, value, needs)
    }

    /// Concatenates nodes along `axis`; all other dims must match.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero parts".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for shape {first:?}")));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let sh = self.shape(p);
            if sh.len() != first.len()
                || sh.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::dim_pair("concat", &first, sh));
            }
            axis_total += sh[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut value = vec![0.0; numel_of(&out_shape)];
        let mut offset = 0usize;
        for &p in parts {
            let d = self.shape(p)[axis];
            let pv = &self.nodes[p.0].value;
            for o in 0..outer {
                let src = &pv[o * d * inner..(o + 1) * d * inner];
                let dst_start = (o * axis_total + offset) * inner;
                value[dst_start..dst_start + d * inner].copy_from_slice(src);
            }
            offset += d;
        }
        let needs = self.needs(parts);
        self.push("concat", Op::Concat { parts: parts.to_vec(), axis }, out_shape, value, needs)
    }

    /// Sum over one axis (removing it) or over all elements (`None` → scalar).
    pub fn sum(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.reduce("sum", a, axis, false)
    }

    /// Arithmetic mean, same axis semantics as [`sum`](Self::sum).
    pub fn mean(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.reduce("mean", a, axis, true)
    }

    fn reduce(&mut self, opname: &'static str, a: NodeId, axis: Option<usize>, mean: bool) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let av = &self.nodes[a.0].value;
        let needs = self.needs(&[a]);
        let op = if mean { Op::Mean { a, axis } } else { Op::Sum { a, axis } };
        match axis {
            None => {
                let mut s: f64 = av.iter().sum();
                if mean {
                    s /= av.len() as f64;
                }
                self.push(opname, op, vec![1], vec![s], needs)
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::dim(opname, format!("axis {ax} out of range for shape {shape:?}")));
                }
                let axis_len = shape[ax];
                let outer: usize = shape[..ax].iter().product();
                let inner: usize = shape[ax + 1..].iter().product();
                let mut out_shape: Vec<usize> = shape.clone();
                out_shape.remove(ax);
                if out_shape.is_empty() {
                    out_shape.push(1);
                }
                let mut value = vec![0.0; outer * inner];
                for o in 0..outer {
                    for t in 0..axis_len {
                        let base = o * axis_len * inner + t * inner;
                        for i in 0..inner {
                            value[o * inner + i] += av[base + i];
                        }
                    }
                }
                if mean {
                    for v in &mut value {
                        *v /= axis_len as f64;
                    }
                }
                self.push(opname, op, out_shape, value, needs)
            }
        }
    }

    /// Keeps `start..end` of `axis`; the axis is retained (possibly length 1).
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("slice", format!("axis {axis} out of range for shape {shape:?}")));
        }
        if start >= end || end > shape[axis] {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{end} invalid for axis {axis} of shape {shape:?}"),
            ));
        }
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = end - start;
        let mut out_shape = shape.clone();
        out_shape[axis] = d;
        let av = &self.nodes[a.0].value;
        let mut value = vec![0.0; numel_of(&out_shape)];
        for o in 0..outer {
            let src = (o * axis_len + start) * inner;
            let dst = o * d * inner;
            value[dst..dst + d * inner].copy_from_slice(&av[src..src + d * inner]);
        }
        let needs = self.needs(&[a]);
        self.push("slice", Op::Slice { a, axis, start }, out_shape, value, needs)
    }

    /// View with a new shape of identical element count.
    pub fn reshape(&mut self, a: NodeId, new_shape: &[usize]) -> Result<NodeId> {
        let shape = self.shape(a);
        if numel_of(new_shape) != numel_of(shape) {
            return Err(Error::dim_pair("reshape", shape, new_shape));
        }
        let value = self.nodes[a.0].value.clone();
        let needs = self.needs(&[a]);
        self.push("reshape", Op::Reshape { a }, new_shape.to_vec(), value, needs)
    }

    /// Inverted dropout: in training, zeroes each element with probability
    /// `rate` and scales survivors by `1/(1-rate)`. In eval mode (or at
    /// rate 0) this is an exact identity and records nothing.
    pub fn dropout<R: Rng>(&mut self, a: NodeId, rate: f64, training: bool, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let n = self.nodes[a.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep_scale })
            .collect();
        let value: Vec<f64> = self.nodes[a.0].value.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a]);
        self.push("dropout", Op::Dropout { a, mask }, shape, value, needs)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, computed in
    /// log-sum-exp form. `logits` must be `[B, C]`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim("cross_entropy", format!("logits must be [B, C], got {shape:?}")));
        }
        let (batch, classes) = (shape[0], shape[1]);
        if labels.len() != batch {
            return Err(Error::Contract(format!(
                "cross_entropy: {} labels for batch of {batch}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!(
                "cross_entropy: label {bad} out of range for {classes} classes"
            )));
        }
        let lv = &self.nodes[logits.0].value;
        let mut total = 0.0;
        for (bi, &label) in labels.iter().enumerate() {
            let row = &lv[bi * classes..(bi + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        total /= batch as f64;
        let needs = self.needs(&[logits]);
        self.push(
            "cross_entropy",
            Op::CrossEntropy { logits, labels: labels.to_vec() },
            vec![1],
            vec![total],
            needs,
        )
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradients on every node
    /// that (transitively) depends on a `requires_grad` leaf, then marks the
    /// graph consumed: no further ops and no second backward.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract("backward already ran on this graph".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;
        for node in &mut self.nodes[..=loss.0] {
            if node.needs_grad {
                node.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(()); // nothing trainable feeds the loss
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_deref() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (ash, bsh) = (&before[a.0].shape, &before[b.0].shape);
                    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                    let n = bsh[bsh.len() - 1];
                    let map = BatchMap::build("matmul", &ash[..ash.len() - 2], &bsh[..bsh.len() - 2], ash, bsh)
                        .expect("validated in forward");
                    let (need_a, need_b) = (before[a.0].needs_grad, before[b.0].needs_grad);
                    let mut da = vec![0.0; if need_a { before[a.0].value.len() } else { 0 }];
                    let mut db = vec![0.0; if need_b { before[b.0].value.len() } else { 0 }];
                    for f in 0..map.count() {
                        let (ao, bo) = map.offsets(f);
                        let gmat = &g[f * m * n..(f + 1) * m * n];
                        if need_a {
                            let bmat = &before[b.0].value[bo * k * n..(bo + 1) * k * n];
                            mm_acc_gbt(gmat, bmat, &mut da[ao * m * k..(ao + 1) * m * k], m, k, n);
                        }
                        if need_b {
                            let amat = &before[a.0].value[ao * m * k..(ao + 1) * m * k];
                            mm_acc_atg(amat, gmat, &mut db[bo * k * n..(bo + 1) * k * n], m, k, n);
                        }
                    }
                    if need_a {
                        acc_into(&mut before[a.0].grad, &da);
                    }
                    if need_b {
                        acc_into(&mut before[b.0].grad, &db);
                    }
                }
                Op::Add { a, b } => {
                    bcast_backward(before, *a, *b, g, |_, _| (1.0, 1.0));
                }
                Op::Sub { a, b } => {
                    bcast_backward(before, *a, *b, g, |_, _| (1.0, -1.0));
                }
                Op::Mul { a, b } => {
                    bcast_backward(before, *a, *b, g, |x, y| (y, x));
                }
                Op::Scale { a, c } => {
                    if before[a.0].needs_grad {
                        let dg: Vec<f64> = g.iter().map(|&gv| gv * c).collect();
                        acc_into(&mut before[a.0].grad, &dg);
                    }
                }
                Op::Relu { a } => {
                    let src = &before[a.0];
                    if src.needs_grad {
                        let dg: Vec<f64> = g
                            .iter()
                            .zip(&src.value)
                            .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                            .collect();
                        acc_into(&mut before[a.0].grad, &dg);
                    }
                }
                Op::Sigmoid { a } => {
                    if before[a.0].needs_grad {
                        let dg: Vec<f64> = g.iter().zip(&node.value).map(|(&gv, &s)| gv * s * (1.0 - s)).collect();
                        acc_into(&mut before[a.0].grad, &dg);
                    }
                }
                Op::Tanh { a } => {
                    if before[a.0].needs_grad {
                        let dg: Vec<f64> = g.iter().zip(&node.value).map(|(&gv, &t)| gv * (1.0 - t * t)).collect();
                        acc_into(&mut before[a.0].grad, &dg);
                    }
                }
                Op::Softmax { a, axis } => {
                    if before[a.0].needs_grad {
                        // ds_t = s_t (g_t - Σ_u g_u s_u) per softmax slice
                        let s = &node.value;
                        let shape = &node.shape;
                        let axis_len = shape[*axis];
                        let outer: usize = shape[..*axis].iter().product();
                        let inner: usize = shape[*axis + 1..].iter().product();
                        let mut dg = vec![0.0; s.len()];
                        for o in 0..outer {
                            for ii in 0..inner {
                                let at = |t: usize| o * axis_len * inner + t * inner + ii;
                                let mut dot = 0.0;
                                for t in 0..axis_len {
                                    dot += g[at(t)] * s[at(t)];
                                }
                                for t in 0..axis_len {
                                    dg[at(t)] = s[at(t)] * (g[at(t)] - dot);
                                }
                            }
                        }
                        acc_into(&mut before[a.0].grad, &dg);
                    }
                }
                Op::TransposeLastTwo { a } => {
                    if before[a.0].needs_grad {
                        let shape = &node.shape; // output shape
                        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                        let batches: usize = shape[..shape.len() - 2].iter().product();
                        let mut dg = vec![0.0; g.len()];
                        for bi in 0..batches {
                            let src = &g[bi * r * c..(bi + 1) * r * c];
                            let dst = &mut dg[bi * r * c..(bi + 1) * r * c];
                            for i in 0..r {
                                for j in 0..c {
                                    dst[j * r + i] = src[i * c + j];
                                }
                            }
                        }
                        acc_into(&mut before[a.0].grad, &dg);
                    }
                }
                Op::Concat { parts, axis } => {
                    let out_axis = node.shape[*axis];
                    let outer: usize = node.shape[..*axis].iter().product();
                    let inner: usize = node.shape[*axis + 1..].iter().product();
                    let mut offset = 0usize;
                    for &p in parts {
                        let d = before[p.0].shape[*axis];
                        if before[p.0].needs_grad {
                            let mut dg = vec![0.0; before[p.0].value.len()];
                            for o in 0..outer {
                                let src = (o * out_axis + offset) * inner;
                                let dst = o * d * inner;
                                dg[dst..dst + d * inner].copy_from_slice(&g[src..src + d * inner]);
                            }
                            acc_into(&mut before[p.0].grad, &dg);
                        }
                        offset += d;
                    }
                }
                Op::Sum { a, axis } | Op::Mean { a, axis } => {
                    if before[a.0].needs_grad {
                        let mean = matches!(node.op, Op::Mean { .. });
                        let in_shape = &before[a.0].shape;
                        let n = before[a.0].value.len();
                        let mut dg = vec![0.0; n];
                        match axis {
                            None => {
                                let gv = if mean { g[0] / n as f64 } else { g[0] };
                                dg.fill(gv);
                            }
                            Some(ax) => {
                                let axis_len = in_shape[*ax];
                                let outer: usize = in_shape[..*ax].iter().product();
                                let inner: usize = in_shape[*ax + 1..].iter().product();
                                let denom = if mean { axis_len as f64 } else { 1.0 };
                                for o in 0..outer {
                                    for t in 0..axis_len {
                                        let base = o * axis_len * inner + t * inner;
                                        for ii in 0..inner {
                                            dg[base + ii] = g[o * inner + ii] / denom;
                                        }
                                    }
                                }
                            }
                        }
                        acc_into(&mut before[a.0].grad, &dg);
                    }
                }
                Op::Slice { a, axis, start, .. } => {
                    if before[a.0].needs_grad {
                        let in_shape = &before[a.0].shape;
                        let axis_len = in_shape[*axis];
                        let outer: usize = in_shape[..*axis].iter().product();
                        let inner: usize = in_shape[*axis + 1..].iter().product();
                        let d = node.shape[*axis];
                        let mut dg = vec![0.0; before[a.0].value.len()];
                        for o in 0..outer {
                            let dst = (o * axis_len + start) * inner;
                            let src = o * d * inner;
                            dg[dst..dst + d * inner].copy_from_slice(&g[src..src + d * inner]);
                        }
                        acc_into(&mut before[a.0].grad, &dg);
                    }
                }
                Op::Reshape { a } => {
                    if before[a.0].needs_grad {
                        acc_into(&mut before[a.0].grad, g);
                    }
                }
                Op::Dropout { a, mask } => {
                    if before[a.0].needs_grad {
                        let dg: Vec<f64> = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                        acc_into(&mut before[a.0].grad, &dg);
                    }
                }
                Op::CrossEntropy { logits, labels } => {
                    if before[logits.0].needs_grad {
                        let lshape = &before[logits.0].shape;
                        let (batch, classes) = (lshape[0], lshape[1]);
                        let lv = &before[logits.0].value;
                        let mut dg = vec![0.0; lv.len()];
                        let scale = g[0] / batch as f64;
                        for (bi, &label) in labels.iter().enumerate() {
                            let row = &lv[bi * classes..(bi + 1) * classes];
                            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                            for c in 0..classes {
                                let p = (row[c] - max).exp() / sum;
                                let y = if c == label { 1.0 } else { 0.0 };
                                dg[bi * classes + c] = scale * (p - y);
                            }
                        }
                        acc_into(&mut before[logits.0].grad, &dg);
                    }
                }
            }
        }
        Ok(())
    }
}

fn acc_into(slot: &mut Option<Vec<f64>>, src: &[f64]) {
    if let Some(dst) = slot {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
}

/// Shared backward for elementwise binary ops. `partials(x, y)` returns the
/// local derivatives (∂/∂a, ∂/∂b) at one element.
fn bcast_backward(before: &mut [Node], a: NodeId, b: NodeId, g: &[f64], partials: impl Fn(f64, f64) -> (f64, f64)) {
    let (need_a, need_b) = (before[a.0].needs_grad, before[b.0].needs_grad);
    if !need_a && !need_b {
        return;
    }
    let na = before[a.0].value.len();
    let nb = before[b.0].value.len();
    let n = na.max(nb);
    let mut da = vec![0.0; if need_a { na } else { 0 }];
    let mut db = vec![0.0; if need_b { nb } else { 0 }];
    for i in 0..n {
        let x = before[a.0].value[i % na];
        let y = before[b.0].value[i % nb];
        let (pa, pb) = partials(x, y);
        if need_a {
            da[i % na] += g[i] * pa;
        }
        if need_b {
            db[i % nb] += g[i] * pb;
        }
    }
    if need_a {
        acc_into(&mut before[a.0].grad, &da);
    }
    if need_b {
        acc_into(&mut before[b.0].grad, &db);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    fn t_grad(data: &[f64], shape: &[usize]) -> Tensor {
        t(data, shape).with_requires_grad()
    }

    /// Independent triple-loop product in dot-product (ijk) order; the
    /// production kernel accumulates in ikj order.
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    /// Plain exp/sum softmax without max-subtraction.
    fn softmax_oracle(x: &[f64]) -> Vec<f64> {
        let sum: f64 = x.iter().map(|&v| v.exp()).sum();
        x.iter().map(|&v| v.exp() / sum).collect()
    }

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (i, (&a, &e)) in actual.iter().zip(expected).enumerate() {
            assert!(
                (a - e).abs() <= tol,
                "index {i}: {a} vs {e} (diff {})",
                (a - e).abs()
            );
        }
    }

    /// Central finite differences of `f` at `inputs`, one tensor at a time.
    /// `f` rebuilds the graph from scratch and returns the scalar loss value.
    fn fd_grads(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> f64, eps: f64) -> Vec<Vec<f64>> {
        let mut grads = Vec::new();
        for pi in 0..inputs.len() {
            let mut g = vec![0.0; inputs[pi].numel()];
            for ei in 0..g.len() {
                let mut plus: Vec<Tensor> = inputs.to_vec();
                plus[pi].data_mut()[ei] += eps;
                let mut minus: Vec<Tensor> = inputs.to_vec();
                minus[pi].data_mut()[ei] -= eps;
                g[ei] = (f(&plus) - f(&minus)) / (2.0 * eps);
            }
            grads.push(g);
        }
        grads
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    // ── matmul ─────────────────────────────────────────────────────────

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.leaf(&t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]));
        let b = g.leaf(&t(&[5.0, 6.0, 7.0, 8.0], &[2, 2]));
        let c = g.matmul(i2, b).unwrap();
        assert_eq!(g.data(c), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_matches_oracle_small() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]));
        let b = g.leaf(&t(&[5.0, 6.0, 7.0, 8.0], &[2, 2]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[19.0, 22.0, 43.0, 50.0]);
        let oracle = matmul_oracle(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_close(g.data(c), &oracle, 1e-12);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut g = Graph::new();
        let z = g.leaf(&Tensor::zeros(&[2, 2]));
        let b = g.leaf(&t(&[1.0, -2.0, 3.5, 0.25, 9.0, -1.0], &[2, 3]));
        let c = g.matmul(z, b).unwrap();
        assert!(g.data(c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_oracle_up_to_16() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[(1usize, 1usize, 1usize), (3, 5, 2), (16, 16, 16), (7, 16, 9)] {
            let a = Tensor::rand_uniform(&[m, k], -2.0, 2.0, &mut rng);
            let b = Tensor::rand_uniform(&[k, n], -2.0, 2.0, &mut rng);
            let mut g = Graph::new();
            let (ai, bi) = (g.leaf(&a), g.leaf(&b));
            let c = g.matmul(ai, bi).unwrap();
            let oracle = matmul_oracle(a.data(), b.data(), m, k, n);
            assert_close(g.data(c), &oracle, 1e-12);
        }
    }

    #[test]
    fn matmul_batched_broadcast() {
        // [2,2,3] @ [3,2] broadcasts the rhs across the batch.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Tensor::rand_uniform(&[2, 2, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[3, 2], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let (ai, bi) = (g.leaf(&a), g.leaf(&b));
        let c = g.matmul(ai, bi).unwrap();
        assert_eq!(g.shape(c), &[2, 2, 2]);
        for batch in 0..2 {
            let oracle = matmul_oracle(&a.data()[batch * 6..(batch + 1) * 6], b.data(), 2, 3, 2);
            assert_close(&g.data(c)[batch * 4..(batch + 1) * 4], &oracle, 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::zeros(&[2, 3]));
        let b = g.leaf(&Tensor::zeros(&[4, 2]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    // ── softmax ────────────────────────────────────────────────────────

    #[test]
    fn softmax_uniform_input() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[0.0, 0.0, 0.0], &[3]));
        let s = g.softmax(x, 0).unwrap();
        assert_close(g.data(s), &[1.0 / 3.0; 3], 1e-15);
    }

    #[test]
    fn softmax_matches_oracle() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1.0, 2.0, 3.0], &[3]));
        let s = g.softmax(x, 0).unwrap();
        // frozen from the exp/sum oracle
        assert_close(g.data(s), &[0.090031, 0.244728, 0.665241], 1e-6);
        assert_close(g.data(s), &softmax_oracle(&[1.0, 2.0, 3.0]), 1e-12);
    }

    #[test]
    fn softmax_large_values_stable() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1000.0, 0.0], &[2]));
        let s = g.softmax(x, 0).unwrap();
        let out = g.data(s);
        assert!((out[0] - 1.0).abs() < 1e-12 && out[1] >= 0.0 && out[1] < 1e-12);
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[2, 2]));
        assert!(matches!(g.softmax(x, 2), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one_on_inner_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::rand_uniform(&[4, 5, 6], -8.0, 8.0, &mut rng);
        for axis in 0..3 {
            let mut g = Graph::new();
            let xi = g.leaf(&x);
            let s = g.softmax(xi, axis).unwrap();
            let mut gm = Graph::new();
            let si = gm.leaf(&g.value(s));
            let total = gm.sum(si, Some(axis)).unwrap();
            for &v in gm.data(total) {
                assert!((v - 1.0).abs() < 1e-12, "axis {axis}: slice sum {v}");
            }
        }
    }

    // ── elementwise ────────────────────────────────────────────────────

    #[test]
    fn elementwise_trivials() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[0.0], &[1]));
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.data(s), &[0.5]);

        let y = g.leaf(&t(&[0.5], &[1]));
        let th = g.tanh(y).unwrap();
        // frozen from f64 tanh oracle
        assert_close(g.data(th), &[0.462117], 1e-6);

        let z = g.leaf(&t(&[-3.0], &[1]));
        let r = g.relu(z).unwrap();
        assert_eq!(g.data(r), &[0.0]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::zeros(&[2, 3]));
        let b = g.leaf(&Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn elementwise_scalar_and_row_broadcast() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]));
        let s = g.leaf(&t(&[10.0], &[1]));
        let y = g.mul(a, s).unwrap();
        assert_eq!(g.data(y), &[10.0, 20.0, 30.0, 40.0]);

        let bias = g.leaf(&t(&[1.0, -1.0], &[1, 2]));
        let z = g.add(a, bias).unwrap();
        assert_eq!(g.data(z), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn middle_axis_broadcast_rejected() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::zeros(&[2, 1, 3]));
        let b = g.leaf(&Tensor::zeros(&[2, 4, 3]));
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
    }

    // ── shape ops ──────────────────────────────────────────────────────

    #[test]
    fn transpose_concat_mean_shapes() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[10, 52]));
        let xt = g.transpose_last_two(x).unwrap();
        assert_eq!(g.shape(xt), &[52, 10]);

        let a = g.leaf(&Tensor::zeros(&[2, 3, 4]));
        let b = g.leaf(&Tensor::zeros(&[2, 3, 4]));
        let cat = g.concat(&[a, b], 2).unwrap();
        assert_eq!(g.shape(cat), &[2, 3, 8]);

        let m = g.leaf(&t(&[2.0, 4.0, 6.0], &[3]));
        let mv = g.mean(m, None).unwrap();
        assert_eq!(g.data(mv), &[4.0]);
    }

    #[test]
    fn transpose_round_trips_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::rand_uniform(&[3, 4, 5], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let xi = g.leaf(&x);
        let xt = g.transpose_last_two(xi).unwrap();
        let back = g.transpose_last_two(xt).unwrap();
        assert_eq!(g.data(back), x.data());
    }

    #[test]
    fn slice_and_concat_are_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::rand_uniform(&[2, 5, 3], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let xi = g.leaf(&x);
        let head = g.slice(xi, 1, 0, 2).unwrap();
        let tail = g.slice(xi, 1, 2, 5).unwrap();
        assert_eq!(g.shape(head), &[2, 2, 3]);
        let cat = g.concat(&[head, tail], 1).unwrap();
        assert_eq!(g.data(cat), x.data());
    }

    #[test]
    fn sum_over_axis() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]));
        let s0 = g.sum(x, Some(0)).unwrap();
        assert_eq!(g.data(s0), &[5.0, 7.0, 9.0]);
        let s1 = g.sum(x, Some(1)).unwrap();
        assert_eq!(g.data(s1), &[6.0, 15.0]);
    }

    // ── dropout ────────────────────────────────────────────────────────

    #[test]
    fn dropout_eval_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = t(&[1.0, 2.0, 3.0], &[3]);
        let mut g = Graph::new();
        let xi = g.leaf(&x);
        let y = g.dropout(xi, 0.5, false, &mut rng).unwrap();
        assert_eq!(y, xi);
        let y0 = g.dropout(xi, 0.0, true, &mut rng).unwrap();
        assert_eq!(y0, xi);
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[3]));
        assert!(matches!(g.dropout(x, 1.0, true, &mut rng), Err(Error::Parameter(_))));
        assert!(matches!(g.dropout(x, -0.1, true, &mut rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn dropout_monte_carlo_statistics() {
        let n = 200_000;
        let x = Tensor::full(&[n], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut g = Graph::new();
        let xi = g.leaf(&x);
        let y = g.dropout(xi, 0.2, true, &mut rng).unwrap();
        let out = g.data(y);
        let survivors = out.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        assert!((survivors - 0.8).abs() < 0.02, "survivor fraction {survivors}");
        let mean = out.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn dropout_fixed_seed_reproducible() {
        let x = Tensor::full(&[1000], 1.0).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut g = Graph::new();
            let xi = g.leaf(&x);
            let y = g.dropout(xi, 0.3, true, &mut rng).unwrap();
            g.data(y).to_vec()
        };
        assert_eq!(run(), run());
    }

    // ── backward ───────────────────────────────────────────────────────

    #[test]
    fn backward_of_sum_of_squares() {
        let x = t_grad(&[1.0, -2.0, 3.0], &[3]);
        let mut g = Graph::new();
        let xi = g.leaf(&x);
        let sq = g.mul(xi, xi).unwrap();
        let loss = g.sum(sq, None).unwrap();
        g.backward(loss).unwrap();
        assert_close(g.grad(xi).unwrap(), &[2.0, -4.0, 6.0], 1e-12);
    }

    #[test]
    fn backward_of_softmax_sum_is_zero() {
        let x = t_grad(&[0.3, -1.2, 2.4, 0.0], &[4]);
        let mut g = Graph::new();
        let xi = g.leaf(&x);
        let s = g.softmax(xi, 0).unwrap();
        let loss = g.sum(s, None).unwrap();
        g.backward(loss).unwrap();
        assert_close(g.grad(xi).unwrap(), &[0.0; 4], 1e-12);
    }

    #[test]
    fn backward_accumulates_across_leaf_reuse() {
        // loss = sum(x + x) => grad 2 everywhere
        let x = t_grad(&[1.0, 2.0], &[2]);
        let mut g = Graph::new();
        let xi = g.leaf(&x);
        let y = g.add(xi, xi).unwrap();
        let loss = g.sum(y, None).unwrap();
        g.backward(loss).unwrap();
        assert_close(g.grad(xi).unwrap(), &[2.0, 2.0], 1e-12);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let x = t_grad(&[1.0, 2.0], &[2]);
        let mut g = Graph::new();
        let xi = g.leaf(&x);
        let y = g.add(xi, xi).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_consumes_graph() {
        let x = t_grad(&[1.0], &[1]);
        let mut g = Graph::new();
        let xi = g.leaf(&x);
        let loss = g.sum(xi, None).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::Contract(_))));
        assert!(matches!(g.relu(xi), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_result_is_rejected() {
        let x = t(&[1e308], &[1]);
        let mut g = Graph::new();
        let xi = g.leaf(&x);
        let big = g.scale(xi, 1e10).unwrap_err();
        assert!(matches!(big, Error::Numeric { .. }));
    }

    #[test]
    fn composite_graphs_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // mixes matmul, softmax, activations, reductions, shape ops
        let a = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng).with_requires_grad();
        let b = Tensor::rand_uniform(&[4, 2], -1.0, 1.0, &mut rng).with_requires_grad();
        let c = Tensor::rand_uniform(&[1, 2], -1.0, 1.0, &mut rng).with_requires_grad();

        let build = |inputs: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let ai = g.leaf(&inputs[0]);
            let bi = g.leaf(&inputs[1]);
            let ci = g.leaf(&inputs[2]);
            let mm = g.matmul(ai, bi).unwrap();
            let biased = g.add(mm, ci).unwrap();
            let th = g.tanh(biased).unwrap();
            let sm = g.softmax(th, 1).unwrap();
            let sc = g.scale(sm, 1.7).unwrap();
            let sg = g.sigmoid(sc).unwrap();
            let sl = g.slice(sg, 0, 0, 2).unwrap();
            let mn = g.mean(sl, Some(1)).unwrap();
            let loss = g.sum(mn, None).unwrap();
            g.data(loss)[0]
        };

        let inputs = vec![a, b, c];
        let numeric = fd_grads(&inputs, &build, 1e-4);

        let mut g = Graph::new();
        let ai = g.leaf(&inputs[0]);
        let bi = g.leaf(&inputs[1]);
        let ci = g.leaf(&inputs[2]);
        let mm = g.matmul(ai, bi).unwrap();
        let biased = g.add(mm, ci).unwrap();
        let th = g.tanh(biased).unwrap();
        let sm = g.softmax(th, 1).unwrap();
        let sc = g.scale(sm, 1.7).unwrap();
        let sg = g.sigmoid(sc).unwrap();
        let sl = g.slice(sg, 0, 0, 2).unwrap();
        let mn = g.mean(sl, Some(1)).unwrap();
        let loss = g.sum(mn, None).unwrap();
        g.backward(loss).unwrap();

        for (idx, id) in [ai, bi, ci].into_iter().enumerate() {
            let rel = max_rel_err(g.grad(id).unwrap(), &numeric[idx]);
            assert!(rel < 1e-5, "input {idx}: max rel err {rel}");
        }
    }

    #[test]
    fn concat_mul_sub_dropout_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = Tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut rng).with_requires_grad();
        let b = Tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut rng).with_requires_grad();

        // dropout mask must be identical across evaluations: fixed rng seed
        let build = |inputs: &[Tensor]| -> f64 {
            let mut drop_rng = ChaCha8Rng::seed_from_u64(99);
            let mut g = Graph::new();
            let ai = g.leaf(&inputs[0]);
            let bi = g.leaf(&inputs[1]);
            let cat = g.concat(&[ai, bi], 1).unwrap();
            let prod = g.mul(cat, cat).unwrap();
            let diff = g.sub(prod, cat).unwrap();
            let dropped = g.dropout(diff, 0.4, true, &mut drop_rng).unwrap();
            let tr = g.transpose_last_two(dropped).unwrap();
            let loss = g.mean(tr, None).unwrap();
            g.data(loss)[0]
        };
        let inputs = vec![a, b];
        let numeric = fd_grads(&inputs, &build, 1e-4);

        let mut drop_rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::new();
        let ai = g.leaf(&inputs[0]);
        let bi = g.leaf(&inputs[1]);
        let cat = g.concat(&[ai, bi], 1).unwrap();
        let prod = g.mul(cat, cat).unwrap();
        let diff = g.sub(prod, cat).unwrap();
        let dropped = g.dropout(diff, 0.4, true, &mut drop_rng).unwrap();
        let tr = g.transpose_last_two(dropped).unwrap();
        let loss = g.mean(tr, None).unwrap();
        g.backward(loss).unwrap();

        for (idx, id) in [ai, bi].into_iter().enumerate() {
            let rel = max_rel_err(g.grad(id).unwrap(), &numeric[idx]);
            assert!(rel < 1e-5, "input {idx}: max rel err {rel}");
        }
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = t_grad(&[1.0, 2.0, 3.0, -0.5, 0.0, 0.5], &[2, 3]);
        let mut g = Graph::new();
        let li = g.leaf(&logits);
        let loss = g.cross_entropy(li, &[2, 0]).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(li).unwrap();
        let sm0 = softmax_oracle(&[1.0, 2.0, 3.0]);
        let sm1 = softmax_oracle(&[-0.5, 0.0, 0.5]);
        let expected = [
            sm0[0] / 2.0,
            sm0[1] / 2.0,
            (sm0[2] - 1.0) / 2.0,
            (sm1[0] - 1.0) / 2.0,
            sm1[1] / 2.0,
            sm1[2] / 2.0,
        ];
        assert_close(grad, &expected, 1e-12);
    }

    #[test]
    fn grad_before_backward_is_an_error() {
        let x = t_grad(&[1.0], &[1]);
        let mut g = Graph::new();
        let xi = g.leaf(&x);
        assert!(matches!(g.grad(xi), Err(Error::Contract(_))));
    }

    #[test]
    fn write_grad_populates_bound_tensor() {
        let mut x = t_grad(&[2.0, -1.0], &[2]);
        let mut g = Graph::new();
        let xi = g.leaf_bind(&mut x);
        let sq = g.mul(xi, xi).unwrap();
        let loss = g.sum(sq, None).unwrap();
        g.backward(loss).unwrap();
        g.write_grad(&mut x).unwrap();
        assert_close(x.grad.as_ref().unwrap(), &[4.0, -2.0], 1e-12);
    }
}
