use super::kernels::{
    axis_split, broadcast_map, broadcast_shape, gelu, gelu_grad, matmul_a_bt_acc, matmul_acc,
    matmul_at_b_acc,
};
use super::{ParamId, ParamStore, Result, Tensor, TensorError};
use crate::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Softmax temperature divisor: either a constant or a (scalar) graph node.
#[derive(Clone, Copy, Debug)]
pub enum Temperature<T> {
    Fixed(T),
    Learned(Var),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Binary { kind: BinaryKind, a: Var, b: Var },
    Scale { a: Var, factor: T },
    BroadcastTo { a: Var },
    Reshape { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    MeanAxis { a: Var, axis: usize },
    SumAll { a: Var },
    MeanAll { a: Var },
    Softmax { a: Var, tau: Option<Var>, tau_value: T },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { a: Var },
    Exp { a: Var },
    Abs { a: Var },
    Clamp { a: Var, lo: T, hi: T },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    L1Distance { a: Var, b: Var },
    SqL2Distance { a: Var, b: Var },
    Cosine { a: Var, b: Var, na: Vec<T>, nb: Vec<T>, a_floored: Vec<bool>, b_floored: Vec<bool> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run computation graph.
///
/// A graph is built for one forward pass and discarded afterwards. Bound
/// parameters occupy the first nodes, so their gradients can be collected by
/// [`ParamId`] after [`backward`](Graph::backward).
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    n_params: usize,
    record: bool,
    check_finite: bool,
    grads: Option<Vec<Option<Vec<T>>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Floor applied to vector norms in cosine similarity.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

impl<T: Scalar> Graph<T> {
    /// A recording graph; nodes depending on leaves with `requires_grad` are
    /// differentiable.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            n_params: 0,
            record: true,
            check_finite: cfg!(debug_assertions),
            grads: None,
        }
    }

    /// A non-recording graph: values only, no backward.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn with_params(store: &ParamStore<T>) -> Self {
        let mut g = Self::new();
        g.bind(store);
        g
    }

    pub fn inference_with_params(store: &ParamStore<T>) -> Self {
        let mut g = Self::inference();
        g.bind(store);
        g
    }

    fn bind(&mut self, store: &ParamStore<T>) {
        assert!(self.nodes.is_empty(), "parameters must be bound first");
        for t in store.values() {
            self.nodes.push(Node {
                value: t.clone(),
                op: Op::Leaf,
                requires_grad: self.record,
            });
        }
        self.n_params = store.len();
    }

    /// Enables the non-finite check on every forward op (on by default in
    /// debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    /// Runs `f` with recording suspended: nodes it creates hold values but
    /// never carry gradient, as if every output were detached.
    pub fn no_grad<R>(&mut self, f: impl FnOnce(&mut Self) -> R) -> R {
        let prev = self.record;
        self.record = false;
        let out = f(self);
        self.record = prev;
        out
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&self, id: ParamId) -> Var {
        assert!(id.0 < self.n_params, "parameter {} not bound", id.0);
        Var(id.0)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that carries no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf (when the graph records).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: self.record,
        });
        Var(self.nodes.len() - 1)
    }

    /// Snapshot of `v`'s value as a constant; gradients do not pass through.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str, parents: &[Var]) -> Result<Var> {
        let idx = self.nodes.len();
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name, node: idx });
        }
        let requires_grad = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(idx))
    }

    // ---- kernels ----------------------------------------------------------

    /// `a[..., k] @ b[k, n] -> [..., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::MatMul { a, b, m, k, n }, "matmul", &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                shape: s,
                reason: "transpose expects rank 2".into(),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let value = Tensor::new([cols, rows], out)?;
        self.push(value, Op::Transpose { a, rows, cols }, "transpose", &[a])
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| TensorError::ShapeMismatch {
            op: name,
            left: sa.clone(),
            right: sb.clone(),
        })?;
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let da = self.value(a).data();
        let db = self.value(b).data();
        let data: Vec<T> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(&sa, &out_shape);
            let mb = broadcast_map(&sb, &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        let value = Tensor::new(out_shape, data)?;
        self.push(value, Op::Binary { kind, a, b }, name, &[a, b])
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale { a, factor }, "scale", &[a])
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        match broadcast_shape(&sa, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast_to",
                    left: sa,
                    right: shape.to_vec(),
                })
            }
        }
        let map = broadcast_map(&sa, shape);
        let src = self.value(a).data();
        let value = Tensor::new(shape.to_vec(), map.iter().map(|&i| src[i]).collect())?;
        self.push(value, Op::BroadcastTo { a }, "broadcast_to", &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape { a }, "reshape", &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| TensorError::InvalidShape {
            shape: vec![],
            reason: "concat of zero tensors".into(),
        })?)
        .to_vec();
        let rank = first.len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank,
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == rank && (0..rank).all(|d| d == axis || s[d] == first[d]);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: first,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let e = self.shape(p)[axis];
                let chunk = e * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            "concat",
            parts,
        )
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "slice",
                axis,
                rank: s.len(),
            });
        }
        if len == 0 || start + len > s[axis] {
            return Err(TensorError::InvalidShape {
                shape: s,
                reason: format!("slice [{start}, {}) out of bounds on axis {axis}", start + len),
            });
        }
        let (outer, e, inner) = axis_split(&s, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * e * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Slice { a, axis, start }, "slice", &[a])
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "mean_axis",
                axis,
                rank: s.len(),
            });
        }
        let (outer, e, inner) = axis_split(&s, axis);
        let src = self.value(a).data();
        let inv = T::one() / T::lit(e as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..e {
                let row = &src[(o * e + j) * inner..(o * e + j + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        for x in &mut out {
            *x *= inv;
        }
        let mut shape = s;
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::MeanAxis { a, axis }, "mean_axis", &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a }, "sum_all", &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum::<T>() / T::lit(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::MeanAll { a }, "mean_all", &[a])
    }

    /// Softmax over the last axis of `a / tau`.
    pub fn softmax(&mut self, a: Var, tau: Temperature<T>) -> Result<Var> {
        let (tau_var, tau_value) = match tau {
            Temperature::Fixed(t) => (None, t),
            Temperature::Learned(v) => {
                let t = self.value(v).item().ok_or_else(|| TensorError::InvalidShape {
                    shape: self.shape(v).to_vec(),
                    reason: "temperature must be a scalar".into(),
                })?;
                (Some(v), t)
            }
        };
        if !(tau_value > T::zero()) {
            return Err(TensorError::Domain {
                op: "softmax",
                reason: format!("temperature must be positive, got {tau_value}"),
            });
        }
        let x = self.value(a);
        let d = *x.shape().last().ok_or_else(|| TensorError::InvalidShape {
            shape: vec![],
            reason: "softmax of a scalar".into(),
        })?;
        let mut out = vec![T::zero(); x.numel()];
        for (row, orow) in x.data().chunks(d).zip(out.chunks_mut(d)) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut z = T::zero();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = ((v - mx) / tau_value).exp();
                z += *o;
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let mut parents = vec![a];
        parents.extend(tau_var);
        self.push(
            value,
            Op::Softmax {
                a,
                tau: tau_var,
                tau_value,
            },
            "softmax",
            &parents,
        )
    }

    /// Layer normalization over the last axis with affine `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| TensorError::InvalidShape {
            shape: vec![],
            reason: "layer_norm of a scalar".into(),
        })?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: s,
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / d;
        let inv_d = T::one() / T::lit(d as f64);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(s, out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            "layer_norm",
            &[x, gamma, beta],
        )
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu { a }, "gelu", &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.exp());
        self.push(value, Op::Exp { a }, "exp", &[a])
    }

    /// Absolute value; subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.abs());
        self.push(value, Op::Abs { a }, "abs", &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(value, Op::Clamp { a, lo, hi }, "clamp", &[a])
    }

    /// Scaled dot-product self-attention over `[batch, len, dim]` (or
    /// `[len, dim]`) inputs with `heads` equal-width heads.
    ///
    /// With `identity` set the attention matrix is forced to the identity,
    /// so every position reads only its own value vector.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, identity: bool) -> Result<Var> {
        let s = self.shape(q).to_vec();
        for other in [k, v] {
            if self.shape(other) != s.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "attention",
                    left: s,
                    right: self.shape(other).to_vec(),
                });
            }
        }
        let (batch, len, dim) = match s.as_slice() {
            [l, d] => (1, *l, *d),
            [b, l, d] => (*b, *l, *d),
            _ => {
                return Err(TensorError::InvalidShape {
                    shape: s,
                    reason: "attention expects rank 2 or 3".into(),
                })
            }
        };
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::Domain {
                op: "attention",
                reason: format!("dim {dim} not divisible into {heads} heads"),
            });
        }
        let dh = dim / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![T::zero(); batch * heads * len * len];
        let mut out = vec![T::zero(); batch * len * dim];
        for b in 0..batch {
            let base = b * len * dim;
            for h in 0..heads {
                let off = h * dh;
                let pbase = (b * heads + h) * len * len;
                for i in 0..len {
                    let prow = &mut probs[pbase + i * len..pbase + (i + 1) * len];
                    if identity {
                        prow[i] = T::one();
                    } else {
                        let qi = &qd[base + i * dim + off..base + i * dim + off + dh];
                        let mut mx = T::neg_infinity();
                        for j in 0..len {
                            let kj = &kd[base + j * dim + off..base + j * dim + off + dh];
                            let sc = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<T>() * scale;
                            prow[j] = sc;
                            mx = mx.max(sc);
                        }
                        let mut z = T::zero();
                        for p in prow.iter_mut() {
                            *p = (*p - mx).exp();
                            z += *p;
                        }
                        for p in prow.iter_mut() {
                            *p /= z;
                        }
                    }
                    let orow = &mut out[base + i * dim + off..base + i * dim + off + dh];
                    for j in 0..len {
                        let pij = prow[j];
                        if pij == T::zero() {
                            continue;
                        }
                        let vj = &vd[base + j * dim + off..base + j * dim + off + dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += pij * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(s, out)?;
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            "attention",
            &[q, k, v],
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Mean absolute elementwise difference (scalar).
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_distance", a, b)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let s = x.iter().zip(y).map(|(&p, &q)| (p - q).abs()).sum::<T>() / T::lit(x.len() as f64);
        self.push(Tensor::scalar(s), Op::L1Distance { a, b }, "l1_distance", &[a, b])
    }

    /// Mean squared elementwise difference (scalar).
    pub fn sq_l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sq_l2_distance", a, b)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let s = x.iter().zip(y).map(|(&p, &q)| (p - q) * (p - q)).sum::<T>()
            / T::lit(x.len() as f64);
        self.push(Tensor::scalar(s), Op::SqL2Distance { a, b }, "sq_l2_distance", &[a, b])
    }

    /// Cosine similarity along the last axis; the axis is removed. Norms are
    /// floored at [`COSINE_NORM_FLOOR`].
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let s = self.shape(a).to_vec();
        let d = *s.last().ok_or_else(|| TensorError::InvalidShape {
            shape: vec![],
            reason: "cosine of scalars".into(),
        })?;
        let floor = T::lit(COSINE_NORM_FLOOR);
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let rows = x.len() / d;
        let mut out = Vec::with_capacity(rows);
        let mut na = Vec::with_capacity(rows);
        let mut nb = Vec::with_capacity(rows);
        let mut a_floored = Vec::with_capacity(rows);
        let mut b_floored = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let yr = &y[r * d..(r + 1) * d];
            let dot = xr.iter().zip(yr).map(|(&p, &q)| p * q).sum::<T>();
            let nx = xr.iter().map(|&p| p * p).sum::<T>().sqrt();
            let ny = yr.iter().map(|&p| p * p).sum::<T>().sqrt();
            a_floored.push(nx <= floor);
            b_floored.push(ny <= floor);
            let (nx, ny) = (nx.max(floor), ny.max(floor));
            out.push(dot / (nx * ny));
            na.push(nx);
            nb.push(ny);
        }
        let mut shape = s;
        shape.pop();
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::Cosine {
                a,
                b,
                na,
                nb,
                a_floored,
                b_floored,
            },
            "cosine_similarity",
            &[a, b],
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates `d loss / d node` for every node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            backprop_node(nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    /// Gradient of the last backward pass with respect to `v`, if reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.as_ref()?[v.0].as_ref()?;
        Tensor::new(self.shape(v).to_vec(), g.clone()).ok()
    }

    /// Gradients of all bound parameters, zero-filled where unreachable.
    pub fn param_grads(&self) -> Vec<Tensor<T>> {
        (0..self.n_params)
            .map(|i| {
                self.grad(Var(i)).unwrap_or_else(|| {
                    Tensor::zeros(self.shape(Var(i)).to_vec()).expect("bound shape is valid")
                })
            })
            .collect()
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    target: Var,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[target.0].requires_grad {
        return;
    }
    let buf = grads[target.0].get_or_insert_with(|| vec![T::zero(); nodes[target.0].value.numel()]);
    f(buf);
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            accumulate(nodes, grads, a, |da| matmul_a_bt_acc(g, val(b), da, m, n, k));
            accumulate(nodes, grads, b, |db| matmul_at_b_acc(val(a), g, db, m, k, n));
        }
        &Op::Transpose { a, rows, cols } => accumulate(nodes, grads, a, |da| {
            for r in 0..rows {
                for c in 0..cols {
                    da[r * cols + c] += g[c * rows + r];
                }
            }
        }),
        &Op::Binary { kind, a, b } => {
            let out_shape = node.value.shape();
            let sa = nodes[a.0].value.shape();
            let sb = nodes[b.0].value.shape();
            let same = sa == out_shape && sb == out_shape;
            let ma = (!same).then(|| broadcast_map(sa, out_shape));
            let mb = (!same).then(|| broadcast_map(sb, out_shape));
            let ia = |j: usize| ma.as_ref().map_or(j, |m| m[j]);
            let ib = |j: usize| mb.as_ref().map_or(j, |m| m[j]);
            match kind {
                BinaryKind::Add | BinaryKind::Sub => {
                    accumulate(nodes, grads, a, |da| {
                        for (j, &gj) in g.iter().enumerate() {
                            da[ia(j)] += gj;
                        }
                    });
                    let sgn = if kind == BinaryKind::Sub { -T::one() } else { T::one() };
                    accumulate(nodes, grads, b, |db| {
                        for (j, &gj) in g.iter().enumerate() {
                            db[ib(j)] += sgn * gj;
                        }
                    });
                }
                BinaryKind::Mul => {
                    let (xa, xb) = (val(a), val(b));
                    accumulate(nodes, grads, a, |da| {
                        for (j, &gj) in g.iter().enumerate() {
                            da[ia(j)] += gj * xb[ib(j)];
                        }
                    });
                    accumulate(nodes, grads, b, |db| {
                        for (j, &gj) in g.iter().enumerate() {
                            db[ib(j)] += gj * xa[ia(j)];
                        }
                    });
                }
            }
        }
        &Op::Scale { a, factor } => accumulate(nodes, grads, a, |da| {
            for (d, &gj) in da.iter_mut().zip(g) {
                *d += factor * gj;
            }
        }),
        &Op::BroadcastTo { a } => {
            let map = broadcast_map(nodes[a.0].value.shape(), node.value.shape());
            accumulate(nodes, grads, a, |da| {
                for (j, &gj) in g.iter().enumerate() {
                    da[map[j]] += gj;
                }
            });
        }
        &Op::Reshape { a } => accumulate(nodes, grads, a, |da| {
            for (d, &gj) in da.iter_mut().zip(g) {
                *d += gj;
            }
        }),
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = axis_split(node.value.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let e = nodes[p.0].value.shape()[*axis];
                accumulate(nodes, grads, p, |dp| {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + e) * inner];
                        for (d, &gj) in dp[o * e * inner..(o + 1) * e * inner].iter_mut().zip(src) {
                            *d += gj;
                        }
                    }
                });
                offset += e;
            }
        }
        &Op::Slice { a, axis, start } => {
            let (outer, e, inner) = axis_split(nodes[a.0].value.shape(), axis);
            let len = node.value.shape()[axis];
            accumulate(nodes, grads, a, |da| {
                for o in 0..outer {
                    let base = o * e * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (d, &gj) in da[base..base + len * inner].iter_mut().zip(src) {
                        *d += gj;
                    }
                }
            });
        }
        &Op::MeanAxis { a, axis } => {
            let (outer, e, inner) = axis_split(nodes[a.0].value.shape(), axis);
            let inv = T::one() / T::lit(e as f64);
            accumulate(nodes, grads, a, |da| {
                for o in 0..outer {
                    for j in 0..e {
                        for t in 0..inner {
                            da[(o * e + j) * inner + t] += g[o * inner + t] * inv;
                        }
                    }
                }
            });
        }
        &Op::SumAll { a } => accumulate(nodes, grads, a, |da| {
            for d in da.iter_mut() {
                *d += g[0];
            }
        }),
        &Op::MeanAll { a } => {
            let inv = T::one() / T::lit(nodes[a.0].value.numel() as f64);
            accumulate(nodes, grads, a, |da| {
                for d in da.iter_mut() {
                    *d += g[0] * inv;
                }
            });
        }
        &Op::Softmax { a, tau, tau_value } => {
            let y = node.value.data();
            let d = *node.value.shape().last().unwrap();
            let mut dz = vec![T::zero(); y.len()];
            for ((yr, gr), zr) in y.chunks(d).zip(g.chunks(d)).zip(dz.chunks_mut(d)) {
                let s: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                for ((z, &p), &q) in zr.iter_mut().zip(yr).zip(gr) {
                    *z = p * (q - s);
                }
            }
            accumulate(nodes, grads, a, |da| {
                for (d, &z) in da.iter_mut().zip(&dz) {
                    *d += z / tau_value;
                }
            });
            if let Some(t) = tau {
                let x = val(a);
                let s: T = dz.iter().zip(x).map(|(&z, &xi)| z * xi).sum();
                accumulate(nodes, grads, t, |dt| dt[0] -= s / (tau_value * tau_value));
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gm = val(*gamma);
            let d = gm.len();
            let rows = xhat.len() / d;
            accumulate(nodes, grads, *beta, |db| {
                for r in 0..rows {
                    for j in 0..d {
                        db[j] += g[r * d + j];
                    }
                }
            });
            accumulate(nodes, grads, *gamma, |dg| {
                for r in 0..rows {
                    for j in 0..d {
                        dg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            });
            let dn = T::lit(d as f64);
            accumulate(nodes, grads, *x, |dx| {
                let mut dxh = vec![T::zero(); d];
                for r in 0..rows {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        let v = g[r * d + j] * gm[j];
                        dxh[j] = v;
                        s1 += v;
                        s2 += v * xhat[r * d + j];
                    }
                    let c = rstd[r] / dn;
                    for j in 0..d {
                        dx[r * d + j] += c * (dn * dxh[j] - s1 - xhat[r * d + j] * s2);
                    }
                }
            });
        }
        &Op::Gelu { a } => {
            let x = val(a);
            accumulate(nodes, grads, a, |da| {
                for ((d, &gj), &xi) in da.iter_mut().zip(g).zip(x) {
                    *d += gj * gelu_grad(xi);
                }
            });
        }
        &Op::Exp { a } => {
            let y = node.value.data();
            accumulate(nodes, grads, a, |da| {
                for ((d, &gj), &yi) in da.iter_mut().zip(g).zip(y) {
                    *d += gj * yi;
                }
            });
        }
        &Op::Abs { a } => {
            let x = val(a);
            accumulate(nodes, grads, a, |da| {
                for ((d, &gj), &xi) in da.iter_mut().zip(g).zip(x) {
                    *d += gj * sign(xi);
                }
            });
        }
        &Op::Clamp { a, lo, hi } => {
            let x = val(a);
            accumulate(nodes, grads, a, |da| {
                for ((d, &gj), &xi) in da.iter_mut().zip(g).zip(x) {
                    if xi >= lo && xi <= hi {
                        *d += gj;
                    }
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        } => attention_backward(nodes, grads, g, *q, *k, *v, *heads, probs),
        &Op::L1Distance { a, b } => {
            let (x, y) = (val(a), val(b));
            let c = g[0] / T::lit(x.len() as f64);
            accumulate(nodes, grads, a, |da| {
                for ((d, &p), &q) in da.iter_mut().zip(x).zip(y) {
                    *d += c * sign(p - q);
                }
            });
            accumulate(nodes, grads, b, |db| {
                for ((d, &p), &q) in db.iter_mut().zip(x).zip(y) {
                    *d -= c * sign(p - q);
                }
            });
        }
        &Op::SqL2Distance { a, b } => {
            let (x, y) = (val(a), val(b));
            let c = T::lit(2.0) * g[0] / T::lit(x.len() as f64);
            accumulate(nodes, grads, a, |da| {
                for ((d, &p), &q) in da.iter_mut().zip(x).zip(y) {
                    *d += c * (p - q);
                }
            });
            accumulate(nodes, grads, b, |db| {
                for ((d, &p), &q) in db.iter_mut().zip(x).zip(y) {
                    *d -= c * (p - q);
                }
            });
        }
        Op::Cosine {
            a,
            b,
            na,
            nb,
            a_floored,
            b_floored,
        } => {
            let (x, y) = (val(*a), val(*b));
            let cos = node.value.data();
            let d = x.len() / cos.len().max(1);
            accumulate(nodes, grads, *a, |da| {
                for r in 0..cos.len() {
                    let inv = T::one() / (na[r] * nb[r]);
                    for j in 0..d {
                        let mut t = y[r * d + j] * inv;
                        if !a_floored[r] {
                            t -= cos[r] * x[r * d + j] / (na[r] * na[r]);
                        }
                        da[r * d + j] += g[r] * t;
                    }
                }
            });
            accumulate(nodes, grads, *b, |db| {
                for r in 0..cos.len() {
                    let inv = T::one() / (na[r] * nb[r]);
                    for j in 0..d {
                        let mut t = x[r * d + j] * inv;
                        if !b_floored[r] {
                            t -= cos[r] * y[r * d + j] / (nb[r] * nb[r]);
                        }
                        db[r * d + j] += g[r] * t;
                    }
                }
            });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    probs: &[T],
) {
    let s = nodes[q.0].value.shape();
    let (batch, len, dim) = match s {
        [l, d] => (1, *l, *d),
        [b, l, d] => (*b, *l, *d),
        _ => unreachable!("checked in forward"),
    };
    let dh = dim / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let (qd, kd, vd) = (
        nodes[q.0].value.data(),
        nodes[k.0].value.data(),
        nodes[v.0].value.data(),
    );
    let n = batch * len * dim;
    let mut dq = vec![T::zero(); n];
    let mut dk = vec![T::zero(); n];
    let mut dv = vec![T::zero(); n];
    let mut dp = vec![T::zero(); len];
    for b in 0..batch {
        let base = b * len * dim;
        for h in 0..heads {
            let off = h * dh;
            let pbase = (b * heads + h) * len * len;
            for i in 0..len {
                let prow = &probs[pbase + i * len..pbase + (i + 1) * len];
                let gi = &g[base + i * dim + off..base + i * dim + off + dh];
                let mut dot = T::zero();
                for j in 0..len {
                    let vj = &vd[base + j * dim + off..base + j * dim + off + dh];
                    dp[j] = gi.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                    dot += prow[j] * dp[j];
                    let pij = prow[j];
                    if pij != T::zero() {
                        for (t, &x) in dv[base + j * dim + off..base + j * dim + off + dh]
                            .iter_mut()
                            .zip(gi)
                        {
                            *t += pij * x;
                        }
                    }
                }
                let qi_start = base + i * dim + off;
                for j in 0..len {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj_start = base + j * dim + off;
                    for t in 0..dh {
                        dq[qi_start + t] += ds * kd[kj_start + t];
                        dk[kj_start + t] += ds * qd[qi_start + t];
                    }
                }
            }
        }
    }
    for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
        accumulate(nodes, grads, var, |d| {
            for (x, y) in d.iter_mut().zip(&buf) {
                *x += *y;
            }
        });
    }
}
