use std::sync::Arc;

use rand::Rng;

use super::{split_axis, ParamId, ParamStore, Real, Result, Tensor, TensorError};

/// Label value skipped by [`Tape::cross_entropy`].
pub const IGNORE: i64 = -1;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: T },
    Reshape { x: usize },
    Permute { x: usize, perm: Vec<usize> },
    Narrow { x: usize, axis: usize, start: usize },
    IndexSelect { x: usize, ids: Vec<usize> },
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, axis: usize, rstd: Vec<T> },
    Gelu { x: usize },
    Tanh { x: usize },
    Relu { x: usize },
    Dropout { x: usize, mask: Vec<T> },
    CrossEntropy { logits: usize, labels: Vec<i64>, probs: Vec<T>, count: usize },
    Sum { x: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    training: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaf_grads: Vec::new(), training: false }
    }

    /// A tape in training mode: dropout is active.
    pub fn training() -> Self {
        Self { training: true, ..Self::new() }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad, None)
    }

    fn push_shared(&mut self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// An untracked input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A tracked input whose gradient is kept after [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A tracked leaf bound to a parameter of `store`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let value = Arc::clone(&store.get(id).value);
        self.push_shared(value, Op::Leaf, true, Some(id))
    }

    /// Like [`Tape::param`] but untracked (frozen).
    pub fn frozen(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let value = Arc::clone(&store.get(id).value);
        self.push_shared(value, Op::Leaf, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a tracked leaf; `None` for untracked values.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad || !matches!(node.op, Op::Leaf) {
            return None;
        }
        let data = self.leaf_grads[v.0].clone().unwrap_or_else(|| vec![T::zero(); node.value.len()]);
        Some(Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"))
    }

    /// Moves parameter gradients accumulated on this tape into `store`.
    pub fn flush_grads(&mut self, store: &mut ParamStore<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, self.leaf_grads[i].take()) {
                for (dst, src) in store.get_mut(id).grad.iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    // ---- forward operations ----

    /// Matrix product. `a` is `[.., m, k]`; `b` is either `[k, n]` (shared
    /// across the leading extents of `a`) or `[.., k, n]` with the same
    /// leading extents. With `trans_b`, `b` is stored as `[.., n, k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        let plan = MatMulPlan::new(av.shape(), bv.shape(), trans_b)?;
        let mut out = vec![T::zero(); plan.out_shape.iter().product()];
        plan.forward(av.data(), bv.data(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(plan.out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0, trans_b }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (av, bv) = (self.val(a), self.val(b));
        let out_shape = broadcast_shape(av.shape(), bv.shape(), name)?;
        let ia = BroadcastIndex::new(&out_shape, av.shape());
        let ib = BroadcastIndex::new(&out_shape, bv.shape());
        let n: usize = out_shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let out = (0..n).map(|i| f(ad[ia.at(i)], bd[ib.at(i)])).collect();
        Ok((Tensor::new(out_shape, out)?, self.rg(a) || self.rg(b)))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a: a.0, b: b.0 }, rg))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let xv = self.val(x);
        let data = xv.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Scale { x: x.0, c }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = Arc::clone(&self.nodes[x.0].value);
        let value = (*value).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x: x.0 }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.val(x);
        let rank = xv.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::ShapeMismatch { op: "permute", left: xv.shape().to_vec(), right: perm.to_vec() });
        }
        let (shape, data) = permute_data(xv.shape(), xv.data(), perm);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Permute { x: x.0, perm: perm.to_vec() }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(TensorError::BadAxis { axis: 1, rank });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.val(x);
        let (outer, extent, inner) = split_axis(xv.shape(), axis)?;
        if start + len > extent {
            return Err(TensorError::IndexOutOfRange { index: start + len, extent });
        }
        let src = xv.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Narrow { x: x.0, axis, start }, rg))
    }

    /// Gathers rows along axis 0 (embedding lookup when `x` is a table).
    pub fn index_select(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let xv = self.val(x);
        if xv.rank() == 0 {
            return Err(TensorError::BadAxis { axis: 0, rank: 0 });
        }
        let rows = xv.shape()[0];
        let width: usize = xv.shape()[1..].iter().product();
        let src = xv.data();
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange { index: id, extent: rows });
            }
            out.extend_from_slice(&src[id * width..(id + 1) * width]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = ids.len();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::IndexSelect { x: x.0, ids: ids.to_vec() }, rg))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.val(x);
        let (outer, extent, inner) = split_axis(xv.shape(), axis)?;
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| o * extent * inner + a * inner + i;
                let max = (0..extent).map(|a| src[at(a)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for a in 0..extent {
                    let e = (src[at(a)] - max).exp();
                    out[at(a)] = e;
                    total += e;
                }
                for a in 0..extent {
                    out[at(a)] = out[at(a)] / total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(xv.shape().to_vec(), out)?, Op::Softmax { x: x.0, axis }, rg))
    }

    /// Normalizes to zero mean and unit variance along `axis` (no affine).
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let xv = self.val(x);
        let (outer, extent, inner) = split_axis(xv.shape(), axis)?;
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        let n = T::from_usize(extent).expect("extent");
        let eps = T::lit(eps);
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| o * extent * inner + a * inner + i;
                let mean = (0..extent).map(|a| src[at(a)]).sum::<T>() / n;
                let var = (0..extent).map(|a| (src[at(a)] - mean).powi(2)).sum::<T>() / n;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for a in 0..extent {
                    out[at(a)] = (src[at(a)] - mean) * r;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(xv.shape().to_vec(), out)?, Op::LayerNorm { x: x.0, axis, rstd }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T) -> (Tensor<T>, bool) {
        let xv = self.val(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        (Tensor::new(xv.shape().to_vec(), data).expect("same shape"), self.rg(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (value, rg) = self.unary(x, gelu_tanh);
        self.push(value, Op::Gelu { x: x.0 }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let (value, rg) = self.unary(x, |v| v.tanh());
        self.push(value, Op::Tanh { x: x.0 }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (value, rg) = self.unary(x, |v| v.max(T::zero()));
        self.push(value, Op::Relu { x: x.0 }, rg)
    }

    /// Inverted dropout. Identity when `p == 0` or the tape is not training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::BadDropout(p));
        }
        if p == 0.0 || !self.training {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let n = self.val(x).len();
        let mask: Vec<T> = (0..n).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
        let xv = self.val(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Dropout { x: x.0, mask }, rg))
    }

    /// Mean cross-entropy over rows of `logits` (last axis = classes),
    /// skipping rows labelled [`IGNORE`].
    pub fn cross_entropy(&mut self, logits: Var, labels: &[i64]) -> Result<Var> {
        let lv = self.val(logits);
        let classes = *lv.shape().last().ok_or(TensorError::BadAxis { axis: 0, rank: 0 })?;
        let rows = lv.len().checked_div(classes).unwrap_or(0);
        if rows != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let src = lv.data();
        let mut probs = vec![T::zero(); src.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, &label) in labels.iter().enumerate() {
            if label == IGNORE {
                continue;
            }
            if label < 0 || label as usize >= classes {
                return Err(TensorError::LabelOutOfRange { label, classes });
            }
            let row = &src[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum = row.iter().map(|&z| (z - max).exp()).sum::<T>();
            let log_z = max + sum.ln();
            for (c, &z) in row.iter().enumerate() {
                probs[r * classes + c] = (z - log_z).exp();
            }
            total += log_z - row[label as usize];
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::NoSupervisedPositions);
        }
        let loss = total / T::from_usize(count).expect("count");
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), probs, count },
            rg,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.val(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum { x: x.0 }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.val(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_usize(n).expect("n"))
    }

    // ---- backward ----

    /// Back-propagates from a scalar `loss`, accumulating into tracked leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.nodes[loss.0].value.len() != 1 || shape.iter().any(|&d| d != 1) {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[idx] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let plan = MatMulPlan::new(av.shape(), bv.shape(), *trans_b).expect("validated");
                if wants(*a) {
                    plan.grad_a(g, bv.data(), slot(grads, *a, av.len()));
                }
                if wants(*b) {
                    plan.grad_b(g, av.data(), slot(grads, *b, bv.len()));
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let neg = matches!(node.op, Op::Sub { .. });
                for (i, sign) in [(*a, false), (*b, neg)] {
                    if wants(i) {
                        let shape = nodes[i].value.shape();
                        let map = BroadcastIndex::new(out.shape(), shape);
                        let dst = slot(grads, i, nodes[i].value.len());
                        for (k, &gk) in g.iter().enumerate() {
                            let v = if sign { -gk } else { gk };
                            dst[map.at(k)] += v;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let ia = BroadcastIndex::new(out.shape(), av.shape());
                let ib = BroadcastIndex::new(out.shape(), bv.shape());
                if wants(*a) {
                    let dst = slot(grads, *a, av.len());
                    for (k, &gk) in g.iter().enumerate() {
                        dst[ia.at(k)] += gk * bv.data()[ib.at(k)];
                    }
                }
                if wants(*b) {
                    let dst = slot(grads, *b, bv.len());
                    for (k, &gk) in g.iter().enumerate() {
                        dst[ib.at(k)] += gk * av.data()[ia.at(k)];
                    }
                }
            }
            Op::Scale { x, c } => {
                let dst = slot(grads, *x, g.len());
                dst.iter_mut().zip(g).for_each(|(d, &gk)| *d += gk * *c);
            }
            Op::Reshape { x } => {
                let dst = slot(grads, *x, g.len());
                dst.iter_mut().zip(g).for_each(|(d, &gk)| *d += gk);
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, back) = permute_data(out.shape(), g, &inverse);
                let dst = slot(grads, *x, g.len());
                dst.iter_mut().zip(back).for_each(|(d, gk)| *d += gk);
            }
            Op::Narrow { x, axis, start } => {
                let xv = &nodes[*x].value;
                let (outer, extent, inner) = split_axis(xv.shape(), *axis).expect("validated");
                let len = out.shape()[*axis];
                let dst = slot(grads, *x, xv.len());
                for o in 0..outer {
                    let base = o * extent * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dst[base..base + len * inner].iter_mut().zip(src).for_each(|(d, &gk)| *d += gk);
                }
            }
            Op::IndexSelect { x, ids } => {
                let xv = &nodes[*x].value;
                let width: usize = xv.shape()[1..].iter().product();
                let dst = slot(grads, *x, xv.len());
                for (r, &id) in ids.iter().enumerate() {
                    dst[id * width..(id + 1) * width]
                        .iter_mut()
                        .zip(&g[r * width..(r + 1) * width])
                        .for_each(|(d, &gk)| *d += gk);
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, extent, inner) = split_axis(out.shape(), *axis).expect("validated");
                let y = out.data();
                let dst = slot(grads, *x, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| o * extent * inner + a * inner + i;
                        let dot = (0..extent).map(|a| g[at(a)] * y[at(a)]).sum::<T>();
                        for a in 0..extent {
                            dst[at(a)] += y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, axis, rstd } => {
                let (outer, extent, inner) = split_axis(out.shape(), *axis).expect("validated");
                let y = out.data();
                let n = T::from_usize(extent).expect("extent");
                let dst = slot(grads, *x, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| o * extent * inner + a * inner + i;
                        let mean_g = (0..extent).map(|a| g[at(a)]).sum::<T>() / n;
                        let mean_gy = (0..extent).map(|a| g[at(a)] * y[at(a)]).sum::<T>() / n;
                        let r = rstd[o * inner + i];
                        for a in 0..extent {
                            dst[at(a)] += r * (g[at(a)] - mean_g - y[at(a)] * mean_gy);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xs = nodes[*x].value.data();
                let dst = slot(grads, *x, xs.len());
                for ((d, &gk), &v) in dst.iter_mut().zip(g).zip(xs) {
                    *d += gk * gelu_tanh_grad(v);
                }
            }
            Op::Tanh { x } => {
                let dst = slot(grads, *x, g.len());
                for ((d, &gk), &y) in dst.iter_mut().zip(g).zip(out.data()) {
                    *d += gk * (T::one() - y * y);
                }
            }
            Op::Relu { x } => {
                let xs = nodes[*x].value.data();
                let dst = slot(grads, *x, xs.len());
                for ((d, &gk), &v) in dst.iter_mut().zip(g).zip(xs) {
                    if v > T::zero() {
                        *d += gk;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let dst = slot(grads, *x, g.len());
                for ((d, &gk), &m) in dst.iter_mut().zip(g).zip(mask) {
                    *d += gk * m;
                }
            }
            Op::CrossEntropy { logits, labels, probs, count } => {
                let classes = *nodes[*logits].value.shape().last().expect("rank");
                let scale = g[0] / T::from_usize(*count).expect("count");
                let dst = slot(grads, *logits, probs.len());
                for (r, &label) in labels.iter().enumerate() {
                    if label == IGNORE {
                        continue;
                    }
                    for c in 0..classes {
                        let target = if c as i64 == label { T::one() } else { T::zero() };
                        dst[r * classes + c] += scale * (probs[r * classes + c] - target);
                    }
                }
            }
            Op::Sum { x } => {
                let n = nodes[*x].value.len();
                let dst = slot(grads, *x, n);
                dst.iter_mut().for_each(|d| *d += g[0]);
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], i: usize, len: usize) -> &mut Vec<T> {
    grads[i].get_or_insert_with(|| vec![T::zero(); len])
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_tanh<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_tanh_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize], i: usize| {
        let off = rank - s.len();
        if i < off {
            1
        } else {
            s[i - off]
        }
    };
    (0..rank)
        .map(|i| match (pad(a, i), pad(b, i)) {
            (x, y) if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(TensorError::ShapeMismatch { op, left: a.to_vec(), right: b.to_vec() }),
        })
        .collect()
}

/// Maps flat output indices to flat operand indices under broadcasting.
enum BroadcastIndex {
    Same,
    /// Operand repeats every `len` elements (trailing-suffix broadcast).
    Cycle(usize),
    Table(Vec<usize>),
}

impl BroadcastIndex {
    fn new(out: &[usize], operand: &[usize]) -> Self {
        let n_op: usize = operand.iter().product();
        let n_out: usize = out.iter().product();
        if n_op == n_out {
            return Self::Same;
        }
        let trimmed: Vec<usize> = operand.iter().copied().skip_while(|&d| d == 1).collect();
        if out.ends_with(&trimmed) {
            return Self::Cycle(n_op.max(1));
        }
        let rank = out.len();
        let off = rank - operand.len();
        let mut strides = vec![0usize; rank];
        let mut acc = 1;
        for i in (0..operand.len()).rev() {
            if operand[i] != 1 {
                strides[i + off] = acc;
            }
            acc *= operand[i];
        }
        let mut table = Vec::with_capacity(n_out);
        let mut idx = vec![0usize; rank];
        for _ in 0..n_out {
            table.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Self::Table(table)
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Self::Same => i,
            Self::Cycle(n) => i % n,
            Self::Table(t) => t[i],
        }
    }
}

fn permute_data<T: Copy>(shape: &[usize], data: &[T], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 {
        out.extend_from_slice(data);
        return (out_shape, out);
    }
    // innermost axis handled as a strided run
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let runs = data.len() / out_shape[last].max(1);
    for _ in 0..runs {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        for j in 0..out_shape[last] {
            out.push(data[base + j * strides[last]]);
        }
        for ax in (0..last).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

struct MatMulPlan {
    batch: usize,
    /// `b` shared across the batch.
    shared_b: bool,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
    out_shape: Vec<usize>,
}

impl MatMulPlan {
    fn new(a: &[usize], b: &[usize], trans_b: bool) -> Result<Self> {
        let err = || TensorError::ShapeMismatch { op: "matmul", left: a.to_vec(), right: b.to_vec() };
        if a.len() < 2 || b.len() < 2 {
            return Err(err());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (bk, n) = if trans_b { (b[b.len() - 1], b[b.len() - 2]) } else { (b[b.len() - 2], b[b.len() - 1]) };
        if bk != k {
            return Err(err());
        }
        let lead = &a[..a.len() - 2];
        let batch = lead.iter().product();
        let shared_b = b.len() == 2;
        if !shared_b && &b[..b.len() - 2] != lead {
            return Err(err());
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        Ok(Self { batch, shared_b, m, k, n, trans_b, out_shape })
    }

    fn b_strides(&self) -> (usize, usize) {
        if self.trans_b {
            (1, self.k)
        } else {
            (self.n, 1)
        }
    }

    fn forward<T: Real>(&self, a: &[T], b: &[T], out: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.shared_b {
            T::gemm(self.batch * m, k, n, a, (k, 1), b, self.b_strides(), T::zero(), out);
            return;
        }
        for i in 0..self.batch {
            T::gemm(
                m,
                k,
                n,
                &a[i * m * k..],
                (k, 1),
                &b[i * k * n..],
                self.b_strides(),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
    }

    /// dA = dC · Bᵀ
    fn grad_a<T: Real>(&self, g: &[T], b: &[T], da: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        // Bᵀ as an n × k matrix
        let bt = if self.trans_b { (k, 1) } else { (1, n) };
        if self.shared_b {
            T::gemm(self.batch * m, n, k, g, (n, 1), b, bt, T::one(), da);
            return;
        }
        for i in 0..self.batch {
            T::gemm(
                m,
                n,
                k,
                &g[i * m * n..],
                (n, 1),
                &b[i * k * n..],
                bt,
                T::one(),
                &mut da[i * m * k..(i + 1) * m * k],
            );
        }
    }

    /// dB = Aᵀ · dC (or its transpose when `b` is stored transposed).
    fn grad_b<T: Real>(&self, g: &[T], a: &[T], db: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        let (rows, per) = if self.shared_b { (self.batch * m, 1) } else { (m, self.batch) };
        for i in 0..per {
            let (ga, aa) = (&g[i * rows * n..], &a[i * rows * k..]);
            let dst = if self.shared_b { &mut db[..] } else { &mut db[i * k * n..(i + 1) * k * n] };
            if self.trans_b {
                // dB (n × k) = dCᵀ · A
                T::gemm(n, rows, k, ga, (1, n), aa, (k, 1), T::one(), dst);
            } else {
                // dB (k × n) = Aᵀ · dC
                T::gemm(k, rows, n, aa, (1, k), ga, (n, 1), T::one(), dst);
            }
        }
    }
}
