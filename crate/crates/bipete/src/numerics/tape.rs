//! Flat-tape reverse-mode differentiation.
//!
//! Ops append nodes in topological order by construction; [`Tape::backward`]
//! seeds the (scalar) root with 1 and walks the tape in reverse, dispatching
//! one vector-Jacobian product per op kind. Evaluation order is fixed, so two
//! runs of the same graph on the same inputs are bit-identical.

use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    /// Batched matmul over a shared leading axis: `[B,m,k] x [B,k,n]`.
    Bmm(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Elementwise `a*x + b` with scalar constants.
    Affine { x: Var, a: T, b: T },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    /// Swap the last two axes.
    Transpose(Var),
    /// Softmax over the last axis.
    Softmax(Var),
    /// Layer norm over the last axis, population variance, then `gamma*xhat + beta`.
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T },
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    /// Row gather from a 2-D table; rows may repeat.
    Gather { table: Var, ids: Vec<u32> },
    /// Keep entries where the mask is true, replace the rest with `fill`.
    /// The mask covers either the last axis or every element.
    MaskedFill { x: Var, mask: Vec<bool>, fill: T },
    /// Rotate consecutive element pairs `(2i, 2i+1)` by per-pair angles.
    RotatePairs { x: Var, angles: Vec<T> },
    Reshape(Var),
    /// `[L, H*dh] -> [H, L, dh]`.
    SplitHeads { x: Var, heads: usize },
    /// `[H, L, dh] -> [L, H*dh]`.
    MergeHeads(Var),
    /// Mean binary cross-entropy computed from logits in log-space.
    BceWithLogits { logits: Var, targets: Vec<T> },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Gradient map produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf; zeros when the leaf did not reach the root.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

/// Recorded computation graph.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn stable_sigmoid<T: Element>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Element>(x: T) -> T {
    // max(x,0) + ln(1 + exp(-|x|))
    let m = if x > T::zero() { x } else { T::zero() };
    m + (T::one() + (-x.abs()).exp()).ln()
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Constant input: gradients are not tracked through it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Differentiable input.
    pub fn leaf_grad(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?, req))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape {
                op: "bmm",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bsz * m * n];
        for i in 0..bsz {
            matmul_nn(
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Bmm(a, b), Tensor::new(vec![bsz, m, n], out)?, req))
    }

    /// Elementwise add; `b` may broadcast over leading axes of `a`
    /// (its shape must be a suffix of `a`'s).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if !sa.ends_with(&sb) {
            return Err(Error::Shape {
                op: "add",
                detail: format!("{:?} + {:?}", sa, sb),
            });
        }
        let bd = self.value(b).data();
        let chunk = bd.len().max(1);
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % chunk])
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add(a, b), Tensor::new(sa, data)?, req))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Sub(a, b), Tensor::new(shape, data)?, req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Mul(a, b), Tensor::new(shape, data)?, req))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                op: if op == "sub" { "sub" } else { "mul" },
                detail: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        Ok(())
    }

    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let (aa, bb) = (T::from_f64(a), T::from_f64(b));
        let data: Vec<T> = self.value(x).data().iter().map(|&v| aa * v + bb).collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.requires(x);
        self.push(Op::Affine { x, a: aa, b: bb }, Tensor::from_parts(shape, data), req)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Shape {
                op: "concat",
                detail: format!("axis {} for rank {}", axis, first.len()),
            });
        }
        let mut axis_total = 0usize;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Shape {
                    op: "concat",
                    detail: format!("{:?} vs {:?} on axis {}", s, first, axis),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![T::zero(); shape.iter().product()];
        let out_stride = axis_total * inner;
        let mut offset = 0usize;
        for &v in inputs {
            let t = self.value(v);
            let len_axis = t.shape()[axis];
            let block = len_axis * inner;
            for o in 0..outer {
                let src = &t.data()[o * block..(o + 1) * block];
                data[o * out_stride + offset..o * out_stride + offset + block]
                    .copy_from_slice(src);
            }
            offset += block;
        }
        let req = inputs.iter().any(|&v| self.requires(v));
        Ok(self.push(
            Op::Concat { inputs: inputs.to_vec(), axis },
            Tensor::new(shape, data)?,
            req,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::Shape {
                op: "slice",
                detail: format!("[{}, {}+{}) of {:?}", axis, start, len, s),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut shape = s.clone();
        shape[axis] = len;
        let mut data = vec![T::zero(); outer * len * inner];
        let src_stride = s[axis] * inner;
        for o in 0..outer {
            let src = &self.value(x).data()[o * src_stride + start * inner..][..len * inner];
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let req = self.requires(x);
        Ok(self.push(Op::Slice { x, axis, start }, Tensor::new(shape, data)?, req))
    }

    /// Swap the last two axes (plain transpose for 2-D).
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() < 2 {
            return Err(Error::Shape {
                op: "transpose",
                detail: format!("rank {} < 2", s.len()),
            });
        }
        let value = transpose_last2(self.value(x));
        let req = self.requires(x);
        Ok(self.push(Op::Transpose(x), value, req))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.is_empty() {
            return Err(Error::Shape { op: "softmax", detail: "scalar input".into() });
        }
        let n = *s.last().unwrap();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            let mut mx = row[0];
            for &v in row.iter() {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let req = self.requires(x);
        Ok(self.push(Op::Softmax(x), Tensor::new(s, data)?, req))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        let n = *s.last().ok_or(Error::Shape { op: "layer_norm", detail: "scalar input".into() })?;
        if self.value(gamma).shape() != [n] || self.value(beta).shape() != [n] {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!(
                    "gamma {:?} / beta {:?} vs feature dim {}",
                    self.value(gamma).shape(),
                    self.value(beta).shape(),
                    n
                ),
            });
        }
        let epst = T::from_f64(eps);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            let (mu, inv_s) = row_moments(row, epst);
            for (j, v) in row.iter_mut().enumerate() {
                *v = g[j] * ((*v - mu) * inv_s) + b[j];
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps: epst }, Tensor::new(s, data)?, req))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| stable_sigmoid(v), Op::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|v| *v <= T::zero()) {
            return Err(Error::Domain("log of nonpositive value".into()));
        }
        Ok(self.unary(x, |v| v.ln(), Op::Log))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let k = T::from_f64(0.044_715);
        let half = T::from_f64(0.5);
        self.unary(
            x,
            |v| {
                let u = c * (v + k * v * v * v);
                half * v * (T::one() + u.tanh())
            },
            Op::Gelu,
        )
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: impl Fn(Var) -> Op<T>) -> Var {
        let data: Vec<T> = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.requires(x);
        self.push(op(x), Tensor::from_parts(shape, data), req)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let req = self.requires(x);
        self.push(Op::Sum(x), Tensor::scalar(acc), req)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_f64(self.value(x).numel() as f64);
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let req = self.requires(x);
        self.push(Op::Mean(x), Tensor::scalar(acc / n), req)
    }

    /// Gather rows of a 2-D table. Used for token-embedding lookup and for
    /// picking per-step rows out of a flattened `[B*L, d]` activation block.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let s = self.value(table).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "gather",
                detail: format!("table rank {} != 2", s.len()),
            });
        }
        let (rows, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= rows) {
            return Err(Error::Range(format!("gather id {} out of {} rows", bad, rows)));
        }
        let mut data = vec![T::zero(); ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            data[i * d..(i + 1) * d]
                .copy_from_slice(&self.value(table).data()[id as usize * d..][..d]);
        }
        let req = self.requires(table);
        Ok(self.push(
            Op::Gather { table, ids: ids.to_vec() },
            Tensor::new(vec![ids.len(), d], data)?,
            req,
        ))
    }

    /// Replace entries whose mask position is false with `fill`.
    /// `mask.len()` must equal the last-axis extent (applied per row) or the
    /// full element count.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], fill: f64) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        let n = *s.last().unwrap_or(&1);
        if mask.len() != n && mask.len() != self.value(x).numel() {
            return Err(Error::Shape {
                op: "masked_fill",
                detail: format!("mask len {} vs last axis {} / numel {}", mask.len(), n, self.value(x).numel()),
            });
        }
        let fillt = T::from_f64(fill);
        let m = mask.len();
        let data: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if mask[i % m] { v } else { fillt })
            .collect();
        let req = self.requires(x);
        Ok(self.push(
            Op::MaskedFill { x, mask: mask.to_vec(), fill: fillt },
            Tensor::new(s, data)?,
            req,
        ))
    }

    /// Rotate consecutive pairs `(2i, 2i+1)` by `angles[i]` (counterclockwise).
    pub fn rotate_pairs(&mut self, x: Var, angles: &[T]) -> Result<Var> {
        let numel = self.value(x).numel();
        if numel % 2 != 0 || angles.len() != numel / 2 {
            return Err(Error::Shape {
                op: "rotate_pairs",
                detail: format!("{} elements vs {} angles", numel, angles.len()),
            });
        }
        let value = rotate_pairs_raw(self.value(x), angles, false);
        let req = self.requires(x);
        Ok(self.push(Op::RotatePairs { x, angles: angles.to_vec() }, value, req))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let req = self.requires(x);
        Ok(self.push(Op::Reshape(x), value, req))
    }

    /// `[L, H*dh] -> [H, L, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 || s[1] % heads != 0 {
            return Err(Error::Shape {
                op: "split_heads",
                detail: format!("{:?} into {} heads", s, heads),
            });
        }
        let (l, d) = (s[0], s[1]);
        let dh = d / heads;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); l * d];
        for h in 0..heads {
            for t in 0..l {
                let dst = (h * l + t) * dh;
                let from = t * d + h * dh;
                data[dst..dst + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
        let req = self.requires(x);
        Ok(self.push(Op::SplitHeads { x, heads }, Tensor::new(vec![heads, l, dh], data)?, req))
    }

    /// `[H, L, dh] -> [L, H*dh]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::Shape {
                op: "merge_heads",
                detail: format!("rank {} != 3", s.len()),
            });
        }
        let (h, l, dh) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); h * l * dh];
        for hh in 0..h {
            for t in 0..l {
                let dst = t * h * dh + hh * dh;
                let from = (hh * l + t) * dh;
                data[dst..dst + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
        let req = self.requires(x);
        Ok(self.push(Op::MergeHeads(x), Tensor::new(vec![l, h * dh], data)?, req))
    }

    /// Mean binary cross-entropy against 0/1 targets, computed from logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let v = self.value(logits);
        if v.shape().len() != 1 || v.numel() != targets.len() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                detail: format!("logits {:?} vs {} targets", v.shape(), targets.len()),
            });
        }
        if targets.is_empty() {
            return Err(Error::Contract("bce over empty batch".into()));
        }
        let mut acc = T::zero();
        for (&z, &y) in v.data().iter().zip(targets) {
            acc += y * softplus(-z) + (T::one() - y) * softplus(z);
        }
        let n = T::from_f64(targets.len() as f64);
        let req = self.requires(logits);
        Ok(self.push(
            Op::BceWithLogits { logits, targets: targets.to_vec() },
            Tensor::scalar(acc / n),
            req,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Accumulate `d root / d node` for every node reaching the scalar root.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::new(self.value(root).shape().to_vec(), vec![T::one()])?);

        for idx in (0..=root.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.accumulate_inputs(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_inputs(
        &self,
        idx: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let add_to = |grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>| {
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += *d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.requires(*a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_nt(g.data(), vb.data(), m, n, k, &mut da);
                    add_to(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.requires(*b) {
                    let mut db = vec![T::zero(); k * n];
                    matmul_tn(va.data(), g.data(), m, k, n, &mut db);
                    add_to(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Bmm(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bsz, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = vb.shape()[2];
                if self.requires(*a) {
                    let mut da = vec![T::zero(); bsz * m * k];
                    for i in 0..bsz {
                        matmul_nt(
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &vb.data()[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    add_to(grads, *a, Tensor::new(vec![bsz, m, k], da)?);
                }
                if self.requires(*b) {
                    let mut db = vec![T::zero(); bsz * k * n];
                    for i in 0..bsz {
                        matmul_tn(
                            &va.data()[i * m * k..(i + 1) * m * k],
                            &g.data()[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db[i * k * n..(i + 1) * k * n],
                        );
                    }
                    add_to(grads, *b, Tensor::new(vec![bsz, k, n], db)?);
                }
            }
            Op::Add(a, b) => {
                if self.requires(*a) {
                    add_to(grads, *a, g.clone());
                }
                if self.requires(*b) {
                    let bn = self.value(*b).numel();
                    if bn == g.numel() {
                        add_to(grads, *b, g.clone());
                    } else {
                        let mut db = vec![T::zero(); bn];
                        for (i, &v) in g.data().iter().enumerate() {
                            db[i % bn] += v;
                        }
                        add_to(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), db)?);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.requires(*a) {
                    add_to(grads, *a, g.clone());
                }
                if self.requires(*b) {
                    let db: Vec<T> = g.data().iter().map(|&v| -v).collect();
                    add_to(grads, *b, Tensor::new(g.shape().to_vec(), db)?);
                }
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    let da: Vec<T> =
                        g.data().iter().zip(self.value(*b).data()).map(|(&x, &y)| x * y).collect();
                    add_to(grads, *a, Tensor::new(g.shape().to_vec(), da)?);
                }
                if self.requires(*b) {
                    let db: Vec<T> =
                        g.data().iter().zip(self.value(*a).data()).map(|(&x, &y)| x * y).collect();
                    add_to(grads, *b, Tensor::new(g.shape().to_vec(), db)?);
                }
            }
            Op::Affine { x, a, .. } => {
                if self.requires(*x) {
                    let dx: Vec<T> = g.data().iter().map(|&v| *a * v).collect();
                    add_to(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = self.nodes[idx].value.shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let out_stride = shape[*axis] * inner;
                let mut offset = 0usize;
                for &v in inputs {
                    let s = self.value(v).shape().to_vec();
                    let block = s[*axis] * inner;
                    if self.requires(v) {
                        let mut dv = vec![T::zero(); s.iter().product()];
                        for o in 0..outer {
                            dv[o * block..(o + 1) * block].copy_from_slice(
                                &g.data()[o * out_stride + offset..o * out_stride + offset + block],
                            );
                        }
                        add_to(grads, v, Tensor::new(s, dv)?);
                    }
                    offset += block;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.requires(*x) {
                    let xs = self.value(*x).shape().to_vec();
                    let gs = g.shape();
                    let outer: usize = xs[..*axis].iter().product();
                    let inner: usize = xs[*axis + 1..].iter().product();
                    let len = gs[*axis];
                    let mut dx = vec![T::zero(); xs.iter().product()];
                    let src_stride = xs[*axis] * inner;
                    for o in 0..outer {
                        dx[o * src_stride + start * inner..][..len * inner]
                            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                    add_to(grads, *x, Tensor::new(xs, dx)?);
                }
            }
            Op::Transpose(x) => {
                if self.requires(*x) {
                    add_to(grads, *x, transpose_last2(g));
                }
            }
            Op::Softmax(x) => {
                if self.requires(*x) {
                    let y = &self.nodes[idx].value;
                    let n = *y.shape().last().unwrap();
                    let mut dx = vec![T::zero(); y.numel()];
                    for (row, (yrow, grow)) in
                        y.data().chunks(n).zip(g.data().chunks(n)).enumerate()
                    {
                        let mut dot = T::zero();
                        for (a, b) in yrow.iter().zip(grow) {
                            dot += *a * *b;
                        }
                        let out = &mut dx[row * n..(row + 1) * n];
                        for j in 0..n {
                            out[j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    add_to(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let n = *xv.shape().last().unwrap();
                let rows = xv.numel() / n;
                let gm = self.value(*gamma).data();
                let inv_n = T::one() / T::from_f64(n as f64);
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                for r in 0..rows {
                    let xr = &xv.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let (mu, inv_s) = row_moments(xr, *eps);
                    // xhat, then the three reduction terms
                    let mut mean_gg = T::zero();
                    let mut mean_ggx = T::zero();
                    for j in 0..n {
                        let xhat = (xr[j] - mu) * inv_s;
                        let gg = gr[j] * gm[j];
                        mean_gg += gg;
                        mean_ggx += gg * xhat;
                        dgamma[j] += gr[j] * xhat;
                        dbeta[j] += gr[j];
                    }
                    mean_gg *= inv_n;
                    mean_ggx *= inv_n;
                    let out = &mut dx[r * n..(r + 1) * n];
                    for j in 0..n {
                        let xhat = (xr[j] - mu) * inv_s;
                        out[j] = (gr[j] * gm[j] - mean_gg - xhat * mean_ggx) * inv_s;
                    }
                }
                if self.requires(*x) {
                    add_to(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.requires(*gamma) {
                    add_to(grads, *gamma, Tensor::new(vec![n], dgamma)?);
                }
                if self.requires(*beta) {
                    add_to(grads, *beta, Tensor::new(vec![n], dbeta)?);
                }
            }
            Op::Sigmoid(x) => {
                if self.requires(*x) {
                    let y = &self.nodes[idx].value;
                    let dx: Vec<T> = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                        .collect();
                    add_to(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
                }
            }
            Op::Tanh(x) => {
                if self.requires(*x) {
                    let y = &self.nodes[idx].value;
                    let dx: Vec<T> = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| gv * (T::one() - yv * yv))
                        .collect();
                    add_to(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
                }
            }
            Op::Exp(x) => {
                if self.requires(*x) {
                    let y = &self.nodes[idx].value;
                    let dx: Vec<T> =
                        g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * yv).collect();
                    add_to(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
                }
            }
            Op::Log(x) => {
                if self.requires(*x) {
                    let xv = self.value(*x);
                    let dx: Vec<T> =
                        g.data().iter().zip(xv.data()).map(|(&gv, &v)| gv / v).collect();
                    add_to(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
            }
            Op::Gelu(x) => {
                if self.requires(*x) {
                    let c = T::from_f64(0.797_884_560_802_865_4);
                    let k = T::from_f64(0.044_715);
                    let half = T::from_f64(0.5);
                    let three = T::from_f64(3.0);
                    let xv = self.value(*x);
                    let dx: Vec<T> = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &v)| {
                            let u = c * (v + k * v * v * v);
                            let t = u.tanh();
                            let du = c * (T::one() + three * k * v * v);
                            gv * (half * (T::one() + t) + half * v * (T::one() - t * t) * du)
                        })
                        .collect();
                    add_to(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
            }
            Op::Sum(x) => {
                if self.requires(*x) {
                    let xv = self.value(*x);
                    let gv = g.data()[0];
                    add_to(
                        grads,
                        *x,
                        Tensor::new(xv.shape().to_vec(), vec![gv; xv.numel()])?,
                    );
                }
            }
            Op::Mean(x) => {
                if self.requires(*x) {
                    let xv = self.value(*x);
                    let gv = g.data()[0] / T::from_f64(xv.numel() as f64);
                    add_to(
                        grads,
                        *x,
                        Tensor::new(xv.shape().to_vec(), vec![gv; xv.numel()])?,
                    );
                }
            }
            Op::Gather { table, ids } => {
                if self.requires(*table) {
                    let ts = self.value(*table).shape().to_vec();
                    let d = ts[1];
                    let mut dt = vec![T::zero(); ts.iter().product()];
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                        let src = &g.data()[i * d..(i + 1) * d];
                        for j in 0..d {
                            dst[j] += src[j];
                        }
                    }
                    add_to(grads, *table, Tensor::new(ts, dt)?);
                }
            }
            Op::MaskedFill { x, mask, .. } => {
                if self.requires(*x) {
                    let m = mask.len();
                    let dx: Vec<T> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| if mask[i % m] { v } else { T::zero() })
                        .collect();
                    add_to(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
                }
            }
            Op::RotatePairs { x, angles } => {
                if self.requires(*x) {
                    add_to(grads, *x, rotate_pairs_raw(g, angles, true));
                }
            }
            Op::Reshape(x) => {
                if self.requires(*x) {
                    let xs = self.value(*x).shape().to_vec();
                    add_to(grads, *x, g.reshaped(xs)?);
                }
            }
            Op::SplitHeads { x, heads } => {
                if self.requires(*x) {
                    // inverse of split: merge
                    let s = self.nodes[idx].value.shape();
                    let (h, l, dh) = (s[0], s[1], s[2]);
                    debug_assert_eq!(h, *heads);
                    let mut dx = vec![T::zero(); l * h * dh];
                    for hh in 0..h {
                        for t in 0..l {
                            let from = (hh * l + t) * dh;
                            let dst = t * h * dh + hh * dh;
                            dx[dst..dst + dh].copy_from_slice(&g.data()[from..from + dh]);
                        }
                    }
                    add_to(grads, *x, Tensor::new(vec![l, h * dh], dx)?);
                }
            }
            Op::MergeHeads(x) => {
                if self.requires(*x) {
                    let s = self.value(*x).shape().to_vec();
                    let (h, l, dh) = (s[0], s[1], s[2]);
                    let mut dx = vec![T::zero(); h * l * dh];
                    for hh in 0..h {
                        for t in 0..l {
                            let dst = (hh * l + t) * dh;
                            let from = t * h * dh + hh * dh;
                            dx[dst..dst + dh].copy_from_slice(&g.data()[from..from + dh]);
                        }
                    }
                    add_to(grads, *x, Tensor::new(s, dx)?);
                }
            }
            Op::BceWithLogits { logits, targets } => {
                if self.requires(*logits) {
                    let z = self.value(*logits);
                    let inv_n = T::one() / T::from_f64(targets.len() as f64);
                    let gv = g.data()[0];
                    let dz: Vec<T> = z
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&zi, &yi)| gv * (stable_sigmoid(zi) - yi) * inv_n)
                        .collect();
                    add_to(grads, *logits, Tensor::new(z.shape().to_vec(), dz)?);
                }
            }
        }
        Ok(())
    }
}

// ── raw kernels ─────────────────────────────────────────────────────────

/// `C[m,n] += A[m,k] * B[k,n]`, row-major.
fn matmul_nn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// `C[m,k] += A[m,n] * B[k,n]^T` (dot-product form).
fn matmul_nt<T: Element>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            orow[p] += acc;
        }
    }
}

/// `C[k,n] += A[m,k]^T * B[m,n]` (outer-accumulation form).
fn matmul_tn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn transpose_last2<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let rank = s.len();
    let (r, c) = (s[rank - 2], s[rank - 1]);
    let outer: usize = s[..rank - 2].iter().product();
    let mut shape = s.to_vec();
    shape.swap(rank - 2, rank - 1);
    let mut data = vec![T::zero(); t.numel()];
    for o in 0..outer {
        let src = &t.data()[o * r * c..(o + 1) * r * c];
        let dst = &mut data[o * r * c..(o + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    Tensor::new(shape, data).expect("transpose preserves element count")
}

fn rotate_pairs_raw<T: Element>(t: &Tensor<T>, angles: &[T], invert: bool) -> Tensor<T> {
    let mut data = vec![T::zero(); t.numel()];
    let src = t.data();
    for (i, &theta) in angles.iter().enumerate() {
        let (sin, cos) = if invert { ((-theta).sin(), theta.cos()) } else { (theta.sin(), theta.cos()) };
        let (x, y) = (src[2 * i], src[2 * i + 1]);
        data[2 * i] = x * cos - y * sin;
        data[2 * i + 1] = x * sin + y * cos;
    }
    Tensor::new(t.shape().to_vec(), data).expect("rotation preserves element count")
}

/// Mean and reciprocal standard deviation (population variance + eps).
fn row_moments<T: Element>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mut mu = T::zero();
    for &v in row {
        mu += v;
    }
    mu /= n;
    let mut var = T::zero();
    for &v in row {
        let d = v - mu;
        var += d * d;
    }
    var /= n;
    (mu, T::one() / (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 4], &[1.0, -2.0, 0.5, 3.0, 10.0, 10.0, -10.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.leaf(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a = tape.leaf(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let y = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(a).data());
    }

    #[test]
    fn layer_norm_hand_case() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let gamma = tape.leaf(t(&[3], &[1.0, 1.0, 1.0]));
        let beta = tape.leaf(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
        let want = [-1.2247, 0.0, 1.2247];
        for (got, w) in tape.value(y).data().iter().zip(want) {
            assert!((got - w).abs() < 1e-3, "{got} vs {w}");
        }
        // pre-affine moments: mean 0, population variance 1
        let mean: f64 = tape.value(y).data().iter().sum::<f64>() / 3.0;
        let var: f64 = tape.value(y).data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf_grad(t(&[3], &[4.0, -1.0, 2.5]));
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sigmoid_dot_gradient_at_zero_weights() {
        // d/dw sigmoid(w.x) at w=0 is 0.25 * x
        let xs = [0.7, -1.3, 2.0];
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf_grad(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let x = tape.leaf(t(&[3, 1], &xs));
        let z = tape.matmul(w, x).unwrap();
        let z = tape.reshape(z, vec![1]).unwrap();
        let p = tape.sigmoid(z);
        let root = tape.sum(p);
        let grads = tape.backward(root).unwrap();
        for (g, xv) in grads.get(w).unwrap().data().iter().zip(xs) {
            assert!((g - 0.25 * xv).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_root_is_contract_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf_grad(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn untouched_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf_grad(t(&[2], &[1.0, 2.0]));
        let unused = tape.leaf_grad(t(&[2], &[5.0, 6.0]));
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zeros(unused, &[2]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn masked_fill_kills_softmax_weight() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 4], &[0.3, 0.1, -0.2, 0.9, 1.0, 2.0, 3.0, 4.0]));
        let masked = tape.masked_fill(x, &[true, false, true, false], -1e30).unwrap();
        let y = tape.softmax(masked).unwrap();
        for row in tape.value(y).data().chunks(4) {
            assert!(row[1] < 1e-6 && row[3] < 1e-6);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fully_masked_softmax_row_is_uniform_and_finite() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 3], &[0.3, 0.1, -0.2]));
        let masked = tape.masked_fill(x, &[false, false, false], -1e30).unwrap();
        let y = tape.softmax(masked).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.is_finite());
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_shape_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2, 3], &[0.0; 6]));
        let b = tape.leaf(t(&[2, 3], &[0.0; 6]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn bce_hand_values() {
        // p = 0.5 everywhere -> ln 2
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(t(&[2], &[0.0, 0.0]));
        let loss = tape.bce_with_logits(z, &[1.0, 0.0]).unwrap();
        assert!((tape.value(loss).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

        // p = [0.9, 0.2], y = [1, 0] -> (-ln 0.9 - ln 0.8)/2
        let z1 = (0.9f64 / 0.1).ln();
        let z2 = (0.2f64 / 0.8).ln();
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(t(&[2], &[z1, z2]));
        let loss = tape.bce_with_logits(z, &[1.0, 0.0]).unwrap();
        let want = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((tape.value(loss).item().unwrap() - want).abs() < 1e-12);

        // saturated correct predictions -> loss below 1e-7
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(t(&[2], &[40.0, -40.0]));
        let loss = tape.bce_with_logits(z, &[1.0, 0.0]).unwrap();
        assert!(tape.value(loss).item().unwrap() <= 1e-7);
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let run = || {
            let mut tape = Tape::<f64>::new();
            let a = tape.leaf_grad(t(&[2, 2], &[0.3, -1.2, 0.77, 0.01]));
            let b = tape.leaf_grad(t(&[2, 2], &[1.5, 0.2, -0.4, 0.9]));
            let c = tape.matmul(a, b).unwrap();
            let d = tape.tanh(c);
            let e = tape.softmax(d).unwrap();
            let s = tape.mean(e);
            let grads = tape.backward(s).unwrap();
            (
                tape.value(s).data().to_vec(),
                grads.get(a).unwrap().data().to_vec(),
                grads.get(b).unwrap().data().to_vec(),
            )
        };
        let (v1, ga1, gb1) = run();
        let (v2, ga2, gb2) = run();
        assert!(v1.iter().zip(&v2).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(ga1.iter().zip(&ga2).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(gb1.iter().zip(&gb2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
