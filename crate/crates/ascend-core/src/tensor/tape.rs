//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Values are computed eagerly when an operation is recorded; `backward`
//! walks the tape once in reverse creation order (which is a reverse
//! topological order, since inputs always precede outputs) and accumulates
//! gradients into every leaf that was registered as trainable.

use super::ops;
use super::{Element, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: T },
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    EmbedLookup { table: NodeId, ids: Vec<u32> },
    Gelu { x: NodeId },
    Relu { x: NodeId },
    SoftmaxRows { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, mean: Vec<T>, inv_std: Vec<T> },
    SplitHeads { x: NodeId, heads: usize },
    MergeHeads { x: NodeId, heads: usize },
    ScaledDot { q: NodeId, k: NodeId, scale: T },
    AttnContext { p: NodeId, v: NodeId },
    MeanPoolMask { x: NodeId, mask: Vec<bool> },
    Dropout { x: NodeId, keep: Vec<bool>, scale: T },
    Reshape { x: NodeId },
    GatherRows { x: NodeId, rows: Vec<usize> },
    CrossEntropyRows { logits: NodeId, labels: Vec<usize>, probs: Tensor<T> },
    CoxLoss { theta: NodeId, times: Vec<f64>, events: Vec<bool> },
    BatchNorm { x: NodeId, gain: NodeId, bias: NodeId, mean: Vec<T>, inv_std: Vec<T>, train: bool },
    SumScalars { xs: Vec<NodeId> },
    StackCols { xs: Vec<NodeId> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Grads<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.slots.get_mut(id.0).and_then(|s| s.take())
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Register an input tensor. Gradients accumulate into it only when
    /// `trainable` is set.
    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> NodeId {
        self.push(value, Op::Leaf, trainable)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                expected: va.shape().to_vec(),
                got: vb.shape().to_vec(),
            });
        }
        let mut out = va.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(vb.data()) {
            *o += v;
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = *v * c;
        }
        let needs = self.needs(x);
        self.push(out, Op::Scale { x, c }, needs)
    }

    /// `x @ w (+ b)`, contracting the last dimension of `x`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId, TensorError> {
        let vx = self.value(x);
        let vw = self.value(w);
        let k = vx.last_dim();
        if vw.shape().len() != 2 || vw.shape()[0] != k {
            return Err(TensorError::ShapeMismatch {
                expected: vec![k, vw.last_dim()],
                got: vw.shape().to_vec(),
            });
        }
        let n = vw.shape()[1];
        let m = vx.leading();
        let mut out_shape = vx.shape().to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        *out_shape.last_mut().unwrap() = n;
        let mut data = match b {
            Some(bid) => {
                let vb = self.value(bid);
                if vb.shape() != [n] {
                    return Err(TensorError::ShapeMismatch {
                        expected: vec![n],
                        got: vb.shape().to_vec(),
                    });
                }
                let mut d = Vec::with_capacity(m * n);
                for _ in 0..m {
                    d.extend_from_slice(vb.data());
                }
                d
            }
            None => vec![T::ZERO; m * n],
        };
        ops::matmul_acc(m, k, n, self.value(x).data(), self.value(w).data(), &mut data);
        let out = Tensor::new(out_shape, data).expect("linear shape");
        let needs = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(out, Op::Linear { x, w, b }, needs))
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.value(a).shape().len() != 2 || self.value(b).shape().len() != 2 {
            return Err(TensorError::Invalid("matmul expects rank-2 operands".into()));
        }
        self.linear(a, b, None)
    }

    /// Row lookup: `table[ids]`, producing `leading_shape x hidden`.
    pub fn embed_lookup(
        &mut self,
        table: NodeId,
        ids: &[u32],
        leading_shape: &[usize],
    ) -> Result<NodeId, TensorError> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(TensorError::Invalid("embedding table must be rank 2".into()));
        }
        let rows: usize = leading_shape.iter().product();
        if rows != ids.len() {
            return Err(TensorError::BadLength { shape: leading_shape.to_vec(), len: ids.len() });
        }
        let (v, h) = (vt.shape()[0], vt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(TensorError::Invalid(format!("embedding id {id} out of range {v}")));
            }
            data.extend_from_slice(&vt.data()[id * h..(id + 1) * h]);
        }
        let mut shape = leading_shape.to_vec();
        shape.push(h);
        let out = Tensor::new(shape, data).expect("embed shape");
        let needs = self.needs(table);
        Ok(self.push(out, Op::EmbedLookup { table, ids: ids.to_vec() }, needs))
    }

    /// Exact-erf GELU: `x * Phi(x)`.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        ops::par_map_chunks(out.data_mut(), |_, chunk| {
            for v in chunk {
                let phi = half * (T::ONE + (*v * inv_sqrt2).erf());
                *v = *v * phi;
            }
        });
        let needs = self.needs(x);
        self.push(out, Op::Gelu { x }, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = v.maximum(T::ZERO);
        }
        let needs = self.needs(x);
        self.push(out, Op::Relu { x }, needs)
    }

    /// Softmax over the trailing dimension; `-inf` inputs act as masked slots.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        let n = out.last_dim();
        ops::softmax_rows_inplace(out.data_mut(), n);
        let needs = self.needs(x);
        self.push(out, Op::SoftmaxRows { x }, needs)
    }

    /// Attention softmax over keys: `x` is `[batch, heads, q, k]` and
    /// `key_mask` is `[batch, k]` row-major; masked keys get zero weight.
    pub fn masked_softmax_rows(
        &mut self,
        x: NodeId,
        key_mask: &[bool],
    ) -> Result<NodeId, TensorError> {
        let vx = self.value(x);
        if vx.shape().len() != 4 {
            return Err(TensorError::Invalid("masked softmax expects [b,h,q,k]".into()));
        }
        let (b, h, q, k) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        if key_mask.len() != b * k {
            return Err(TensorError::BadLength { shape: vec![b, k], len: key_mask.len() });
        }
        let mut out = vx.clone();
        {
            let data = out.data_mut();
            for bi in 0..b {
                let mrow = &key_mask[bi * k..(bi + 1) * k];
                for hi in 0..h {
                    for qi in 0..q {
                        let base = ((bi * h + hi) * q + qi) * k;
                        for (ki, &keep) in mrow.iter().enumerate() {
                            if !keep {
                                data[base + ki] = T::NEG_INFINITY;
                            }
                        }
                    }
                }
            }
            ops::softmax_rows_inplace(data, k);
        }
        let needs = self.needs(x);
        // Backward only needs the output probabilities, so the masked variant
        // records as a plain softmax node.
        Ok(self.push(out, Op::SoftmaxRows { x }, needs))
    }

    /// Layer normalization over the trailing dimension, then affine.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let vx = self.value(x);
        let h = vx.last_dim();
        let rows = vx.leading();
        if self.value(gain).shape() != [h] || self.value(bias).shape() != [h] {
            return Err(TensorError::ShapeMismatch {
                expected: vec![h],
                got: self.value(gain).shape().to_vec(),
            });
        }
        let eps = T::from_f64(eps);
        let inv_h = T::from_f64(1.0 / h as f64);
        let mut out = vx.clone();
        let mut means = Vec::with_capacity(rows);
        let mut inv_stds = Vec::with_capacity(rows);
        let g = self.value(gain).data().to_vec();
        let bvec = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(h) {
            let mut mean = T::ZERO;
            for &v in row.iter() {
                mean += v;
            }
            mean = mean * inv_h;
            let mut var = T::ZERO;
            for &v in row.iter() {
                let d = v - mean;
                var += d * d;
            }
            var = var * inv_h;
            let inv = T::ONE / (var + eps).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[i] + bvec[i];
            }
            means.push(mean);
            inv_stds.push(inv);
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, mean: means, inv_std: inv_stds }, needs))
    }

    /// `[b, l, h*d] -> [b, h, l, d]`
    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> Result<NodeId, TensorError> {
        let vx = self.value(x);
        if vx.shape().len() != 3 || vx.shape()[2] % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "split_heads: shape {:?} not divisible into {heads} heads",
                vx.shape()
            )));
        }
        let (b, l, hd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let d = hd / heads;
        let mut data = vec![T::ZERO; vx.len()];
        let src = vx.data();
        for bi in 0..b {
            for li in 0..l {
                for hi in 0..heads {
                    let from = (bi * l + li) * hd + hi * d;
                    let to = (((bi * heads + hi) * l) + li) * d;
                    data[to..to + d].copy_from_slice(&src[from..from + d]);
                }
            }
        }
        let out = Tensor::new(vec![b, heads, l, d], data).expect("split shape");
        let needs = self.needs(x);
        Ok(self.push(out, Op::SplitHeads { x, heads }, needs))
    }

    /// `[b, h, l, d] -> [b, l, h*d]`
    pub fn merge_heads(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let vx = self.value(x);
        if vx.shape().len() != 4 {
            return Err(TensorError::Invalid("merge_heads expects [b,h,l,d]".into()));
        }
        let (b, h, l, d) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let mut data = vec![T::ZERO; vx.len()];
        let src = vx.data();
        for bi in 0..b {
            for hi in 0..h {
                for li in 0..l {
                    let from = (((bi * h + hi) * l) + li) * d;
                    let to = (bi * l + li) * (h * d) + hi * d;
                    data[to..to + d].copy_from_slice(&src[from..from + d]);
                }
            }
        }
        let out = Tensor::new(vec![b, l, h * d], data).expect("merge shape");
        let needs = self.needs(x);
        Ok(self.push(out, Op::MergeHeads { x, heads: h }, needs))
    }

    /// `scale * Q K^T` per `[batch, head]` slice: `[b,h,l,d] -> [b,h,l,l]`.
    pub fn scaled_dot(&mut self, q: NodeId, k: NodeId, scale: T) -> Result<NodeId, TensorError> {
        let (vq, vk) = (self.value(q), self.value(k));
        if vq.shape() != vk.shape() || vq.shape().len() != 4 {
            return Err(TensorError::ShapeMismatch {
                expected: vq.shape().to_vec(),
                got: vk.shape().to_vec(),
            });
        }
        let (b, h, l, d) = (vq.shape()[0], vq.shape()[1], vq.shape()[2], vq.shape()[3]);
        let mut data = vec![T::ZERO; b * h * l * l];
        let kdata = vk.data();
        ops::for_each_slice_pair(vq.data(), l * d, &mut data, l * l, |s, qs, out| {
            let ks = &kdata[s * l * d..(s + 1) * l * d];
            ops::matmul_bt_acc_serial(l, l, d, qs, ks, out);
            for v in out.iter_mut() {
                *v = *v * scale;
            }
        });
        let out = Tensor::new(vec![b, h, l, l], data).expect("scores shape");
        let needs = self.needs(q) || self.needs(k);
        Ok(self.push(out, Op::ScaledDot { q, k, scale }, needs))
    }

    /// `P V` per `[batch, head]` slice: `[b,h,l,l] x [b,h,l,d] -> [b,h,l,d]`.
    pub fn attn_context(&mut self, p: NodeId, v: NodeId) -> Result<NodeId, TensorError> {
        let (vp, vv) = (self.value(p), self.value(v));
        if vp.shape().len() != 4 || vv.shape().len() != 4 || vp.shape()[..3] != vv.shape()[..3] || vp.shape()[3] != vv.shape()[2] {
            return Err(TensorError::ShapeMismatch {
                expected: vp.shape().to_vec(),
                got: vv.shape().to_vec(),
            });
        }
        let (b, h, l, d) = (vv.shape()[0], vv.shape()[1], vv.shape()[2], vv.shape()[3]);
        let mut data = vec![T::ZERO; b * h * l * d];
        let vdata = vv.data();
        ops::for_each_slice_pair(vp.data(), l * l, &mut data, l * d, |s, ps, out| {
            let vs = &vdata[s * l * d..(s + 1) * l * d];
            ops::matmul_acc_serial(l, l, d, ps, vs, out);
        });
        let out = Tensor::new(vec![b, h, l, d], data).expect("context shape");
        let needs = self.needs(p) || self.needs(v);
        Ok(self.push(out, Op::AttnContext { p, v }, needs))
    }

    /// Mean over unmasked positions: `[b,l,h] x mask[b,l] -> [b,h]`.
    pub fn mean_pool_mask(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId, TensorError> {
        let vx = self.value(x);
        if vx.shape().len() != 3 {
            return Err(TensorError::Invalid("mean_pool expects [b,l,h]".into()));
        }
        let (b, l, h) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        if mask.len() != b * l {
            return Err(TensorError::BadLength { shape: vec![b, l], len: mask.len() });
        }
        let mut data = vec![T::ZERO; b * h];
        for bi in 0..b {
            let mut count = 0usize;
            for li in 0..l {
                if mask[bi * l + li] {
                    count += 1;
                    let src = &vx.data()[(bi * l + li) * h..(bi * l + li + 1) * h];
                    for (o, &s) in data[bi * h..(bi + 1) * h].iter_mut().zip(src) {
                        *o += s;
                    }
                }
            }
            if count == 0 {
                return Err(TensorError::AllPaddingSequence(bi));
            }
            let inv = T::from_f64(1.0 / count as f64);
            for o in data[bi * h..(bi + 1) * h].iter_mut() {
                *o = *o * inv;
            }
        }
        let out = Tensor::new(vec![b, h], data).expect("pool shape");
        let needs = self.needs(x);
        Ok(self.push(out, Op::MeanPoolMask { x, mask: mask.to_vec() }, needs))
    }

    /// Inverted dropout with an explicit keep mask; identity when disabled is
    /// expressed by simply not recording this op. Masks come from one block
    /// fill of the stream (a u32 threshold per element), which keeps the
    /// draw deterministic and cheap even on attention-sized tensors.
    pub fn dropout(
        &mut self,
        x: NodeId,
        p_drop: f64,
        rng: &mut rand_chacha::ChaCha20Rng,
    ) -> NodeId {
        debug_assert!((0.0..1.0).contains(&p_drop));
        if p_drop == 0.0 {
            return x;
        }
        let keep_p = 1.0 - p_drop;
        let scale = T::from_f64(1.0 / keep_p);
        let vx = self.value(x);
        let threshold = (keep_p * 4_294_967_296.0) as u64;
        let mut bytes = vec![0u8; vx.len() * 4];
        rand_core::RngCore::fill_bytes(rng, &mut bytes);
        let keep: Vec<bool> = bytes
            .chunks_exact(4)
            .map(|c| (u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as u64) < threshold)
            .collect();
        let mut out = vx.clone();
        for (v, &kp) in out.data_mut().iter_mut().zip(&keep) {
            *v = if kp { *v * scale } else { T::ZERO };
        }
        let needs = self.needs(x);
        self.push(out, Op::Dropout { x, keep, scale }, needs)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let out = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape { x }, needs))
    }

    /// Select rows of a rank-2 tensor.
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId, TensorError> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(TensorError::Invalid("gather_rows expects rank 2".into()));
        }
        let (m, h) = (vx.shape()[0], vx.shape()[1]);
        let mut data = Vec::with_capacity(rows.len() * h);
        for &r in rows {
            if r >= m {
                return Err(TensorError::Invalid(format!("row {r} out of range {m}")));
            }
            data.extend_from_slice(&vx.data()[r * h..(r + 1) * h]);
        }
        let out = Tensor::new(vec![rows.len(), h], data).expect("gather shape");
        let needs = self.needs(x);
        Ok(self.push(out, Op::GatherRows { x, rows: rows.to_vec() }, needs))
    }

    /// Mean cross-entropy of `logits [n, v]` against integer labels.
    pub fn cross_entropy_rows(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, TensorError> {
        let vl = self.value(logits);
        if vl.shape().len() != 2 {
            return Err(TensorError::Invalid("cross entropy expects [n, v]".into()));
        }
        let (n, v) = (vl.shape()[0], vl.shape()[1]);
        if labels.len() != n {
            return Err(TensorError::BadLength { shape: vec![n], len: labels.len() });
        }
        if n == 0 {
            return Err(TensorError::NoLabeledPositions);
        }
        let mut probs = vl.clone();
        ops::softmax_rows_inplace(probs.data_mut(), v);
        let mut loss = T::ZERO;
        for (r, &label) in labels.iter().enumerate() {
            if label >= v {
                return Err(TensorError::Invalid(format!("label {label} out of range {v}")));
            }
            let row = &vl.data()[r * v..(r + 1) * v];
            let lse = ops::logsumexp(row.iter().copied());
            loss += lse - row[label];
        }
        loss = loss * T::from_f64(1.0 / n as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyRows { logits, labels: labels.to_vec(), probs },
            needs,
        ))
    }

    /// Negative Cox partial log-likelihood, mean-reduced over events.
    ///
    /// Risk sets are formed within the batch (`T_j >= T_i`); tied event times
    /// share the same risk set (Breslow). A batch with no events scores 0.
    pub fn cox_loss(
        &mut self,
        theta: NodeId,
        times: &[f64],
        events: &[bool],
    ) -> Result<NodeId, TensorError> {
        let vt = self.value(theta);
        let n = vt.len();
        if times.len() != n || events.len() != n {
            return Err(TensorError::BadLength { shape: vec![n], len: times.len() });
        }
        let scores = vt.data();
        let mut loss = T::ZERO;
        let mut n_events = 0usize;
        for i in 0..n {
            if !events[i] {
                continue;
            }
            n_events += 1;
            let lse = ops::logsumexp(
                (0..n).filter(|&j| times[j] >= times[i]).map(|j| scores[j]),
            );
            loss += lse - scores[i];
        }
        if n_events > 0 {
            loss = loss * T::from_f64(1.0 / n_events as f64);
        }
        let needs = self.needs(theta);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CoxLoss { theta, times: times.to_vec(), events: events.to_vec() },
            needs,
        ))
    }

    /// Batch normalization of `[batch, features]` using the supplied mean and
    /// variance: batch statistics in train mode (pass `train = true` so the
    /// backward pass accounts for their dependence on `x`), running
    /// statistics in eval mode (`train = false`, plain affine backward).
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        train: bool,
    ) -> Result<NodeId, TensorError> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(TensorError::Invalid("batch_norm expects [batch, features]".into()));
        }
        let (b, f) = (vx.shape()[0], vx.shape()[1]);
        if mean.len() != f || var.len() != f {
            return Err(TensorError::BadLength { shape: vec![f], len: mean.len() });
        }
        if self.value(gain).shape() != [f] || self.value(bias).shape() != [f] {
            return Err(TensorError::ShapeMismatch {
                expected: vec![f],
                got: self.value(gain).shape().to_vec(),
            });
        }
        let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64(m)).collect();
        let inv_std: Vec<T> =
            var.iter().map(|&v| T::ONE / (T::from_f64(v) + T::from_f64(eps)).sqrt()).collect();
        let g = self.value(gain).data().to_vec();
        let bv = self.value(bias).data().to_vec();
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(f) {
            for i in 0..f {
                row[i] = (row[i] - mean_t[i]) * inv_std[i] * g[i] + bv[i];
            }
        }
        let _ = b;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(out, Op::BatchNorm { x, gain, bias, mean: mean_t, inv_std, train }, needs))
    }

    /// Per-feature mean and biased variance over the batch dimension of a
    /// `[batch, features]` node.
    pub fn batch_stats(&self, x: NodeId) -> (Vec<f64>, Vec<f64>) {
        let vx = self.value(x);
        let (b, f) = (vx.shape()[0], vx.shape()[1]);
        let mut mean = vec![0.0f64; f];
        let mut var = vec![0.0f64; f];
        for row in vx.data().chunks(f) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v.to_f64();
            }
        }
        for m in &mut mean {
            *m /= b as f64;
        }
        for row in vx.data().chunks(f) {
            for i in 0..f {
                let d = row[i].to_f64() - mean[i];
                var[i] += d * d;
            }
        }
        for v in &mut var {
            *v /= b as f64;
        }
        (mean, var)
    }

    /// Sum scalar nodes.
    pub fn sum_scalars(&mut self, xs: &[NodeId]) -> Result<NodeId, TensorError> {
        let mut total = T::ZERO;
        for &x in xs {
            let v = self.value(x);
            if v.len() != 1 {
                return Err(TensorError::Invalid("sum_scalars expects scalar nodes".into()));
            }
            total += v.item();
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(Tensor::scalar(total), Op::SumScalars { xs: xs.to_vec() }, needs))
    }

    /// Stack of `k` vectors `[b]` into columns of `[b, k]`.
    pub fn stack_cols(&mut self, xs: &[NodeId]) -> Result<NodeId, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::Invalid("stack_cols of nothing".into()));
        }
        let b = self.value(xs[0]).len();
        for &x in xs {
            if self.value(x).len() != b {
                return Err(TensorError::BadLength { shape: vec![b], len: self.value(x).len() });
            }
        }
        let k = xs.len();
        let mut data = vec![T::ZERO; b * k];
        for (ci, &x) in xs.iter().enumerate() {
            for (ri, &v) in self.value(x).data().iter().enumerate() {
                data[ri * k + ci] = v;
            }
        }
        let out = Tensor::new(vec![b, k], data).expect("stack shape");
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(out, Op::StackCols { xs: xs.to_vec() }, needs))
    }

    /// Reverse accumulation from a scalar loss node. Every node is visited at
    /// most once, in reverse creation (= reverse topological) order.
    pub fn backward(&self, loss: NodeId) -> Result<Grads<T>, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Invalid("backward requires a scalar loss".into()));
        }
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] =
            Some(Tensor::new(self.value(loss).shape().to_vec(), vec![T::ONE]).expect("scalar"));
        for idx in (0..=loss.0).rev() {
            if slots[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let grad = slots[idx].take().expect("grad present");
            self.propagate(idx, &grad, &mut slots);
            // Leaves keep their accumulated gradient.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                slots[idx] = Some(grad);
            }
        }
        Ok(Grads { slots })
    }

    fn accum(&self, slots: &mut [Option<Tensor<T>>], id: NodeId, add: impl FnOnce(&mut Tensor<T>)) {
        if !self.needs(id) {
            return;
        }
        let slot = &mut slots[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(id).shape()));
        }
        add(slot.as_mut().expect("slot"));
    }

    fn propagate(&self, idx: usize, grad: &Tensor<T>, slots: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let out_val = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for &input in [a, b].iter() {
                    self.accum(slots, *input, |g| {
                        for (o, &v) in g.data_mut().iter_mut().zip(grad.data()) {
                            *o += v;
                        }
                    });
                }
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accum(slots, *x, |g| {
                    for (o, &v) in g.data_mut().iter_mut().zip(grad.data()) {
                        *o += v * c;
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let k = vx.last_dim();
                let m = vx.leading();
                let n = vw.shape()[1];
                self.accum(slots, *x, |g| {
                    ops::matmul_bt_acc(m, k, n, grad.data(), vw.data(), g.data_mut());
                });
                self.accum(slots, *w, |g| {
                    ops::matmul_at_acc(m, k, n, vx.data(), grad.data(), g.data_mut());
                });
                if let Some(bid) = b {
                    self.accum(slots, *bid, |g| {
                        for row in grad.data().chunks(n) {
                            for (o, &v) in g.data_mut().iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    });
                }
            }
            Op::EmbedLookup { table, ids } => {
                let h = self.value(*table).shape()[1];
                self.accum(slots, *table, |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut g.data_mut()[id as usize * h..(id as usize + 1) * h];
                        let src = &grad.data()[r * h..(r + 1) * h];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let vx = self.value(*x);
                let half = T::from_f64(0.5);
                let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                self.accum(slots, *x, |g| {
                    ops::par_map_chunks(g.data_mut(), |base, chunk| {
                        for (i, o) in chunk.iter_mut().enumerate() {
                            let v = vx.data()[base + i];
                            let dy = grad.data()[base + i];
                            let phi = half * (T::ONE + (v * inv_sqrt2).erf());
                            let pdf = inv_sqrt_2pi * (-(v * v) * half).exp();
                            *o += dy * (phi + v * pdf);
                        }
                    });
                });
            }
            Op::Relu { x } => {
                let vx = self.value(*x);
                self.accum(slots, *x, |g| {
                    for ((o, &v), &dy) in g.data_mut().iter_mut().zip(vx.data()).zip(grad.data()) {
                        if v > T::ZERO {
                            *o += dy;
                        }
                    }
                });
            }
            Op::SoftmaxRows { x } => {
                let n = out_val.last_dim();
                let y = out_val.data();
                self.accum(slots, *x, |g| {
                    ops::for_each_slice_pair(y, n, g.data_mut(), n, |row, yr, dst| {
                        let dyr = &grad.data()[row * n..(row + 1) * n];
                        let mut dot = T::ZERO;
                        for (&yv, &dv) in yr.iter().zip(dyr) {
                            dot += yv * dv;
                        }
                        for ((o, &yv), &dv) in dst.iter_mut().zip(yr).zip(dyr) {
                            *o += yv * (dv - dot);
                        }
                    });
                });
            }
            Op::LayerNorm { x, gain, bias, mean, inv_std } => {
                let vx = self.value(*x);
                let h = vx.last_dim();
                let g = self.value(*gain).data();
                let inv_h = T::from_f64(1.0 / h as f64);
                self.accum(slots, *gain, |gg| {
                    for (row, dyr) in grad.data().chunks(h).enumerate() {
                        let xr = &vx.data()[row * h..(row + 1) * h];
                        for i in 0..h {
                            let xhat = (xr[i] - mean[row]) * inv_std[row];
                            gg.data_mut()[i] += dyr[i] * xhat;
                        }
                    }
                });
                self.accum(slots, *bias, |gb| {
                    for dyr in grad.data().chunks(h) {
                        for (o, &v) in gb.data_mut().iter_mut().zip(dyr) {
                            *o += v;
                        }
                    }
                });
                self.accum(slots, *x, |gx| {
                    for (row, dyr) in grad.data().chunks(h).enumerate() {
                        let xr = &vx.data()[row * h..(row + 1) * h];
                        let inv = inv_std[row];
                        let mu = mean[row];
                        // dxhat, then the two mean corrections
                        let mut sum_dxhat = T::ZERO;
                        let mut sum_dxhat_xhat = T::ZERO;
                        for i in 0..h {
                            let dxhat = dyr[i] * g[i];
                            let xhat = (xr[i] - mu) * inv;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let dst = &mut gx.data_mut()[row * h..(row + 1) * h];
                        for i in 0..h {
                            let dxhat = dyr[i] * g[i];
                            let xhat = (xr[i] - mu) * inv;
                            dst[i] += inv
                                * (dxhat - inv_h * sum_dxhat - xhat * inv_h * sum_dxhat_xhat);
                        }
                    }
                });
            }
            Op::SplitHeads { x, heads } => {
                let vx = self.value(*x);
                let (b, l, hd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let d = hd / heads;
                let heads = *heads;
                self.accum(slots, *x, |g| {
                    for bi in 0..b {
                        for li in 0..l {
                            for hi in 0..heads {
                                let to = (bi * l + li) * hd + hi * d;
                                let from = (((bi * heads + hi) * l) + li) * d;
                                let dst = &mut g.data_mut()[to..to + d];
                                let src = &grad.data()[from..from + d];
                                for (o, &v) in dst.iter_mut().zip(src) {
                                    *o += v;
                                }
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, heads } => {
                let (b, l, hd) =
                    (out_val.shape()[0], out_val.shape()[1], out_val.shape()[2]);
                let d = hd / heads;
                let heads = *heads;
                self.accum(slots, *x, |g| {
                    for bi in 0..b {
                        for hi in 0..heads {
                            for li in 0..l {
                                let from = (bi * l + li) * hd + hi * d;
                                let to = (((bi * heads + hi) * l) + li) * d;
                                let dst = &mut g.data_mut()[to..to + d];
                                let src = &grad.data()[from..from + d];
                                for (o, &v) in dst.iter_mut().zip(src) {
                                    *o += v;
                                }
                            }
                        }
                    }
                });
            }
            Op::ScaledDot { q, k, scale } => {
                let (vq, vk) = (self.value(*q), self.value(*k));
                let (b, h, l, d) = (vq.shape()[0], vq.shape()[1], vq.shape()[2], vq.shape()[3]);
                let mut scaled = grad.clone();
                for v in scaled.data_mut() {
                    *v = *v * *scale;
                }
                self.accum(slots, *q, |g| {
                    let kdata = vk.data();
                    ops::for_each_slice_pair(scaled.data(), l * l, g.data_mut(), l * d, |s, ds, out| {
                        ops::matmul_acc_serial(l, l, d, ds, &kdata[s * l * d..(s + 1) * l * d], out);
                    });
                });
                self.accum(slots, *k, |g| {
                    let qdata = vq.data();
                    ops::for_each_slice_pair(scaled.data(), l * l, g.data_mut(), l * d, |s, ds, out| {
                        ops::matmul_at_acc_serial(l, l, d, ds, &qdata[s * l * d..(s + 1) * l * d], out);
                    });
                });
                let _ = (b, h);
            }
            Op::AttnContext { p, v } => {
                let (vp, vv) = (self.value(*p), self.value(*v));
                let (b, h, l, d) = (vv.shape()[0], vv.shape()[1], vv.shape()[2], vv.shape()[3]);
                self.accum(slots, *p, |g| {
                    let vdata = vv.data();
                    ops::for_each_slice_pair(grad.data(), l * d, g.data_mut(), l * l, |s, dc, out| {
                        ops::matmul_bt_acc_serial(l, l, d, dc, &vdata[s * l * d..(s + 1) * l * d], out);
                    });
                });
                self.accum(slots, *v, |g| {
                    let pdata = vp.data();
                    ops::for_each_slice_pair(grad.data(), l * d, g.data_mut(), l * d, |s, dc, out| {
                        ops::matmul_at_acc_serial(l, l, d, &pdata[s * l * l..(s + 1) * l * l], dc, out);
                    });
                });
                let _ = (b, h);
            }
            Op::MeanPoolMask { x, mask } => {
                let vx = self.value(*x);
                let (b, l, h) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                self.accum(slots, *x, |g| {
                    for bi in 0..b {
                        let count = mask[bi * l..(bi + 1) * l].iter().filter(|&&m| m).count();
                        let inv = T::from_f64(1.0 / count as f64);
                        let src = &grad.data()[bi * h..(bi + 1) * h];
                        for li in 0..l {
                            if mask[bi * l + li] {
                                let dst =
                                    &mut g.data_mut()[(bi * l + li) * h..(bi * l + li + 1) * h];
                                for (o, &v) in dst.iter_mut().zip(src) {
                                    *o += v * inv;
                                }
                            }
                        }
                    }
                });
            }
            Op::Dropout { x, keep, scale } => {
                let scale = *scale;
                self.accum(slots, *x, |g| {
                    for ((o, &kp), &dy) in g.data_mut().iter_mut().zip(keep).zip(grad.data()) {
                        if kp {
                            *o += dy * scale;
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                self.accum(slots, *x, |g| {
                    for (o, &v) in g.data_mut().iter_mut().zip(grad.data()) {
                        *o += v;
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let h = self.value(*x).shape()[1];
                self.accum(slots, *x, |g| {
                    for (r, &src_row) in rows.iter().enumerate() {
                        let dst = &mut g.data_mut()[src_row * h..(src_row + 1) * h];
                        let src = &grad.data()[r * h..(r + 1) * h];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                });
            }
            Op::CrossEntropyRows { logits, labels, probs } => {
                let dy = grad.item();
                let n = labels.len();
                let v = probs.shape()[1];
                let inv_n = T::from_f64(1.0 / n as f64);
                self.accum(slots, *logits, |g| {
                    for (r, &label) in labels.iter().enumerate() {
                        let pr = &probs.data()[r * v..(r + 1) * v];
                        let dst = &mut g.data_mut()[r * v..(r + 1) * v];
                        for (i, (o, &p)) in dst.iter_mut().zip(pr).enumerate() {
                            let delta = if i == label { T::ONE } else { T::ZERO };
                            *o += dy * inv_n * (p - delta);
                        }
                    }
                });
            }
            Op::CoxLoss { theta, times, events } => {
                let vt = self.value(*theta);
                let scores = vt.data();
                let n = scores.len();
                let n_events = events.iter().filter(|&&e| e).count();
                if n_events == 0 {
                    return;
                }
                let dy = grad.item();
                let inv_d = T::from_f64(1.0 / n_events as f64);
                self.accum(slots, *theta, |g| {
                    for i in 0..n {
                        if !events[i] {
                            continue;
                        }
                        let lse = ops::logsumexp(
                            (0..n).filter(|&j| times[j] >= times[i]).map(|j| scores[j]),
                        );
                        for j in 0..n {
                            if times[j] >= times[i] {
                                let w = (scores[j] - lse).exp();
                                g.data_mut()[j] += dy * inv_d * w;
                            }
                        }
                        g.data_mut()[i] += -(dy * inv_d);
                    }
                });
            }
            Op::BatchNorm { x, gain, bias, mean, inv_std, train } => {
                let vx = self.value(*x);
                let (b, f) = (vx.shape()[0], vx.shape()[1]);
                let g = self.value(*gain).data();
                let inv_b = T::from_f64(1.0 / b as f64);
                self.accum(slots, *gain, |gg| {
                    for (row, dyr) in grad.data().chunks(f).enumerate() {
                        let xr = &vx.data()[row * f..(row + 1) * f];
                        for i in 0..f {
                            let xhat = (xr[i] - mean[i]) * inv_std[i];
                            gg.data_mut()[i] += dyr[i] * xhat;
                        }
                    }
                });
                self.accum(slots, *bias, |gb| {
                    for dyr in grad.data().chunks(f) {
                        for (o, &v) in gb.data_mut().iter_mut().zip(dyr) {
                            *o += v;
                        }
                    }
                });
                if !train {
                    self.accum(slots, *x, |gx| {
                        for (row, dyr) in grad.data().chunks(f).enumerate() {
                            let dst = &mut gx.data_mut()[row * f..(row + 1) * f];
                            for i in 0..f {
                                dst[i] += dyr[i] * g[i] * inv_std[i];
                            }
                        }
                    });
                    return;
                }
                // Train-mode backward: mean/var depend on the batch. Columns
                // are independent, so apply the standard per-feature formula.
                let mut sum_dxhat = vec![T::ZERO; f];
                let mut sum_dxhat_xhat = vec![T::ZERO; f];
                for (row, dyr) in grad.data().chunks(f).enumerate() {
                    let xr = &vx.data()[row * f..(row + 1) * f];
                    for i in 0..f {
                        let dxhat = dyr[i] * g[i];
                        let xhat = (xr[i] - mean[i]) * inv_std[i];
                        sum_dxhat[i] += dxhat;
                        sum_dxhat_xhat[i] += dxhat * xhat;
                    }
                }
                self.accum(slots, *x, |gx| {
                    for (row, dyr) in grad.data().chunks(f).enumerate() {
                        let xr = &vx.data()[row * f..(row + 1) * f];
                        let dst = &mut gx.data_mut()[row * f..(row + 1) * f];
                        for i in 0..f {
                            let dxhat = dyr[i] * g[i];
                            let xhat = (xr[i] - mean[i]) * inv_std[i];
                            dst[i] += inv_std[i]
                                * (dxhat
                                    - inv_b * sum_dxhat[i]
                                    - xhat * inv_b * sum_dxhat_xhat[i]);
                        }
                    }
                });
            }
            Op::SumScalars { xs } => {
                let dy = grad.item();
                for &x in xs {
                    self.accum(slots, x, |g| {
                        g.data_mut()[0] += dy;
                    });
                }
            }
            Op::StackCols { xs } => {
                let k = xs.len();
                for (ci, &x) in xs.iter().enumerate() {
                    let b = self.value(x).len();
                    self.accum(slots, x, |g| {
                        for ri in 0..b {
                            g.data_mut()[ri] += grad.data()[ri * k + ci];
                        }
                    });
                }
            }
        }
    }
}

/// Eval-mode batch norm is the same affine transform with running statistics;
/// exposed as a plain function for scoring paths that bypass the tape.
pub fn batch_norm_eval_value<T: Element>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Tensor<T> {
    let f = x.last_dim();
    let eps = T::from_f64(eps);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(f) {
        for i in 0..f {
            let inv = T::ONE / (running_var.data()[i] + eps).sqrt();
            row[i] = (row[i] - running_mean.data()[i]) * inv * gain.data()[i] + bias.data()[i];
        }
    }
    out
}
