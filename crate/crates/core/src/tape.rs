//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every forward operation pushes one node (result tensor + the op that made
//! it, with input ids) onto the [`Tape`]. Node ids always reference earlier
//! nodes, so the tape is topologically ordered by construction and reference
//! cycles are unrepresentable. [`Tape::backward`] walks the nodes in reverse,
//! applying each op's vector-Jacobian product by hand, and *accumulates* the
//! result into each `requires_grad` node's gradient buffer — a second
//! backward pass without clearing sums exactly.
//!
//! The differentiable op set is fixed: matmul (plain and batched), add with
//! trailing-dimension broadcast, elementwise multiply, scalar scale, ReLU,
//! GELU (tanh form), layer norm, softmax (plain and key-masked), embedding
//! lookup, concatenation, repeat/slice/reshape/head-split plumbing, sum, and
//! masked token-level cross-entropy. All math is f64 and deterministic:
//! identical inputs and op sequence give bitwise-identical values and
//! gradients.

use crate::error::{ensure_contract, ensure_input, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// `lhs + rhs`; `rhs`'s shape must be a trailing suffix of `lhs`'s.
    Add { lhs: TensorId, rhs: TensorId },
    /// Elementwise product of same-shape tensors.
    Mul { lhs: TensorId, rhs: TensorId },
    Scale { input: TensorId, factor: f64 },
    /// `[m,k] @ [k,n]`.
    Matmul { lhs: TensorId, rhs: TensorId },
    /// Batched matmul over matching leading groups; `transpose_rhs` treats
    /// rhs as `[g,n,k]` and computes `lhs @ rhsᵀ` per group.
    Bmm { lhs: TensorId, rhs: TensorId, transpose_rhs: bool },
    Relu { input: TensorId },
    Gelu { input: TensorId },
    /// Normalizes the last axis; `gamma`/`beta` have that axis's length.
    /// Per-row `(mean, 1/std)` are cached for the backward pass.
    LayerNorm { input: TensorId, gamma: TensorId, beta: TensorId, row_stats: Vec<(f64, f64)> },
    /// Softmax over the last axis.
    SoftmaxLast { input: TensorId },
    /// Softmax over keys with disallowed entries fixed at exactly zero.
    /// The mask is consumed in the forward pass; masked outputs are exactly
    /// zero, which already yields zero gradient under the softmax VJP.
    MaskedSoftmaxLast { input: TensorId },
    /// Row gather: output row `i` is `table[ids[i]]`.
    Embedding { table: TensorId, ids: Vec<usize> },
    /// Concatenation along `axis`; all other dims must match.
    Concat { lhs: TensorId, rhs: TensorId, axis: usize },
    /// Tiles the input `copies` times along a fresh leading axis.
    Repeat { input: TensorId, copies: usize },
    /// First-axis slice `[start, start+len)`.
    SliceRows { input: TensorId, start: usize, len: usize },
    Reshape { input: TensorId },
    /// `[b,s,d] -> [b*h,s,d/h]` per-head layout for attention.
    SplitHeads { input: TensorId, n_heads: usize },
    /// Inverse of `SplitHeads`.
    MergeHeads { input: TensorId, n_heads: usize },
    SumAll { input: TensorId },
    /// Mean negative log-likelihood over unmasked rows of `[n, classes]`
    /// logits. Softmax probabilities are cached for the backward pass.
    CrossEntropy { logits: TensorId, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64>, n_included: usize },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Append-only autodiff tape. One tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Pushes an existing tensor as a leaf node.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, Op::Leaf)
    }

    /// Pushes a non-differentiable constant leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        Ok(self.leaf(Tensor::new(shape, data, false)?))
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].tensor.data()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    /// Accumulated gradient of a node; zeros if backward never reached it
    /// (e.g. the loss is constant with respect to it).
    pub fn grad(&self, id: TensorId) -> Vec<f64> {
        let node = &self.nodes[id.0];
        node.tensor
            .grad()
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; node.tensor.numel()])
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { tensor, op });
        TensorId(self.nodes.len() - 1)
    }

    fn check_id(&self, id: TensorId) -> Result<()> {
        ensure_contract!(id.0 < self.nodes.len(), "tensor id {} out of range", id.0);
        Ok(())
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].tensor.requires_grad()
    }

    fn result(&mut self, shape: Vec<usize>, data: Vec<f64>, requires: bool, op: Op) -> Result<TensorId> {
        let mut t = Tensor::new(shape, data, requires)?;
        t.set_requires_grad(requires);
        Ok(self.push(t, op))
    }

    // ---- differentiable ops ----

    /// `lhs + rhs` where `rhs`'s shape equals a trailing suffix of `lhs`'s
    /// shape (equal shapes included); `rhs` broadcasts over the leading dims.
    pub fn add(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        self.check_id(lhs)?;
        self.check_id(rhs)?;
        let (ls, rs) = (self.shape(lhs).to_vec(), self.shape(rhs).to_vec());
        ensure_contract!(
            rs.len() <= ls.len() && ls[ls.len() - rs.len()..] == rs[..],
            "add: rhs shape {:?} is not a trailing suffix of lhs shape {:?}",
            rs,
            ls
        );
        let (l, r) = (self.data(lhs), self.data(rhs));
        let rlen = r.len().max(1);
        let mut out = Vec::with_capacity(l.len());
        for (i, &v) in l.iter().enumerate() {
            out.push(v + r[i % rlen]);
        }
        let req = self.requires(lhs) || self.requires(rhs);
        self.result(ls, out, req, Op::Add { lhs, rhs })
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        self.check_id(lhs)?;
        self.check_id(rhs)?;
        ensure_contract!(
            self.shape(lhs) == self.shape(rhs),
            "mul: shape mismatch {:?} vs {:?}",
            self.shape(lhs),
            self.shape(rhs)
        );
        let out: Vec<f64> = self
            .data(lhs)
            .iter()
            .zip(self.data(rhs))
            .map(|(a, b)| a * b)
            .collect();
        let req = self.requires(lhs) || self.requires(rhs);
        self.result(self.shape(lhs).to_vec(), out, req, Op::Mul { lhs, rhs })
    }

    pub fn scale(&mut self, input: TensorId, factor: f64) -> Result<TensorId> {
        self.check_id(input)?;
        let out: Vec<f64> = self.data(input).iter().map(|v| v * factor).collect();
        let req = self.requires(input);
        self.result(self.shape(input).to_vec(), out, req, Op::Scale { input, factor })
    }

    /// `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        self.check_id(lhs)?;
        self.check_id(rhs)?;
        let (ls, rs) = (self.shape(lhs), self.shape(rhs));
        ensure_contract!(
            ls.len() == 2 && rs.len() == 2 && ls[1] == rs[0],
            "matmul: incompatible shapes {:?} x {:?}",
            ls,
            rs
        );
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let mut out = vec![0.0; m * n];
        mm_nn(self.data(lhs), self.data(rhs), m, k, n, &mut out);
        let req = self.requires(lhs) || self.requires(rhs);
        self.result(vec![m, n], out, req, Op::Matmul { lhs, rhs })
    }

    /// Batched matmul `[g,m,k] @ [g,k,n] -> [g,m,n]`; with `transpose_rhs`
    /// the rhs is `[g,n,k]` and each group computes `lhs @ rhsᵀ`.
    pub fn bmm(&mut self, lhs: TensorId, rhs: TensorId, transpose_rhs: bool) -> Result<TensorId> {
        self.check_id(lhs)?;
        self.check_id(rhs)?;
        let (ls, rs) = (self.shape(lhs).to_vec(), self.shape(rhs).to_vec());
        ensure_contract!(
            ls.len() == 3 && rs.len() == 3 && ls[0] == rs[0],
            "bmm: expected matching 3-d groups, got {:?} x {:?}",
            ls,
            rs
        );
        let (g, m, k) = (ls[0], ls[1], ls[2]);
        let n = if transpose_rhs { rs[1] } else { rs[2] };
        let k_rhs = if transpose_rhs { rs[2] } else { rs[1] };
        ensure_contract!(
            k_rhs == k,
            "bmm: inner dimension mismatch {:?} x {:?} (transpose_rhs={})",
            ls,
            rs,
            transpose_rhs
        );
        let mut out = vec![0.0; g * m * n];
        {
            let (l, r) = (self.data(lhs), self.data(rhs));
            for gi in 0..g {
                let lb = &l[gi * m * k..(gi + 1) * m * k];
                let rb = &r[gi * k * n..(gi + 1) * k * n];
                let ob = &mut out[gi * m * n..(gi + 1) * m * n];
                if transpose_rhs {
                    mm_nt(lb, rb, m, k, n, ob);
                } else {
                    mm_nn(lb, rb, m, k, n, ob);
                }
            }
        }
        let req = self.requires(lhs) || self.requires(rhs);
        self.result(vec![g, m, n], out, req, Op::Bmm { lhs, rhs, transpose_rhs })
    }

    pub fn relu(&mut self, input: TensorId) -> Result<TensorId> {
        self.check_id(input)?;
        let out: Vec<f64> = self.data(input).iter().map(|&v| v.max(0.0)).collect();
        let req = self.requires(input);
        self.result(self.shape(input).to_vec(), out, req, Op::Relu { input })
    }

    /// GELU in its tanh form: `0.5x(1 + tanh(√(2/π)(x + 0.044715x³)))`.
    pub fn gelu(&mut self, input: TensorId) -> Result<TensorId> {
        self.check_id(input)?;
        let out: Vec<f64> = self.data(input).iter().map(|&v| gelu_tanh(v)).collect();
        let req = self.requires(input);
        self.result(self.shape(input).to_vec(), out, req, Op::Gelu { input })
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        self.check_id(input)?;
        self.check_id(gamma)?;
        self.check_id(beta)?;
        let shape = self.shape(input).to_vec();
        ensure_contract!(!shape.is_empty(), "layer_norm: scalar input");
        let d = *shape.last().unwrap();
        ensure_contract!(
            self.shape(gamma) == [d] && self.shape(beta) == [d],
            "layer_norm: gamma/beta must have shape [{}], got {:?} and {:?}",
            d,
            self.shape(gamma),
            self.shape(beta)
        );
        let x = self.data(input);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = x.len() / d;
        let mut out = vec![0.0; x.len()];
        let mut row_stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for i in 0..d {
                out[r * d + i] = (xr[i] - mean) * inv_std * g[i] + b[i];
            }
            row_stats.push((mean, inv_std));
        }
        let req = self.requires(input) || self.requires(gamma) || self.requires(beta);
        self.result(shape, out, req, Op::LayerNorm { input, gamma, beta, row_stats })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, input: TensorId) -> Result<TensorId> {
        self.check_id(input)?;
        let shape = self.shape(input).to_vec();
        ensure_contract!(!shape.is_empty(), "softmax: scalar input");
        let d = *shape.last().unwrap();
        let x = self.data(input);
        let mut out = vec![0.0; x.len()];
        for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            softmax_row(xr, or);
        }
        let req = self.requires(input);
        self.result(shape, out, req, Op::SoftmaxLast { input })
    }

    /// Attention softmax over keys where masked entries come out exactly
    /// zero. `input` is `[batch*heads, q, k]`; `mask` is `[batch, q, k]`
    /// flattened, `true` meaning the key may be attended to, and is shared
    /// by all heads of a batch row. Every query row must keep at least one
    /// allowed key.
    pub fn masked_softmax_last(
        &mut self,
        input: TensorId,
        mask: &[bool],
        n_heads: usize,
    ) -> Result<TensorId> {
        self.check_id(input)?;
        let shape = self.shape(input).to_vec();
        ensure_contract!(
            shape.len() == 3 && n_heads > 0 && shape[0] % n_heads == 0,
            "masked softmax: expected [batch*heads, q, k] input with heads dividing groups, got {:?} / {} heads",
            shape,
            n_heads
        );
        let (groups, q, k) = (shape[0], shape[1], shape[2]);
        let batch = groups / n_heads;
        ensure_contract!(
            mask.len() == batch * q * k,
            "masked softmax: mask length {} does not match batch {} x q {} x k {}",
            mask.len(),
            batch,
            q,
            k
        );
        let x = self.data(input);
        let mut out = vec![0.0; x.len()];
        for gi in 0..groups {
            let b = gi / n_heads;
            for row in 0..q {
                let xr = &x[(gi * q + row) * k..(gi * q + row + 1) * k];
                let mr = &mask[(b * q + row) * k..(b * q + row + 1) * k];
                ensure_contract!(
                    mr.iter().any(|&m| m),
                    "masked softmax: query row {} of batch {} has no allowed keys",
                    row,
                    b
                );
                let or = &mut out[(gi * q + row) * k..(gi * q + row + 1) * k];
                masked_softmax_row(xr, mr, or);
            }
        }
        let req = self.requires(input);
        self.result(shape, out, req, Op::MaskedSoftmaxLast { input })
    }

    /// Embedding lookup: output row `i` is `table[ids[i]]`.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        self.check_id(table)?;
        let ts = self.shape(table);
        ensure_contract!(ts.len() == 2, "embedding: table must be 2-d, got {:?}", ts);
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(crate::error::Error::input(format!(
                "embedding id {bad} out of range for table with {v} rows"
            )));
        }
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let req = self.requires(table);
        self.result(
            vec![ids.len(), d],
            out,
            req,
            Op::Embedding { table, ids: ids.to_vec() },
        )
    }

    /// Concatenates along `axis`; ranks and all other dims must match.
    pub fn concat(&mut self, lhs: TensorId, rhs: TensorId, axis: usize) -> Result<TensorId> {
        self.check_id(lhs)?;
        self.check_id(rhs)?;
        let (ls, rs) = (self.shape(lhs).to_vec(), self.shape(rhs).to_vec());
        ensure_contract!(
            ls.len() == rs.len() && axis < ls.len(),
            "concat: rank mismatch or bad axis {} for {:?} and {:?}",
            axis,
            ls,
            rs
        );
        for (i, (a, b)) in ls.iter().zip(&rs).enumerate() {
            ensure_contract!(
                i == axis || a == b,
                "concat: dim {} differs ({} vs {}) off the concat axis {}",
                i,
                a,
                b,
                axis
            );
        }
        let outer: usize = ls[..axis].iter().product();
        let inner: usize = ls[axis + 1..].iter().product();
        let (la, ra) = (ls[axis], rs[axis]);
        let (l, r) = (self.data(lhs), self.data(rhs));
        let mut out = Vec::with_capacity(l.len() + r.len());
        for o in 0..outer {
            out.extend_from_slice(&l[o * la * inner..(o + 1) * la * inner]);
            out.extend_from_slice(&r[o * ra * inner..(o + 1) * ra * inner]);
        }
        let mut shape = ls.clone();
        shape[axis] = la + ra;
        let req = self.requires(lhs) || self.requires(rhs);
        self.result(shape, out, req, Op::Concat { lhs, rhs, axis })
    }

    /// Tiles the input `copies` times along a new leading axis.
    pub fn repeat(&mut self, input: TensorId, copies: usize) -> Result<TensorId> {
        self.check_id(input)?;
        ensure_contract!(copies > 0, "repeat: zero copies");
        let shape = self.shape(input).to_vec();
        let x = self.data(input);
        let mut out = Vec::with_capacity(x.len() * copies);
        for _ in 0..copies {
            out.extend_from_slice(x);
        }
        let mut news = Vec::with_capacity(shape.len() + 1);
        news.push(copies);
        news.extend_from_slice(&shape);
        let req = self.requires(input);
        self.result(news, out, req, Op::Repeat { input, copies })
    }

    /// Slices rows `[start, start+len)` along the first axis.
    pub fn slice_rows(&mut self, input: TensorId, start: usize, len: usize) -> Result<TensorId> {
        self.check_id(input)?;
        let shape = self.shape(input).to_vec();
        ensure_contract!(
            !shape.is_empty() && start + len <= shape[0],
            "slice_rows: rows {}..{} out of range for shape {:?}",
            start,
            start + len,
            shape
        );
        let inner: usize = shape[1..].iter().product();
        let out = self.data(input)[start * inner..(start + len) * inner].to_vec();
        let mut news = shape.clone();
        news[0] = len;
        let req = self.requires(input);
        self.result(news, out, req, Op::SliceRows { input, start, len })
    }

    /// Reinterprets the data with a new shape of equal element count.
    pub fn reshape(&mut self, input: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        self.check_id(input)?;
        let numel: usize = shape.iter().product();
        ensure_contract!(
            numel == self.data(input).len(),
            "reshape: {:?} incompatible with {} elements",
            shape,
            self.data(input).len()
        );
        let out = self.data(input).to_vec();
        let req = self.requires(input);
        self.result(shape, out, req, Op::Reshape { input })
    }

    /// `[b,s,d] -> [b*h,s,d/h]`: splits the feature axis into heads and
    /// folds them into the batch axis for attention.
    pub fn split_heads(&mut self, input: TensorId, n_heads: usize) -> Result<TensorId> {
        self.check_id(input)?;
        let shape = self.shape(input).to_vec();
        ensure_contract!(
            shape.len() == 3 && n_heads > 0 && shape[2] % n_heads == 0,
            "split_heads: need [b,s,d] with d divisible by {} heads, got {:?}",
            n_heads,
            shape
        );
        let (b, s, d) = (shape[0], shape[1], shape[2]);
        let dh = d / n_heads;
        let x = self.data(input);
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            for h in 0..n_heads {
                for si in 0..s {
                    let src = (bi * s + si) * d + h * dh;
                    let dst = (((bi * n_heads + h) * s) + si) * dh;
                    out[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
                }
            }
        }
        let req = self.requires(input);
        self.result(vec![b * n_heads, s, dh], out, req, Op::SplitHeads { input, n_heads })
    }

    /// Inverse of [`Tape::split_heads`]: `[b*h,s,dh] -> [b,s,h*dh]`.
    pub fn merge_heads(&mut self, input: TensorId, n_heads: usize) -> Result<TensorId> {
        self.check_id(input)?;
        let shape = self.shape(input).to_vec();
        ensure_contract!(
            shape.len() == 3 && n_heads > 0 && shape[0] % n_heads == 0,
            "merge_heads: need [b*h,s,dh] with groups divisible by {} heads, got {:?}",
            n_heads,
            shape
        );
        let (b, s, dh) = (shape[0] / n_heads, shape[1], shape[2]);
        let d = dh * n_heads;
        let x = self.data(input);
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            for h in 0..n_heads {
                for si in 0..s {
                    let src = (((bi * n_heads + h) * s) + si) * dh;
                    let dst = (bi * s + si) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
                }
            }
        }
        let req = self.requires(input);
        self.result(vec![b, s, d], out, req, Op::MergeHeads { input, n_heads })
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, input: TensorId) -> Result<TensorId> {
        self.check_id(input)?;
        let s: f64 = self.data(input).iter().sum();
        let req = self.requires(input);
        self.result(vec![], vec![s], req, Op::SumAll { input })
    }

    /// Mean token-level cross-entropy over the unmasked rows of `[n, c]`
    /// logits. `targets[i]` is row `i`'s class; rows with `mask[i] == false`
    /// are excluded from the mean and receive zero gradient.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<TensorId> {
        self.check_id(logits)?;
        let shape = self.shape(logits).to_vec();
        ensure_contract!(shape.len() == 2, "cross_entropy: logits must be [n, classes], got {:?}", shape);
        let (n, c) = (shape[0], shape[1]);
        ensure_contract!(
            targets.len() == n && mask.len() == n,
            "cross_entropy: {} logit rows but {} targets / {} mask entries",
            n,
            targets.len(),
            mask.len()
        );
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(crate::error::Error::input(format!(
                "cross_entropy: target class {bad} out of range for {c} classes"
            )));
        }
        let n_included = mask.iter().filter(|&&m| m).count();
        ensure_input!(n_included > 0, "cross_entropy: every position is masked out");
        let x = self.data(logits);
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        for i in 0..n {
            let xr = &x[i * c..(i + 1) * c];
            let pr = &mut probs[i * c..(i + 1) * c];
            let lse = log_sum_exp(xr);
            for j in 0..c {
                pr[j] = (xr[j] - lse).exp();
            }
            if mask[i] {
                loss += lse - xr[targets[i]];
            }
        }
        loss /= n_included as f64;
        let req = self.requires(logits);
        self.result(
            vec![],
            vec![loss],
            req,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                n_included,
            },
        )
    }

    // ---- backward ----

    /// Reverse accumulation from a scalar `loss` node. Gradients land in
    /// each `requires_grad` node's accumulator (see [`Tape::grad`]); nodes
    /// the loss does not depend on keep a zero gradient.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        self.check_id(loss)?;
        ensure_contract!(
            self.nodes[loss.0].tensor.numel() == 1,
            "backward: loss must be scalar, got shape {:?}",
            self.nodes[loss.0].tensor.shape()
        );
        let mut adjoint: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        adjoint.resize_with(loss.0 + 1, || None);
        adjoint[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = adjoint[id].take() else { continue };
            self.propagate(id, &g, &mut adjoint)?;
            self.nodes[id].tensor.accumulate_grad(&g)?;
        }
        Ok(())
    }

    /// Applies node `id`'s vector-Jacobian product, adding contributions
    /// into `adjoint` for each input that requires a gradient.
    fn propagate(&self, id: usize, g: &[f64], adjoint: &mut [Option<Vec<f64>>]) -> Result<()> {
        // Adds `f`'s output into the input's adjoint buffer, lazily zeroed.
        let numel = |tid: TensorId| self.nodes[tid.0].tensor.numel();
        macro_rules! sink {
            ($tid:expr) => {{
                let t = $tid;
                adjoint[t.0].get_or_insert_with(|| vec![0.0; numel(t)])
            }};
        }

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add { lhs, rhs } => {
                if self.requires(*lhs) {
                    let acc = sink!(*lhs);
                    for (a, gi) in acc.iter_mut().zip(g) {
                        *a += gi;
                    }
                }
                if self.requires(*rhs) {
                    let rlen = numel(*rhs).max(1);
                    let acc = sink!(*rhs);
                    for (i, gi) in g.iter().enumerate() {
                        acc[i % rlen] += gi;
                    }
                }
            }
            Op::Mul { lhs, rhs } => {
                if self.requires(*lhs) {
                    let r = self.nodes[rhs.0].tensor.data();
                    let acc = sink!(*lhs);
                    for i in 0..g.len() {
                        acc[i] += g[i] * r[i];
                    }
                }
                if self.requires(*rhs) {
                    let l = self.nodes[lhs.0].tensor.data();
                    let acc = sink!(*rhs);
                    for i in 0..g.len() {
                        acc[i] += g[i] * l[i];
                    }
                }
            }
            Op::Scale { input, factor } => {
                if self.requires(*input) {
                    let acc = sink!(*input);
                    for (a, gi) in acc.iter_mut().zip(g) {
                        *a += gi * factor;
                    }
                }
            }
            Op::Matmul { lhs, rhs } => {
                let ls = self.nodes[lhs.0].tensor.shape();
                let (m, k) = (ls[0], ls[1]);
                let n = self.nodes[rhs.0].tensor.shape()[1];
                if self.requires(*lhs) {
                    let r = self.nodes[rhs.0].tensor.data();
                    mm_nt(g, r, m, n, k, sink!(*lhs));
                }
                if self.requires(*rhs) {
                    let l = self.nodes[lhs.0].tensor.data();
                    mm_tn(l, g, m, k, n, sink!(*rhs));
                }
            }
            Op::Bmm { lhs, rhs, transpose_rhs } => {
                let ls = self.nodes[lhs.0].tensor.shape();
                let (groups, m, k) = (ls[0], ls[1], ls[2]);
                let n = g.len() / (groups * m);
                if self.requires(*lhs) {
                    let r = self.nodes[rhs.0].tensor.data();
                    let acc = sink!(*lhs);
                    for gi in 0..groups {
                        let gb = &g[gi * m * n..(gi + 1) * m * n];
                        let rb = &r[gi * k * n..(gi + 1) * k * n];
                        let ab = &mut acc[gi * m * k..(gi + 1) * m * k];
                        if *transpose_rhs {
                            // out = L Rᵀ, so dL = G R.
                            mm_nn(gb, rb, m, n, k, ab);
                        } else {
                            // dL = G Rᵀ.
                            mm_nt(gb, rb, m, n, k, ab);
                        }
                    }
                }
                if self.requires(*rhs) {
                    let l = self.nodes[lhs.0].tensor.data();
                    let acc = sink!(*rhs);
                    for gi in 0..groups {
                        let gb = &g[gi * m * n..(gi + 1) * m * n];
                        let lb = &l[gi * m * k..(gi + 1) * m * k];
                        let ab = &mut acc[gi * k * n..(gi + 1) * k * n];
                        if *transpose_rhs {
                            // dR[n,k] = Gᵀ L.
                            mm_tn(gb, lb, m, n, k, ab);
                        } else {
                            // dR[k,n] = Lᵀ G.
                            mm_tn(lb, gb, m, k, n, ab);
                        }
                    }
                }
            }
            Op::Relu { input } => {
                if self.requires(*input) {
                    let x = self.nodes[input.0].tensor.data();
                    let acc = sink!(*input);
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            acc[i] += g[i];
                        }
                    }
                }
            }
            Op::Gelu { input } => {
                if self.requires(*input) {
                    let x = self.nodes[input.0].tensor.data();
                    let acc = sink!(*input);
                    for i in 0..g.len() {
                        acc[i] += g[i] * gelu_tanh_grad(x[i]);
                    }
                }
            }
            Op::LayerNorm { input, gamma, beta, row_stats } => {
                let d = self.nodes[gamma.0].tensor.numel();
                let x = self.nodes[input.0].tensor.data();
                let gm = self.nodes[gamma.0].tensor.data();
                let rows = x.len() / d;
                if self.requires(*input) {
                    let acc = sink!(*input);
                    for r in 0..rows {
                        let (mean, inv_std) = row_stats[r];
                        let xr = &x[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        // dxhat = g * gamma; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for i in 0..d {
                            let xh = (xr[i] - mean) * inv_std;
                            let dxh = gr[i] * gm[i];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh;
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for i in 0..d {
                            let xh = (xr[i] - mean) * inv_std;
                            let dxh = gr[i] * gm[i];
                            acc[r * d + i] += inv_std * (dxh - mean_dxh - xh * mean_dxh_xh);
                        }
                    }
                }
                if self.requires(*gamma) {
                    let acc = sink!(*gamma);
                    for r in 0..rows {
                        let (mean, inv_std) = row_stats[r];
                        for i in 0..d {
                            let xh = (x[r * d + i] - mean) * inv_std;
                            acc[i] += g[r * d + i] * xh;
                        }
                    }
                }
                if self.requires(*beta) {
                    let acc = sink!(*beta);
                    for r in 0..rows {
                        for i in 0..d {
                            acc[i] += g[r * d + i];
                        }
                    }
                }
            }
            Op::SoftmaxLast { input } => {
                if self.requires(*input) {
                    let y = self.nodes[id].tensor.data();
                    let d = *self.nodes[id].tensor.shape().last().unwrap();
                    let acc = sink!(*input);
                    softmax_backward_rows(y, g, d, acc);
                }
            }
            Op::MaskedSoftmaxLast { input } => {
                // Masked outputs are exactly zero, so the plain softmax VJP
                // already sends zero gradient to masked positions.
                if self.requires(*input) {
                    let y = self.nodes[id].tensor.data();
                    let d = *self.nodes[id].tensor.shape().last().unwrap();
                    let acc = sink!(*input);
                    softmax_backward_rows(y, g, d, acc);
                }
            }
            Op::Embedding { table, ids } => {
                if self.requires(*table) {
                    let d = self.nodes[table.0].tensor.shape()[1];
                    let acc = sink!(*table);
                    for (row, &id) in ids.iter().enumerate() {
                        for i in 0..d {
                            acc[id * d + i] += g[row * d + i];
                        }
                    }
                }
            }
            Op::Concat { lhs, rhs, axis } => {
                let ls = self.nodes[lhs.0].tensor.shape();
                let rs = self.nodes[rhs.0].tensor.shape();
                let outer: usize = ls[..*axis].iter().product();
                let inner: usize = ls[*axis + 1..].iter().product();
                let (la, ra) = (ls[*axis], rs[*axis]);
                let chunk = (la + ra) * inner;
                if self.requires(*lhs) {
                    let acc = sink!(*lhs);
                    for o in 0..outer {
                        let src = &g[o * chunk..o * chunk + la * inner];
                        let dst = &mut acc[o * la * inner..(o + 1) * la * inner];
                        for (a, s) in dst.iter_mut().zip(src) {
                            *a += s;
                        }
                    }
                }
                if self.requires(*rhs) {
                    let acc = sink!(*rhs);
                    for o in 0..outer {
                        let src = &g[o * chunk + la * inner..(o + 1) * chunk];
                        let dst = &mut acc[o * ra * inner..(o + 1) * ra * inner];
                        for (a, s) in dst.iter_mut().zip(src) {
                            *a += s;
                        }
                    }
                }
            }
            Op::Repeat { input, copies } => {
                if self.requires(*input) {
                    let n = numel(*input);
                    let acc = sink!(*input);
                    for c in 0..*copies {
                        for i in 0..n {
                            acc[i] += g[c * n + i];
                        }
                    }
                }
            }
            Op::SliceRows { input, start, len } => {
                if self.requires(*input) {
                    let inner = numel(*input) / self.nodes[input.0].tensor.shape()[0];
                    let acc = sink!(*input);
                    let dst = &mut acc[start * inner..(start + len) * inner];
                    for (a, s) in dst.iter_mut().zip(g) {
                        *a += s;
                    }
                }
            }
            Op::Reshape { input } => {
                if self.requires(*input) {
                    let acc = sink!(*input);
                    for (a, s) in acc.iter_mut().zip(g) {
                        *a += s;
                    }
                }
            }
            Op::SplitHeads { input, n_heads } => {
                if self.requires(*input) {
                    let shape = self.nodes[input.0].tensor.shape();
                    let (b, s, d) = (shape[0], shape[1], shape[2]);
                    let dh = d / n_heads;
                    let acc = sink!(*input);
                    for bi in 0..b {
                        for h in 0..*n_heads {
                            for si in 0..s {
                                let dst = (bi * s + si) * d + h * dh;
                                let src = (((bi * n_heads + h) * s) + si) * dh;
                                for i in 0..dh {
                                    acc[dst + i] += g[src + i];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { input, n_heads } => {
                if self.requires(*input) {
                    let shape = self.nodes[input.0].tensor.shape();
                    let (bh, s, dh) = (shape[0], shape[1], shape[2]);
                    let b = bh / n_heads;
                    let d = dh * n_heads;
                    let acc = sink!(*input);
                    for bi in 0..b {
                        for h in 0..*n_heads {
                            for si in 0..s {
                                let src = (bi * s + si) * d + h * dh;
                                let dst = (((bi * n_heads + h) * s) + si) * dh;
                                for i in 0..dh {
                                    acc[dst + i] += g[src + i];
                                }
                            }
                        }
                    }
                }
            }
            Op::SumAll { input } => {
                if self.requires(*input) {
                    let acc = sink!(*input);
                    for a in acc.iter_mut() {
                        *a += g[0];
                    }
                }
            }
            Op::CrossEntropy { logits, targets, mask, probs, n_included } => {
                if self.requires(*logits) {
                    let c = self.nodes[logits.0].tensor.shape()[1];
                    let scale = g[0] / *n_included as f64;
                    let acc = sink!(*logits);
                    for i in 0..targets.len() {
                        if !mask[i] {
                            continue;
                        }
                        for j in 0..c {
                            let indicator = if j == targets[i] { 1.0 } else { 0.0 };
                            acc[i * c + j] += scale * (probs[i * c + j] - indicator);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

// ---- scalar math ----

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_tanh_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax over the allowed entries only; disallowed outputs are exactly 0.
fn masked_softmax_row(x: &[f64], mask: &[bool], out: &mut [f64]) {
    let mut m = f64::NEG_INFINITY;
    for (i, &v) in x.iter().enumerate() {
        if mask[i] && v > m {
            m = v;
        }
    }
    let mut sum = 0.0;
    for i in 0..x.len() {
        if mask[i] {
            out[i] = (x[i] - m).exp();
            sum += out[i];
        } else {
            out[i] = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Shared softmax VJP: `dx_i = y_i (g_i - Σ_j g_j y_j)` per row. Rows where
/// `y_i == 0` (masked keys) receive exactly zero gradient.
fn softmax_backward_rows(y: &[f64], g: &[f64], d: usize, acc: &mut [f64]) {
    for r in 0..y.len() / d {
        let yr = &y[r * d..(r + 1) * d];
        let gr = &g[r * d..(r + 1) * d];
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for i in 0..d {
            acc[r * d + i] += yr[i] * (gr[i] - dot);
        }
    }
}

// ---- dense kernels ----
//
// The three matmul orientations backward needs, written as accumulating
// loops with slice iterators so bounds checks vanish in the hot path.

/// `out[m,n] += a[m,k] @ b[k,n]`.
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)).take(m) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] @ b[n,k]ᵀ` (row-dot-row).
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)).take(m) {
        for (o, brow) in orow.iter_mut().zip(b.chunks_exact(k)) {
            let mut dot = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                dot += av * bv;
            }
            *o += dot;
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ @ b[m,n]`.
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for (arow, brow) in a.chunks_exact(k).zip(b.chunks_exact(n)).take(m) {
        for (&av, orow) in arow.iter().zip(out.chunks_exact_mut(n)) {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference gradient of `f` at `x`, the oracle every autodiff
    /// test compares against. `f` rebuilds the whole graph from plain data.
    fn numerical_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
        let mut grad = Vec::with_capacity(x.len());
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + eps;
            let up = f(&xp);
            xp[i] = x[i] - eps;
            let down = f(&xp);
            xp[i] = x[i];
            grad.push((up - down) / (2.0 * eps));
        }
        grad
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    /// Runs both the analytic backward pass and the finite-difference oracle
    /// for a graph builder over a single input tensor.
    fn gradcheck(
        shape: &[usize],
        x: &[f64],
        build: &dyn Fn(&mut Tape, TensorId) -> TensorId,
    ) -> f64 {
        let scalar_loss = |data: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let leaf = tape.leaf(Tensor::new(shape.to_vec(), data.to_vec(), false).unwrap());
            let out = build(&mut tape, leaf);
            tape.data(out)[0]
        };
        let mut tape = Tape::new();
        let leaf = tape.leaf(Tensor::new(shape.to_vec(), x.to_vec(), true).unwrap());
        let out = build(&mut tape, leaf);
        assert_eq!(tape.data(out).len(), 1, "gradcheck graphs must end in a scalar");
        tape.backward(out).unwrap();
        max_rel_err(&tape.grad(leaf), &numerical_grad(&scalar_loss, x, 1e-5))
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
    }

    #[test]
    fn sum_of_leaf_has_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], true).unwrap());
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), vec![1.0; 4]);
    }

    #[test]
    fn constant_loss_leaves_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5], true).unwrap());
        let c = tape.constant(vec![2], vec![4.0, 5.0]).unwrap();
        let loss = tape.sum_all(c).unwrap();
        tape.backward(loss).unwrap();
        // x is requires_grad but the loss never touches it.
        assert_eq!(tape.grad(x), vec![0.0; 3]);
    }

    #[test]
    fn two_layer_network_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w1 = rand_vec(&mut rng, 4 * 3);
        let w2 = rand_vec(&mut rng, 3 * 2);
        let x = rand_vec(&mut rng, 2 * 4);
        let err = gradcheck(&[2, 4], &x, &|tape, leaf| {
            let w1 = tape
                .leaf(Tensor::new(vec![4, 3], w1.clone(), false).unwrap());
            let w2 = tape
                .leaf(Tensor::new(vec![3, 2], w2.clone(), false).unwrap());
            let h = tape.matmul(leaf, w1).unwrap();
            let h = tape.gelu(h).unwrap();
            let o = tape.matmul(h, w2).unwrap();
            tape.sum_all(o).unwrap()
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn every_op_passes_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);

        // add with broadcast over leading dims
        let bias = rand_vec(&mut rng, 3);
        let x = rand_vec(&mut rng, 2 * 2 * 3);
        let b2 = bias.clone();
        let err = gradcheck(&[2, 2, 3], &x, &move |tape, leaf| {
            let b = tape.leaf(Tensor::new(vec![3], b2.clone(), false).unwrap());
            let y = tape.add(leaf, b).unwrap();
            tape.sum_all(y).unwrap()
        });
        assert!(err < 1e-6, "add: {err}");

        // checking the broadcast side too
        let x3 = rand_vec(&mut rng, 2 * 2 * 3);
        let err = gradcheck(&[3], &bias, &move |tape, leaf| {
            let big = tape.leaf(Tensor::new(vec![2, 2, 3], x3.clone(), false).unwrap());
            let y = tape.add(big, leaf).unwrap();
            let y = tape.gelu(y).unwrap();
            tape.sum_all(y).unwrap()
        });
        assert!(err < 1e-6, "add-broadcast: {err}");

        // mul
        let other = rand_vec(&mut rng, 6);
        let x = rand_vec(&mut rng, 6);
        let err = gradcheck(&[6], &x, &move |tape, leaf| {
            let o = tape.leaf(Tensor::new(vec![6], other.clone(), false).unwrap());
            let y = tape.mul(leaf, o).unwrap();
            tape.sum_all(y).unwrap()
        });
        assert!(err < 1e-6, "mul: {err}");

        // scale
        let x = rand_vec(&mut rng, 5);
        let err = gradcheck(&[5], &x, &|tape, leaf| {
            let y = tape.scale(leaf, -2.5).unwrap();
            tape.sum_all(y).unwrap()
        });
        assert!(err < 1e-6, "scale: {err}");

        // matmul, both sides
        let w = rand_vec(&mut rng, 3 * 4);
        let x = rand_vec(&mut rng, 2 * 3);
        let wc = w.clone();
        let err = gradcheck(&[2, 3], &x, &move |tape, leaf| {
            let w = tape.leaf(Tensor::new(vec![3, 4], wc.clone(), false).unwrap());
            let y = tape.matmul(leaf, w).unwrap();
            tape.sum_all(y).unwrap()
        });
        assert!(err < 1e-6, "matmul lhs: {err}");
        let a = rand_vec(&mut rng, 2 * 3);
        let err = gradcheck(&[3, 4], &w, &move |tape, leaf| {
            let a = tape.leaf(Tensor::new(vec![2, 3], a.clone(), false).unwrap());
            let y = tape.matmul(a, leaf).unwrap();
            let y = tape.gelu(y).unwrap();
            tape.sum_all(y).unwrap()
        });
        assert!(err < 1e-6, "matmul rhs: {err}");

        // bmm, plain and transposed
        for &transpose in &[false, true] {
            let r = rand_vec(&mut rng, 2 * 3 * 4);
            let x = rand_vec(&mut rng, 2 * 2 * 3);
            let rc = r.clone();
            let rhs_shape = if transpose { vec![2, 4, 3] } else { vec![2, 3, 4] };
            let err = gradcheck(&[2, 2, 3], &x, &move |tape, leaf| {
                let r = tape
                    .leaf(Tensor::new(rhs_shape.clone(), rc.clone(), false).unwrap());
                let y = tape.bmm(leaf, r, transpose).unwrap();
                tape.sum_all(y).unwrap()
            });
            assert!(err < 1e-6, "bmm lhs (transpose={transpose}): {err}");
            let l = rand_vec(&mut rng, 2 * 2 * 3);
            let lhs_shape = vec![2, 2, 3];
            let r_shape = if transpose { vec![2, 4, 3] } else { vec![2, 3, 4] };
            let err = gradcheck(&r_shape.clone(), &r, &move |tape, leaf| {
                let l = tape
                    .leaf(Tensor::new(lhs_shape.clone(), l.clone(), false).unwrap());
                let y = tape.bmm(l, leaf, transpose).unwrap();
                tape.sum_all(y).unwrap()
            });
            assert!(err < 1e-6, "bmm rhs (transpose={transpose}): {err}");
        }

        // relu — keep samples away from the kink so the FD oracle is valid
        let x: Vec<f64> = rand_vec(&mut rng, 8)
            .into_iter()
            .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
            .collect();
        let err = gradcheck(&[8], &x, &|tape, leaf| {
            let y = tape.relu(leaf).unwrap();
            tape.sum_all(y).unwrap()
        });
        assert!(err < 1e-6, "relu: {err}");

        // gelu
        let x = rand_vec(&mut rng, 8);
        let err = gradcheck(&[8], &x, &|tape, leaf| {
            let y = tape.gelu(leaf).unwrap();
            tape.sum_all(y).unwrap()
        });
        assert!(err < 1e-6, "gelu: {err}");

        // layer norm: input, gamma and beta paths
        let gamma = rand_vec(&mut rng, 4);
        let beta = rand_vec(&mut rng, 4);
        let x = rand_vec(&mut rng, 3 * 4);
        let (gc, bc) = (gamma.clone(), beta.clone());
        let err = gradcheck(&[3, 4], &x, &move |tape, leaf| {
            let g = tape.leaf(Tensor::new(vec![4], gc.clone(), false).unwrap());
            let b = tape.leaf(Tensor::new(vec![4], bc.clone(), false).unwrap());
            let y = tape.layer_norm(leaf, g, b, 1e-5).unwrap();
            let y = tape.gelu(y).unwrap();
            tape.sum_all(y).unwrap()
        });
        assert!(err < 1e-5, "layer_norm input: {err}");
        let xc = x.clone();
        let bc = beta.clone();
        let err = gradcheck(&[4], &gamma, &move |tape, leaf| {
            let x = tape.leaf(Tensor::new(vec![3, 4], xc.clone(), false).unwrap());
            let b = tape.leaf(Tensor::new(vec![4], bc.clone(), false).unwrap());
            let y = tape.layer_norm(x, leaf, b, 1e-5).unwrap();
            let y = tape.gelu(y).unwrap();
            tape.sum_all(y).unwrap()
        });
        assert!(err < 1e-5, "layer_norm gamma: {err}");
        let xc = x.clone();
        let gc = gamma.clone();
        let err = gradcheck(&[4], &beta, &move |tape, leaf| {
            let x = tape.leaf(Tensor::new(vec![3, 4], xc.clone(), false).unwrap());
            let g = tape.leaf(Tensor::new(vec![4], gc.clone(), false).unwrap());
            let y = tape.layer_norm(x, g, leaf, 1e-5).unwrap();
            let y = tape.gelu(y).unwrap();
            tape.sum_all(y).unwrap()
        });
        assert!(err < 1e-5, "layer_norm beta: {err}");

        // softmax (weighted so the gradient is nontrivial)
        let weights = rand_vec(&mut rng, 2 * 5);
        let x = rand_vec(&mut rng, 2 * 5);
        let err = gradcheck(&[2, 5], &x, &move |tape, leaf| {
            let w = tape
                .leaf(Tensor::new(vec![2, 5], weights.clone(), false).unwrap());
            let y = tape.softmax_last(leaf).unwrap();
            let y = tape.mul(y, w).unwrap();
            tape.sum_all(y).unwrap()
        });
        assert!(err < 1e-6, "softmax: {err}");

        // masked softmax
        let mask = vec![true, false, true, true, true, true, false, true];
        let weights = rand_vec(&mut rng, 2 * 2 * 2);
        let x = rand_vec(&mut rng, 2 * 2 * 2);
        let err = gradcheck(&[2, 2, 2], &x, &move |tape, leaf| {
            let w = tape
                .leaf(Tensor::new(vec![2, 2, 2], weights.clone(), false).unwrap());
            let y = tape.masked_softmax_last(leaf, &mask, 1).unwrap();
            let y = tape.mul(y, w).unwrap();
            tape.sum_all(y).unwrap()
        });
        assert!(err < 1e-6, "masked softmax: {err}");

        // embedding table gradient
        let table = rand_vec(&mut rng, 5 * 3);
        let err = gradcheck(&[5, 3], &table, &|tape, leaf| {
            let e = tape.embedding(leaf, &[0, 2, 2, 4]).unwrap();
            let e = tape.gelu(e).unwrap();
            tape.sum_all(e).unwrap()
        });
        assert!(err < 1e-6, "embedding: {err}");

        // concat, both sides, middle axis
        let right = rand_vec(&mut rng, 2 * 2 * 3);
        let x = rand_vec(&mut rng, 2 * 3 * 3);
        let rc = right.clone();
        let err = gradcheck(&[2, 3, 3], &x, &move |tape, leaf| {
            let r = tape
                .leaf(Tensor::new(vec![2, 2, 3], rc.clone(), false).unwrap());
            let y = tape.concat(leaf, r, 1).unwrap();
            let y = tape.gelu(y).unwrap();
            tape.sum_all(y).unwrap()
        });
        assert!(err < 1e-6, "concat lhs: {err}");
        let left = rand_vec(&mut rng, 2 * 3 * 3);
        let err = gradcheck(&[2, 2, 3], &right, &move |tape, leaf| {
            let l = tape
                .leaf(Tensor::new(vec![2, 3, 3], left.clone(), false).unwrap());
            let y = tape.concat(l, leaf, 1).unwrap();
            let y = tape.gelu(y).unwrap();
            tape.sum_all(y).unwrap()
        });
        assert!(err < 1e-6, "concat rhs: {err}");

        // repeat
        let x = rand_vec(&mut rng, 2 * 3);
        let err = gradcheck(&[2, 3], &x, &|tape, leaf| {
            let y = tape.repeat(leaf, 3).unwrap();
            let y = tape.gelu(y).unwrap();
            tape.sum_all(y).unwrap()
        });
        assert!(err < 1e-6, "repeat: {err}");

        // slice_rows
        let x = rand_vec(&mut rng, 5 * 2);
        let err = gradcheck(&[5, 2], &x, &|tape, leaf| {
            let y = tape.slice_rows(leaf, 1, 3).unwrap();
            let y = tape.gelu(y).unwrap();
            tape.sum_all(y).unwrap()
        });
        assert!(err < 1e-6, "slice_rows: {err}");

        // reshape
        let x = rand_vec(&mut rng, 6);
        let err = gradcheck(&[6], &x, &|tape, leaf| {
            let y = tape.reshape(leaf, vec![2, 3]).unwrap();
            let y = tape.gelu(y).unwrap();
            tape.sum_all(y).unwrap()
        });
        assert!(err < 1e-6, "reshape: {err}");

        // split/merge heads
        let x = rand_vec(&mut rng, 2 * 3 * 4);
        let err = gradcheck(&[2, 3, 4], &x, &|tape, leaf| {
            let y = tape.split_heads(leaf, 2).unwrap();
            let y = tape.gelu(y).unwrap();
            let y = tape.merge_heads(y, 2).unwrap();
            tape.sum_all(y).unwrap()
        });
        assert!(err < 1e-6, "split/merge heads: {err}");

        // cross entropy
        let x = rand_vec(&mut rng, 4 * 3);
        let err = gradcheck(&[4, 3], &x, &|tape, leaf| {
            tape.cross_entropy(leaf, &[0, 2, 1, 1], &[true, true, false, true])
                .unwrap()
        });
        assert!(err < 1e-6, "cross_entropy: {err}");
    }

    #[test]
    fn random_composite_graphs_match_finite_differences() {
        // Fifty random little graphs chaining the differentiable ops; this is
        // the broad-coverage companion to the per-op checks above.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..50 {
            let rows = rng.gen_range(2..4usize);
            let cols = rng.gen_range(2..5usize);
            let x = rand_vec(&mut rng, rows * cols);
            let w = rand_vec(&mut rng, cols * 3);
            let gamma = rand_vec(&mut rng, 3);
            let beta = rand_vec(&mut rng, 3);
            let pick = trial % 5;
            let err = gradcheck(&[rows, cols], &x, &move |tape, leaf| {
                let w = tape
                    .leaf(Tensor::new(vec![cols, 3], w.clone(), false).unwrap());
                let h = tape.matmul(leaf, w).unwrap();
                let h = match pick {
                    0 => tape.gelu(h).unwrap(),
                    1 => {
                        let g = tape
                            .leaf(Tensor::new(vec![3], gamma.clone(), false).unwrap());
                        let b = tape
                            .leaf(Tensor::new(vec![3], beta.clone(), false).unwrap());
                        tape.layer_norm(h, g, b, 1e-5).unwrap()
                    }
                    2 => tape.softmax_last(h).unwrap(),
                    3 => {
                        let h2 = tape.scale(h, 0.5).unwrap();
                        tape.mul(h, h2).unwrap()
                    }
                    _ => {
                        let s = tape.scale(h, -1.0).unwrap();
                        tape.concat(h, s, 1).unwrap()
                    }
                };
                let h = tape.gelu(h).unwrap();
                tape.sum_all(h).unwrap()
            });
            assert!(err < 1e-5, "trial {trial}: rel err {err}");
        }
    }

    #[test]
    fn gradients_accumulate_across_backward_passes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![0.3, -0.7], true).unwrap());
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        let once = tape.grad(x);
        tape.backward(loss).unwrap();
        let twice = tape.grad(x);
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(*b, a + a, "second backward must sum exactly");
        }
    }

    #[test]
    fn identical_op_sequences_are_bitwise_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let x = rand_vec(&mut rng, 3 * 4);
            let w = rand_vec(&mut rng, 4 * 4);
            let mut tape = Tape::new();
            let xi = tape.leaf(Tensor::new(vec![3, 4], x, true).unwrap());
            let wi = tape.leaf(Tensor::new(vec![4, 4], w, true).unwrap());
            let h = tape.matmul(xi, wi).unwrap();
            let h = tape.gelu(h).unwrap();
            let loss = tape.cross_entropy(h, &[0, 1, 2], &[true, true, true]).unwrap();
            tape.backward(loss).unwrap();
            (tape.data(loss).to_vec(), tape.grad(xi), tape.grad(wi))
        };
        let (l1, gx1, gw1) = run();
        let (l2, gx2, gw2) = run();
        assert_eq!(l1, l2);
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_log_class_count() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![3, 7], vec![0.42; 21]).unwrap();
        let loss = tape
            .cross_entropy(logits, &[1, 5, 0], &[true, true, true])
            .unwrap();
        assert!((tape.data(loss)[0] - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_drive_cross_entropy_to_zero() {
        let mut tape = Tape::new();
        let mut data = vec![0.0; 2 * 4];
        data[0] = 30.0; // row 0, class 0
        data[4 + 3] = 30.0; // row 1, class 3
        let logits = tape.constant(vec![2, 4], data).unwrap();
        let loss = tape.cross_entropy(logits, &[0, 3], &[true, true]).unwrap();
        assert!(tape.data(loss)[0] < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_naive_log_softmax() {
        // Independent oracle: plain log-softmax NLL computed directly.
        let x = [1.3, -0.2, 0.7, 0.1, 2.0, -1.5];
        let targets = [2usize, 0usize];
        let naive = |row: &[f64], t: usize| -> f64 {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[t]
        };
        let expected = (naive(&x[0..3], targets[0]) + naive(&x[3..6], targets[1])) / 2.0;
        let mut tape = Tape::new();
        let logits = tape.constant(vec![2, 3], x.to_vec()).unwrap();
        let loss = tape.cross_entropy(logits, &targets, &[true, true]).unwrap();
        assert!((tape.data(loss)[0] - expected).abs() < 1e-10);
    }

    #[test]
    fn masked_rows_are_excluded_from_cross_entropy() {
        let mut tape = Tape::new();
        let logits = tape
            .constant(vec![2, 3], vec![0.5, 1.5, -0.5, 100.0, -100.0, 0.0])
            .unwrap();
        let both = tape.cross_entropy(logits, &[1, 1], &[true, false]).unwrap();
        let first_only = {
            let mut t2 = Tape::new();
            let l = t2.constant(vec![1, 3], vec![0.5, 1.5, -0.5]).unwrap();
            let loss = t2.cross_entropy(l, &[1], &[true]).unwrap();
            t2.data(loss)[0]
        };
        assert_eq!(tape.data(both)[0], first_only);
    }

    #[test]
    fn masked_softmax_zeroes_masked_keys_and_renormalizes() {
        let mut tape = Tape::new();
        let x = tape
            .constant(vec![2, 1, 3], vec![5.0, 1.0, 2.0, -1.0, 0.0, 3.0])
            .unwrap();
        // batch = 1, heads = 2: both groups share one mask row.
        let y = tape.masked_softmax_last(x, &[true, false, true], 2).unwrap();
        let d = tape.data(y);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[4], 0.0);
        assert!((d[0] + d[2] - 1.0).abs() < 1e-12);
        assert!((d[3] + d[5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_matches_reference_values() {
        // Reference values for the tanh-form GELU.
        assert_eq!(gelu_tanh(0.0), 0.0);
        assert!((gelu_tanh(1.0) - 0.841_191_990_608_276_8).abs() < 1e-12);
        assert!((gelu_tanh(6.0) - 6.0).abs() < 1e-9);
        assert!(gelu_tanh(-6.0).abs() < 1e-7);
    }

    #[test]
    fn shape_mismatches_are_contract_violations() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(crate::Error::Contract(_))));
        assert!(matches!(tape.mul(a, b), Err(crate::Error::Contract(_))));
        assert!(matches!(tape.add(a, b), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn embedding_id_out_of_range_is_input_error() {
        let mut tape = Tape::new();
        let table = tape.constant(vec![4, 2], vec![0.0; 8]).unwrap();
        assert!(matches!(
            tape.embedding(table, &[0, 4]),
            Err(crate::Error::Input(_))
        ));
    }

    #[test]
    fn backward_from_non_scalar_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(tape.backward(a), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn fully_masked_cross_entropy_is_input_error() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(matches!(
            tape.cross_entropy(logits, &[0, 1], &[false, false]),
            Err(crate::Error::Input(_))
        ));
    }
}
