//! Wengert-list reverse-mode differentiation.
//!
//! Every op appends one [`Node`] to the tape, so node indices are already a
//! topological order and one reverse sweep visits each node after all of its
//! consumers. [`Tape::backward`] folds the sweep's contributions into each
//! node's persistent `grad`, which therefore accumulates across repeated
//! backward calls; fresh passes start by dropping the tape or reading grads
//! before calling again.
//!
//! Parameters enter as leaves tagged with their [`ParamId`];
//! [`Tape::accumulate_param_grads`] adds those leaf gradients back into the
//! owning [`ParamStore`] after backward.

use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, softmax_row};
use super::{Array, ParamId, ParamStore, Result, TensorError};
use crate::fmath;

/// Target id that excludes a row from cross-entropy loss and gradient.
pub const IGNORE_ID: u32 = u32::MAX;

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Add {
        a: usize,
        b: usize,
    },
    /// `b`'s shape is a suffix of `a`'s; `b` is tiled over the leading axes.
    AddBroadcast {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f32,
    },
    Matmul {
        a: usize,
        b: usize,
    },
    /// a · bᵀ over the last two axes.
    MatmulTransB {
        a: usize,
        b: usize,
    },
    Relu {
        a: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    LayerNorm {
        a: usize,
        gain: usize,
        bias: usize,
        /// (mean, inv_std) per normalized row, saved by the forward pass.
        stats: Vec<(f32, f32)>,
    },
    /// Mean label-smoothed cross entropy over rows whose target is not
    /// [`IGNORE_ID`]. Probabilities are recomputed in backward.
    CrossEntropy {
        logits: usize,
        targets: Vec<u32>,
        smoothing: f32,
        n_valid: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<u32>,
    },
    SliceCols {
        a: usize,
        start: usize,
    },
    ConcatCols {
        parts: Vec<usize>,
    },
    SumAll {
        a: usize,
    },
    Reshape {
        a: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Array,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
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

    pub fn value(&self, t: TensorRef) -> &Array {
        &self.nodes[t.0].value
    }

    /// Gradient accumulated on `t`, if backward has reached it.
    pub fn grad(&self, t: TensorRef) -> Option<&[f32]> {
        self.nodes[t.0].grad.as_deref()
    }

    pub fn requires_grad(&self, t: TensorRef) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Leaf that does not participate in differentiation.
    pub fn constant(&mut self, value: Array) -> TensorRef {
        self.push(value, false, Op::Leaf { param: None })
    }

    /// Differentiable leaf not tied to a parameter store.
    pub fn leaf(&mut self, value: Array) -> TensorRef {
        self.push(value, true, Op::Leaf { param: None })
    }

    /// Attach a stored parameter as a leaf. Frozen parameters come in as
    /// constants, so backward never spends work on them.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> TensorRef {
        let p = store.get(id);
        self.push(
            p.value.clone(),
            p.trainable,
            Op::Leaf { param: Some(id) },
        )
    }

    fn push(&mut self, value: Array, requires_grad: bool, op: Op) -> TensorRef {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        TensorRef(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Array::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(value, rg, Op::Add { a: a.0, b: b.0 }))
    }

    /// `a + b` with `b` tiled over `a`'s leading axes. `b`'s shape must be a
    /// suffix of `a`'s shape (a bias `[d]` against `[n, d]`, positions
    /// `[t, d]` against `[batch, t, d]`, or a scalar against anything).
    pub fn add_broadcast(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sb.len() > sa.len() || &sa[sa.len() - sb.len()..] != sb {
            return Err(TensorError::ShapeMismatch {
                op: "add_broadcast",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let period = vb.numel().max(1);
        let mut data = Vec::with_capacity(va.numel());
        for (i, &x) in va.data().iter().enumerate() {
            data.push(x + vb.data()[i % period]);
        }
        let value = Array::new(sa.to_vec(), data)?;
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(value, rg, Op::AddBroadcast { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Array::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(value, rg, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: TensorRef, c: f32) -> TensorRef {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x * c).collect();
        let value = Array {
            shape: va.shape().to_vec(),
            data,
        };
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, rg, Op::Scale { a: a.0, c })
    }

    /// Matrix product over the last two axes. Either `b` is a rank-2 weight
    /// shared across `a`'s leading axes, or `a` and `b` carry identical
    /// leading axes and multiply batch by batch.
    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (ba, m, k) = va.matrix_view();
        let (bb, kb, n) = vb.matrix_view();
        if k != kb {
            return Err(mismatch());
        }
        let weight_case = sb.len() == 2;
        if !weight_case && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let mut out = vec![0.0f32; ba * m * n];
        if weight_case {
            matmul_acc(va.data(), vb.data(), &mut out, ba * m, k, n);
        } else {
            debug_assert_eq!(ba, bb);
            for i in 0..ba {
                matmul_acc(
                    &va.data()[i * m * k..(i + 1) * m * k],
                    &vb.data()[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Array::new(shape, out)?;
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(value, rg, Op::Matmul { a: a.0, b: b.0 }))
    }

    /// `a · bᵀ` over the last two axes; `b` is `[.., n, k]` against
    /// `a`'s `[.., m, k]`. Same broadcasting rules as [`Tape::matmul`].
    pub fn matmul_transb(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul_transb",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (ba, m, k) = va.matrix_view();
        let (bb, n, kb) = vb.matrix_view();
        if k != kb {
            return Err(mismatch());
        }
        let weight_case = sb.len() == 2;
        if !weight_case && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let mut out = vec![0.0f32; ba * m * n];
        if weight_case {
            matmul_a_bt_acc(va.data(), vb.data(), &mut out, ba * m, k, n);
        } else {
            debug_assert_eq!(ba, bb);
            for i in 0..ba {
                matmul_a_bt_acc(
                    &va.data()[i * m * k..(i + 1) * m * k],
                    &vb.data()[i * n * k..(i + 1) * n * k],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Array::new(shape, out)?;
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(value, rg, Op::MatmulTransB { a: a.0, b: b.0 }))
    }

    pub fn relu(&mut self, a: TensorRef) -> TensorRef {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let value = Array {
            shape: va.shape().to_vec(),
            data,
        };
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, rg, Op::Relu { a: a.0 })
    }

    pub fn softmax(&mut self, a: TensorRef, axis: usize) -> Result<TensorRef> {
        let va = &self.nodes[a.0].value;
        if axis >= va.rank() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                shape: va.shape().to_vec(),
            });
        }
        let shape = va.shape().to_vec();
        let mut data = va.data().to_vec();
        for_each_lane(&shape, axis, |lane| {
            let mut vals: Vec<f32> = lane.iter().map(|&i| data[i]).collect();
            softmax_row(&mut vals);
            for (&i, v) in lane.iter().zip(vals) {
                data[i] = v;
            }
        });
        let value = Array::new(shape, data)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, rg, Op::Softmax { a: a.0, axis }))
    }

    /// Normalize over the last axis, then scale by `gain` and shift by
    /// `bias` (both `[d]`). Uses population variance with `eps` inside the
    /// square root.
    pub fn layer_norm(
        &mut self,
        a: TensorRef,
        gain: TensorRef,
        bias: TensorRef,
        eps: f32,
    ) -> Result<TensorRef> {
        let va = &self.nodes[a.0].value;
        let d = va.last_dim();
        if va.rank() == 0 || d == 0 {
            return Err(TensorError::InvalidShape {
                op: "layer_norm",
                shape: va.shape().to_vec(),
                reason: "needs a non-empty last axis",
            });
        }
        for (t, name) in [(gain, "gain"), (bias, "bias")] {
            let s = self.nodes[t.0].value.shape();
            if s != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: if name == "gain" {
                        "layer_norm gain"
                    } else {
                        "layer_norm bias"
                    },
                    lhs: va.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let va = &self.nodes[a.0].value;
        let vg = self.nodes[gain.0].value.data();
        let vb = self.nodes[bias.0].value.data();
        let rows = va.numel() / d;
        let mut stats = Vec::with_capacity(rows);
        let mut data = vec![0.0f32; va.numel()];
        for r in 0..rows {
            let x = &va.data()[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f32>() / d as f32;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let inv_std = 1.0 / fmath::sqrt(var + eps);
            stats.push((mean, inv_std));
            let out = &mut data[r * d..(r + 1) * d];
            for j in 0..d {
                out[j] = (x[j] - mean) * inv_std * vg[j] + vb[j];
            }
        }
        let value = Array::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a.0, gain.0, bias.0]);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                a: a.0,
                gain: gain.0,
                bias: bias.0,
                stats,
            },
        ))
    }

    /// Mean label-smoothed cross entropy between `logits` rows (last axis =
    /// classes) and `targets`. Rows with target [`IGNORE_ID`] contribute
    /// nothing; with every row ignored the loss is undefined and errors.
    pub fn cross_entropy(
        &mut self,
        logits: TensorRef,
        targets: &[u32],
        smoothing: f32,
    ) -> Result<TensorRef> {
        let vl = &self.nodes[logits.0].value;
        let classes = vl.last_dim();
        if vl.rank() == 0 || classes == 0 {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy",
                shape: vl.shape().to_vec(),
                reason: "needs a non-empty class axis",
            });
        }
        let rows = vl.numel() / classes;
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut n_valid = 0usize;
        for &t in targets {
            if t == IGNORE_ID {
                continue;
            }
            if t as usize >= classes {
                return Err(TensorError::TargetOutOfRange { id: t, classes });
            }
            n_valid += 1;
        }
        if n_valid == 0 {
            return Err(TensorError::EmptyLoss);
        }
        let eps = smoothing;
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t == IGNORE_ID {
                continue;
            }
            let z = &vl.data()[r * classes..(r + 1) * classes];
            let max = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum_exp = 0.0f32;
            let mut sum_z = 0.0f32;
            for &v in z {
                sum_exp += fmath::exp(v - max);
                sum_z += v;
            }
            let lse = fmath::ln(sum_exp) + max;
            let loss =
                lse - (1.0 - eps) * z[t as usize] - eps / classes as f32 * sum_z;
            total += loss as f64;
        }
        let value = Array::scalar((total / n_valid as f64) as f32);
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            value,
            rg,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                smoothing,
                n_valid,
            },
        ))
    }

    /// Gather rows of `table` (`[vocab, d]`) by id, producing `[ids.len(), d]`.
    pub fn embedding(&mut self, table: TensorRef, ids: &[u32]) -> Result<TensorRef> {
        let vt = &self.nodes[table.0].value;
        if vt.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "embedding",
                shape: vt.shape().to_vec(),
                reason: "table must be [vocab, dim]",
            });
        }
        let (vocab, d) = (vt.shape()[0], vt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= vocab {
                return Err(TensorError::TargetOutOfRange {
                    id,
                    classes: vocab,
                });
            }
            let row = &vt.data()[id as usize * d..(id as usize + 1) * d];
            data.extend_from_slice(row);
        }
        let value = Array::new(vec![ids.len(), d], data)?;
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(
            value,
            rg,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Columns `[start, start+len)` of the last axis.
    pub fn slice_cols(&mut self, a: TensorRef, start: usize, len: usize) -> Result<TensorRef> {
        let va = &self.nodes[a.0].value;
        let cols = va.last_dim();
        if va.rank() == 0 || start + len > cols || len == 0 {
            return Err(TensorError::InvalidShape {
                op: "slice_cols",
                shape: va.shape().to_vec(),
                reason: "slice range exceeds the last axis",
            });
        }
        let rows = va.numel() / cols;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            let row = &va.data()[r * cols..r * cols + cols];
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Array::new(shape, data)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, rg, Op::SliceCols { a: a.0, start }))
    }

    /// Concatenate along the last axis; every part must agree on the
    /// leading axes.
    pub fn concat_cols(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        if parts.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat_cols",
                shape: Vec::new(),
                reason: "needs at least one part",
            });
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        let lead = &first[..first.len().saturating_sub(1)];
        let mut total_cols = 0usize;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.is_empty() || &s[..s.len() - 1] != lead {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total_cols += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = vec![0.0f32; rows * total_cols];
        let mut offset = 0usize;
        for p in parts {
            let v = &self.nodes[p.0].value;
            let cols = v.last_dim();
            for r in 0..rows {
                let src = &v.data()[r * cols..(r + 1) * cols];
                data[r * total_cols + offset..r * total_cols + offset + cols]
                    .copy_from_slice(src);
            }
            offset += cols;
        }
        let mut shape = lead.to_vec();
        shape.push(total_cols);
        let value = Array::new(shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.any_grad(&ids);
        Ok(self.push(value, rg, Op::ConcatCols { parts: ids }))
    }

    pub fn sum_all(&mut self, a: TensorRef) -> TensorRef {
        let total: f32 = self.nodes[a.0].value.data().iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Array::scalar(total), rg, Op::SumAll { a: a.0 })
    }

    pub fn reshape(&mut self, a: TensorRef, shape: &[usize]) -> Result<TensorRef> {
        let va = &self.nodes[a.0].value;
        let numel: usize = shape.iter().product();
        if numel != va.numel() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: "element count must be preserved",
            });
        }
        let value = Array::new(shape.to_vec(), va.data().to_vec())?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, rg, Op::Reshape { a: a.0 }))
    }

    /// Reverse sweep from `loss`, which must be scalar. Contributions are
    /// added into each node's persistent `grad`, so a second call doubles
    /// them; parameter stores receive nothing until
    /// [`Tape::accumulate_param_grads`].
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut temp: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        temp[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = temp[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            match self.nodes[idx].grad {
                Some(ref mut acc) => {
                    for (dst, src) in acc.iter_mut().zip(&g) {
                        *dst += src;
                    }
                }
                None => self.nodes[idx].grad = Some(g.clone()),
            }
            self.propagate(idx, &g, &mut temp);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f32], temp: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        // Each arm touches one parent buffer at a time, so the mutable
        // borrow of `temp` stays local to each expansion.
        macro_rules! with_buf {
            ($i:expr, $name:ident, $body:block) => {
                if nodes[$i].requires_grad {
                    if temp[$i].is_none() {
                        temp[$i] = Some(vec![0.0; nodes[$i].value.numel()]);
                    }
                    let $name: &mut Vec<f32> = temp[$i].as_mut().unwrap();
                    $body
                }
            };
        }
        match &nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::Add { a, b } => {
                with_buf!(*a, da, {
                    for (d, s) in da.iter_mut().zip(g) {
                        *d += s;
                    }
                });
                with_buf!(*b, db, {
                    for (d, s) in db.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
            Op::AddBroadcast { a, b } => {
                with_buf!(*a, da, {
                    for (d, s) in da.iter_mut().zip(g) {
                        *d += s;
                    }
                });
                with_buf!(*b, db, {
                    let period = db.len().max(1);
                    for (i, s) in g.iter().enumerate() {
                        db[i % period] += s;
                    }
                });
            }
            Op::Mul { a, b } => {
                with_buf!(*a, da, {
                    let vb = nodes[*b].value.data();
                    for ((d, s), y) in da.iter_mut().zip(g).zip(vb) {
                        *d += s * y;
                    }
                });
                with_buf!(*b, db, {
                    let va = nodes[*a].value.data();
                    for ((d, s), x) in db.iter_mut().zip(g).zip(va) {
                        *d += s * x;
                    }
                });
            }
            Op::Scale { a, c } => {
                with_buf!(*a, da, {
                    for (d, s) in da.iter_mut().zip(g) {
                        *d += s * c;
                    }
                });
            }
            Op::Matmul { a, b } => {
                let va = &nodes[*a].value;
                let vb = &nodes[*b].value;
                let (ba, m, k) = va.matrix_view();
                let (_, _, n) = vb.matrix_view();
                let weight_case = vb.rank() == 2;
                with_buf!(*a, da, {
                    if weight_case {
                        matmul_a_bt_acc(g, vb.data(), da, ba * m, n, k);
                    } else {
                        for i in 0..ba {
                            matmul_a_bt_acc(
                                &g[i * m * n..(i + 1) * m * n],
                                &vb.data()[i * k * n..(i + 1) * k * n],
                                &mut da[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                });
                with_buf!(*b, db, {
                    if weight_case {
                        matmul_at_b_acc(va.data(), g, db, ba * m, k, n);
                    } else {
                        for i in 0..ba {
                            matmul_at_b_acc(
                                &va.data()[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                &mut db[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                });
            }
            Op::MatmulTransB { a, b } => {
                let va = &nodes[*a].value;
                let vb = &nodes[*b].value;
                let (ba, m, k) = va.matrix_view();
                let (_, n, _) = vb.matrix_view();
                let weight_case = vb.rank() == 2;
                with_buf!(*a, da, {
                    if weight_case {
                        matmul_acc(g, vb.data(), da, ba * m, n, k);
                    } else {
                        for i in 0..ba {
                            matmul_acc(
                                &g[i * m * n..(i + 1) * m * n],
                                &vb.data()[i * n * k..(i + 1) * n * k],
                                &mut da[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                });
                with_buf!(*b, db, {
                    if weight_case {
                        matmul_at_b_acc(g, va.data(), db, ba * m, n, k);
                    } else {
                        for i in 0..ba {
                            matmul_at_b_acc(
                                &g[i * m * n..(i + 1) * m * n],
                                &va.data()[i * m * k..(i + 1) * m * k],
                                &mut db[i * n * k..(i + 1) * n * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                });
            }
            Op::Relu { a } => {
                with_buf!(*a, da, {
                    let y = nodes[idx].value.data();
                    for ((d, s), &v) in da.iter_mut().zip(g).zip(y) {
                        if v > 0.0 {
                            *d += s;
                        }
                    }
                });
            }
            Op::Softmax { a, axis } => {
                with_buf!(*a, da, {
                    let y = nodes[idx].value.data();
                    for_each_lane(nodes[idx].value.shape(), *axis, |lane| {
                        let mut dot = 0.0f32;
                        for &i in lane {
                            dot += g[i] * y[i];
                        }
                        for &i in lane {
                            da[i] += y[i] * (g[i] - dot);
                        }
                    });
                });
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                stats,
            } => {
                let va = &nodes[*a].value;
                let d = va.last_dim();
                let rows = va.numel() / d;
                let vg = nodes[*gain].value.data();
                with_buf!(*a, da, {
                    for r in 0..rows {
                        let (mean, inv_std) = stats[r];
                        let x = &va.data()[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut sum_dxhat = 0.0f32;
                        let mut sum_dxhat_xhat = 0.0f32;
                        for j in 0..d {
                            let xhat = (x[j] - mean) * inv_std;
                            let dxhat = gr[j] * vg[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let dslice = &mut da[r * d..(r + 1) * d];
                        let nf = d as f32;
                        for j in 0..d {
                            let xhat = (x[j] - mean) * inv_std;
                            let dxhat = gr[j] * vg[j];
                            dslice[j] += inv_std / nf
                                * (nf * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                });
                with_buf!(*gain, dg, {
                    for r in 0..rows {
                        let (mean, inv_std) = stats[r];
                        let x = &va.data()[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        for j in 0..d {
                            dg[j] += gr[j] * (x[j] - mean) * inv_std;
                        }
                    }
                });
                with_buf!(*bias, db, {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                n_valid,
            } => {
                with_buf!(*logits, dl, {
                    let vl = &nodes[*logits].value;
                    let classes = vl.last_dim();
                    let gs = g[0] / *n_valid as f32;
                    let eps = *smoothing;
                    let uniform = eps / classes as f32;
                    let mut probs = vec![0.0f32; classes];
                    for (r, &t) in targets.iter().enumerate() {
                        if t == IGNORE_ID {
                            continue;
                        }
                        probs.copy_from_slice(&vl.data()[r * classes..(r + 1) * classes]);
                        softmax_row(&mut probs);
                        let drow = &mut dl[r * classes..(r + 1) * classes];
                        for j in 0..classes {
                            drow[j] += (probs[j] - uniform) * gs;
                        }
                        drow[t as usize] -= (1.0 - eps) * gs;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                with_buf!(*table, dt, {
                    let d = nodes[*table].value.shape()[1];
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                        let src = &g[r * d..(r + 1) * d];
                        for (o, s) in dst.iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                });
            }
            Op::SliceCols { a, start } => {
                with_buf!(*a, da, {
                    let cols = nodes[*a].value.last_dim();
                    let len = nodes[idx].value.last_dim();
                    let rows = nodes[idx].value.numel() / len;
                    for r in 0..rows {
                        let dst = &mut da[r * cols + start..r * cols + start + len];
                        let src = &g[r * len..(r + 1) * len];
                        for (o, s) in dst.iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let total_cols = nodes[idx].value.last_dim();
                let rows = nodes[idx].value.numel() / total_cols;
                let mut offset = 0usize;
                for &p in parts {
                    let cols = nodes[p].value.last_dim();
                    with_buf!(p, dp, {
                        for r in 0..rows {
                            let src = &g[r * total_cols + offset..r * total_cols + offset + cols];
                            let dst = &mut dp[r * cols..(r + 1) * cols];
                            for (o, s) in dst.iter_mut().zip(src) {
                                *o += s;
                            }
                        }
                    });
                    offset += cols;
                }
            }
            Op::SumAll { a } => {
                with_buf!(*a, da, {
                    let gs = g[0];
                    for d in da.iter_mut() {
                        *d += gs;
                    }
                });
            }
            Op::Reshape { a } => {
                with_buf!(*a, da, {
                    for (d, s) in da.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
        }
    }

    /// Add each parameter leaf's gradient into its slot in `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let Op::Leaf {
                param: Some(id), ..
            } = node.op
            {
                if let Some(ref g) = node.grad {
                    let p = store.get_mut(id);
                    for (dst, src) in p.grad.iter_mut().zip(g) {
                        *dst += src;
                    }
                }
            }
        }
    }
}

/// Invoke `f` with the flat indices of each 1-D lane along `axis`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut lane = vec![0usize; axis_len];
    for o in 0..outer {
        for i in 0..inner {
            for (j, slot) in lane.iter_mut().enumerate() {
                *slot = (o * axis_len + j) * inner + i;
            }
            f(&lane);
        }
    }
}
