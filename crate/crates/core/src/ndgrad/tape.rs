use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::{Float, GradError, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u64,
}

/// Whether stochastic layers are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
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
        factor: T,
    },
    Relu {
        a: usize,
    },
    Dropout {
        a: usize,
        mask: Vec<T>,
    },
    Softmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        a: usize,
        gamma: usize,
        beta: usize,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Reshape {
        a: usize,
    },
    SplitHeads {
        a: usize,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        a: usize,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    SelectPosition {
        a: usize,
        seq: usize,
        position: usize,
    },
    Sum {
        a: usize,
    },
    Mse {
        pred: usize,
        target: Vec<T>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Freed,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add { .. } => "add",
            Op::AddBroadcast { .. } => "add_broadcast",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Dropout { .. } => "dropout",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Reshape { .. } => "reshape",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::SelectPosition { .. } => "select_position",
            Op::Sum { .. } => "sum",
            Op::Mse { .. } => "mse_loss",
            Op::CrossEntropy { .. } => "cross_entropy_loss",
            Op::Freed => "freed",
        }
    }
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order and replays them in reverse.
///
/// A tape supports exactly one backward pass. Afterwards intermediate values
/// are released; leaves keep their values and gradients.
pub struct Tape<T: Float = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are collected for it when the tensor was
    /// marked with `requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Result<Var, GradError> {
        self.ensure_recording()?;
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: Some(tensor),
            op: Op::Leaf,
            requires_grad,
        });
        Ok(self.var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Result<Var, GradError> {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Value of a recorded node.
    ///
    /// Panics for intermediate nodes once backward has released them.
    pub fn value(&self, var: Var) -> &Tensor<T> {
        assert_eq!(var.tape, self.id, "variable from another tape");
        self.nodes[var.index]
            .value
            .as_ref()
            .expect("intermediate value released by backward")
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, var: Var) -> Option<&[T]> {
        if var.tape != self.id {
            return None;
        }
        self.nodes[var.index].value.as_ref()?.grad()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        var.tape == self.id && self.nodes[var.index].requires_grad
    }

    fn var(&self, index: usize) -> Var {
        Var {
            index,
            tape: self.id,
        }
    }

    fn ensure_recording(&self) -> Result<(), GradError> {
        if self.consumed {
            Err(GradError::StaleTape)
        } else {
            Ok(())
        }
    }

    fn resolve(&self, var: Var) -> Result<usize, GradError> {
        if var.tape != self.id {
            return Err(GradError::ForeignVar);
        }
        Ok(var.index)
    }

    fn get(&self, index: usize) -> &Tensor<T> {
        self.nodes[index].value.as_ref().expect("live node")
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var, GradError> {
        if !value.is_finite() {
            return Err(GradError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Ok(self.var(self.nodes.len() - 1))
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.ensure_recording()?;
        let (ia, ib) = (self.resolve(a)?, self.resolve(b)?);
        let (sa, sb) = (self.get(ia).shape(), self.get(ib).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_error("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.get(ia).data(), false, self.get(ib).data(), false, &mut out, false);
        let value = Tensor::new(&[m, n], out)?;
        self.push(value, Op::MatMul { a: ia, b: ib, m, k, n }, &[ia, ib])
    }

    /// Batched product of `[batch, m, k]` with `[batch, k, n]`, or with
    /// `[batch, n, k]` transposed when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, GradError> {
        self.ensure_recording()?;
        let (ia, ib) = (self.resolve(a)?, self.resolve(b)?);
        let (sa, sb) = (self.get(ia).shape(), self.get(ib).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_error("batch_matmul", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_error("batch_matmul", sa, sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.get(ia).data(), self.get(ib).data());
            for bi in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &da[bi * m * k..(bi + 1) * m * k],
                    false,
                    &db[bi * k * n..(bi + 1) * k * n],
                    trans_b,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        }
        let value = Tensor::new(&[batch, m, n], out)?;
        let op = Op::BatchMatMul {
            a: ia,
            b: ib,
            batch,
            m,
            k,
            n,
            trans_b,
        };
        self.push(value, op, &[ia, ib])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.ensure_recording()?;
        let (ia, ib) = (self.resolve(a)?, self.resolve(b)?);
        let (ta, tb) = (self.get(ia), self.get(ib));
        if ta.shape() != tb.shape() {
            return Err(shape_error("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(value, Op::Add { a: ia, b: ib }, &[ia, ib])
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape
    /// (bias rows, position tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.ensure_recording()?;
        let (ia, ib) = (self.resolve(a)?, self.resolve(b)?);
        let (ta, tb) = (self.get(ia), self.get(ib));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_error("add_broadcast", sa, sb));
        }
        let inner = tb.numel();
        let data = ta
            .data()
            .chunks_exact(inner)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor::new(sa, data)?;
        self.push(value, Op::AddBroadcast { a: ia, b: ib }, &[ia, ib])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.ensure_recording()?;
        let (ia, ib) = (self.resolve(a)?, self.resolve(b)?);
        let (ta, tb) = (self.get(ia), self.get(ib));
        if ta.shape() != tb.shape() {
            return Err(shape_error("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(value, Op::Mul { a: ia, b: ib }, &[ia, ib])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var, GradError> {
        self.ensure_recording()?;
        let ia = self.resolve(a)?;
        let ta = self.get(ia);
        let value = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x * factor).collect())?;
        self.push(value, Op::Scale { a: ia, factor }, &[ia])
    }

    /// `max(x, 0)`; the derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, a: Var) -> Result<Var, GradError> {
        self.ensure_recording()?;
        let ia = self.resolve(a)?;
        let ta = self.get(ia);
        let data = ta
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(value, Op::Relu { a: ia }, &[ia])
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)` during training
    /// so evaluation is the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var, GradError> {
        self.ensure_recording()?;
        if !(0.0..1.0).contains(&p) {
            return Err(GradError::InvalidProbability(p));
        }
        let ia = self.resolve(a)?;
        if mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let ta = self.get(ia);
        let mask: Vec<T> = (0..ta.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = ta.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(value, Op::Dropout { a: ia, mask }, &[ia])
    }

    /// Softmax along `axis`, with the slice maximum subtracted first.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, GradError> {
        self.ensure_recording()?;
        let ia = self.resolve(a)?;
        let ta = self.get(ia);
        let shape = ta.shape();
        if axis >= shape.len() {
            return Err(GradError::InvalidAxis {
                axis,
                shape: shape.to_vec(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = ta.data().to_vec();
        for o in 0..outer {
            for j in 0..inner {
                let base = o * len * inner + j;
                softmax_strided(&mut out, base, inner, len);
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Softmax { a: ia, outer, len, inner }, &[ia])
    }

    /// Softmax over the last axis of `[.., t, t]` score matrices with the causal
    /// mask applied: entry `(i, j)` with `j > i` is treated as `-inf` and comes
    /// out as exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var, GradError> {
        self.ensure_recording()?;
        let ia = self.resolve(a)?;
        let ta = self.get(ia);
        let shape = ta.shape();
        let rank = shape.len();
        if rank < 2 || shape[rank - 1] != shape[rank - 2] {
            return Err(GradError::InvalidShape(shape.to_vec()));
        }
        let t = shape[rank - 1];
        let mut out = ta.data().to_vec();
        for (r, row) in out.chunks_exact_mut(t).enumerate() {
            let visible = r % t + 1;
            softmax_strided(row, 0, 1, visible);
            row[visible..].iter_mut().for_each(|x| *x = T::zero());
        }
        let value = Tensor::new(shape, out)?;
        let op = Op::Softmax {
            a: ia,
            outer: ta.numel() / t,
            len: t,
            inner: 1,
        };
        self.push(value, op, &[ia])
    }

    /// Normalizes the last axis to zero mean and unit population variance,
    /// then applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, GradError> {
        self.ensure_recording()?;
        let (ia, ig, ib) = (self.resolve(a)?, self.resolve(gamma)?, self.resolve(beta)?);
        let (ta, tg, tb) = (self.get(ia), self.get(ig), self.get(ib));
        let width = *ta.shape().last().ok_or(GradError::InvalidShape(vec![]))?;
        if tg.shape() != [width] {
            return Err(shape_error("layer_norm", ta.shape(), tg.shape()));
        }
        if tb.shape() != [width] {
            return Err(shape_error("layer_norm", ta.shape(), tb.shape()));
        }
        let n = T::from_f64(width as f64);
        let eps = T::from_f64(eps);
        let rows = ta.numel() / width;
        let mut normalized = Vec::with_capacity(ta.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(ta.numel());
        for row in ta.data().chunks_exact(width) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for ((&x, &g), &b) in row.iter().zip(tg.data()).zip(tb.data()) {
                let xhat = (x - mean) * inv;
                normalized.push(xhat);
                out.push(g * xhat + b);
            }
        }
        let value = Tensor::new(ta.shape(), out)?;
        let op = Op::LayerNorm {
            a: ia,
            gamma: ig,
            beta: ib,
            normalized,
            inv_std,
        };
        self.push(value, op, &[ia, ig, ib])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, GradError> {
        self.ensure_recording()?;
        let ia = self.resolve(a)?;
        let ta = self.get(ia);
        let value = ta
            .reshaped(shape)
            .map_err(|_| shape_error("reshape", ta.shape(), shape))?;
        self.push(value, Op::Reshape { a: ia }, &[ia])
    }

    /// `[batch * seq, heads * head_dim]` to `[batch * heads, seq, head_dim]`.
    pub fn split_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize) -> Result<Var, GradError> {
        self.ensure_recording()?;
        let ia = self.resolve(a)?;
        let ta = self.get(ia);
        let s = ta.shape();
        if s.len() != 2 || s[0] != batch * seq || heads == 0 || s[1] % heads != 0 {
            return Err(shape_error("split_heads", s, &[batch, seq, heads]));
        }
        let hd = s[1] / heads;
        let mut out = vec![T::zero(); ta.numel()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let src = (b * seq + t) * s[1] + h * hd;
                    let dst = ((b * heads + h) * seq + t) * hd;
                    out[dst..dst + hd].copy_from_slice(&ta.data()[src..src + hd]);
                }
            }
        }
        let value = Tensor::new(&[batch * heads, seq, hd], out)?;
        self.push(value, Op::SplitHeads { a: ia, batch, seq, heads }, &[ia])
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, a: Var, batch: usize, heads: usize) -> Result<Var, GradError> {
        self.ensure_recording()?;
        let ia = self.resolve(a)?;
        let ta = self.get(ia);
        let s = ta.shape();
        if s.len() != 3 || s[0] != batch * heads {
            return Err(shape_error("merge_heads", s, &[batch, heads]));
        }
        let (seq, hd) = (s[1], s[2]);
        let width = heads * hd;
        let mut out = vec![T::zero(); ta.numel()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let dst = (b * seq + t) * width + h * hd;
                    let src = ((b * heads + h) * seq + t) * hd;
                    out[dst..dst + hd].copy_from_slice(&ta.data()[src..src + hd]);
                }
            }
        }
        let value = Tensor::new(&[batch * seq, width], out)?;
        self.push(value, Op::MergeHeads { a: ia, batch, seq, heads }, &[ia])
    }

    /// Row `position` of every sequence in `[batch, seq, width]`, giving `[batch, width]`.
    pub fn select_position(&mut self, a: Var, position: usize) -> Result<Var, GradError> {
        self.ensure_recording()?;
        let ia = self.resolve(a)?;
        let ta = self.get(ia);
        let s = ta.shape();
        if s.len() != 3 || position >= s[1] {
            return Err(shape_error("select_position", s, &[position]));
        }
        let (batch, seq, width) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(batch * width);
        for b in 0..batch {
            let start = (b * seq + position) * width;
            out.extend_from_slice(&ta.data()[start..start + width]);
        }
        let value = Tensor::new(&[batch, width], out)?;
        self.push(value, Op::SelectPosition { a: ia, seq, position }, &[ia])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, GradError> {
        self.ensure_recording()?;
        let ia = self.resolve(a)?;
        let total = self.get(ia).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(total), Op::Sum { a: ia }, &[ia])
    }

    /// Mean of squared differences over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var, GradError> {
        self.ensure_recording()?;
        let ip = self.resolve(pred)?;
        let tp = self.get(ip);
        if tp.shape() != target.shape() {
            return Err(shape_error("mse_loss", tp.shape(), target.shape()));
        }
        let n = T::from_f64(tp.numel() as f64);
        let loss = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<T>()
            / n;
        let op = Op::Mse {
            pred: ip,
            target: target.data().to_vec(),
        };
        self.push(Tensor::scalar(loss), op, &[ip])
    }

    /// Mean negative log-likelihood of binary labels under `softmax(logits)`
    /// for `[batch, 2]` logits, evaluated through log-sum-exp.
    pub fn cross_entropy_loss(&mut self, logits: Var, labels: &[u8]) -> Result<Var, GradError> {
        self.ensure_recording()?;
        let il = self.resolve(logits)?;
        let tl = self.get(il);
        let s = tl.shape();
        if s.len() != 2 || s[1] != 2 || s[0] != labels.len() {
            return Err(shape_error("cross_entropy_loss", s, &[labels.len(), 2]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(GradError::InvalidLabel(bad as u32));
        }
        let mut probs = Vec::with_capacity(tl.numel());
        let mut total = 0.0f64;
        for (row, &label) in tl.data().chunks_exact(2).zip(labels) {
            let (a, b) = (row[0].as_f64(), row[1].as_f64());
            let max = a.max(b);
            let lse = max + ((a - max).exp() + (b - max).exp()).ln();
            total += lse - row[label as usize].as_f64();
            probs.push(T::from_f64((a - lse).exp()));
            probs.push(T::from_f64((b - lse).exp()));
        }
        let loss = T::from_f64(total / labels.len() as f64);
        let op = Op::CrossEntropy {
            logits: il,
            labels: labels.iter().map(|&l| l as usize).collect(),
            probs,
        };
        self.push(Tensor::scalar(loss), op, &[il])
    }

    /// Propagates gradients from a scalar `loss` to every leaf that requires
    /// them, summing contributions across fan-out.
    pub fn backward(&mut self, loss: Var) -> Result<(), GradError> {
        self.ensure_recording()?;
        let il = self.resolve(loss)?;
        let lt = self.get(il);
        if lt.numel() != 1 {
            return Err(GradError::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(vec![T::one()]);

        for i in (0..=il).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            match node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        let numel = node.value.as_ref().map_or(0, Tensor::numel);
                        let g = grads[i].take().unwrap_or_else(|| vec![T::zero(); numel]);
                        if let Some(v) = node.value.as_mut() {
                            v.set_grad(g);
                        }
                    }
                }
                _ if i == il => node.op = Op::Freed,
                _ => {
                    node.op = Op::Freed;
                    node.value = None;
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |j: usize| nodes[j].value.as_ref().expect("live node");
        let wants = |j: usize| nodes[j].requires_grad;
        // Returns the accumulator for input `j`, allocating zeros on first use.
        fn slot<'a, T: Float>(grads: &'a mut [Option<Vec<T>>], j: usize, len: usize) -> &'a mut Vec<T> {
            grads[j].get_or_insert_with(|| vec![T::zero(); len])
        }

        match &nodes[i].op {
            Op::Leaf | Op::Freed => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    let da = slot(grads, a, m * k);
                    T::gemm(m, n, k, g, false, val(b).data(), true, da, true);
                }
                if wants(b) {
                    let db = slot(grads, b, k * n);
                    T::gemm(k, m, n, val(a).data(), true, g, false, db, true);
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (va, vb) = (val(a).data(), val(b).data());
                if wants(a) {
                    let da = slot(grads, a, batch * m * k);
                    for bi in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &vb[bi * k * n..(bi + 1) * k * n],
                            !trans_b,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            true,
                        );
                    }
                }
                if wants(b) {
                    let db = slot(grads, b, batch * k * n);
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let as_ = &va[bi * m * k..(bi + 1) * m * k];
                        let ds = &mut db[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            T::gemm(n, m, k, gs, true, as_, false, ds, true);
                        } else {
                            T::gemm(k, m, n, as_, true, gs, false, ds, true);
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                for j in [a, b] {
                    if wants(j) {
                        axpy(slot(grads, j, g.len()), g);
                    }
                }
            }
            &Op::AddBroadcast { a, b } => {
                if wants(a) {
                    axpy(slot(grads, a, g.len()), g);
                }
                if wants(b) {
                    let inner = val(b).numel();
                    let db = slot(grads, b, inner);
                    for row in g.chunks_exact(inner) {
                        axpy(db, row);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if wants(a) {
                    let other = val(b).data();
                    let da = slot(grads, a, g.len());
                    for ((d, &gi), &o) in da.iter_mut().zip(g).zip(other) {
                        *d += gi * o;
                    }
                }
                if wants(b) {
                    let other = val(a).data();
                    let db = slot(grads, b, g.len());
                    for ((d, &gi), &o) in db.iter_mut().zip(g).zip(other) {
                        *d += gi * o;
                    }
                }
            }
            &Op::Scale { a, factor } => {
                let da = slot(grads, a, g.len());
                for (d, &gi) in da.iter_mut().zip(g) {
                    *d += gi * factor;
                }
            }
            &Op::Relu { a } => {
                let x = val(a).data();
                let da = slot(grads, a, g.len());
                for ((d, &gi), &xi) in da.iter_mut().zip(g).zip(x) {
                    if xi > T::zero() {
                        *d += gi;
                    }
                }
            }
            Op::Dropout { a, mask } => {
                let da = slot(grads, *a, g.len());
                for ((d, &gi), &mi) in da.iter_mut().zip(g).zip(mask) {
                    *d += gi * mi;
                }
            }
            &Op::Softmax { a, outer, len, inner } => {
                let y = val(i).data();
                let da = slot(grads, a, g.len());
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * len * inner + j;
                        let idx = |t: usize| base + t * inner;
                        let dot = (0..len).map(|t| g[idx(t)] * y[idx(t)]).sum::<T>();
                        for t in 0..len {
                            da[idx(t)] += y[idx(t)] * (g[idx(t)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (a, gamma, beta) = (*a, *gamma, *beta);
                let width = val(gamma).numel();
                if wants(gamma) {
                    let dg = slot(grads, gamma, width);
                    for (grow, xrow) in g.chunks_exact(width).zip(normalized.chunks_exact(width)) {
                        for ((d, &gi), &xh) in dg.iter_mut().zip(grow).zip(xrow) {
                            *d += gi * xh;
                        }
                    }
                }
                if wants(beta) {
                    let db = slot(grads, beta, width);
                    for grow in g.chunks_exact(width) {
                        axpy(db, grow);
                    }
                }
                if wants(a) {
                    let gam = val(gamma).data();
                    let n = T::from_f64(width as f64);
                    let da = slot(grads, a, g.len());
                    let rows = g
                        .chunks_exact(width)
                        .zip(normalized.chunks_exact(width))
                        .zip(da.chunks_exact_mut(width))
                        .zip(inv_std);
                    for (((grow, xrow), drow), &inv) in rows {
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for ((&gi, &gm), &xh) in grow.iter().zip(gam).zip(xrow) {
                            let dxh = gi * gm;
                            sum_d += dxh;
                            sum_dx += dxh * xh;
                        }
                        for (((d, &gi), &gm), &xh) in drow.iter_mut().zip(grow).zip(gam).zip(xrow) {
                            *d += inv * (gi * gm - (sum_d + xh * sum_dx) / n);
                        }
                    }
                }
            }
            &Op::Reshape { a } => axpy(slot(grads, a, g.len()), g),
            &Op::SplitHeads { a, batch, seq, heads } => {
                let hd = g.len() / (batch * seq * heads);
                let width = heads * hd;
                let da = slot(grads, a, g.len());
                for b in 0..batch {
                    for t in 0..seq {
                        for h in 0..heads {
                            let dst = (b * seq + t) * width + h * hd;
                            let src = ((b * heads + h) * seq + t) * hd;
                            axpy(&mut da[dst..dst + hd], &g[src..src + hd]);
                        }
                    }
                }
            }
            &Op::MergeHeads { a, batch, seq, heads } => {
                let hd = g.len() / (batch * seq * heads);
                let width = heads * hd;
                let da = slot(grads, a, g.len());
                for b in 0..batch {
                    for t in 0..seq {
                        for h in 0..heads {
                            let src = (b * seq + t) * width + h * hd;
                            let dst = ((b * heads + h) * seq + t) * hd;
                            axpy(&mut da[dst..dst + hd], &g[src..src + hd]);
                        }
                    }
                }
            }
            &Op::SelectPosition { a, seq, position } => {
                let numel = val(a).numel();
                let width = val(a).shape()[2];
                let da = slot(grads, a, numel);
                for (b, grow) in g.chunks_exact(width).enumerate() {
                    let start = (b * seq + position) * width;
                    axpy(&mut da[start..start + width], grow);
                }
            }
            &Op::Sum { a } => {
                let numel = val(a).numel();
                let da = slot(grads, a, numel);
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mse { pred, target } => {
                let p = val(*pred).data();
                let scale = g[0] * T::from_f64(2.0 / p.len() as f64);
                let dp = slot(grads, *pred, p.len());
                for ((d, &pi), &ti) in dp.iter_mut().zip(p).zip(target) {
                    *d += scale * (pi - ti);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let scale = g[0] / T::from_f64(labels.len() as f64);
                let dl = slot(grads, *logits, probs.len());
                for (b, &label) in labels.iter().enumerate() {
                    for c in 0..2 {
                        let target = if c == label { T::one() } else { T::zero() };
                        dl[b * 2 + c] += scale * (probs[b * 2 + c] - target);
                    }
                }
            }
        }
    }
}

fn axpy<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// In-place softmax over `visible` entries spaced `stride` apart from `base`.
fn softmax_strided<T: Float>(buf: &mut [T], base: usize, stride: usize, visible: usize) {
    let idx = |t: usize| base + t * stride;
    let max = (0..visible).map(|t| buf[idx(t)]).fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for t in 0..visible {
        let e = (buf[idx(t)] - max).exp();
        buf[idx(t)] = e;
        total += e;
    }
    for t in 0..visible {
        buf[idx(t)] = buf[idx(t)] / total;
    }
}

fn shape_error(op: &'static str, lhs: &[usize], rhs: &[usize]) -> GradError {
    GradError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
