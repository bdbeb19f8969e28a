//! Recorded computation graph: every forward primitive appends a node, and
//! `backward` walks the record in reverse. Reductions run in a fixed
//! sequential order so identical inputs always reproduce identical bits.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics captured when a batch-norm node is recorded in train mode.
#[derive(Debug, Clone)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (divides by the element count).
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

#[derive(Debug, Clone)]
enum BnKind<T> {
    Train(BnBatchStats<T>),
    Eval { mean: Vec<T>, var: Vec<T> },
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    BatchMatMul { a: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    Linear { x: NodeId, w: NodeId, bias: NodeId },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64, kind: BnKind<T> },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Sqrt { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddScalar { x: NodeId, c: f64 },
    MulScalar { x: NodeId, c: f64 },
    RowSoftmax { x: NodeId },
    RowLogSoftmax { x: NodeId },
    MeanAxis { x: NodeId, axis: usize },
    SumAxis { x: NodeId, axis: usize },
    MaxAxis { x: NodeId, axis: usize, arg: Vec<usize> },
    Concat { parts: Vec<NodeId>, axis: usize },
    Reshape { x: NodeId },
    Permute { x: NodeId, perm: Vec<usize> },
    BroadcastAxis { x: NodeId, axis: usize, n: usize },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
}

/// Append-only record of executed primitives, topologically ordered by
/// construction.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op, value, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(TensorError::UnknownNode(id.0));
        }
        Ok(())
    }

    /// Records an input tensor with no producing primitive.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Stored values of all nodes, in recording order.
    pub fn values(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.nodes.iter().map(|n| &n.value)
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    // ---- forward primitives ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let out = matmul_fwd(va, vb);
        Ok(self.push(Op::MatMul { a, b }, out))
    }

    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let out = batch_matmul_fwd(self.value(a), self.value(b));
        Ok(self.push(Op::BatchMatMul { a, b }, out))
    }

    /// 2d convolution of `(B, Ci, H, W)` with weights `(Co, Ci, kh, kw)`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        let ok = sx.len() == 4
            && sw.len() == 4
            && sx[1] == sw[1]
            && stride >= 1
            && sx[2] + 2 * pad >= sw[2]
            && sx[3] + 2 * pad >= sw[3];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let out = conv2d_fwd(self.value(x), self.value(w), stride, pad);
        Ok(self.push(Op::Conv2d { x, w, stride, pad }, out))
    }

    /// Affine map of `(B, D)` rows by weights `(K, D)` plus bias `(K)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        self.check(bias)?;
        let (sx, sw, sb) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(bias).shape(),
        );
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if sb != [sw[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: sw.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let out = linear_fwd(self.value(x), self.value(w), self.value(bias));
        Ok(self.push(Op::Linear { x, w, bias }, out))
    }

    /// Batch norm over `(B, C, H, W)` using statistics of the current batch.
    /// Returns the output node and the captured batch statistics so the caller
    /// can maintain running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BnBatchStats<T>)> {
        let c = self.bn_validate(x, gamma, beta)?;
        let stats = bn_batch_stats(self.value(x), eps);
        debug_assert_eq!(stats.mean.len(), c);
        let out = bn_normalize(self.value(x), &stats.mean, &stats.inv_std, self.value(gamma), self.value(beta));
        let id = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                kind: BnKind::Train(stats.clone()),
            },
            out,
        );
        Ok((id, stats))
    }

    /// Batch norm over `(B, C, H, W)` using frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<NodeId> {
        let c = self.bn_validate(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::BadShape {
                op: "batch_norm_eval",
                expected: format!("running statistics of length {c}"),
                got: vec![running_mean.len(), running_var.len()],
            });
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
            .collect();
        let out = bn_normalize(self.value(x), running_mean, &inv_std, self.value(gamma), self.value(beta));
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                kind: BnKind::Eval {
                    mean: running_mean.to_vec(),
                    var: running_var.to_vec(),
                },
            },
            out,
        ))
    }

    fn bn_validate(&self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<usize> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let sx = self.value(x).shape();
        if sx.len() != 4 {
            return Err(TensorError::BadShape {
                op: "batch_norm",
                expected: "rank-4 input (B, C, H, W)".into(),
                got: sx.to_vec(),
            });
        }
        let c = sx[1];
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = self.value(id).shape();
            if s != [c] {
                return Err(TensorError::BadShape {
                    op: "batch_norm",
                    expected: format!("{name} of shape [{c}]"),
                    got: s.to_vec(),
                });
            }
        }
        Ok(c)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.push(Op::Relu { x }, out))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let out = self.value(x).map(sigmoid_scalar);
        Ok(self.push(Op::Sigmoid { x }, out))
    }

    /// Elementwise square root; inputs must be positive.
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let out = self.value(x).map(|v| v.sqrt());
        Ok(self.push(Op::Sqrt { x }, out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b, |x, y| x + y)
            .map(|(out, _)| out)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y)
            .map(|(out, _)| out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y)
            .map(|(out, _)| out)
    }

    fn binary_same_shape(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<(NodeId, ())> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data: Vec<T> = va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data).expect("same shape");
        let node = match op {
            "add" => Op::Add { a, b },
            "sub" => Op::Sub { a, b },
            _ => Op::Mul { a, b },
        };
        Ok((self.push(node, out), ()))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.check(x)?;
        let cv = T::from_f64(c);
        let out = self.value(x).map(|v| v + cv);
        Ok(self.push(Op::AddScalar { x, c }, out))
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.check(x)?;
        let cv = T::from_f64(c);
        let out = self.value(x).map(|v| v * cv);
        Ok(self.push(Op::MulScalar { x, c }, out))
    }

    /// Softmax over the last axis.
    pub fn row_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        if self.value(x).shape().is_empty() {
            return Err(TensorError::BadShape {
                op: "row_softmax",
                expected: "rank >= 1".into(),
                got: vec![],
            });
        }
        let out = row_softmax_fwd(self.value(x));
        Ok(self.push(Op::RowSoftmax { x }, out))
    }

    /// Log-softmax over the last axis.
    pub fn row_log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        if self.value(x).shape().is_empty() {
            return Err(TensorError::BadShape {
                op: "row_log_softmax",
                expected: "rank >= 1".into(),
                got: vec![],
            });
        }
        let out = row_log_softmax_fwd(self.value(x));
        Ok(self.push(Op::RowLogSoftmax { x }, out))
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("mean_axis", x, axis)?;
        let out = reduce_axis_fwd(self.value(x), axis, Reduce::Mean).0;
        Ok(self.push(Op::MeanAxis { x, axis }, out))
    }

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("sum_axis", x, axis)?;
        let out = reduce_axis_fwd(self.value(x), axis, Reduce::Sum).0;
        Ok(self.push(Op::SumAxis { x, axis }, out))
    }

    /// Max over one axis; ties resolve to the lowest index.
    pub fn max_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("max_axis", x, axis)?;
        let (out, arg) = reduce_axis_fwd(self.value(x), axis, Reduce::Max);
        Ok(self.push(Op::MaxAxis { x, axis, arg }, out))
    }

    fn check_axis(&self, op: &'static str, x: NodeId, axis: usize) -> Result<()> {
        self.check(x)?;
        let s = self.value(x).shape();
        if axis >= s.len() {
            return Err(TensorError::AxisOutOfRange {
                op,
                axis,
                shape: s.to_vec(),
            });
        }
        Ok(())
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat" });
        }
        for &p in parts {
            self.check(p)?;
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                shape: first,
            });
        }
        for &p in &parts[1..] {
            let s = self.value(p).shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (&d, &e))| i == axis || d == e);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
        }
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = concat_fwd(&tensors, axis);
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            out,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(TensorError::BadShape {
                op: "reshape",
                expected: format!("shape with {} elements", v.numel()),
                got: shape.to_vec(),
            });
        }
        let out = Tensor::new(shape, v.data().to_vec()).expect("numel checked");
        Ok(self.push(Op::Reshape { x }, out))
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        let s = self.value(x).shape();
        let mut seen = vec![false; s.len()];
        let valid = perm.len() == s.len()
            && perm.iter().all(|&p| {
                if p >= s.len() || seen[p] {
                    false
                } else {
                    seen[p] = true;
                    true
                }
            });
        if !valid {
            return Err(TensorError::BadShape {
                op: "permute",
                expected: format!("permutation of 0..{}", s.len()),
                got: perm.to_vec(),
            });
        }
        let out = permute_fwd(self.value(x), perm);
        Ok(self.push(
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            out,
        ))
    }

    /// Repeats a length-1 axis `n` times.
    pub fn broadcast_axis(&mut self, x: NodeId, axis: usize, n: usize) -> Result<NodeId> {
        self.check_axis("broadcast_axis", x, axis)?;
        let s = self.value(x).shape();
        if s[axis] != 1 || n == 0 {
            return Err(TensorError::BadShape {
                op: "broadcast_axis",
                expected: format!("axis {axis} of extent 1 and n >= 1"),
                got: s.to_vec(),
            });
        }
        let out = broadcast_axis_fwd(self.value(x), axis, n);
        Ok(self.push(Op::BroadcastAxis { x, axis, n }, out))
    }

    // ---- backward ----

    /// Seeds `d loss = 1` and accumulates gradients for every node that the
    /// loss depends on. `loss` must be a scalar recorded on this tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check(loss)?;
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::LossNotScalar(lv.shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let seed = Tensor::new(self.value(loss).shape(), vec![T::one()]).expect("scalar");
        self.nodes[loss.0].grad = Some(seed);

        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.clone() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (da, db) = matmul_bwd(&g, self.value(a), self.value(b));
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::BatchMatMul { a, b } => {
                    let (da, db) = batch_matmul_bwd(&g, self.value(a), self.value(b));
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let dx = conv2d_bwd_input(&g, self.value(x).shape(), self.value(w), stride, pad);
                    let dw = conv2d_bwd_weight(&g, self.value(x), self.value(w).shape(), stride, pad);
                    self.accumulate(x, dx);
                    self.accumulate(w, dw);
                }
                Op::Linear { x, w, bias } => {
                    let (dx, dw, db) = linear_bwd(&g, self.value(x), self.value(w));
                    self.accumulate(x, dx);
                    self.accumulate(w, dw);
                    self.accumulate(bias, db);
                }
                Op::BatchNorm { x, gamma, beta, eps, kind } => {
                    let (dx, dg, db) = match &kind {
                        BnKind::Train(stats) => {
                            bn_train_bwd(&g, self.value(x), self.value(gamma), stats)
                        }
                        BnKind::Eval { mean, var } => {
                            bn_eval_bwd(&g, self.value(x), self.value(gamma), mean, var, eps)
                        }
                    };
                    self.accumulate(x, dx);
                    self.accumulate(gamma, dg);
                    self.accumulate(beta, db);
                }
                Op::Relu { x } => {
                    let xv = self.value(x);
                    let dx = Tensor::new(
                        xv.shape(),
                        xv.iter()
                            .zip(g.iter())
                            .map(|(&v, &gi)| if v > T::zero() { gi } else { T::zero() })
                            .collect(),
                    )
                    .expect("same shape");
                    self.accumulate(x, dx);
                }
                Op::Sigmoid { x } => {
                    let y = &self.nodes[i].value;
                    let dx = Tensor::new(
                        y.shape(),
                        y.iter()
                            .zip(g.iter())
                            .map(|(&s, &gi)| gi * s * (T::one() - s))
                            .collect(),
                    )
                    .expect("same shape");
                    self.accumulate(x, dx);
                }
                Op::Sqrt { x } => {
                    let y = &self.nodes[i].value;
                    let half = T::from_f64(0.5);
                    let dx = Tensor::new(
                        y.shape(),
                        y.iter().zip(g.iter()).map(|(&s, &gi)| gi * half / s).collect(),
                    )
                    .expect("same shape");
                    self.accumulate(x, dx);
                }
                Op::Add { a, b } => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g);
                }
                Op::Sub { a, b } => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g.map(|v| -v));
                }
                Op::Mul { a, b } => {
                    let da = Tensor::new(
                        g.shape(),
                        g.iter()
                            .zip(self.value(b).iter())
                            .map(|(&gi, &bv)| gi * bv)
                            .collect(),
                    )
                    .expect("same shape");
                    let db = Tensor::new(
                        g.shape(),
                        g.iter()
                            .zip(self.value(a).iter())
                            .map(|(&gi, &av)| gi * av)
                            .collect(),
                    )
                    .expect("same shape");
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::AddScalar { x, .. } => self.accumulate(x, g),
                Op::MulScalar { x, c } => {
                    let cv = T::from_f64(c);
                    self.accumulate(x, g.map(|v| v * cv));
                }
                Op::RowSoftmax { x } => {
                    let dx = row_softmax_bwd(&g, &self.nodes[i].value);
                    self.accumulate(x, dx);
                }
                Op::RowLogSoftmax { x } => {
                    let dx = row_log_softmax_bwd(&g, &self.nodes[i].value);
                    self.accumulate(x, dx);
                }
                Op::MeanAxis { x, axis } => {
                    let dx = spread_axis(&g, self.value(x).shape(), axis, true);
                    self.accumulate(x, dx);
                }
                Op::SumAxis { x, axis } => {
                    let dx = spread_axis(&g, self.value(x).shape(), axis, false);
                    self.accumulate(x, dx);
                }
                Op::MaxAxis { x, axis: _, arg } => {
                    let mut dx = Tensor::zeros(self.value(x).shape());
                    for (out_i, &src) in arg.iter().enumerate() {
                        dx.data_mut()[src] += g.data()[out_i];
                    }
                    self.accumulate(x, dx);
                }
                Op::Concat { parts, axis } => {
                    let grads = concat_bwd(
                        &g,
                        &parts
                            .iter()
                            .map(|&p| self.value(p).shape().to_vec())
                            .collect::<Vec<_>>(),
                        axis,
                    );
                    for (&p, dg) in parts.iter().zip(grads) {
                        self.accumulate(p, dg);
                    }
                }
                Op::Reshape { x } => {
                    let dx = Tensor::new(self.value(x).shape(), g.data().to_vec()).expect("numel");
                    self.accumulate(x, dx);
                }
                Op::Permute { x, perm } => {
                    let inv = invert_perm(&perm);
                    self.accumulate(x, permute_fwd(&g, &inv));
                }
                Op::BroadcastAxis { x, axis, .. } => {
                    let (dx, _) = reduce_axis_fwd(&g, axis, Reduce::Sum);
                    let dx = Tensor::new(self.value(x).shape(), dx.into_data()).expect("numel");
                    self.accumulate(x, dx);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contrib: Tensor<T>) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (dst, src) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *dst += *src;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    /// Recomputes every node value from the recorded primitives, in order.
    /// The result is bit-identical to the stored values.
    pub fn replay(&self) -> Vec<Tensor<T>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::MatMul { a, b } => matmul_fwd(&values[a.0], &values[b.0]),
                Op::BatchMatMul { a, b } => batch_matmul_fwd(&values[a.0], &values[b.0]),
                Op::Conv2d { x, w, stride, pad } => {
                    conv2d_fwd(&values[x.0], &values[w.0], *stride, *pad)
                }
                Op::Linear { x, w, bias } => linear_fwd(&values[x.0], &values[w.0], &values[bias.0]),
                Op::BatchNorm { x, gamma, beta, eps, kind } => match kind {
                    BnKind::Train(_) => {
                        let stats = bn_batch_stats(&values[x.0], *eps);
                        bn_normalize(&values[x.0], &stats.mean, &stats.inv_std, &values[gamma.0], &values[beta.0])
                    }
                    BnKind::Eval { mean, var } => {
                        let inv_std: Vec<T> = var
                            .iter()
                            .map(|&v| T::one() / (v + T::from_f64(*eps)).sqrt())
                            .collect();
                        bn_normalize(&values[x.0], mean, &inv_std, &values[gamma.0], &values[beta.0])
                    }
                },
                Op::Relu { x } => values[x.0].map(|v| if v > T::zero() { v } else { T::zero() }),
                Op::Sigmoid { x } => values[x.0].map(sigmoid_scalar),
                Op::Sqrt { x } => values[x.0].map(|v| v.sqrt()),
                Op::Add { a, b } => zip_tensors(&values[a.0], &values[b.0], |x, y| x + y),
                Op::Sub { a, b } => zip_tensors(&values[a.0], &values[b.0], |x, y| x - y),
                Op::Mul { a, b } => zip_tensors(&values[a.0], &values[b.0], |x, y| x * y),
                Op::AddScalar { x, c } => {
                    let cv = T::from_f64(*c);
                    values[x.0].map(|v| v + cv)
                }
                Op::MulScalar { x, c } => {
                    let cv = T::from_f64(*c);
                    values[x.0].map(|v| v * cv)
                }
                Op::RowSoftmax { x } => row_softmax_fwd(&values[x.0]),
                Op::RowLogSoftmax { x } => row_log_softmax_fwd(&values[x.0]),
                Op::MeanAxis { x, axis } => reduce_axis_fwd(&values[x.0], *axis, Reduce::Mean).0,
                Op::SumAxis { x, axis } => reduce_axis_fwd(&values[x.0], *axis, Reduce::Sum).0,
                Op::MaxAxis { x, axis, .. } => reduce_axis_fwd(&values[x.0], *axis, Reduce::Max).0,
                Op::Concat { parts, axis } => {
                    let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| &values[p.0]).collect();
                    concat_fwd(&tensors, *axis)
                }
                Op::Reshape { x } => {
                    Tensor::new(node.value.shape(), values[x.0].data().to_vec()).expect("numel")
                }
                Op::Permute { x, perm } => permute_fwd(&values[x.0], perm),
                Op::BroadcastAxis { x, axis, n } => broadcast_axis_fwd(&values[x.0], *axis, *n),
            };
            values.push(v);
        }
        values
    }
}

fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // Split on sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn zip_tensors<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(
        a.shape(),
        a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same shape")
}

// ---- forward kernels (shared by record and replay) ----

fn matmul_fwd<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out).expect("sized")
}

fn matmul_bwd<T: Scalar>(g: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let (gd, ad, bd) = (g.data(), a.data(), b.data());
    // dA = g . B^T, accumulated row by row.
    let mut da = vec![T::zero(); m * k];
    for i in 0..m {
        for p in 0..k {
            let mut acc = T::zero();
            let grow = &gd[i * n..(i + 1) * n];
            let brow = &bd[p * n..(p + 1) * n];
            for (gi, bi) in grow.iter().zip(brow) {
                acc += *gi * *bi;
            }
            da[i * k + p] = acc;
        }
    }
    // dB = A^T . g
    let mut db = vec![T::zero(); k * n];
    for p in 0..k {
        let row = &mut db[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ad[i * k + p];
            let grow = &gd[i * n..(i + 1) * n];
            for (o, &gi) in row.iter_mut().zip(grow) {
                *o += av * gi;
            }
        }
    }
    (
        Tensor::new(&[m, k], da).expect("sized"),
        Tensor::new(&[k, n], db).expect("sized"),
    )
}

fn batch_matmul_fwd<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let n = b.shape()[2];
    let mut out = vec![T::zero(); bs * m * n];
    for bi in 0..bs {
        let ad = &a.data()[bi * m * k..(bi + 1) * m * k];
        let bd = &b.data()[bi * k * n..(bi + 1) * k * n];
        let od = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let row = &mut od[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor::new(&[bs, m, n], out).expect("sized")
}

fn batch_matmul_bwd<T: Scalar>(
    g: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let n = b.shape()[2];
    let mut da = vec![T::zero(); bs * m * k];
    let mut db = vec![T::zero(); bs * k * n];
    for bi in 0..bs {
        let ad = &a.data()[bi * m * k..(bi + 1) * m * k];
        let bd = &b.data()[bi * k * n..(bi + 1) * k * n];
        let gd = &g.data()[bi * m * n..(bi + 1) * m * n];
        let dad = &mut da[bi * m * k..(bi + 1) * m * k];
        for i in 0..m {
            for p in 0..k {
                let mut acc = T::zero();
                let grow = &gd[i * n..(i + 1) * n];
                let brow = &bd[p * n..(p + 1) * n];
                for (gi, bi2) in grow.iter().zip(brow) {
                    acc += *gi * *bi2;
                }
                dad[i * k + p] = acc;
            }
        }
        let dbd = &mut db[bi * k * n..(bi + 1) * k * n];
        for p in 0..k {
            let row = &mut dbd[p * n..(p + 1) * n];
            for i in 0..m {
                let av = ad[i * k + p];
                let grow = &gd[i * n..(i + 1) * n];
                for (o, &gi) in row.iter_mut().zip(grow) {
                    *o += av * gi;
                }
            }
        }
    }
    (
        Tensor::new(a.shape(), da).expect("sized"),
        Tensor::new(b.shape(), db).expect("sized"),
    )
}

fn conv2d_out_size(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1)
}

fn conv2d_fwd<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
    let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ho, wo) = conv2d_out_size(h, wd, kh, kw, stride, pad);
    let xd = x.data();
    let wv = w.data();

    if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        // 1x1 convolution is a per-sample matrix product over flattened positions.
        let hw = h * wd;
        let mut out = vec![T::zero(); b * co * hw];
        for bi in 0..b {
            let xb = &xd[bi * ci * hw..(bi + 1) * ci * hw];
            let ob = &mut out[bi * co * hw..(bi + 1) * co * hw];
            for o in 0..co {
                let orow = &mut ob[o * hw..(o + 1) * hw];
                for c in 0..ci {
                    let wv_oc = wv[o * ci + c];
                    let xrow = &xb[c * hw..(c + 1) * hw];
                    for (ov, &xv) in orow.iter_mut().zip(xrow) {
                        *ov += wv_oc * xv;
                    }
                }
            }
        }
        return Tensor::new(&[b, co, h, wd], out).expect("sized");
    }

    let mut out = vec![T::zero(); b * co * ho * wo];
    for bi in 0..b {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for c in 0..ci {
                        for ky in 0..kh {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let iy = iy - pad;
                            for kx in 0..kw {
                                let ix = ox * stride + kx;
                                if ix < pad || ix - pad >= wd {
                                    continue;
                                }
                                let ix = ix - pad;
                                acc += xd[((bi * ci + c) * h + iy) * wd + ix]
                                    * wv[((o * ci + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((bi * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, co, ho, wo], out).expect("sized")
}

fn conv2d_bwd_input<T: Scalar>(
    g: &Tensor<T>,
    x_shape: &[usize],
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (b, ci, h, wd) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (g.shape()[2], g.shape()[3]);
    let gd = g.data();
    let wv = w.data();
    let mut dx = vec![T::zero(); b * ci * h * wd];
    // Gather form: each input element sums the outputs it contributed to.
    for bi in 0..b {
        for c in 0..ci {
            for iy in 0..h {
                for ix in 0..wd {
                    let mut acc = T::zero();
                    for o in 0..co {
                        for ky in 0..kh {
                            let oy_num = iy + pad;
                            if oy_num < ky || (oy_num - ky) % stride != 0 {
                                continue;
                            }
                            let oy = (oy_num - ky) / stride;
                            if oy >= ho {
                                continue;
                            }
                            for kx in 0..kw {
                                let ox_num = ix + pad;
                                if ox_num < kx || (ox_num - kx) % stride != 0 {
                                    continue;
                                }
                                let ox = (ox_num - kx) / stride;
                                if ox >= wo {
                                    continue;
                                }
                                acc += gd[((bi * co + o) * ho + oy) * wo + ox]
                                    * wv[((o * ci + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    dx[((bi * ci + c) * h + iy) * wd + ix] = acc;
                }
            }
        }
    }
    Tensor::new(x_shape, dx).expect("sized")
}

fn conv2d_bwd_weight<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w_shape[0], w_shape[2], w_shape[3]);
    let (ho, wo) = (g.shape()[2], g.shape()[3]);
    let gd = g.data();
    let xd = x.data();
    let mut dw = vec![T::zero(); co * ci * kh * kw];
    for o in 0..co {
        for c in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = T::zero();
                    for bi in 0..b {
                        for oy in 0..ho {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let iy = iy - pad;
                            for ox in 0..wo {
                                let ix = ox * stride + kx;
                                if ix < pad || ix - pad >= wd {
                                    continue;
                                }
                                let ix = ix - pad;
                                acc += gd[((bi * co + o) * ho + oy) * wo + ox]
                                    * xd[((bi * ci + c) * h + iy) * wd + ix];
                            }
                        }
                    }
                    dw[((o * ci + c) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    Tensor::new(w_shape, dw).expect("sized")
}

fn linear_fwd<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let (b, d) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[0];
    let mut out = vec![T::zero(); b * k];
    for bi in 0..b {
        let xrow = &x.data()[bi * d..(bi + 1) * d];
        for ki in 0..k {
            let wrow = &w.data()[ki * d..(ki + 1) * d];
            let mut acc = bias.data()[ki];
            for (xv, wv) in xrow.iter().zip(wrow) {
                acc += *xv * *wv;
            }
            out[bi * k + ki] = acc;
        }
    }
    Tensor::new(&[b, k], out).expect("sized")
}

fn linear_bwd<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, d) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[0];
    let gd = g.data();
    let mut dx = vec![T::zero(); b * d];
    for bi in 0..b {
        let row = &mut dx[bi * d..(bi + 1) * d];
        for ki in 0..k {
            let gv = gd[bi * k + ki];
            let wrow = &w.data()[ki * d..(ki + 1) * d];
            for (o, &wv) in row.iter_mut().zip(wrow) {
                *o += gv * wv;
            }
        }
    }
    let mut dw = vec![T::zero(); k * d];
    for ki in 0..k {
        let row = &mut dw[ki * d..(ki + 1) * d];
        for bi in 0..b {
            let gv = gd[bi * k + ki];
            let xrow = &x.data()[bi * d..(bi + 1) * d];
            for (o, &xv) in row.iter_mut().zip(xrow) {
                *o += gv * xv;
            }
        }
    }
    let mut db = vec![T::zero(); k];
    for ki in 0..k {
        for bi in 0..b {
            db[ki] += gd[bi * k + ki];
        }
    }
    (
        Tensor::new(&[b, d], dx).expect("sized"),
        Tensor::new(&[k, d], dw).expect("sized"),
        Tensor::new(&[k], db).expect("sized"),
    )
}

fn bn_batch_stats<T: Scalar>(x: &Tensor<T>, eps: f64) -> BnBatchStats<T> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let m = T::from_f64((b * h * w) as f64);
    let hw = h * w;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut acc = T::zero();
        for bi in 0..b {
            let plane = &x.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            for &v in plane {
                acc += v;
            }
        }
        mean[ci] = acc / m;
        let mut vacc = T::zero();
        for bi in 0..b {
            let plane = &x.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            for &v in plane {
                let d = v - mean[ci];
                vacc += d * d;
            }
        }
        var[ci] = vacc / m;
    }
    let inv_std = var
        .iter()
        .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
        .collect();
    BnBatchStats { mean, var, inv_std }
}

fn bn_normalize<T: Scalar>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Tensor<T> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let mut out = vec![T::zero(); b * c * hw];
    for bi in 0..b {
        for ci in 0..c {
            let (m, s) = (mean[ci], inv_std[ci]);
            let (gm, bt) = (gamma.data()[ci], beta.data()[ci]);
            let src = &x.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            let dst = &mut out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = gm * ((v - m) * s) + bt;
            }
        }
    }
    Tensor::new(x.shape(), out).expect("sized")
}

fn bn_train_bwd<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &BnBatchStats<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let m = T::from_f64((b * h * w) as f64);
    let mut dx = vec![T::zero(); b * c * hw];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ci in 0..c {
        let (mean, inv_std) = (stats.mean[ci], stats.inv_std[ci]);
        let gm = gamma.data()[ci];
        // First pass: per-channel sums of dy and dy * x_hat.
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for i in 0..hw {
                let dy = g.data()[base + i];
                let xhat = (x.data()[base + i] - mean) * inv_std;
                sum_dy += dy;
                sum_dy_xhat += dy * xhat;
            }
        }
        dgamma[ci] = sum_dy_xhat;
        dbeta[ci] = sum_dy;
        // Second pass: dx = gamma * inv_std / M * (M dy - sum_dy - x_hat * sum_dy_xhat).
        let scale = gm * inv_std / m;
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for i in 0..hw {
                let dy = g.data()[base + i];
                let xhat = (x.data()[base + i] - mean) * inv_std;
                dx[base + i] = scale * (m * dy - sum_dy - xhat * sum_dy_xhat);
            }
        }
    }
    (
        Tensor::new(x.shape(), dx).expect("sized"),
        Tensor::new(&[c], dgamma).expect("sized"),
        Tensor::new(&[c], dbeta).expect("sized"),
    )
}

fn bn_eval_bwd<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let mut dx = vec![T::zero(); b * c * hw];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ci in 0..c {
        let inv_std = T::one() / (var[ci] + T::from_f64(eps)).sqrt();
        let gm = gamma.data()[ci];
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for i in 0..hw {
                let dy = g.data()[base + i];
                let xhat = (x.data()[base + i] - mean[ci]) * inv_std;
                dx[base + i] = dy * gm * inv_std;
                dgamma[ci] += dy * xhat;
                dbeta[ci] += dy;
            }
        }
    }
    (
        Tensor::new(x.shape(), dx).expect("sized"),
        Tensor::new(&[c], dgamma).expect("sized"),
        Tensor::new(&[c], dbeta).expect("sized"),
    )
}

fn row_softmax_fwd<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = *x.shape().last().expect("rank >= 1");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
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
            *v = *v / sum;
        }
    }
    Tensor::new(x.shape(), out).expect("sized")
}

fn row_softmax_bwd<T: Scalar>(g: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let n = *y.shape().last().expect("rank >= 1");
    let mut dx = vec![T::zero(); y.numel()];
    for (r, (grow, yrow)) in g.data().chunks(n).zip(y.data().chunks(n)).enumerate() {
        let mut dot = T::zero();
        for (gi, yi) in grow.iter().zip(yrow) {
            dot += *gi * *yi;
        }
        let drow = &mut dx[r * n..(r + 1) * n];
        for ((o, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
            *o = yi * (gi - dot);
        }
    }
    Tensor::new(y.shape(), dx).expect("sized")
}

fn row_log_softmax_fwd<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = *x.shape().last().expect("rank >= 1");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for &v in row.iter() {
            sum += (v - mx).exp();
        }
        let lse = mx + sum.ln();
        for v in row.iter_mut() {
            *v = *v - lse;
        }
    }
    Tensor::new(x.shape(), out).expect("sized")
}

fn row_log_softmax_bwd<T: Scalar>(g: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let n = *y.shape().last().expect("rank >= 1");
    let mut dx = vec![T::zero(); y.numel()];
    for (r, (grow, yrow)) in g.data().chunks(n).zip(y.data().chunks(n)).enumerate() {
        let mut gsum = T::zero();
        for &gi in grow {
            gsum += gi;
        }
        let drow = &mut dx[r * n..(r + 1) * n];
        for ((o, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
            *o = gi - yi.exp() * gsum;
        }
    }
    Tensor::new(y.shape(), dx).expect("sized")
}

enum Reduce {
    Mean,
    Sum,
    Max,
}

/// Reduces one axis away. For `Max` also returns the flat input index chosen
/// per output element (lowest index wins ties).
fn reduce_axis_fwd<T: Scalar>(x: &Tensor<T>, axis: usize, kind: Reduce) -> (Tensor<T>, Vec<usize>) {
    let s = x.shape();
    let n = s[axis];
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let mut out_shape: Vec<usize> = s.to_vec();
    out_shape.remove(axis);
    let mut out = vec![T::zero(); outer * inner];
    let mut arg = Vec::new();
    if matches!(kind, Reduce::Max) {
        arg = vec![0usize; outer * inner];
    }
    let xd = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let mut acc;
            match kind {
                Reduce::Mean | Reduce::Sum => {
                    acc = T::zero();
                    for j in 0..n {
                        acc += xd[(o * n + j) * inner + i];
                    }
                    if matches!(kind, Reduce::Mean) {
                        acc = acc / T::from_f64(n as f64);
                    }
                }
                Reduce::Max => {
                    let mut best = xd[o * n * inner + i];
                    let mut best_j = 0;
                    for j in 1..n {
                        let v = xd[(o * n + j) * inner + i];
                        if v > best {
                            best = v;
                            best_j = j;
                        }
                    }
                    arg[o * inner + i] = (o * n + best_j) * inner + i;
                    acc = best;
                }
            }
            out[o * inner + i] = acc;
        }
    }
    (Tensor::new(&out_shape, out).expect("sized"), arg)
}

/// Broadcasts a reduced gradient back across the removed axis; `mean` divides
/// by the axis length.
fn spread_axis<T: Scalar>(g: &Tensor<T>, x_shape: &[usize], axis: usize, mean: bool) -> Tensor<T> {
    let n = x_shape[axis];
    let outer: usize = x_shape[..axis].iter().product();
    let inner: usize = x_shape[axis + 1..].iter().product();
    let scale = if mean {
        T::one() / T::from_f64(n as f64)
    } else {
        T::one()
    };
    let mut dx = vec![T::zero(); outer * n * inner];
    let gd = g.data();
    for o in 0..outer {
        for j in 0..n {
            for i in 0..inner {
                dx[(o * n + j) * inner + i] = gd[o * inner + i] * scale;
            }
        }
    }
    Tensor::new(x_shape, dx).expect("sized")
}

fn concat_fwd<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
    let first = parts[0].shape();
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out_shape = first.to_vec();
    out_shape[axis] = total_axis;
    let mut out = vec![T::zero(); outer * total_axis * inner];
    for o in 0..outer {
        let mut off = 0;
        for p in parts {
            let n = p.shape()[axis];
            let src = &p.data()[o * n * inner..(o + 1) * n * inner];
            let dst = &mut out[(o * total_axis + off) * inner..(o * total_axis + off + n) * inner];
            dst.copy_from_slice(src);
            off += n;
        }
    }
    Tensor::new(&out_shape, out).expect("sized")
}

fn concat_bwd<T: Scalar>(g: &Tensor<T>, shapes: &[Vec<usize>], axis: usize) -> Vec<Tensor<T>> {
    let first = &shapes[0];
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let total_axis = g.shape()[axis];
    let mut grads: Vec<Tensor<T>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
    for o in 0..outer {
        let mut off = 0;
        for (gi, s) in grads.iter_mut().zip(shapes) {
            let n = s[axis];
            let src = &g.data()[(o * total_axis + off) * inner..(o * total_axis + off + n) * inner];
            gi.data_mut()[o * n * inner..(o + 1) * n * inner].copy_from_slice(src);
            off += n;
        }
    }
    grads
}

fn permute_fwd<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let s = x.shape();
    let rank = s.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    }
    let numel = x.numel();
    let mut out = vec![T::zero(); numel];
    let mut idx = vec![0usize; rank];
    let xd = x.data();
    for (flat_out, o) in out.iter_mut().enumerate() {
        // Decode flat_out into the permuted multi-index, then map back.
        let mut rem = flat_out;
        for d in (0..rank).rev() {
            idx[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut src = 0;
        for d in 0..rank {
            src += idx[d] * in_strides[perm[d]];
        }
        *o = xd[src];
    }
    Tensor::new(&out_shape, out).expect("sized")
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn broadcast_axis_fwd<T: Scalar>(x: &Tensor<T>, axis: usize, n: usize) -> Tensor<T> {
    let s = x.shape();
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let mut out_shape = s.to_vec();
    out_shape[axis] = n;
    let mut out = vec![T::zero(); outer * n * inner];
    let xd = x.data();
    for o in 0..outer {
        let src = &xd[o * inner..(o + 1) * inner];
        for j in 0..n {
            out[(o * n + j) * inner..(o * n + j + 1) * inner].copy_from_slice(src);
        }
    }
    Tensor::new(&out_shape, out).expect("sized")
}
