//! Reverse-mode autodiff over a recorded operation tape.
//!
//! A [`Graph`] records every primitive applied to tensors that trace back
//! to one of its leaves. [`Graph::grad`] walks the tape in reverse and
//! produces gradients; with `create_graph` the backward pass is itself
//! recorded, so the returned gradients are differentiable again. That
//! re-recording is what carries the meta-update through the inner-loop
//! SGD steps: every primitive's backward rule is phrased in terms of the
//! same public operations, and the set of primitives is closed under
//! differentiation (the convolution family is three bilinear kernels
//! that are each other's adjoints, pooling scatter/gather are mutual
//! adjoints, and pointwise rules reuse the recorded outputs).
//!
//! Graphs are single-threaded; independent computations use independent
//! graphs. Recording costs nothing when no operand carries a node, so
//! the same ops serve plain inference.

use alloc::sync::Arc;
use alloc::vec::Vec;

use core::cell::RefCell;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{CoreError, Result};
use crate::tensor::{NodeRef, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone)]
enum Op {
    Leaf,
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    Scale { a: Tensor, c: f64 },
    AddScalar { a: Tensor },
    Relu { a: Tensor },
    MulMask { a: Tensor, mask: Arc<[f64]> },
    Exp { a: Tensor },
    Ln { a: Tensor },
    Recip { a: Tensor },
    Rsqrt { a: Tensor },
    Matmul { a: Tensor, b: Tensor },
    Transpose { a: Tensor },
    Conv { a: Tensor, b: Tensor, kind: ConvKind },
    MaxPool { a: Tensor, idx: Arc<[usize]> },
    PoolScatter { a: Tensor, idx: Arc<[usize]> },
    PoolGather { a: Tensor, idx: Arc<[usize]> },
    SumAxis0 { a: Tensor },
    SumAxis1 { a: Tensor },
    BcastAxis0 { a: Tensor },
    BcastAxis1 { a: Tensor },
    SumChan { a: Tensor },
    BcastChan { a: Tensor },
    SumAll { a: Tensor },
    BcastFill { a: Tensor },
    Reshape { a: Tensor },
}

/// The three cross-correlation kernels. `Fwd` maps (input, kernel) to
/// feature maps; `Dx` and `Dk` are its adjoints with respect to the
/// input and the kernel. Each is bilinear, and the derivative of any of
/// them is again one of the three, which is what makes second-order
/// differentiation through convolutions work.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum ConvKind {
    Fwd,
    Dx,
    Dk,
}

struct Node {
    op: Op,
    out_shape: Vec<usize>,
    out_data: Arc<[f64]>,
}

struct Inner {
    nodes: Vec<Node>,
    recording: bool,
}

/// A computation tape.
pub struct Graph {
    id: u64,
    inner: RefCell<Inner>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                recording: true,
            }),
        }
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Registers a value as a differentiable leaf of this graph.
    pub fn leaf(&self, value: &Tensor) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len();
        inner.nodes.push(Node {
            op: Op::Leaf,
            out_shape: value.shape().to_vec(),
            out_data: value.data_arc(),
        });
        Tensor::from_parts(
            value.shape().to_vec(),
            value.data_arc(),
            Some(NodeRef { graph: self.id, idx }),
        )
    }

    /// Checks graph ownership and reports whether the tensor should
    /// propagate gradients through this graph.
    fn traced(&self, op: &'static str, t: &Tensor) -> Result<bool> {
        match t.node {
            Some(n) if n.graph == self.id => Ok(true),
            Some(_) => Err(CoreError::ForeignGraph { op }),
            None => Ok(false),
        }
    }

    fn push(&self, op: Op, shape: Vec<usize>, data: Vec<f64>, any_traced: bool) -> Tensor {
        let data: Arc<[f64]> = data.into();
        let mut inner = self.inner.borrow_mut();
        if !(inner.recording && any_traced) {
            return Tensor::from_parts(shape, data, None);
        }
        let idx = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            out_shape: shape.clone(),
            out_data: Arc::clone(&data),
        });
        Tensor::from_parts(shape, data, Some(NodeRef { graph: self.id, idx }))
    }

    /// The recorded output of node `idx`, re-attached to the tape so a
    /// backward rule can reuse it differentiably.
    fn node_output(&self, idx: usize) -> Tensor {
        let inner = self.inner.borrow();
        let n = &inner.nodes[idx];
        Tensor::from_parts(
            n.out_shape.clone(),
            Arc::clone(&n.out_data),
            Some(NodeRef { graph: self.id, idx }),
        )
    }

    fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(CoreError::ShapeMismatch {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok(())
    }

    // ----- pointwise -----

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::same_shape("add", a, b)?;
        let traced = self.traced("add", a)? | self.traced("add", b)?;
        let data = zip_map(a.data(), b.data(), |x, y| x + y);
        Ok(self.push(
            Op::Add {
                a: a.clone(),
                b: b.clone(),
            },
            a.shape().to_vec(),
            data,
            traced,
        ))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::same_shape("sub", a, b)?;
        let traced = self.traced("sub", a)? | self.traced("sub", b)?;
        let data = zip_map(a.data(), b.data(), |x, y| x - y);
        Ok(self.push(
            Op::Sub {
                a: a.clone(),
                b: b.clone(),
            },
            a.shape().to_vec(),
            data,
            traced,
        ))
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::same_shape("mul", a, b)?;
        let traced = self.traced("mul", a)? | self.traced("mul", b)?;
        let data = zip_map(a.data(), b.data(), |x, y| x * y);
        Ok(self.push(
            Op::Mul {
                a: a.clone(),
                b: b.clone(),
            },
            a.shape().to_vec(),
            data,
            traced,
        ))
    }

    /// Multiplication by a plain scalar (the spec's scalar broadcast).
    pub fn scale(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let traced = self.traced("scale", a)?;
        let data = a.data().iter().map(|x| x * c).collect();
        Ok(self.push(Op::Scale { a: a.clone(), c }, a.shape().to_vec(), data, traced))
    }

    pub fn add_scalar(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let traced = self.traced("add_scalar", a)?;
        let data = a.data().iter().map(|x| x + c).collect();
        Ok(self.push(Op::AddScalar { a: a.clone() }, a.shape().to_vec(), data, traced))
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        let traced = self.traced("relu", a)?;
        let data = a.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        Ok(self.push(Op::Relu { a: a.clone() }, a.shape().to_vec(), data, traced))
    }

    /// Elementwise product with a constant mask; the mask is opaque to
    /// differentiation. Used by the relu backward rule.
    fn mul_mask(&self, a: &Tensor, mask: &Arc<[f64]>) -> Result<Tensor> {
        let traced = self.traced("mul_mask", a)?;
        let data = zip_map(a.data(), mask, |x, m| x * m);
        Ok(self.push(
            Op::MulMask {
                a: a.clone(),
                mask: Arc::clone(mask),
            },
            a.shape().to_vec(),
            data,
            traced,
        ))
    }

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        let traced = self.traced("exp", a)?;
        let data = a.data().iter().map(|&x| libm::exp(x)).collect();
        Ok(self.push(Op::Exp { a: a.clone() }, a.shape().to_vec(), data, traced))
    }

    pub fn ln(&self, a: &Tensor) -> Result<Tensor> {
        let traced = self.traced("ln", a)?;
        let data = a.data().iter().map(|&x| libm::log(x)).collect();
        Ok(self.push(Op::Ln { a: a.clone() }, a.shape().to_vec(), data, traced))
    }

    pub fn recip(&self, a: &Tensor) -> Result<Tensor> {
        let traced = self.traced("recip", a)?;
        let data = a.data().iter().map(|&x| 1.0 / x).collect();
        Ok(self.push(Op::Recip { a: a.clone() }, a.shape().to_vec(), data, traced))
    }

    pub fn rsqrt(&self, a: &Tensor) -> Result<Tensor> {
        let traced = self.traced("rsqrt", a)?;
        let data = a.data().iter().map(|&x| 1.0 / libm::sqrt(x)).collect();
        Ok(self.push(Op::Rsqrt { a: a.clone() }, a.shape().to_vec(), data, traced))
    }

    // ----- linear algebra -----

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = as_matrix("matmul", a)?;
        let (k2, n) = as_matrix("matmul", b)?;
        if k != k2 {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let traced = self.traced("matmul", a)? | self.traced("matmul", b)?;
        let data = k_matmul(a.data(), b.data(), m, k, n);
        Ok(self.push(
            Op::Matmul {
                a: a.clone(),
                b: b.clone(),
            },
            alloc::vec![m, n],
            data,
            traced,
        ))
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = as_matrix("transpose", a)?;
        let traced = self.traced("transpose", a)?;
        let src = a.data();
        let mut data = alloc::vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Op::Transpose { a: a.clone() }, alloc::vec![c, r], data, traced))
    }

    // ----- convolution family (3x3, stride 1, zero 'same' padding) -----

    pub fn conv2d(&self, x: &Tensor, k: &Tensor) -> Result<Tensor> {
        let [b, c, h, w] = as_nchw("conv2d", x)?;
        let ks = k.shape();
        if ks.len() != 4 || ks[2] != 3 || ks[3] != 3 {
            return Err(CoreError::InvalidSpec(alloc::format!(
                "conv2d kernel must be [F, C, 3, 3], got {ks:?}"
            )));
        }
        if ks[1] != c {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d (channels)",
                lhs: x.shape().to_vec(),
                rhs: ks.to_vec(),
            });
        }
        let f = ks[0];
        let traced = self.traced("conv2d", x)? | self.traced("conv2d", k)?;
        let data = k_conv_fwd(x.data(), b, c, h, w, k.data(), f);
        Ok(self.push(
            Op::Conv {
                a: x.clone(),
                b: k.clone(),
                kind: ConvKind::Fwd,
            },
            alloc::vec![b, f, h, w],
            data,
            traced,
        ))
    }

    /// Adjoint of `conv2d` with respect to its input.
    fn conv_dx(&self, gy: &Tensor, k: &Tensor) -> Result<Tensor> {
        let [b, f, h, w] = as_nchw("conv_dx", gy)?;
        let c = k.shape()[1];
        debug_assert_eq!(k.shape()[0], f);
        let traced = self.traced("conv_dx", gy)? | self.traced("conv_dx", k)?;
        let data = k_conv_dx(gy.data(), b, f, h, w, k.data(), c);
        Ok(self.push(
            Op::Conv {
                a: gy.clone(),
                b: k.clone(),
                kind: ConvKind::Dx,
            },
            alloc::vec![b, c, h, w],
            data,
            traced,
        ))
    }

    /// Adjoint of `conv2d` with respect to its kernel.
    fn conv_dk(&self, x: &Tensor, gy: &Tensor) -> Result<Tensor> {
        let [b, c, h, w] = as_nchw("conv_dk", x)?;
        let f = gy.shape()[1];
        let traced = self.traced("conv_dk", x)? | self.traced("conv_dk", gy)?;
        let data = k_conv_dk(x.data(), b, c, h, w, gy.data(), f);
        Ok(self.push(
            Op::Conv {
                a: x.clone(),
                b: gy.clone(),
                kind: ConvKind::Dk,
            },
            alloc::vec![f, c, 3, 3],
            data,
            traced,
        ))
    }

    // ----- pooling -----

    /// 2x2 max-pooling with stride 2; odd extents behave as if padded
    /// with negative infinity. Gradient flows to the argmax, ties going
    /// to the first element in row-major order.
    pub fn maxpool2(&self, a: &Tensor) -> Result<Tensor> {
        let [b, c, h, w] = as_nchw("maxpool2", a)?;
        let traced = self.traced("maxpool2", a)?;
        let (data, idx) = k_maxpool(a.data(), b, c, h, w);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        Ok(self.push(
            Op::MaxPool {
                a: a.clone(),
                idx: idx.into(),
            },
            alloc::vec![b, c, oh, ow],
            data,
            traced,
        ))
    }

    /// Scatters pooled values back to the argmax positions of a tensor
    /// with shape `in_shape`.
    fn pool_scatter(&self, a: &Tensor, idx: &Arc<[usize]>, in_shape: &[usize]) -> Result<Tensor> {
        let traced = self.traced("pool_scatter", a)?;
        let numel: usize = in_shape.iter().product();
        let mut data = alloc::vec![0.0; numel];
        for (o, &i) in idx.iter().enumerate() {
            data[i] += a.data()[o];
        }
        Ok(self.push(
            Op::PoolScatter {
                a: a.clone(),
                idx: Arc::clone(idx),
            },
            in_shape.to_vec(),
            data,
            traced,
        ))
    }

    /// Gathers the values at the argmax positions; adjoint of
    /// `pool_scatter`.
    fn pool_gather(&self, a: &Tensor, idx: &Arc<[usize]>, pooled_shape: &[usize]) -> Result<Tensor> {
        let traced = self.traced("pool_gather", a)?;
        let data = idx.iter().map(|&i| a.data()[i]).collect();
        Ok(self.push(
            Op::PoolGather {
                a: a.clone(),
                idx: Arc::clone(idx),
            },
            pooled_shape.to_vec(),
            data,
            traced,
        ))
    }

    // ----- reductions and broadcasts -----

    /// Column sums: [B, N] -> [N].
    pub fn sum_axis0(&self, a: &Tensor) -> Result<Tensor> {
        let (b, n) = as_matrix("sum_axis0", a)?;
        let traced = self.traced("sum_axis0", a)?;
        let src = a.data();
        let mut data = alloc::vec![0.0; n];
        for i in 0..b {
            for j in 0..n {
                data[j] += src[i * n + j];
            }
        }
        Ok(self.push(Op::SumAxis0 { a: a.clone() }, alloc::vec![n], data, traced))
    }

    /// Row sums: [B, N] -> [B].
    pub fn sum_axis1(&self, a: &Tensor) -> Result<Tensor> {
        let (b, n) = as_matrix("sum_axis1", a)?;
        let traced = self.traced("sum_axis1", a)?;
        let src = a.data();
        let mut data = alloc::vec![0.0; b];
        for i in 0..b {
            let mut s = 0.0;
            for j in 0..n {
                s += src[i * n + j];
            }
            data[i] = s;
        }
        Ok(self.push(Op::SumAxis1 { a: a.clone() }, alloc::vec![b], data, traced))
    }

    /// Repeats a [N] vector across `rows` rows: -> [rows, N].
    pub fn bcast_axis0(&self, a: &Tensor, rows: usize) -> Result<Tensor> {
        let n = as_vector("bcast_axis0", a)?;
        let traced = self.traced("bcast_axis0", a)?;
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(a.data());
        }
        Ok(self.push(Op::BcastAxis0 { a: a.clone() }, alloc::vec![rows, n], data, traced))
    }

    /// Repeats a [B] vector across `cols` columns: -> [B, cols].
    pub fn bcast_axis1(&self, a: &Tensor, cols: usize) -> Result<Tensor> {
        let b = as_vector("bcast_axis1", a)?;
        let traced = self.traced("bcast_axis1", a)?;
        let mut data = Vec::with_capacity(b * cols);
        for &v in a.data() {
            for _ in 0..cols {
                data.push(v);
            }
        }
        Ok(self.push(Op::BcastAxis1 { a: a.clone() }, alloc::vec![b, cols], data, traced))
    }

    /// Per-channel sums: [B, C, H, W] -> [C].
    pub fn sum_chan(&self, a: &Tensor) -> Result<Tensor> {
        let [b, c, h, w] = as_nchw("sum_chan", a)?;
        let traced = self.traced("sum_chan", a)?;
        let src = a.data();
        let hw = h * w;
        let mut data = alloc::vec![0.0; c];
        for bi in 0..b {
            for (ci, slot) in data.iter_mut().enumerate() {
                let base = (bi * c + ci) * hw;
                let mut s = 0.0;
                for v in &src[base..base + hw] {
                    s += v;
                }
                *slot += s;
            }
        }
        Ok(self.push(Op::SumChan { a: a.clone() }, alloc::vec![c], data, traced))
    }

    /// Broadcasts a [C] vector over [B, C, H, W].
    pub fn bcast_chan(&self, a: &Tensor, b: usize, h: usize, w: usize) -> Result<Tensor> {
        let c = as_vector("bcast_chan", a)?;
        let traced = self.traced("bcast_chan", a)?;
        let hw = h * w;
        let mut data = Vec::with_capacity(b * c * hw);
        for _ in 0..b {
            for &v in a.data() {
                data.extend(core::iter::repeat_n(v, hw));
            }
        }
        Ok(self.push(Op::BcastChan { a: a.clone() }, alloc::vec![b, c, h, w], data, traced))
    }

    /// Full reduction to a rank-0 scalar.
    pub fn sum_all(&self, a: &Tensor) -> Result<Tensor> {
        let traced = self.traced("sum_all", a)?;
        let mut s = 0.0;
        for v in a.data() {
            s += v;
        }
        Ok(self.push(Op::SumAll { a: a.clone() }, Vec::new(), alloc::vec![s], traced))
    }

    /// Fills `shape` with a scalar value; adjoint of `sum_all`.
    pub fn bcast_fill(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if a.numel() != 1 {
            return Err(CoreError::NotScalar {
                shape: a.shape().to_vec(),
            });
        }
        let traced = self.traced("bcast_fill", a)?;
        let numel: usize = shape.iter().product();
        let data = alloc::vec![a.data()[0]; numel];
        Ok(self.push(Op::BcastFill { a: a.clone() }, shape.to_vec(), data, traced))
    }

    pub fn reshape(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                lhs: a.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let traced = self.traced("reshape", a)?;
        Ok(self.push(
            Op::Reshape { a: a.clone() },
            shape.to_vec(),
            a.data().to_vec(),
            traced,
        ))
    }

    // ----- composites -----

    /// Batch normalization from current-batch statistics (transductive:
    /// no running averages), differentiable through the statistics.
    pub fn batch_stat_norm(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        let [b, _c, h, w] = as_nchw("batch_stat_norm", x)?;
        let count = (b * h * w) as f64;
        let mean = self.scale(&self.sum_chan(x)?, 1.0 / count)?;
        let centered = self.sub(x, &self.bcast_chan(&mean, b, h, w)?)?;
        let var = self.scale(&self.sum_chan(&self.mul(&centered, &centered)?)?, 1.0 / count)?;
        let inv = self.rsqrt(&self.add_scalar(&var, eps)?)?;
        let scaled = self.mul(&centered, &self.bcast_chan(&self.mul(&inv, gamma)?, b, h, w)?)?;
        self.add(&scaled, &self.bcast_chan(beta, b, h, w)?)
    }

    /// Mean over the batch of the cross-entropy between softmax(logits)
    /// and one-hot labels, stabilized by row-max subtraction.
    pub fn softmax_xent(&self, logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
        let (b, n) = as_matrix("softmax_xent", logits)?;
        Self::same_shape("softmax_xent", logits, labels)?;
        check_one_hot(labels.data(), b, n)?;
        let rowmax = detached_rowmax(logits, b, n);
        let t = self.sub(logits, &self.bcast_axis1(&rowmax, n)?)?;
        let e = self.exp(&t)?;
        let s = self.sum_axis1(&e)?;
        let lse = self.add(&self.ln(&s)?, &rowmax)?;
        let true_logit = self.sum_axis1(&self.mul(logits, labels)?)?;
        let per_sample = self.sub(&lse, &true_logit)?;
        self.scale(&self.sum_all(&per_sample)?, 1.0 / b as f64)
    }

    /// Row-wise softmax probabilities.
    pub fn softmax(&self, logits: &Tensor) -> Result<Tensor> {
        let (b, n) = as_matrix("softmax", logits)?;
        let rowmax = detached_rowmax(logits, b, n);
        let t = self.sub(logits, &self.bcast_axis1(&rowmax, n)?)?;
        let e = self.exp(&t)?;
        let s = self.sum_axis1(&e)?;
        self.mul(&e, &self.bcast_axis1(&self.recip(&s)?, n)?)
    }

    // ----- backward -----

    /// Reverse-mode gradients of a scalar loss with respect to `params`.
    /// `None` entries mark parameters unreachable from the loss. With
    /// `create_graph` the backward computation is recorded on this same
    /// tape, making the returned gradients differentiable.
    pub fn grad_opt(
        &self,
        loss: &Tensor,
        params: &[&Tensor],
        create_graph: bool,
    ) -> Result<Vec<Option<Tensor>>> {
        if loss.numel() != 1 {
            return Err(CoreError::NotScalar {
                shape: loss.shape().to_vec(),
            });
        }
        let loss_node = match loss.node {
            Some(n) if n.graph == self.id => n,
            Some(_) => return Err(CoreError::ForeignGraph { op: "grad" }),
            None => {
                // Loss is a constant: nothing is reachable.
                return Ok(params.iter().map(|_| None).collect());
            }
        };
        for p in params {
            if let Some(n) = p.node {
                if n.graph != self.id {
                    return Err(CoreError::ForeignGraph { op: "grad" });
                }
            }
        }

        let limit = loss_node.idx + 1;
        let mut adjoints: Vec<Option<Tensor>> = alloc::vec![None; limit];
        adjoints[loss_node.idx] = Some(Tensor::filled(loss.shape(), 1.0));

        let guard = RecordGuard::set(self, create_graph);
        let mut walk = || -> Result<()> {
            for i in (0..limit).rev() {
                let Some(g) = adjoints[i].clone() else {
                    continue;
                };
                let op = self.inner.borrow().nodes[i].op.clone();
                match op {
                    Op::Leaf => {}
                    Op::Add { a, b } => {
                        self.accumulate(&mut adjoints, &a, g.clone())?;
                        self.accumulate(&mut adjoints, &b, g)?;
                    }
                    Op::Sub { a, b } => {
                        self.accumulate(&mut adjoints, &a, g.clone())?;
                        let neg = self.scale(&g, -1.0)?;
                        self.accumulate(&mut adjoints, &b, neg)?;
                    }
                    Op::Mul { a, b } => {
                        if a.node.is_some() {
                            let ga = self.mul(&g, &b)?;
                            self.accumulate(&mut adjoints, &a, ga)?;
                        }
                        if b.node.is_some() {
                            let gb = self.mul(&g, &a)?;
                            self.accumulate(&mut adjoints, &b, gb)?;
                        }
                    }
                    Op::Scale { a, c } => {
                        let ga = self.scale(&g, c)?;
                        self.accumulate(&mut adjoints, &a, ga)?;
                    }
                    Op::AddScalar { a } => {
                        self.accumulate(&mut adjoints, &a, g)?;
                    }
                    Op::Relu { a } => {
                        let mask: Arc<[f64]> = a
                            .data()
                            .iter()
                            .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
                            .collect();
                        let ga = self.mul_mask(&g, &mask)?;
                        self.accumulate(&mut adjoints, &a, ga)?;
                    }
                    Op::MulMask { a, mask } => {
                        let ga = self.mul_mask(&g, &mask)?;
                        self.accumulate(&mut adjoints, &a, ga)?;
                    }
                    Op::Exp { a } => {
                        let y = self.node_output(i);
                        let ga = self.mul(&g, &y)?;
                        self.accumulate(&mut adjoints, &a, ga)?;
                    }
                    Op::Ln { a } => {
                        let ga = self.mul(&g, &self.recip(&a)?)?;
                        self.accumulate(&mut adjoints, &a, ga)?;
                    }
                    Op::Recip { a } => {
                        let y = self.node_output(i);
                        let ga = self.scale(&self.mul(&g, &self.mul(&y, &y)?)?, -1.0)?;
                        self.accumulate(&mut adjoints, &a, ga)?;
                    }
                    Op::Rsqrt { a } => {
                        let y = self.node_output(i);
                        let y3 = self.mul(&self.mul(&y, &y)?, &y)?;
                        let ga = self.scale(&self.mul(&g, &y3)?, -0.5)?;
                        self.accumulate(&mut adjoints, &a, ga)?;
                    }
                    Op::Matmul { a, b } => {
                        if a.node.is_some() {
                            let ga = self.matmul(&g, &self.transpose(&b)?)?;
                            self.accumulate(&mut adjoints, &a, ga)?;
                        }
                        if b.node.is_some() {
                            let gb = self.matmul(&self.transpose(&a)?, &g)?;
                            self.accumulate(&mut adjoints, &b, gb)?;
                        }
                    }
                    Op::Transpose { a } => {
                        let ga = self.transpose(&g)?;
                        self.accumulate(&mut adjoints, &a, ga)?;
                    }
                    Op::Conv { a, b, kind } => match kind {
                        ConvKind::Fwd => {
                            if a.node.is_some() {
                                let ga = self.conv_dx(&g, &b)?;
                                self.accumulate(&mut adjoints, &a, ga)?;
                            }
                            if b.node.is_some() {
                                let gb = self.conv_dk(&a, &g)?;
                                self.accumulate(&mut adjoints, &b, gb)?;
                            }
                        }
                        ConvKind::Dx => {
                            if a.node.is_some() {
                                let ga = self.conv2d(&g, &b)?;
                                self.accumulate(&mut adjoints, &a, ga)?;
                            }
                            if b.node.is_some() {
                                let gb = self.conv_dk(&g, &a)?;
                                self.accumulate(&mut adjoints, &b, gb)?;
                            }
                        }
                        ConvKind::Dk => {
                            if a.node.is_some() {
                                let ga = self.conv_dx(&b, &g)?;
                                self.accumulate(&mut adjoints, &a, ga)?;
                            }
                            if b.node.is_some() {
                                let gb = self.conv2d(&a, &g)?;
                                self.accumulate(&mut adjoints, &b, gb)?;
                            }
                        }
                    },
                    Op::MaxPool { a, idx } => {
                        let ga = self.pool_scatter(&g, &idx, a.shape())?;
                        self.accumulate(&mut adjoints, &a, ga)?;
                    }
                    Op::PoolScatter { a, idx } => {
                        let ga = self.pool_gather(&g, &idx, a.shape())?;
                        self.accumulate(&mut adjoints, &a, ga)?;
                    }
                    Op::PoolGather { a, idx } => {
                        let ga = self.pool_scatter(&g, &idx, a.shape())?;
                        self.accumulate(&mut adjoints, &a, ga)?;
                    }
                    Op::SumAxis0 { a } => {
                        let rows = a.shape()[0];
                        let ga = self.bcast_axis0(&g, rows)?;
                        self.accumulate(&mut adjoints, &a, ga)?;
                    }
                    Op::SumAxis1 { a } => {
                        let cols = a.shape()[1];
                        let ga = self.bcast_axis1(&g, cols)?;
                        self.accumulate(&mut adjoints, &a, ga)?;
                    }
                    Op::BcastAxis0 { a } => {
                        let ga = self.sum_axis0(&g)?;
                        self.accumulate(&mut adjoints, &a, ga)?;
                    }
                    Op::BcastAxis1 { a } => {
                        let ga = self.sum_axis1(&g)?;
                        self.accumulate(&mut adjoints, &a, ga)?;
                    }
                    Op::SumChan { a } => {
                        let [b, _c, h, w] = as_nchw("sum_chan.grad", &a)?;
                        let ga = self.bcast_chan(&g, b, h, w)?;
                        self.accumulate(&mut adjoints, &a, ga)?;
                    }
                    Op::BcastChan { a } => {
                        let ga = self.sum_chan(&g)?;
                        self.accumulate(&mut adjoints, &a, ga)?;
                    }
                    Op::SumAll { a } => {
                        let ga = self.bcast_fill(&g, a.shape())?;
                        self.accumulate(&mut adjoints, &a, ga)?;
                    }
                    Op::BcastFill { a } => {
                        let ga = self.sum_all(&g)?;
                        self.accumulate(&mut adjoints, &a, ga)?;
                    }
                    Op::Reshape { a } => {
                        let ga = self.reshape(&g, a.shape())?;
                        self.accumulate(&mut adjoints, &a, ga)?;
                    }
                }
            }
            Ok(())
        };
        let res = walk();
        drop(guard);
        res?;

        Ok(params
            .iter()
            .map(|p| match p.node {
                Some(n) if n.idx < limit => adjoints[n.idx].clone(),
                _ => None,
            })
            .collect())
    }

    /// Like [`Graph::grad_opt`] but unreachable parameters are an error
    /// (named by position; callers with named parameters re-wrap).
    pub fn grad(&self, loss: &Tensor, params: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
        let opts = self.grad_opt(loss, params, create_graph)?;
        opts.into_iter()
            .enumerate()
            .map(|(i, o)| {
                o.ok_or_else(|| CoreError::UnreachableParam {
                    name: alloc::format!("#{i}"),
                })
            })
            .collect()
    }

    fn accumulate(
        &self,
        adjoints: &mut [Option<Tensor>],
        input: &Tensor,
        contrib: Tensor,
    ) -> Result<()> {
        let Some(n) = input.node else {
            return Ok(());
        };
        debug_assert_eq!(n.graph, self.id);
        if n.idx >= adjoints.len() {
            return Ok(());
        }
        let slot = &mut adjoints[n.idx];
        *slot = Some(match slot.take() {
            None => contrib,
            Some(prev) => self.add(&prev, &contrib)?,
        });
        Ok(())
    }
}

/// Restores the recording flag when a backward pass finishes.
struct RecordGuard<'g> {
    graph: &'g Graph,
    saved: bool,
}

impl<'g> RecordGuard<'g> {
    fn set(graph: &'g Graph, recording: bool) -> Self {
        let mut inner = graph.inner.borrow_mut();
        let saved = inner.recording;
        inner.recording = saved && recording;
        RecordGuard { graph, saved }
    }
}

impl Drop for RecordGuard<'_> {
    fn drop(&mut self) {
        self.graph.inner.borrow_mut().recording = self.saved;
    }
}

// ----- shape helpers -----

fn as_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(CoreError::ShapeMismatch {
            op,
            lhs: other.to_vec(),
            rhs: alloc::vec![0, 0],
        }),
    }
}

fn as_vector(op: &'static str, t: &Tensor) -> Result<usize> {
    match t.shape() {
        [n] => Ok(*n),
        other => Err(CoreError::ShapeMismatch {
            op,
            lhs: other.to_vec(),
            rhs: alloc::vec![0],
        }),
    }
}

fn as_nchw(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match t.shape() {
        [b, c, h, w] => Ok([*b, *c, *h, *w]),
        other => Err(CoreError::ShapeMismatch {
            op,
            lhs: other.to_vec(),
            rhs: alloc::vec![0, 0, 0, 0],
        }),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn detached_rowmax(logits: &Tensor, b: usize, n: usize) -> Tensor {
    let src = logits.data();
    let mut data = Vec::with_capacity(b);
    for i in 0..b {
        let mut m = f64::NEG_INFINITY;
        for j in 0..n {
            m = m.max(src[i * n + j]);
        }
        data.push(m);
    }
    Tensor::from_parts(alloc::vec![b], data.into(), None)
}

fn check_one_hot(labels: &[f64], b: usize, n: usize) -> Result<()> {
    for i in 0..b {
        let row = &labels[i * n..(i + 1) * n];
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != n - 1 {
            return Err(CoreError::NotOneHot { row: i });
        }
    }
    Ok(())
}

// ----- raw kernels -----

fn k_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = alloc::vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

/// Shift-and-accumulate 3x3 cross-correlation with zero padding:
/// `y[b,f,i,j] = sum_{c,u,v} x[b,c,i+u-1,j+v-1] * k[f,c,u,v]`.
fn k_conv_fwd(x: &[f64], b: usize, c: usize, h: usize, w: usize, k: &[f64], f: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = alloc::vec![0.0; b * f * hw];
    for bi in 0..b {
        for fi in 0..f {
            let obase = (bi * f + fi) * hw;
            for ci in 0..c {
                let ibase = (bi * c + ci) * hw;
                let kbase = (fi * c + ci) * 9;
                accumulate_shifted(&mut out[obase..obase + hw], &x[ibase..ibase + hw], &k[kbase..kbase + 9], h, w, false);
            }
        }
    }
    out
}

/// Adjoint with respect to the input:
/// `gx[b,c,p,q] = sum_{f,u,v} gy[b,f,p-u+1,q-v+1] * k[f,c,u,v]`.
fn k_conv_dx(gy: &[f64], b: usize, f: usize, h: usize, w: usize, k: &[f64], c: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = alloc::vec![0.0; b * c * hw];
    for bi in 0..b {
        for ci in 0..c {
            let obase = (bi * c + ci) * hw;
            for fi in 0..f {
                let ibase = (bi * f + fi) * hw;
                let kbase = (fi * c + ci) * 9;
                accumulate_shifted(&mut out[obase..obase + hw], &gy[ibase..ibase + hw], &k[kbase..kbase + 9], h, w, true);
            }
        }
    }
    out
}

/// Accumulates `out[i,j] += k[u,v] * src[i+du, j+dv]` over the 3x3
/// window, where the offsets are negated for the adjoint direction.
#[inline]
fn accumulate_shifted(out: &mut [f64], src: &[f64], k9: &[f64], h: usize, w: usize, adjoint: bool) {
    for u in 0..3usize {
        for v in 0..3usize {
            let kv = k9[u * 3 + v];
            let (mut du, mut dv) = (u as isize - 1, v as isize - 1);
            if adjoint {
                du = -du;
                dv = -dv;
            }
            let i_lo = (-du).max(0) as usize;
            let i_hi = ((h as isize - du).min(h as isize)).max(0) as usize;
            let j_lo = (-dv).max(0) as usize;
            let j_hi = ((w as isize - dv).min(w as isize)).max(0) as usize;
            for i in i_lo..i_hi {
                let srow = ((i as isize + du) as usize) * w;
                let orow = i * w;
                for j in j_lo..j_hi {
                    out[orow + j] += kv * src[srow + (j as isize + dv) as usize];
                }
            }
        }
    }
}

/// Adjoint with respect to the kernel:
/// `gk[f,c,u,v] = sum_{b,i,j} gy[b,f,i,j] * x[b,c,i+u-1,j+v-1]`.
fn k_conv_dk(x: &[f64], b: usize, c: usize, h: usize, w: usize, gy: &[f64], f: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = alloc::vec![0.0; f * c * 9];
    for bi in 0..b {
        for fi in 0..f {
            let gbase = (bi * f + fi) * hw;
            for ci in 0..c {
                let xbase = (bi * c + ci) * hw;
                let kbase = (fi * c + ci) * 9;
                for u in 0..3usize {
                    for v in 0..3usize {
                        let (du, dv) = (u as isize - 1, v as isize - 1);
                        let i_lo = (-du).max(0) as usize;
                        let i_hi = ((h as isize - du).min(h as isize)).max(0) as usize;
                        let j_lo = (-dv).max(0) as usize;
                        let j_hi = ((w as isize - dv).min(w as isize)).max(0) as usize;
                        let mut s = 0.0;
                        for i in i_lo..i_hi {
                            let grow = gbase + i * w;
                            let xrow = xbase + ((i as isize + du) as usize) * w;
                            for j in j_lo..j_hi {
                                s += gy[grow + j] * x[xrow + (j as isize + dv) as usize];
                            }
                        }
                        out[kbase + u * 3 + v] += s;
                    }
                }
            }
        }
    }
    out
}

fn k_maxpool(x: &[f64], b: usize, c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let hw = h * w;
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut idx = Vec::with_capacity(b * c * oh * ow);
    for bc in 0..b * c {
        let base = bc * hw;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = 0usize;
                for i in (oi * 2)..(oi * 2 + 2).min(h) {
                    for j in (oj * 2)..(oj * 2 + 2).min(w) {
                        let at = base + i * w + j;
                        if x[at] > best {
                            best = x[at];
                            best_at = at;
                        }
                    }
                }
                out.push(best);
                idx.push(best_at);
            }
        }
    }
    (out, idx)
}
