//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records one forward computation as a flat tape of nodes.
//! Insertion order is topological, so the backward pass is a single reverse
//! sweep. Parameters are registered with [`Graph::param`], which deduplicates
//! by buffer identity: a model can register the same tensor from several call
//! sites and gradients accumulate into one slot.
//!
//! The op set is exactly what the recommender stack needs: matrix products
//! (optionally batched, optionally right-transposed, with batch-1 broadcast
//! on either side), embedding gather, layer normalization, temperature
//! softmax / log-softmax, reductions, time-axis slicing, attention head
//! reshapes, a few elementwise functions, and clamp/min for clipped
//! surrogate objectives.
//!
//! Graphs are single-threaded; parallel callers build one graph per thread
//! over shared (immutable) parameter tensors.

use crate::real::Real;
use crate::tensor::{gemm, Tensor};
use rand::Rng as _;
use std::collections::HashMap;
use thiserror::Error;

/// Errors surfaced by the numeric substrate.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("softmax temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("NaN gradient for parameter {0}; step aborted")]
    NanGradient(String),
    #[error("loss is not finite ({0}); {1}")]
    DivergedLoss(f64, String),
}

/// Temperature softmax over a logit vector, computed with max-subtraction.
///
/// Rejects non-finite logits and non-positive temperatures; the output is
/// normalized to sum to 1.
pub fn softmax_temp<F: Real>(logits: &[F], tau: F) -> Result<Vec<F>, NumericsError> {
    if tau <= F::zero() || !tau.is_finite() {
        return Err(NumericsError::NonPositiveTemperature(tau.to_f64()));
    }
    if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
        return Err(NumericsError::NonFinite(format!(
            "logit at index {i}: {}",
            logits[i]
        )));
    }
    assert!(!logits.is_empty(), "softmax of empty logits");
    let max = logits.iter().copied().fold(logits[0], F::max);
    let mut out: Vec<F> = logits.iter().map(|&x| ((x - max) / tau).exp()).collect();
    let sum: F = out.iter().copied().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// x (..., N) + b (N,)
    AddBias(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Neg(Var),
    /// a (Ba,M,K) @ b (Bb,K,N), or b (Bb,N,K) when `trans_b`. 2-D operands
    /// are treated as batch 1; a batch-1 operand broadcasts against the
    /// other's batch.
    Matmul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    /// Row gather from a (V,H) table; `ids` index rows, output keeps the id
    /// layout with a trailing H axis.
    Embed {
        table: Var,
        ids: std::sync::Arc<Vec<usize>>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    SoftmaxLast {
        x: Var,
        tau: F,
    },
    LogSoftmaxLast {
        x: Var,
        tau: F,
    },
    /// out[r] = x[r, ids[r]] for a 2-D x.
    PickPerRow {
        x: Var,
        ids: std::sync::Arc<Vec<usize>>,
    },
    SumAll(Var),
    MeanAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    /// (B,T,H) -> (B, t1-t0, H)
    SliceTime {
        x: Var,
        t0: usize,
    },
    /// (B,T,H) -> (B, P, H), same positions for every batch row.
    GatherTime {
        x: Var,
        positions: std::sync::Arc<Vec<usize>>,
    },
    /// (B,T,nh*dh) -> (B*nh,T,dh)
    SplitHeads {
        x: Var,
        heads: usize,
    },
    /// (B*nh,T,dh) -> (B,T,nh*dh)
    MergeHeads {
        x: Var,
        heads: usize,
    },
    /// (G,R,C) -> (times*G,R,C) with out[t*G+g] = in[g].
    RepeatBatch {
        x: Var,
        times: usize,
    },
    Reshape(Var),
    Tanh(Var),
    Silu(Var),
    Exp(Var),
    Log(Var),
    Sqr(Var),
    Clamp {
        x: Var,
        lo: F,
        hi: F,
    },
    /// Elementwise min; ties route the gradient to the first operand.
    MinElem(Var, Var),
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<F: Real> {
    slots: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Grads<F> {
    /// Gradient of the loss w.r.t. `var`, if any path required it.
    pub fn of(&self, var: Var) -> Option<&Tensor<F>> {
        self.slots[var.0].as_ref()
    }
}

/// One recorded forward computation.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    params: HashMap<usize, Var>,
    grad_enabled: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// Graph that records values only; backward is disabled and every node
    /// is treated as constant. Used for generation and evaluation.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> F {
        let t = self.value(v);
        assert_eq!(t.numel(), 1, "scalar_value on non-scalar");
        t.data()[0]
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a parameter tensor as a leaf, deduplicating by buffer
    /// identity so repeated registrations share one gradient slot.
    pub fn param(&mut self, t: &Tensor<F>) -> Var {
        if let Some(&v) = self.params.get(&t.buffer_id()) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf, t.requires_grad());
        self.params.insert(t.buffer_id(), v);
        v
    }

    /// Constant input node.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// The leaf var a parameter tensor was registered under, if any.
    pub fn find_param(&self, t: &Tensor<F>) -> Option<Var> {
        self.params.get(&t.buffer_id()).copied()
    }

    /// Constant copy of an existing node's value (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let value = Tensor::from_vec(
            ta.shape(),
            ta.data()
                .iter()
                .zip(tb.data().iter())
                .map(|(&x, &y)| x * y)
                .collect(),
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = *tx.shape().last().expect("add_bias on scalar");
        assert_eq!(tb.shape(), &[n], "bias must be (last_dim,)");
        let mut data = tx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tb.data()[i % n];
        }
        let value = Tensor::from_vec(tx.shape(), data);
        let rg = self.rg(x) || self.rg(b);
        self.push(value, Op::AddBias(x, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let value = self.value(x).scale(c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(value, Op::AddScalar(x), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| -v);
        let rg = self.rg(x);
        self.push(value, Op::Neg(x), rg)
    }

    /// Matrix product; see [`Op::Matmul`] for accepted shapes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` (transpose applied to the last two axes of `b`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (value, _) = {
            let ta = self.value(a);
            let tb = self.value(b);
            (matmul_forward(ta, tb, trans_b), ())
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Matmul { a, b, trans_b }, rg)
    }

    /// Gathers rows `ids` from a `(V,H)` table into shape `id_shape + [H]`.
    pub fn embed(&mut self, table: Var, ids: &[usize], id_shape: &[usize]) -> Var {
        assert_eq!(id_shape.iter().product::<usize>(), ids.len());
        let tt = self.value(table);
        assert_eq!(tt.rank(), 2, "embedding table must be 2-D");
        let (v, h) = (tt.shape()[0], tt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            assert!(id < v, "embedding id {id} out of range {v}");
            data.extend_from_slice(&tt.data()[id * h..(id + 1) * h]);
        }
        let mut shape = id_shape.to_vec();
        shape.push(h);
        let value = Tensor::from_vec(&shape, data);
        let rg = self.rg(table);
        self.push(
            value,
            Op::Embed {
                table,
                ids: std::sync::Arc::new(ids.to_vec()),
            },
            rg,
        )
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Var {
        let (value, mean, rstd) = {
            let tx = self.value(x);
            let tg = self.value(gain);
            let tb = self.value(bias);
            let h = *tx.shape().last().expect("layer_norm on scalar");
            assert_eq!(tg.shape(), &[h]);
            assert_eq!(tb.shape(), &[h]);
            let rows = tx.numel() / h;
            let mut out = vec![F::zero(); tx.numel()];
            let mut means = vec![F::zero(); rows];
            let mut rstds = vec![F::zero(); rows];
            let hf = F::from_f64(h as f64);
            for r in 0..rows {
                let row = &tx.data()[r * h..(r + 1) * h];
                let mean: F = row.iter().copied().sum::<F>() / hf;
                let var: F = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / hf;
                let rstd = F::one() / (var + eps).sqrt();
                means[r] = mean;
                rstds[r] = rstd;
                for i in 0..h {
                    out[r * h + i] = (row[i] - mean) * rstd * tg.data()[i] + tb.data()[i];
                }
            }
            (Tensor::from_vec(tx.shape(), out), means, rstds)
        };
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            rg,
        )
    }

    /// Temperature softmax over the last axis, max-subtracted.
    pub fn softmax_last(&mut self, x: Var, tau: F) -> Var {
        assert!(tau > F::zero(), "softmax temperature must be positive");
        let value = {
            let tx = self.value(x);
            let h = *tx.shape().last().expect("softmax on scalar");
            let mut out = vec![F::zero(); tx.numel()];
            for r in 0..tx.numel() / h {
                let row = &tx.data()[r * h..(r + 1) * h];
                let max = row.iter().copied().fold(row[0], F::max);
                let mut sum = F::zero();
                for i in 0..h {
                    let e = ((row[i] - max) / tau).exp();
                    out[r * h + i] = e;
                    sum += e;
                }
                for i in 0..h {
                    out[r * h + i] /= sum;
                }
            }
            Tensor::from_vec(tx.shape(), out)
        };
        let rg = self.rg(x);
        self.push(value, Op::SoftmaxLast { x, tau }, rg)
    }

    /// Temperature log-softmax over the last axis.
    pub fn log_softmax_last(&mut self, x: Var, tau: F) -> Var {
        assert!(tau > F::zero(), "softmax temperature must be positive");
        let value = {
            let tx = self.value(x);
            let h = *tx.shape().last().expect("log_softmax on scalar");
            let mut out = vec![F::zero(); tx.numel()];
            for r in 0..tx.numel() / h {
                let row = &tx.data()[r * h..(r + 1) * h];
                let max = row.iter().copied().fold(row[0], F::max);
                let mut sum = F::zero();
                for &v in row {
                    sum += ((v - max) / tau).exp();
                }
                let lse = sum.ln();
                for i in 0..h {
                    out[r * h + i] = (row[i] - max) / tau - lse;
                }
            }
            Tensor::from_vec(tx.shape(), out)
        };
        let rg = self.rg(x);
        self.push(value, Op::LogSoftmaxLast { x, tau }, rg)
    }

    /// Per-row column pick on a 2-D input: `out[r] = x[r, ids[r]]`.
    pub fn pick_per_row(&mut self, x: Var, ids: &[usize]) -> Var {
        let value = {
            let tx = self.value(x);
            assert_eq!(tx.rank(), 2, "pick_per_row needs 2-D input");
            let (rows, cols) = (tx.shape()[0], tx.shape()[1]);
            assert_eq!(ids.len(), rows);
            let mut out = Vec::with_capacity(rows);
            for (r, &id) in ids.iter().enumerate() {
                assert!(id < cols);
                out.push(tx.data()[r * cols + id]);
            }
            Tensor::from_vec(&[rows], out)
        };
        let rg = self.rg(x);
        self.push(
            value,
            Op::PickPerRow {
                x,
                ids: std::sync::Arc::new(ids.to_vec()),
            },
            rg,
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / F::from_f64(t.numel() as f64));
        let rg = self.rg(x);
        self.push(value, Op::MeanAll(x), rg)
    }

    /// Sum over one axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let value = {
            let tx = self.value(x);
            assert!(axis < tx.rank());
            let (outer, len, inner) = axis_split(tx.shape(), axis);
            let mut out = vec![F::zero(); outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += tx.data()[base + i];
                    }
                }
            }
            let mut shape = tx.shape().to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor::from_vec(&shape, out)
        };
        let rg = self.rg(x);
        self.push(value, Op::SumAxis { x, axis }, rg)
    }

    /// Time-axis slice of a (B,T,H) tensor.
    pub fn slice_time(&mut self, x: Var, t0: usize, t1: usize) -> Var {
        let value = {
            let tx = self.value(x);
            assert_eq!(tx.rank(), 3, "slice_time needs (B,T,H)");
            let (b, t, h) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
            assert!(t0 <= t1 && t1 <= t);
            let mut out = Vec::with_capacity(b * (t1 - t0) * h);
            for bi in 0..b {
                let start = (bi * t + t0) * h;
                out.extend_from_slice(&tx.data()[start..start + (t1 - t0) * h]);
            }
            Tensor::from_vec(&[b, t1 - t0, h], out)
        };
        let rg = self.rg(x);
        self.push(value, Op::SliceTime { x, t0 }, rg)
    }

    /// Gathers time positions (same for every batch row) from (B,T,H).
    pub fn gather_time(&mut self, x: Var, positions: &[usize]) -> Var {
        let value = {
            let tx = self.value(x);
            assert_eq!(tx.rank(), 3, "gather_time needs (B,T,H)");
            let (b, t, h) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
            let mut out = Vec::with_capacity(b * positions.len() * h);
            for bi in 0..b {
                for &p in positions {
                    assert!(p < t);
                    let start = (bi * t + p) * h;
                    out.extend_from_slice(&tx.data()[start..start + h]);
                }
            }
            Tensor::from_vec(&[b, positions.len(), h], out)
        };
        let rg = self.rg(x);
        self.push(
            value,
            Op::GatherTime {
                x,
                positions: std::sync::Arc::new(positions.to_vec()),
            },
            rg,
        )
    }

    /// (B,T,nh*dh) -> (B*nh,T,dh) for multi-head attention.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let value = {
            let tx = self.value(x);
            assert_eq!(tx.rank(), 3);
            let (b, t, hd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
            assert_eq!(hd % heads, 0);
            let dh = hd / heads;
            let mut out = vec![F::zero(); tx.numel()];
            for bi in 0..b {
                for ti in 0..t {
                    for hi in 0..heads {
                        let src = (bi * t + ti) * hd + hi * dh;
                        let dst = ((bi * heads + hi) * t + ti) * dh;
                        out[dst..dst + dh].copy_from_slice(&tx.data()[src..src + dh]);
                    }
                }
            }
            Tensor::from_vec(&[b * heads, t, dh], out)
        };
        let rg = self.rg(x);
        self.push(value, Op::SplitHeads { x, heads }, rg)
    }

    /// (B*nh,T,dh) -> (B,T,nh*dh), inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Var {
        let value = {
            let tx = self.value(x);
            assert_eq!(tx.rank(), 3);
            let (bh, t, dh) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
            assert_eq!(bh % heads, 0);
            let b = bh / heads;
            let mut out = vec![F::zero(); tx.numel()];
            for bi in 0..b {
                for ti in 0..t {
                    for hi in 0..heads {
                        let src = ((bi * heads + hi) * t + ti) * dh;
                        let dst = (bi * t + ti) * (heads * dh) + hi * dh;
                        out[dst..dst + dh].copy_from_slice(&tx.data()[src..src + dh]);
                    }
                }
            }
            Tensor::from_vec(&[b, t, heads * dh], out)
        };
        let rg = self.rg(x);
        self.push(value, Op::MergeHeads { x, heads }, rg)
    }

    /// Tiles the batch axis: (G,R,C) -> (times*G,R,C). Lets per-user
    /// cross-attention keys/values be projected once and shared across a
    /// candidate batch.
    pub fn repeat_batch(&mut self, x: Var, times: usize) -> Var {
        if times == 1 {
            return x;
        }
        let value = {
            let tx = self.value(x);
            assert_eq!(tx.rank(), 3, "repeat_batch needs (G,R,C)");
            let chunk = tx.numel();
            let mut out = Vec::with_capacity(chunk * times);
            for _ in 0..times {
                out.extend_from_slice(tx.data());
            }
            let mut shape = tx.shape().to_vec();
            shape[0] *= times;
            Tensor::from_vec(&shape, out)
        };
        let rg = self.rg(x);
        self.push(value, Op::RepeatBatch { x, times }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).reshaped(shape);
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    /// SiLU (x * sigmoid(x)) smooth nonlinearity.
    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(value, Op::Silu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        let rg = self.rg(x);
        self.push(value, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.ln());
        let rg = self.rg(x);
        self.push(value, Op::Log(x), rg)
    }

    pub fn sqr(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(value, Op::Sqr(x), rg)
    }

    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        let rg = self.rg(x);
        self.push(value, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn min_elem(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "min_elem shape mismatch");
        let value = Tensor::from_vec(
            ta.shape(),
            ta.data()
                .iter()
                .zip(tb.data().iter())
                .map(|(&x, &y)| if x <= y { x } else { y })
                .collect(),
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MinElem(a, b), rg)
    }

    /// Inverted-scale dropout; identity when `p == 0` or in inference graphs.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut crate::rng::Rng) -> Var {
        if p <= 0.0 || !self.grad_enabled {
            return x;
        }
        let keep = F::from_f64(1.0 / (1.0 - p));
        let mask = {
            let tx = self.value(x);
            let data = (0..tx.numel())
                .map(|_| {
                    if rng.gen::<f64>() < p {
                        F::zero()
                    } else {
                        keep
                    }
                })
                .collect();
            Tensor::from_vec(tx.shape(), data)
        };
        let m = self.input(mask);
        self.mul(x, m)
    }

    /// Reverse sweep from a scalar loss node. Returns one gradient slot per
    /// node; parameter slots are read back via [`Grads::of`] on the `Var`
    /// returned by [`Graph::param`].
    pub fn backward(&self, loss: Var) -> Grads<F> {
        assert!(self.grad_enabled, "backward on an inference graph");
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward target must be scalar"
        );
        let mut slots: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        slots[loss.0] = Some(Tensor::scalar(F::one()));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = slots[id].take() else { continue };
            self.propagate(id, &g, &mut slots);
            slots[id] = Some(g);
        }
        Grads { slots }
    }

    fn accumulate(&self, slots: &mut [Option<Tensor<F>>], target: Var, delta: Tensor<F>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        debug_assert_eq!(
            self.nodes[target.0].value.shape(),
            delta.shape(),
            "gradient shape mismatch"
        );
        match &mut slots[target.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, id: usize, g: &Tensor<F>, slots: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(slots, *a, g.clone());
                self.accumulate(slots, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(slots, *a, g.clone());
                self.accumulate(slots, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let da = Tensor::from_vec(
                        g.shape(),
                        g.data()
                            .iter()
                            .zip(tb.data())
                            .map(|(&gv, &bv)| gv * bv)
                            .collect(),
                    );
                    self.accumulate(slots, *a, da);
                }
                if self.rg(*b) {
                    let db = Tensor::from_vec(
                        g.shape(),
                        g.data()
                            .iter()
                            .zip(ta.data())
                            .map(|(&gv, &av)| gv * av)
                            .collect(),
                    );
                    self.accumulate(slots, *b, db);
                }
            }
            Op::AddBias(x, b) => {
                if self.rg(*x) {
                    self.accumulate(slots, *x, g.clone());
                }
                if self.rg(*b) {
                    let n = *self.value(*b).shape().last().unwrap();
                    let mut db = vec![F::zero(); n];
                    for (i, &gv) in g.data().iter().enumerate() {
                        db[i % n] += gv;
                    }
                    self.accumulate(slots, *b, Tensor::from_vec(&[n], db));
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(slots, *x, g.scale(*c));
            }
            Op::AddScalar(x) => {
                self.accumulate(slots, *x, g.clone());
            }
            Op::Neg(x) => {
                self.accumulate(slots, *x, g.map(|v| -v));
            }
            Op::Matmul { a, b, trans_b } => {
                self.matmul_backward(*a, *b, *trans_b, g, slots);
            }
            Op::Embed { table, ids } => {
                if self.rg(*table) {
                    let tt = self.value(*table);
                    let (v, h) = (tt.shape()[0], tt.shape()[1]);
                    let mut dt = vec![F::zero(); v * h];
                    for (r, &id) in ids.iter().enumerate() {
                        let grow = &g.data()[r * h..(r + 1) * h];
                        let drow = &mut dt[id * h..(id + 1) * h];
                        for i in 0..h {
                            drow[i] += grow[i];
                        }
                    }
                    self.accumulate(slots, *table, Tensor::from_vec(&[v, h], dt));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let tx = self.value(*x);
                let tg = self.value(*gain);
                let h = *tx.shape().last().unwrap();
                let rows = tx.numel() / h;
                let hf = F::from_f64(h as f64);
                let mut dx = vec![F::zero(); tx.numel()];
                let mut dgain = vec![F::zero(); h];
                let mut dbias = vec![F::zero(); h];
                for r in 0..rows {
                    let xrow = &tx.data()[r * h..(r + 1) * h];
                    let grow = &g.data()[r * h..(r + 1) * h];
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for i in 0..h {
                        let xhat = (xrow[i] - mu) * rs;
                        let gy = grow[i] * tg.data()[i];
                        m1 += gy;
                        m2 += gy * xhat;
                        dgain[i] += grow[i] * xhat;
                        dbias[i] += grow[i];
                    }
                    m1 /= hf;
                    m2 /= hf;
                    for i in 0..h {
                        let xhat = (xrow[i] - mu) * rs;
                        let gy = grow[i] * tg.data()[i];
                        dx[r * h + i] = rs * (gy - m1 - xhat * m2);
                    }
                }
                if self.rg(*x) {
                    self.accumulate(slots, *x, Tensor::from_vec(tx.shape(), dx));
                }
                if self.rg(*gain) {
                    self.accumulate(slots, *gain, Tensor::from_vec(&[h], dgain));
                }
                if self.rg(*bias) {
                    self.accumulate(slots, *bias, Tensor::from_vec(&[h], dbias));
                }
            }
            Op::SoftmaxLast { x, tau } => {
                let y = &node.value;
                let h = *y.shape().last().unwrap();
                let mut dx = vec![F::zero(); y.numel()];
                for r in 0..y.numel() / h {
                    let yrow = &y.data()[r * h..(r + 1) * h];
                    let grow = &g.data()[r * h..(r + 1) * h];
                    let dot: F = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                    for i in 0..h {
                        dx[r * h + i] = yrow[i] * (grow[i] - dot) / *tau;
                    }
                }
                self.accumulate(slots, *x, Tensor::from_vec(y.shape(), dx));
            }
            Op::LogSoftmaxLast { x, tau } => {
                let y = &node.value;
                let h = *y.shape().last().unwrap();
                let mut dx = vec![F::zero(); y.numel()];
                for r in 0..y.numel() / h {
                    let yrow = &y.data()[r * h..(r + 1) * h];
                    let grow = &g.data()[r * h..(r + 1) * h];
                    let gsum: F = grow.iter().copied().sum();
                    for i in 0..h {
                        dx[r * h + i] = (grow[i] - yrow[i].exp() * gsum) / *tau;
                    }
                }
                self.accumulate(slots, *x, Tensor::from_vec(y.shape(), dx));
            }
            Op::PickPerRow { x, ids } => {
                let tx = self.value(*x);
                let (rows, cols) = (tx.shape()[0], tx.shape()[1]);
                let mut dx = vec![F::zero(); rows * cols];
                for (r, &id) in ids.iter().enumerate() {
                    dx[r * cols + id] += g.data()[r];
                }
                self.accumulate(slots, *x, Tensor::from_vec(tx.shape(), dx));
            }
            Op::SumAll(x) => {
                let tx = self.value(*x);
                let gv = g.data()[0];
                self.accumulate(slots, *x, Tensor::full(tx.shape(), gv));
            }
            Op::MeanAll(x) => {
                let tx = self.value(*x);
                let gv = g.data()[0] / F::from_f64(tx.numel() as f64);
                self.accumulate(slots, *x, Tensor::full(tx.shape(), gv));
            }
            Op::SumAxis { x, axis } => {
                let tx = self.value(*x);
                let (outer, len, inner) = axis_split(tx.shape(), *axis);
                let mut dx = vec![F::zero(); tx.numel()];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            dx[base + i] = g.data()[o * inner + i];
                        }
                    }
                }
                self.accumulate(slots, *x, Tensor::from_vec(tx.shape(), dx));
            }
            Op::SliceTime { x, t0 } => {
                let tx = self.value(*x);
                let (b, t, h) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let tlen = g.shape()[1];
                let mut dx = vec![F::zero(); tx.numel()];
                for bi in 0..b {
                    let dst = (bi * t + t0) * h;
                    let src = bi * tlen * h;
                    dx[dst..dst + tlen * h].copy_from_slice(&g.data()[src..src + tlen * h]);
                }
                self.accumulate(slots, *x, Tensor::from_vec(tx.shape(), dx));
            }
            Op::GatherTime { x, positions } => {
                let tx = self.value(*x);
                let (b, t, h) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let mut dx = vec![F::zero(); tx.numel()];
                for bi in 0..b {
                    for (pi, &p) in positions.iter().enumerate() {
                        let dst = (bi * t + p) * h;
                        let src = (bi * positions.len() + pi) * h;
                        for i in 0..h {
                            dx[dst + i] += g.data()[src + i];
                        }
                    }
                }
                self.accumulate(slots, *x, Tensor::from_vec(tx.shape(), dx));
            }
            Op::SplitHeads { x, heads } => {
                let tx = self.value(*x);
                let (b, t, hd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let dh = hd / heads;
                let mut dx = vec![F::zero(); tx.numel()];
                for bi in 0..b {
                    for ti in 0..t {
                        for hi in 0..*heads {
                            let dst = (bi * t + ti) * hd + hi * dh;
                            let src = ((bi * heads + hi) * t + ti) * dh;
                            dx[dst..dst + dh].copy_from_slice(&g.data()[src..src + dh]);
                        }
                    }
                }
                self.accumulate(slots, *x, Tensor::from_vec(tx.shape(), dx));
            }
            Op::MergeHeads { x, heads } => {
                let tx = self.value(*x);
                let (bh, t, dh) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let b = bh / heads;
                let mut dx = vec![F::zero(); tx.numel()];
                for bi in 0..b {
                    for ti in 0..t {
                        for hi in 0..*heads {
                            let dst = ((bi * heads + hi) * t + ti) * dh;
                            let src = (bi * t + ti) * (heads * dh) + hi * dh;
                            dx[dst..dst + dh].copy_from_slice(&g.data()[src..src + dh]);
                        }
                    }
                }
                self.accumulate(slots, *x, Tensor::from_vec(tx.shape(), dx));
            }
            Op::RepeatBatch { x, times } => {
                let tx = self.value(*x);
                let chunk = tx.numel();
                let mut dx = vec![F::zero(); chunk];
                for t in 0..*times {
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += g.data()[t * chunk + i];
                    }
                }
                self.accumulate(slots, *x, Tensor::from_vec(tx.shape(), dx));
            }
            Op::Reshape(x) => {
                let tx = self.value(*x);
                self.accumulate(slots, *x, g.reshaped(tx.shape()));
            }
            Op::Tanh(x) => {
                let y = &node.value;
                let dx = Tensor::from_vec(
                    y.shape(),
                    y.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&yv, &gv)| gv * (F::one() - yv * yv))
                        .collect(),
                );
                self.accumulate(slots, *x, dx);
            }
            Op::Silu(x) => {
                let tx = self.value(*x);
                let dx = Tensor::from_vec(
                    tx.shape(),
                    tx.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| {
                            let s = sigmoid(xv);
                            gv * s * (F::one() + xv * (F::one() - s))
                        })
                        .collect(),
                );
                self.accumulate(slots, *x, dx);
            }
            Op::Exp(x) => {
                let y = &node.value;
                let dx = Tensor::from_vec(
                    y.shape(),
                    y.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&yv, &gv)| gv * yv)
                        .collect(),
                );
                self.accumulate(slots, *x, dx);
            }
            Op::Log(x) => {
                let tx = self.value(*x);
                let dx = Tensor::from_vec(
                    tx.shape(),
                    tx.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| gv / xv)
                        .collect(),
                );
                self.accumulate(slots, *x, dx);
            }
            Op::Sqr(x) => {
                let tx = self.value(*x);
                let two = F::from_f64(2.0);
                let dx = Tensor::from_vec(
                    tx.shape(),
                    tx.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| gv * two * xv)
                        .collect(),
                );
                self.accumulate(slots, *x, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let tx = self.value(*x);
                let dx = Tensor::from_vec(
                    tx.shape(),
                    tx.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| {
                            if xv >= *lo && xv <= *hi {
                                gv
                            } else {
                                F::zero()
                            }
                        })
                        .collect(),
                );
                self.accumulate(slots, *x, dx);
            }
            Op::MinElem(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let da = Tensor::from_vec(
                        g.shape(),
                        ta.data()
                            .iter()
                            .zip(tb.data())
                            .zip(g.data())
                            .map(|((&av, &bv), &gv)| if av <= bv { gv } else { F::zero() })
                            .collect(),
                    );
                    self.accumulate(slots, *a, da);
                }
                if self.rg(*b) {
                    let db = Tensor::from_vec(
                        g.shape(),
                        ta.data()
                            .iter()
                            .zip(tb.data())
                            .zip(g.data())
                            .map(|((&av, &bv), &gv)| if av <= bv { F::zero() } else { gv })
                            .collect(),
                    );
                    self.accumulate(slots, *b, db);
                }
            }
        }
    }

    fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        trans_b: bool,
        g: &Tensor<F>,
        slots: &mut [Option<Tensor<F>>],
    ) {
        let ta = self.value(a);
        let tb = self.value(b);
        let (ba, m, k) = as_batched(ta.shape());
        let (bb, bk, bn) = as_batched(tb.shape());
        let (kb, n) = if trans_b { (bn, bk) } else { (bk, bn) };
        assert_eq!(k, kb);
        let batch = ba.max(bb);

        if self.rg(a) {
            // dA_i = dC_i @ op(B_i)^T
            let mut da = vec![F::zero(); ta.numel()];
            for i in 0..batch {
                let gi = &g.data()[i * m * n..(i + 1) * m * n];
                let bidx = if bb == 1 { 0 } else { i };
                let bi = &tb.data()[bidx * k * n..(bidx + 1) * k * n];
                let ai = if ba == 1 { 0 } else { i };
                let dst = &mut da[ai * m * k..(ai + 1) * m * k];
                let beta = if ba == 1 && i > 0 { F::one() } else { F::zero() };
                if trans_b {
                    // b stored (n,k): dA = dC @ B  -> (m,n)@(n,k)
                    gemm(m, n, k, gi, false, bi, false, beta, dst);
                } else {
                    // dA = dC @ B^T -> (m,n)@(n,k) with B (k,n) transposed
                    gemm(m, n, k, gi, false, bi, true, beta, dst);
                }
            }
            self.accumulate(slots, a, Tensor::from_vec(ta.shape(), da));
        }
        if self.rg(b) {
            let mut db = vec![F::zero(); tb.numel()];
            for i in 0..batch {
                let gi = &g.data()[i * m * n..(i + 1) * m * n];
                let aidx = if ba == 1 { 0 } else { i };
                let ai = &ta.data()[aidx * m * k..(aidx + 1) * m * k];
                let bidx = if bb == 1 { 0 } else { i };
                let dst = &mut db[bidx * k * n..(bidx + 1) * k * n];
                let beta = if bb == 1 && i > 0 { F::one() } else { F::zero() };
                if trans_b {
                    // b stored (n,k): dB = dC^T @ A -> (n,m)@(m,k)
                    gemm(n, m, k, gi, true, ai, false, beta, dst);
                } else {
                    // dB = A^T @ dC -> (k,m)@(m,n)
                    gemm(k, m, n, ai, true, gi, false, beta, dst);
                }
            }
            self.accumulate(slots, b, Tensor::from_vec(tb.shape(), db));
        }
    }
}

fn matmul_forward<F: Real>(a: &Tensor<F>, b: &Tensor<F>, trans_b: bool) -> Tensor<F> {
    let (ba, m, k) = as_batched(a.shape());
    let (bb, bk, bn) = as_batched(b.shape());
    let (kb, n) = if trans_b { (bn, bk) } else { (bk, bn) };
    assert_eq!(
        k, kb,
        "matmul inner dims {:?} x {:?} (trans_b={})",
        a.shape(),
        b.shape(),
        trans_b
    );
    assert!(
        ba == bb || ba == 1 || bb == 1,
        "matmul batch mismatch {:?} x {:?}",
        a.shape(),
        b.shape()
    );
    let batch = ba.max(bb);
    let mut out = vec![F::zero(); batch * m * n];
    for i in 0..batch {
        let ai = if ba == 1 { 0 } else { i };
        let bi = if bb == 1 { 0 } else { i };
        let asl = &a.data()[ai * m * k..(ai + 1) * m * k];
        let bsl = &b.data()[bi * k * n..(bi + 1) * k * n];
        let dst = &mut out[i * m * n..(i + 1) * m * n];
        gemm(m, k, n, asl, false, bsl, trans_b, F::zero(), dst);
    }
    if a.rank() == 2 && b.rank() == 2 {
        Tensor::from_vec(&[m, n], out)
    } else {
        Tensor::from_vec(&[batch, m, n], out)
    }
}

/// Views a 1/2/3-D shape as (batch, rows, cols); 2-D gets batch 1.
fn as_batched(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        2 => (1, shape[0], shape[1]),
        3 => (shape[0], shape[1], shape[2]),
        _ => panic!("matmul operand must be 2-D or 3-D, got {shape:?}"),
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
