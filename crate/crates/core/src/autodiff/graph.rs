//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and the data its
//! backward rule needs. Node ids are assigned in creation order, so walking
//! them from the loss downwards is a valid reverse topological order and each
//! node is visited exactly once.

use std::collections::HashMap;

use super::gemm::gemm;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Floor applied to `q` inside `log q` by [`Graph::kl_divergence`].
pub const KL_FLOOR: f64 = 1e-9;

/// Variance floor used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Head layout for [`Graph::attention`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionDims {
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub d_head: usize,
}

enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow {
        x: NodeId,
        bias: NodeId,
    },
    ScaleRows {
        x: NodeId,
        s: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    MulConst {
        x: NodeId,
        c: Vec<f64>,
    },
    Relu(NodeId),
    Softmax {
        x: NodeId,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    ScatterRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    GatherElems {
        x: NodeId,
        idx: Vec<usize>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        dims: AttentionDims,
        probs: Vec<f64>,
        drop: Option<Vec<f64>>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
        smoothing: f64,
        probs: Vec<f64>,
    },
    KlDiv {
        p: NodeId,
        q: NodeId,
        weights: Vec<f64>,
    },
    Sum(NodeId),
    Mean(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
    param: Option<ParamId>,
}

/// A tape of tensor operations built during one forward evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    flops: u64,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floating-point operations performed by dense products so far (2·m·k·n each).
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(
            value.data().iter().all(|v| !v.is_nan()),
            "NaN produced by graph op"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a stored parameter as a leaf. Repeated calls return the same node,
    /// so every use within the graph accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.leaf(store.get(id).value.clone());
        self.nodes[n.0].param = Some(id);
        self.param_nodes.insert(id, n);
        n
    }

    /// Moves gradients of bound parameters into `store`, adding to what is there.
    pub fn flush_param_grads(&mut self, store: &mut ParamStore) {
        let mut bound: Vec<_> = self.param_nodes.iter().map(|(&p, &n)| (p, n)).collect();
        bound.sort();
        for (pid, nid) in bound {
            if let Some(g) = self.nodes[nid.0].grad.take() {
                store.accumulate_grad(pid, g.data());
            }
        }
    }

    // ---- dense algebra -------------------------------------------------

    /// `a · b` (or `a · bᵀ` when `trans_b`) for 2-D operands.
    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let op = if trans_b { "matmul_t" } else { "matmul" };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::Shape {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), trans_b, &mut out, 0.0);
        self.flops += 2 * (m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a bias vector (length = last axis) to every row.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let cols = self.value(x).cols();
        if self.value(bias).numel() != cols {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow { x, bias }, rg))
    }

    /// Multiplies row `r` of `x` by the scalar `s[r]`.
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if self.value(s).numel() != rows {
            return Err(Error::Shape {
                op: "scale_rows",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sv = self.data(s);
        let data = xv
            .data()
            .chunks(cols)
            .zip(sv)
            .flat_map(|(row, &c)| row.iter().map(move |v| v * c))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Tensor::new(shape, data)?, Op::ScaleRows { x, s }, rg))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, c }, rg)
    }

    /// Elementwise product with a constant of the same shape (dropout masks, fixed weights).
    pub fn mul_const(&mut self, x: NodeId, c: Vec<f64>) -> Result<NodeId> {
        if c.len() != self.value(x).numel() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: self.shape(x).to_vec(),
                rhs: vec![c.len()],
            });
        }
        let data = self.data(x).iter().zip(&c).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::MulConst { x, c }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let d = self.data(x);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    // ---- normalization -------------------------------------------------

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| src[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..len {
                    let e = (src[at(i)] - max).exp();
                    out[at(i)] = e;
                    z += e;
                }
                for i in 0..len {
                    out[at(i)] /= z;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let cols = self.value(x).cols();
        for p in [gain, bias] {
            if self.value(p).numel() != cols {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let src = self.data(x);
        let rows = src.len() / cols;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---- indexing ------------------------------------------------------

    /// Selects rows of a 2-D tensor (embedding lookup, expert dispatch).
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "row index {bad} out of range for {rows} rows"
            )));
        }
        if idx.is_empty() {
            return Err(Error::InvalidArgument("gather_rows with no indices".into()));
        }
        let data = idx
            .iter()
            .flat_map(|&i| t.data()[i * cols..(i + 1) * cols].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new([idx.len(), cols], data)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Places row `r` of `x` at row `idx[r]` of a zero `[rows × cols]` output (duplicates add).
    pub fn scatter_rows(&mut self, x: NodeId, idx: &[usize], rows: usize) -> Result<NodeId> {
        let t = self.value(x);
        let cols = t.cols();
        if idx.len() != t.rows() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::Shape {
                op: "scatter_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len(), rows],
            });
        }
        let mut out = vec![0.0; rows * cols];
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..cols {
                out[i * cols + c] += t.data()[r * cols + c];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new([rows, cols], out)?,
            Op::ScatterRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Picks `x[r, idx[r]]` from each row, giving an `[rows × 1]` column.
    pub fn gather_elems(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if idx.len() != rows || idx.iter().any(|&i| i >= cols) {
            return Err(Error::Shape {
                op: "gather_elems",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| t.data()[r * cols + i])
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new([rows, 1], data)?,
            Op::GatherElems {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    // ---- attention -----------------------------------------------------

    /// Scaled dot-product attention over `heads` interleaved column blocks.
    ///
    /// `q` is `[batch·q_len × heads·d_head]`, `k` and `v` are `[batch·k_len × heads·d_head]`.
    /// `allowed[(b·q_len + i)·k_len + j]` says whether query `i` may see key `j`;
    /// a query with no visible keys produces a zero row. `drop`, when given, is a
    /// pre-scaled keep mask over the `[batch × heads × q_len × k_len]` weights.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        dims: AttentionDims,
        allowed: &[bool],
        drop: Option<Vec<f64>>,
    ) -> Result<NodeId> {
        let AttentionDims {
            batch,
            heads,
            q_len,
            k_len,
            d_head,
        } = dims;
        let width = heads * d_head;
        let expect_q = [batch * q_len, width];
        let expect_kv = [batch * k_len, width];
        for (id, want) in [(q, &expect_q), (k, &expect_kv), (v, &expect_kv)] {
            if self.shape(id) != want.as_slice() {
                return Err(Error::Shape {
                    op: "attention",
                    lhs: self.shape(id).to_vec(),
                    rhs: want.to_vec(),
                });
            }
        }
        let n_weights = batch * heads * q_len * k_len;
        if allowed.len() != batch * q_len * k_len {
            return Err(Error::Shape {
                op: "attention mask",
                lhs: vec![allowed.len()],
                rhs: vec![batch, q_len, k_len],
            });
        }
        if drop.as_ref().is_some_and(|d| d.len() != n_weights) {
            return Err(Error::Shape {
                op: "attention dropout",
                lhs: vec![drop.as_ref().map_or(0, Vec::len)],
                rhs: vec![batch, heads, q_len, k_len],
            });
        }
        let scale = 1.0 / (d_head as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; n_weights];
        let mut out = vec![0.0; batch * q_len * width];
        let mut scores = vec![0.0; k_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * d_head;
                for i in 0..q_len {
                    let qrow = &qd[(b * q_len + i) * width + off..][..d_head];
                    let mask = &allowed[(b * q_len + i) * k_len..][..k_len];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..k_len {
                        if mask[j] {
                            let krow = &kd[(b * k_len + j) * width + off..][..d_head];
                            let s = scale * dot(qrow, krow);
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let base = ((b * heads + h) * q_len + i) * k_len;
                    let mut z = 0.0;
                    for j in 0..k_len {
                        if mask[j] {
                            let e = (scores[j] - max).exp();
                            probs[base + j] = e;
                            z += e;
                        }
                    }
                    let orow = &mut out[(b * q_len + i) * width + off..][..d_head];
                    for j in 0..k_len {
                        if !mask[j] {
                            continue;
                        }
                        probs[base + j] /= z;
                        let w = match &drop {
                            Some(d) => probs[base + j] * d[base + j],
                            None => probs[base + j],
                        };
                        let vrow = &vd[(b * k_len + j) * width + off..][..d_head];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        self.flops += 4 * (batch * heads * q_len * k_len * d_head) as u64;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new([batch * q_len, width], out)?,
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
                drop,
            },
            rg,
        ))
    }

    // ---- losses --------------------------------------------------------

    /// Mean negative log-likelihood of `targets` under `softmax(logits)` over
    /// rows whose target differs from `pad_id`, with optional label smoothing.
    /// Evaluates to zero when every row is padding.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        pad_id: Option<usize>,
        smoothing: f64,
    ) -> Result<NodeId> {
        let t = self.value(logits);
        let (rows, vocab) = (t.rows(), t.cols());
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= vocab) {
            return Err(Error::TargetOutOfRange { index: bad, vocab });
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::InvalidArgument(format!(
                "label smoothing {smoothing} outside [0, 1)"
            )));
        }
        let weights: Vec<f64> = targets
            .iter()
            .map(|&y| if Some(y) == pad_id { 0.0 } else { 1.0 })
            .collect();
        let norm: f64 = weights.iter().sum();
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        for r in 0..rows {
            let z = t.row(r);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            for (p, v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(z) {
                *p = (v - lse).exp();
            }
            if weights[r] == 0.0 {
                continue;
            }
            let nll = lse - z[targets[r]];
            let loss = if smoothing > 0.0 {
                let mean_z = z.iter().sum::<f64>() / vocab as f64;
                (1.0 - smoothing) * nll + smoothing * (lse - mean_z)
            } else {
                nll
            };
            total += loss;
        }
        let value = if norm > 0.0 { total / norm } else { 0.0 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                smoothing,
                probs,
            },
            rg,
        ))
    }

    /// `KL(p‖q)` summed over the last axis and averaged over rows, with `q`
    /// floored at [`KL_FLOOR`] inside the logarithm. When `row_mask` is given,
    /// only rows marked `true` contribute to the average.
    pub fn kl_divergence(
        &mut self,
        p: NodeId,
        q: NodeId,
        row_mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        self.same_shape("kl_divergence", p, q)?;
        let (pt, qt) = (self.value(p), self.value(q));
        let (rows, cols) = (pt.rows(), pt.cols());
        let weights: Vec<f64> = match row_mask {
            Some(m) if m.len() != rows => {
                return Err(Error::Shape {
                    op: "kl_divergence mask",
                    lhs: pt.shape().to_vec(),
                    rhs: vec![m.len()],
                })
            }
            Some(m) => m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            None => vec![1.0; rows],
        };
        for (name, t) in [("p", pt), ("q", qt)] {
            for r in (0..rows).filter(|&r| weights[r] > 0.0) {
                let sum: f64 = t.row(r).iter().sum();
                if (sum - 1.0).abs() > 1e-6 || t.row(r).iter().any(|&v| v < 0.0) {
                    return Err(Error::NotNormalized { arg: name, row: r, sum });
                }
            }
        }
        let norm: f64 = weights.iter().sum();
        let mut total = 0.0;
        for r in (0..rows).filter(|&r| weights[r] > 0.0) {
            for (&pv, &qv) in pt.row(r).iter().zip(qt.row(r)) {
                if pv > 0.0 {
                    total += pv * (pv.ln() - qv.max(KL_FLOOR).ln());
                }
            }
        }
        let _ = cols;
        let value = if norm > 0.0 { total / norm } else { 0.0 };
        let rg = self.rg(p) || self.rg(q);
        Ok(self.push(Tensor::scalar(value), Op::KlDiv { p, q, weights }, rg))
    }

    // ---- reverse pass --------------------------------------------------

    /// Accumulates `∂loss/∂leaf` into every differentiable leaf reachable from `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(gout);
                continue;
            }
            self.backprop_node(id, &gout, &mut grads);
        }

        for (id, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[id];
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        // Only inputs that require gradients receive a buffer.
        let mut acc = |target: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !self.rg(target) {
                return;
            }
            let slot = &mut grads[target.0];
            let buf = slot.get_or_insert_with(|| vec![0.0; self.data(target).len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            &Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k) = (sa[0], sa[1]);
                let n = if trans_b { sb[0] } else { sb[1] };
                let (ad, bd) = (self.data(a), self.data(b));
                acc(a, &mut |ga| {
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, gout, false, bd, !trans_b, ga, 1.0);
                });
                acc(b, &mut |gb| {
                    if trans_b {
                        // d(B stored n×k) = dCᵀ · A
                        gemm(n, m, k, gout, true, ad, false, gb, 1.0);
                    } else {
                        // dB = Aᵀ · dC
                        gemm(k, m, n, ad, true, gout, false, gb, 1.0);
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |g| add_into(g, gout));
                acc(b, &mut |g| add_into(g, gout));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |g| add_into(g, gout));
                acc(b, &mut |g| {
                    for (x, d) in g.iter_mut().zip(gout) {
                        *x -= d;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                acc(a, &mut |g| {
                    for ((x, d), o) in g.iter_mut().zip(gout).zip(bd) {
                        *x += d * o;
                    }
                });
                acc(b, &mut |g| {
                    for ((x, d), o) in g.iter_mut().zip(gout).zip(ad) {
                        *x += d * o;
                    }
                });
            }
            &Op::AddRow { x, bias } => {
                let cols = node.value.cols();
                acc(x, &mut |g| add_into(g, gout));
                acc(bias, &mut |g| {
                    for row in gout.chunks(cols) {
                        add_into(g, row);
                    }
                });
            }
            &Op::ScaleRows { x, s } => {
                let cols = node.value.cols();
                let (xd, sd) = (self.data(x), self.data(s));
                acc(x, &mut |g| {
                    for ((grow, drow), &c) in g.chunks_mut(cols).zip(gout.chunks(cols)).zip(sd) {
                        for (a, d) in grow.iter_mut().zip(drow) {
                            *a += d * c;
                        }
                    }
                });
                acc(s, &mut |g| {
                    for ((gs, drow), xrow) in g.iter_mut().zip(gout.chunks(cols)).zip(xd.chunks(cols)) {
                        *gs += dot(drow, xrow);
                    }
                });
            }
            &Op::Scale { x, c } => acc(x, &mut |g| {
                for (a, d) in g.iter_mut().zip(gout) {
                    *a += c * d;
                }
            }),
            Op::MulConst { x, c } => acc(*x, &mut |g| {
                for ((a, d), m) in g.iter_mut().zip(gout).zip(c) {
                    *a += d * m;
                }
            }),
            &Op::Relu(x) => {
                let xd = self.data(x);
                acc(x, &mut |g| {
                    for ((a, d), v) in g.iter_mut().zip(gout).zip(xd) {
                        if *v > 0.0 {
                            *a += d;
                        }
                    }
                });
            }
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => acc(x, &mut |g| {
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let s: f64 = (0..len).map(|i| gout[at(i)] * y[at(i)]).sum();
                        for i in 0..len {
                            g[at(i)] += y[at(i)] * (gout[at(i)] - s);
                        }
                    }
                }
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let cols = node.value.cols();
                let gv = self.data(*gain);
                acc(*x, &mut |g| {
                    let mut dxhat = vec![0.0; cols];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let d = &gout[r * cols..(r + 1) * cols];
                        let h = &xhat[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dxhat[c] = d[c] * gv[c];
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dh = dot(&dxhat, h);
                        let n = cols as f64;
                        for c in 0..cols {
                            g[r * cols + c] += rs / n * (n * dxhat[c] - sum_d - h[c] * sum_dh);
                        }
                    }
                });
                acc(*gain, &mut |g| {
                    for (drow, hrow) in gout.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((a, d), h) in g.iter_mut().zip(drow).zip(hrow) {
                            *a += d * h;
                        }
                    }
                });
                acc(*bias, &mut |g| {
                    for drow in gout.chunks(cols) {
                        add_into(g, drow);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let cols = node.value.cols();
                acc(*x, &mut |g| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut g[i * cols..(i + 1) * cols], &gout[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::ScatterRows { x, idx } => {
                let cols = node.value.cols();
                acc(*x, &mut |g| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut g[r * cols..(r + 1) * cols], &gout[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::GatherElems { x, idx } => {
                let cols = self.value(*x).cols();
                acc(*x, &mut |g| {
                    for (r, &i) in idx.iter().enumerate() {
                        g[r * cols + i] += gout[r];
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
                drop,
            } => self.backprop_attention(*q, *k, *v, *dims, probs, drop.as_deref(), gout, grads),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                smoothing,
                probs,
            } => {
                let vocab = self.value(*logits).cols();
                let norm: f64 = weights.iter().sum();
                if norm == 0.0 {
                    return;
                }
                let off = smoothing / vocab as f64;
                acc(*logits, &mut |g| {
                    for (r, (&y, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let c = gout[0] * w / norm;
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        let grow = &mut g[r * vocab..(r + 1) * vocab];
                        for (a, &pv) in grow.iter_mut().zip(p) {
                            *a += c * (pv - off);
                        }
                        grow[y] -= c * (1.0 - smoothing);
                    }
                });
            }
            Op::KlDiv { p, q, weights } => {
                let norm: f64 = weights.iter().sum();
                if norm == 0.0 {
                    return;
                }
                let cols = self.value(*p).cols();
                let (pd, qd) = (self.data(*p), self.data(*q));
                acc(*p, &mut |g| {
                    for (r, &w) in weights.iter().enumerate().filter(|&(_, &w)| w > 0.0) {
                        let c = gout[0] * w / norm;
                        for i in r * cols..(r + 1) * cols {
                            let lp = pd[i].max(KL_FLOOR).ln();
                            g[i] += c * (lp - qd[i].max(KL_FLOOR).ln() + 1.0);
                        }
                    }
                });
                acc(*q, &mut |g| {
                    for (r, &w) in weights.iter().enumerate().filter(|&(_, &w)| w > 0.0) {
                        let c = gout[0] * w / norm;
                        for i in r * cols..(r + 1) * cols {
                            if qd[i] > KL_FLOOR {
                                g[i] -= c * pd[i] / qd[i];
                            }
                        }
                    }
                });
            }
            &Op::Sum(x) => acc(x, &mut |g| {
                for a in g.iter_mut() {
                    *a += gout[0];
                }
            }),
            &Op::Mean(x) => acc(x, &mut |g| {
                let c = gout[0] / g.len() as f64;
                for a in g.iter_mut() {
                    *a += c;
                }
            }),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        dims: AttentionDims,
        probs: &[f64],
        drop: Option<&[f64]>,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let AttentionDims {
            batch,
            heads,
            q_len,
            k_len,
            d_head,
        } = dims;
        let width = heads * d_head;
        let scale = 1.0 / (d_head as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; k_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * d_head;
                for i in 0..q_len {
                    let base = ((b * heads + h) * q_len + i) * k_len;
                    let p = &probs[base..base + k_len];
                    if p.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let qi = (b * q_len + i) * width + off;
                    let go = &gout[qi..qi + d_head];
                    for j in 0..k_len {
                        let kj = (b * k_len + j) * width + off;
                        let keep = drop.map_or(1.0, |d| d[base + j]);
                        dp[j] = dot(go, &vd[kj..kj + d_head]) * keep;
                        let w = p[j] * keep;
                        if w != 0.0 {
                            for (a, o) in dv[kj..kj + d_head].iter_mut().zip(go) {
                                *a += w * o;
                            }
                        }
                    }
                    let s = dot(p, &dp);
                    for j in 0..k_len {
                        let ds = p[j] * (dp[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = (b * k_len + j) * width + off;
                        for e in 0..d_head {
                            dq[qi + e] += ds * kd[kj + e];
                            dk[kj + e] += ds * qd[qi + e];
                        }
                    }
                }
            }
        }
        for (id, d) in [(q, dq), (k, dk), (v, dv)] {
            if !self.rg(id) {
                continue;
            }
            match &mut grads[id.0] {
                Some(g) => add_into(g, &d),
                slot @ None => *slot = Some(d),
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
