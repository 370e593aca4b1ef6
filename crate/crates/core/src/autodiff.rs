//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass as a
//! node holding its output value. Nodes are appended in evaluation order, so
//! the tape is topologically sorted by construction and [`Graph::backward`]
//! visits each node exactly once, from the loss back to the leaves.
//!
//! Parameters enter the graph as leaves with `requires_grad` set; after
//! `backward` their gradients are read with [`Graph::grad`] and copied into
//! the owning tensors by the caller.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics used by [`Graph::channel_norm`].
#[derive(Clone, Debug)]
pub enum NormStats<'a> {
    /// Per-channel mean and biased variance are computed from the input;
    /// gradients flow through them.
    Batch,
    /// Externally supplied per-channel mean and variance, treated as constants.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

/// Output of [`Graph::channel_norm`].
#[derive(Clone, Debug)]
pub struct ChannelNormOutput {
    pub output: NodeId,
    /// Mean actually used, per channel.
    pub mean: Vec<f64>,
    /// Variance actually used, per channel.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    Exp(NodeId),
    Relu(NodeId),
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Conv1d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    MaxPool1d {
        input: NodeId,
        argmax: Vec<usize>,
    },
    AdaptiveAvgPool1d {
        input: NodeId,
        out_len: usize,
    },
    Dropout {
        input: NodeId,
        mask: Vec<f64>,
    },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    SelectRows {
        input: NodeId,
        rows: Vec<usize>,
    },
    SqDist(NodeId, NodeId),
    Nll {
        input: NodeId,
        labels: Vec<usize>,
    },
    ChannelNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn rank(t: &Tensor, n: usize, what: &str) -> Result<()> {
    if t.ndim() != n {
        return dim_err(format!(
            "{what}: expected rank {n}, got shape {:?}",
            t.shape()
        ));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Adds a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t.detached().with_requires_grad(requires_grad),
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Adds a differentiable leaf.
    pub fn param(&mut self, t: &Tensor) -> NodeId {
        self.leaf(t.detached().with_requires_grad(true))
    }

    /// Adds a non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t.with_requires_grad(false))
    }

    /// Copies a node's value into a fresh constant leaf.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.detached();
        self.constant(v)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last `backward` loss w.r.t. `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "add")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "sub")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "mul")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x + c).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.is_empty() {
            return dim_err("mean of empty tensor");
        }
        let m = va.data().iter().sum::<f64>() / va.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), &[a]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.value(a).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x.exp()).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Relu(a), &[a])
    }

    /// `out[b,o] = Σ_i input[b,i]·weight[o,i] + bias[o]`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        rank(x, 2, "dense input")?;
        rank(w, 2, "dense weight")?;
        rank(b, 1, "dense bias")?;
        let (batch, fin) = (x.shape()[0], x.shape()[1]);
        let fout = w.shape()[0];
        if w.shape()[1] != fin || b.shape()[0] != fout {
            return dim_err(format!(
                "dense: input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            ));
        }
        let (xd, wd, bd) = (x.data(), w.data(), b.data());
        let mut out = vec![0.0; batch * fout];
        for bi in 0..batch {
            let xr = &xd[bi * fin..(bi + 1) * fin];
            for o in 0..fout {
                let wr = &wd[o * fin..(o + 1) * fin];
                out[bi * fout + o] = bd[o] + xr.iter().zip(wr).map(|(p, q)| p * q).sum::<f64>();
            }
        }
        let out = Tensor::new(vec![batch, fout], out)?;
        Ok(self.push(
            out,
            Op::Dense {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        ))
    }

    /// 1-D cross-correlation with zero padding.
    pub fn conv1d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        rank(x, 3, "conv1d input")?;
        rank(k, 3, "conv1d kernel")?;
        rank(b, 1, "conv1d bias")?;
        if stride == 0 {
            return Err(Error::Parameter("conv1d stride must be positive".into()));
        }
        let (batch, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, kcin, klen) = (k.shape()[0], k.shape()[1], k.shape()[2]);
        if kcin != cin || b.shape()[0] != cout {
            return dim_err(format!(
                "conv1d: input {:?}, kernel {:?}, bias {:?}",
                x.shape(),
                k.shape(),
                b.shape()
            ));
        }
        let padded = len + 2 * padding;
        if klen == 0 || klen > padded {
            return dim_err(format!(
                "conv1d: kernel length {klen} exceeds padded length {padded}"
            ));
        }
        let lout = (padded - klen) / stride + 1;
        let (xd, kd, bd) = (x.data(), k.data(), b.data());
        let mut out = vec![0.0; batch * cout * lout];
        for bi in 0..batch {
            for o in 0..cout {
                let orow = &mut out[(bi * cout + o) * lout..(bi * cout + o + 1) * lout];
                orow.iter_mut().for_each(|v| *v = bd[o]);
                for c in 0..cin {
                    let xrow = &xd[(bi * cin + c) * len..(bi * cin + c + 1) * len];
                    let krow = &kd[(o * cin + c) * klen..(o * cin + c + 1) * klen];
                    for (t, ov) in orow.iter_mut().enumerate() {
                        let start = (t * stride) as isize - padding as isize;
                        let mut acc = 0.0;
                        for (j, &kv) in krow.iter().enumerate() {
                            let p = start + j as isize;
                            if p >= 0 && (p as usize) < len {
                                acc += xrow[p as usize] * kv;
                            }
                        }
                        *ov += acc;
                    }
                }
            }
        }
        let out = Tensor::new(vec![batch, cout, lout], out)?;
        Ok(self.push(
            out,
            Op::Conv1d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            &[input, kernel, bias],
        ))
    }

    /// Windowed maximum over the last axis; ties resolve to the first index.
    pub fn maxpool1d(&mut self, input: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let x = self.value(input);
        rank(x, 3, "maxpool1d input")?;
        if window == 0 || stride == 0 {
            return Err(Error::Parameter("maxpool window and stride must be positive".into()));
        }
        let (batch, ch, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if window > len {
            return dim_err(format!("maxpool1d: window {window} exceeds length {len}"));
        }
        let lout = (len - window) / stride + 1;
        let xd = x.data();
        let mut out = Vec::with_capacity(batch * ch * lout);
        let mut argmax = Vec::with_capacity(batch * ch * lout);
        for row in 0..batch * ch {
            let base = row * len;
            for t in 0..lout {
                let s = base + t * stride;
                let mut best = s;
                for p in s + 1..s + window {
                    if xd[p] > xd[best] {
                        best = p;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
        let out = Tensor::new(vec![batch, ch, lout], out)?;
        Ok(self.push(out, Op::MaxPool1d { input, argmax }, &[input]))
    }

    /// Averages contiguous bins `[floor(i·L/n), floor((i+1)·L/n))`.
    pub fn adaptive_avg_pool1d(&mut self, input: NodeId, out_len: usize) -> Result<NodeId> {
        let x = self.value(input);
        rank(x, 3, "adaptive_avg_pool1d input")?;
        let (batch, ch, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if out_len == 0 || out_len > len {
            return dim_err(format!(
                "adaptive_avg_pool1d: output length {out_len} invalid for input length {len}"
            ));
        }
        let xd = x.data();
        let mut out = Vec::with_capacity(batch * ch * out_len);
        for row in 0..batch * ch {
            let r = &xd[row * len..(row + 1) * len];
            for i in 0..out_len {
                let (s, e) = adaptive_bin(i, len, out_len);
                out.push(r[s..e].iter().sum::<f64>() / (e - s) as f64);
            }
        }
        let out = Tensor::new(vec![batch, ch, out_len], out)?;
        Ok(self.push(out, Op::AdaptiveAvgPool1d { input, out_len }, &[input]))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`; identity when not training.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: NodeId,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(input);
        }
        let x = self.value(input);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout { input, mask }, &[input]))
    }

    /// Row-wise softmax of a `[B, C]` tensor.
    pub fn softmax(&mut self, logits: NodeId) -> Result<NodeId> {
        let x = self.value(logits);
        rank(x, 2, "softmax input")?;
        let c = x.shape()[1];
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Softmax(logits), &[logits]))
    }

    /// Row-wise log-softmax of a `[B, C]` tensor.
    pub fn log_softmax(&mut self, logits: NodeId) -> Result<NodeId> {
        let x = self.value(logits);
        rank(x, 2, "log_softmax input")?;
        let c = x.shape()[1];
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(out, Op::LogSoftmax(logits), &[logits]))
    }

    pub fn select_rows(&mut self, input: NodeId, rows: &[usize]) -> Result<NodeId> {
        let out = self.value(input).select_rows(rows)?;
        Ok(self.push(
            out,
            Op::SelectRows {
                input,
                rows: rows.to_vec(),
            },
            &[input],
        ))
    }

    /// Pairwise squared Euclidean distances between rows: `[Na, d] × [Nb, d] → [Na, Nb]`.
    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        rank(va, 2, "sq_dist lhs")?;
        rank(vb, 2, "sq_dist rhs")?;
        let (na, d) = (va.shape()[0], va.shape()[1]);
        let nb = vb.shape()[0];
        if vb.shape()[1] != d {
            return dim_err(format!(
                "sq_dist: feature dims {} and {} differ",
                d,
                vb.shape()[1]
            ));
        }
        let mut out = vec![0.0; na * nb];
        for i in 0..na {
            let ra = &va.data()[i * d..(i + 1) * d];
            for j in 0..nb {
                let rb = &vb.data()[j * d..(j + 1) * d];
                out[i * nb + j] = ra.iter().zip(rb).map(|(p, q)| (p - q) * (p - q)).sum();
            }
        }
        let out = Tensor::new(vec![na, nb], out)?;
        Ok(self.push(out, Op::SqDist(a, b), &[a, b]))
    }

    /// Mean negative log-likelihood: `-(1/B) Σ_b input[b, labels[b]]`.
    pub fn nll(&mut self, log_probs: NodeId, labels: &[usize]) -> Result<NodeId> {
        let x = self.value(log_probs);
        rank(x, 2, "nll input")?;
        let (batch, c) = (x.shape()[0], x.shape()[1]);
        if labels.len() != batch || batch == 0 {
            return dim_err(format!(
                "nll: {} labels for batch of {batch}",
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label {
                label: bad,
                classes: c,
            });
        }
        let s: f64 = labels
            .iter()
            .enumerate()
            .map(|(b, &l)| x.data()[b * c + l])
            .sum();
        let out = Tensor::scalar(-s / batch as f64);
        Ok(self.push(
            out,
            Op::Nll {
                input: log_probs,
                labels: labels.to_vec(),
            },
            &[log_probs],
        ))
    }

    /// Per-channel standardization followed by `γ·x̂ + β`.
    ///
    /// `input` is `[B, C]` or `[B, C, L]`; statistics pool batch and spatial
    /// axes. Variance is the biased (population) estimator.
    pub fn channel_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: NormStats<'_>,
        epsilon: f64,
    ) -> Result<ChannelNormOutput> {
        let x = self.value(input);
        let (batch, ch, spatial) = match *x.shape() {
            [b, c] => (b, c, 1),
            [b, c, l] => (b, c, l),
            _ => return dim_err(format!("channel_norm: unsupported shape {:?}", x.shape())),
        };
        let (g, bt) = (self.value(gamma), self.value(beta));
        if g.shape() != [ch] || bt.shape() != [ch] {
            return dim_err(format!(
                "channel_norm: gamma {:?} / beta {:?} for {ch} channels",
                g.shape(),
                bt.shape()
            ));
        }
        let xd = x.data();
        let m = (batch * spatial) as f64;
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                if batch * spatial == 0 {
                    return dim_err("channel_norm: empty batch");
                }
                let mut mean = vec![0.0; ch];
                let mut var = vec![0.0; ch];
                for b in 0..batch {
                    for c in 0..ch {
                        let r = &xd[(b * ch + c) * spatial..(b * ch + c + 1) * spatial];
                        mean[c] += r.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for b in 0..batch {
                    for c in 0..ch {
                        let r = &xd[(b * ch + c) * spatial..(b * ch + c + 1) * spatial];
                        var[c] += r.iter().map(|v| (v - mean[c]) * (v - mean[c])).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != ch || var.len() != ch {
                    return dim_err("channel_norm: statistics length mismatch");
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let (gd, bd) = (g.data(), bt.data());
        for b in 0..batch {
            for c in 0..ch {
                let off = (b * ch + c) * spatial;
                for i in off..off + spatial {
                    let h = (xd[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = gd[c] * h + bd[c];
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let output = self.push(
            out,
            Op::ChannelNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[input, gamma, beta],
        );
        Ok(ChannelNormOutput { output, mean, var })
    }

    /// Propagates gradients of the scalar `loss` to every differentiable node.
    ///
    /// Gradients from a previous call are cleared first.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &gout, &mut grads);
            self.nodes[idx].value.accumulate_grad(&gout)?;
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        // Accumulates into the gradient buffer of `id` when it is differentiable.
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[id.0].requires_grad {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| add_into(g, gout));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| g.iter_mut().zip(gout).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * vb[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * va[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |g| {
                g.iter_mut().zip(gout).for_each(|(x, y)| *x += c * y)
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |g| add_into(g, gout)),
            Op::Sum(a) => acc(*a, &mut |g| g.iter_mut().for_each(|x| *x += gout[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &mut |g| g.iter_mut().for_each(|x| *x += gout[0] / n));
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * y[i];
                    }
                });
            }
            Op::Relu(a) => {
                let x = nodes[a.0].value.data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            g[i] += gout[i];
                        }
                    }
                });
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let x = &nodes[input.0].value;
                let w = &nodes[weight.0].value;
                let (batch, fin) = (x.shape()[0], x.shape()[1]);
                let fout = w.shape()[0];
                let (xd, wd) = (x.data(), w.data());
                acc(*input, &mut |g| {
                    for b in 0..batch {
                        for o in 0..fout {
                            let go = gout[b * fout + o];
                            if go == 0.0 {
                                continue;
                            }
                            let wr = &wd[o * fin..(o + 1) * fin];
                            let gr = &mut g[b * fin..(b + 1) * fin];
                            gr.iter_mut().zip(wr).for_each(|(p, q)| *p += go * q);
                        }
                    }
                });
                acc(*weight, &mut |g| {
                    for b in 0..batch {
                        let xr = &xd[b * fin..(b + 1) * fin];
                        for o in 0..fout {
                            let go = gout[b * fout + o];
                            let gr = &mut g[o * fin..(o + 1) * fin];
                            gr.iter_mut().zip(xr).for_each(|(p, q)| *p += go * q);
                        }
                    }
                });
                acc(*bias, &mut |g| {
                    for b in 0..batch {
                        for o in 0..fout {
                            g[o] += gout[b * fout + o];
                        }
                    }
                });
            }
            Op::Conv1d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let x = &nodes[input.0].value;
                let k = &nodes[kernel.0].value;
                let (batch, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (cout, klen) = (k.shape()[0], k.shape()[2]);
                let lout = node.value.shape()[2];
                let (xd, kd) = (x.data(), k.data());
                let (stride, padding) = (*stride, *padding);
                acc(*input, &mut |g| {
                    for b in 0..batch {
                        for o in 0..cout {
                            let grow = &gout[(b * cout + o) * lout..(b * cout + o + 1) * lout];
                            for c in 0..cin {
                                let krow = &kd[(o * cin + c) * klen..(o * cin + c + 1) * klen];
                                let gx = &mut g[(b * cin + c) * len..(b * cin + c + 1) * len];
                                for (t, &go) in grow.iter().enumerate() {
                                    let start = (t * stride) as isize - padding as isize;
                                    for (j, &kv) in krow.iter().enumerate() {
                                        let p = start + j as isize;
                                        if p >= 0 && (p as usize) < len {
                                            gx[p as usize] += go * kv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*kernel, &mut |g| {
                    for b in 0..batch {
                        for o in 0..cout {
                            let grow = &gout[(b * cout + o) * lout..(b * cout + o + 1) * lout];
                            for c in 0..cin {
                                let xrow = &xd[(b * cin + c) * len..(b * cin + c + 1) * len];
                                let gk = &mut g[(o * cin + c) * klen..(o * cin + c + 1) * klen];
                                for (t, &go) in grow.iter().enumerate() {
                                    let start = (t * stride) as isize - padding as isize;
                                    for (j, gkv) in gk.iter_mut().enumerate() {
                                        let p = start + j as isize;
                                        if p >= 0 && (p as usize) < len {
                                            *gkv += go * xrow[p as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*bias, &mut |g| {
                    for b in 0..batch {
                        for (o, gv) in g.iter_mut().enumerate() {
                            *gv += gout[(b * cout + o) * lout..(b * cout + o + 1) * lout]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                });
            }
            Op::MaxPool1d { input, argmax } => acc(*input, &mut |g| {
                for (o, &src) in argmax.iter().enumerate() {
                    g[src] += gout[o];
                }
            }),
            Op::AdaptiveAvgPool1d { input, out_len } => {
                let len = nodes[input.0].value.shape()[2];
                let rows = nodes[input.0].value.len() / len;
                acc(*input, &mut |g| {
                    for row in 0..rows {
                        for i in 0..*out_len {
                            let (s, e) = adaptive_bin(i, len, *out_len);
                            let share = gout[row * out_len + i] / (e - s) as f64;
                            g[row * len + s..row * len + e]
                                .iter_mut()
                                .for_each(|v| *v += share);
                        }
                    }
                });
            }
            Op::Dropout { input, mask } => acc(*input, &mut |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * mask[i];
                }
            }),
            Op::Softmax(a) => {
                let y = &node.value;
                let c = y.shape()[1];
                acc(*a, &mut |g| {
                    for (r, (yr, gr)) in y.data().chunks(c).zip(gout.chunks(c)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            g[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let c = y.shape()[1];
                acc(*a, &mut |g| {
                    for (r, (yr, gr)) in y.data().chunks(c).zip(gout.chunks(c)).enumerate() {
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            g[r * c + j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            Op::SelectRows { input, rows } => {
                let n = nodes[input.0].value.shape()[0];
                let width = nodes[input.0].value.len().checked_div(n).unwrap_or(0);
                acc(*input, &mut |g| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(
                            &mut g[r * width..(r + 1) * width],
                            &gout[k * width..(k + 1) * width],
                        );
                    }
                });
            }
            Op::SqDist(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (na, d) = (va.shape()[0], va.shape()[1]);
                let nb = vb.shape()[0];
                let (ad, bd) = (va.data(), vb.data());
                acc(*a, &mut |g| {
                    for i in 0..na {
                        for j in 0..nb {
                            let go = 2.0 * gout[i * nb + j];
                            for k in 0..d {
                                g[i * d + k] += go * (ad[i * d + k] - bd[j * d + k]);
                            }
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..na {
                        for j in 0..nb {
                            let go = 2.0 * gout[i * nb + j];
                            for k in 0..d {
                                g[j * d + k] -= go * (ad[i * d + k] - bd[j * d + k]);
                            }
                        }
                    }
                });
            }
            Op::Nll { input, labels } => {
                let c = nodes[input.0].value.shape()[1];
                let scale = gout[0] / labels.len() as f64;
                acc(*input, &mut |g| {
                    for (b, &l) in labels.iter().enumerate() {
                        g[b * c + l] -= scale;
                    }
                });
            }
            Op::ChannelNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let x = &nodes[input.0].value;
                let (batch, ch) = (x.shape()[0], x.shape()[1]);
                let spatial = if x.ndim() == 3 { x.shape()[2] } else { 1 };
                let gd = nodes[gamma.0].value.data();
                let m = (batch * spatial) as f64;
                let mut sum_dy = vec![0.0; ch];
                let mut sum_dy_xhat = vec![0.0; ch];
                for b in 0..batch {
                    for c in 0..ch {
                        let off = (b * ch + c) * spatial;
                        for i in off..off + spatial {
                            sum_dy[c] += gout[i];
                            sum_dy_xhat[c] += gout[i] * xhat[i];
                        }
                    }
                }
                acc(*gamma, &mut |g| add_into(g, &sum_dy_xhat));
                acc(*beta, &mut |g| add_into(g, &sum_dy));
                acc(*input, &mut |g| {
                    for b in 0..batch {
                        for c in 0..ch {
                            let off = (b * ch + c) * spatial;
                            for i in off..off + spatial {
                                let dxhat = gout[i] * gd[c];
                                g[i] += if *batch_stats {
                                    inv_std[c] / m
                                        * (m * dxhat
                                            - gd[c] * sum_dy[c]
                                            - xhat[i] * gd[c] * sum_dy_xhat[c])
                                } else {
                                    dxhat * inv_std[c]
                                };
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

pub(crate) fn adaptive_bin(i: usize, len: usize, out_len: usize) -> (usize, usize) {
    (i * len / out_len, (i + 1) * len / out_len)
}

/// Stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
