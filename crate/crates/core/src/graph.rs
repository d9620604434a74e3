//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every primitive applied during one forward pass. All
//! values are 2-D row-major matrices (`[rows, cols]`); batching is expressed
//! by stacking per-sample token matrices along the row axis, so primitives
//! that act per sample (attention, pooling, token reduction) carry the
//! per-sample segment length.

use crate::error::{contract, Result};
use crate::reduction::theta_groups;
use crate::rng::RngStream;
use crate::tensor::{dot, matmul_a_bt_acc, matmul_at_b_acc, matmul_into, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Scale(usize, f64),
    Gelu { x: usize, tanh: Vec<f64> },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        seg: usize,
        heads: usize,
        /// softmax weights, `[batch, heads, seg, seg]`
        probs: Vec<f64>,
        /// inverted-dropout multipliers, same layout as `probs`
        mask: Option<Vec<f64>>,
    },
    ThetaAverage {
        x: usize,
        k: usize,
        groups: Vec<(usize, usize)>,
    },
    Embed {
        proj: Option<usize>,
        modality: Option<usize>,
        positional: Option<usize>,
        present: Vec<Option<usize>>,
        k: usize,
    },
    Interleave {
        parts: Vec<(usize, usize, bool)>,
        batch: usize,
    },
    SegmentMean {
        x: usize,
        seg: usize,
        ranges: Vec<(usize, usize)>,
    },
    SoftmaxCe {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDiv {
        student: usize,
        teacher_probs: Vec<f64>,
        student_probs: Vec<f64>,
    },
    WeightedSum(Vec<(usize, f64)>),
    MeanAll(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Forward tape plus gradient buffers.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).expect("internal shape bookkeeping")
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

    fn push(&mut self, value: Tensor, inputs: &[usize], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        if requires_grad {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    /// Total number of stored values across all nodes (activation footprint).
    pub fn total_elements(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Softmax weights recorded by an attention node, laid out `[batch, heads, seg, seg]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = dims(self.value(a));
        let (k2, c) = dims(self.value(b));
        if k != k2 {
            return Err(contract(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; r * c];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            r,
            k,
            c,
        );
        Ok(self.push(mat(r, c, out), &[a.0, b.0], Op::MatMul(a.0, b.0)))
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = dims(self.value(x));
        if self.value(bias).len() != c {
            return Err(contract("bias length must equal column count"));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
        }
        Ok(self.push(mat(r, c, out), &[x.0, bias.0], Op::AddBias(x.0, bias.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = dims(self.value(a));
        if self.value(a).len() != self.value(b).len() || self.value(b).cols() != c {
            return Err(contract("add shape mismatch"));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(mat(r, c, out), &[a.0, b.0], Op::Add(a.0, b.0)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let (r, c) = dims(self.value(x));
        let out = self.value(x).data().iter().map(|v| v * s).collect();
        self.push(mat(r, c, out), &[x.0], Op::Scale(x.0, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = dims(self.value(x));
        let xs = self.value(x).data();
        let tanh: Vec<f64> = xs
            .iter()
            .map(|&v| (GELU_C * (v + GELU_A * v * v * v)).tanh())
            .collect();
        let out = xs.iter().zip(&tanh).map(|(&v, &t)| 0.5 * v * (1.0 + t)).collect();
        self.push(mat(r, c, out), &[x.0], Op::Gelu { x: x.0, tanh })
    }

    /// Row-wise layer normalization with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = dims(self.value(x));
        if c < 2 {
            return Err(contract("layer_norm needs at least two features"));
        }
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(contract("layer_norm affine length mismatch"));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            xhat,
            inv_std,
        };
        Ok(self.push(mat(r, c, out), &[x.0, gain.0, bias.0], op))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.value(x).ensure_finite("softmax input")?;
        let (r, c) = dims(self.value(x));
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(self.push(mat(r, c, out), &[x.0], Op::Softmax(x.0)))
    }

    /// Multi-head scaled dot-product attention over independent segments of
    /// `seg` rows. `q`, `k`, `v` are `[batch * seg, dim]` with `dim` divisible
    /// by `heads`. With `dropout = Some((p, rng))` the attention weights are
    /// masked and rescaled by `1 / (1 - p)`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seg: usize,
        heads: usize,
        dropout: Option<(f64, &mut RngStream)>,
    ) -> Result<Var> {
        let (rows, dim) = dims(self.value(q));
        if dims(self.value(k)) != (rows, dim) || dims(self.value(v)) != (rows, dim) {
            return Err(contract("attention q/k/v shapes differ"));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(crate::error::config(format!(
                "model dim {dim} is not divisible by {heads} heads"
            )));
        }
        if seg == 0 || rows % seg != 0 {
            return Err(contract(format!(
                "{rows} rows do not split into segments of {seg}"
            )));
        }
        let batch = rows / seg;
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qs = self.value(q).data();
        let ks = self.value(k).data();
        let vs = self.value(v).data();
        let mut probs = vec![0.0; batch * heads * seg * seg];
        let mut out = vec![0.0; rows * dim];
        let (p_drop, mut drop_rng) = match dropout {
            Some((p, rng)) if p > 0.0 => (p, Some(rng)),
            _ => (0.0, None),
        };
        let mut mask = drop_rng.as_ref().map(|_| vec![0.0; probs.len()]);
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * seg * seg;
                for i in 0..seg {
                    let qi = &qs[(b * seg + i) * dim + h * dh..][..dh];
                    let prow = &mut probs[base + i * seg..base + (i + 1) * seg];
                    for j in 0..seg {
                        let kj = &ks[(b * seg + j) * dim + h * dh..][..dh];
                        prow[j] = dot(qi, kj) * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(b * seg + i) * dim + h * dh..][..dh];
                    for j in 0..seg {
                        let mut w = prow[j];
                        if let (Some(m), Some(rng)) = (mask.as_mut(), drop_rng.as_mut()) {
                            let keep = if rng.bernoulli(p_drop) {
                                0.0
                            } else {
                                1.0 / (1.0 - p_drop)
                            };
                            m[base + i * seg + j] = keep;
                            w *= keep;
                        }
                        if w == 0.0 {
                            continue;
                        }
                        let vj = &vs[(b * seg + j) * dim + h * dh..][..dh];
                        orow.iter_mut().zip(vj).for_each(|(o, x)| *o += w * x);
                    }
                }
            }
        }
        let op = Op::Attention {
            q: q.0,
            k: k.0,
            v: v.0,
            seg,
            heads,
            probs,
            mask,
        };
        Ok(self.push(mat(rows, dim, out), &[q.0, k.0, v.0], op))
    }

    /// Contiguous-group token averaging applied per segment of `k` rows.
    pub fn theta_average(&mut self, x: Var, k: usize, theta: usize) -> Result<Var> {
        if theta == 0 {
            return Err(crate::error::config("theta must be at least 1"));
        }
        let (rows, c) = dims(self.value(x));
        if k == 0 || rows % k != 0 {
            return Err(contract(format!(
                "{rows} rows do not split into segments of {k}"
            )));
        }
        let groups = theta_groups(k, theta);
        let batch = rows / k;
        let kr = groups.len();
        let xs = self.value(x).data();
        let mut out = vec![0.0; batch * kr * c];
        for b in 0..batch {
            for (gi, &(start, len)) in groups.iter().enumerate() {
                let orow = &mut out[(b * kr + gi) * c..][..c];
                for t in start..start + len {
                    let xr = &xs[(b * k + t) * c..][..c];
                    orow.iter_mut().zip(xr).for_each(|(o, v)| *o += v);
                }
                let inv = 1.0 / len as f64;
                orow.iter_mut().for_each(|o| *o *= inv);
            }
        }
        let op = Op::ThetaAverage { x: x.0, k, groups };
        Ok(self.push(mat(batch * kr, c, out), &[x.0], op))
    }

    /// Per-sample embedding with learned substitutes for absent modalities.
    ///
    /// `present[b]` is the index of sample `b`'s block of `k` rows in `proj`
    /// (`None` when the modality is absent for that sample). Each output row
    /// `i` of sample `b` is `proj[present[b]*k + i] + modality + positional[i]`,
    /// with the projection term omitted when absent and either learned term
    /// omitted when `None`.
    pub fn embed(
        &mut self,
        proj: Option<Var>,
        modality: Option<Var>,
        positional: Option<Var>,
        present: Vec<Option<usize>>,
        k: usize,
        dim: usize,
    ) -> Result<Var> {
        let batch = present.len();
        if batch == 0 || k == 0 {
            return Err(contract("embed needs a non-empty batch and token count"));
        }
        let n_present = present.iter().flatten().count();
        if let Some(p) = proj {
            let (r, c) = dims(self.value(p));
            if c != dim || r != n_present * k {
                return Err(contract(format!(
                    "projected tokens {r}x{c} do not match {n_present} present samples of {k}x{dim}"
                )));
            }
        } else if n_present > 0 {
            return Err(contract("present samples require projected tokens"));
        }
        if present.iter().flatten().any(|&i| i >= n_present) {
            return Err(contract("present index out of range"));
        }
        if let Some(m) = modality {
            if self.value(m).len() != dim {
                return Err(contract("modality token length mismatch"));
            }
        }
        if let Some(p) = positional {
            if dims(self.value(p)) != (k, dim) {
                return Err(contract(format!(
                    "token-specific tokens must be {k}x{dim}, got {:?}",
                    self.value(p).shape()
                )));
            }
        }
        let mut out = vec![0.0; batch * k * dim];
        for (b, slot) in present.iter().enumerate() {
            let ob = &mut out[b * k * dim..(b + 1) * k * dim];
            if let (Some(i), Some(p)) = (slot, proj) {
                ob.copy_from_slice(&self.value(p).data()[i * k * dim..(i + 1) * k * dim]);
            }
            if let Some(m) = modality {
                let mt = self.value(m).data();
                for row in ob.chunks_mut(dim) {
                    row.iter_mut().zip(mt).for_each(|(o, v)| *o += v);
                }
            }
            if let Some(p) = positional {
                ob.iter_mut()
                    .zip(self.value(p).data())
                    .for_each(|(o, v)| *o += v);
            }
        }
        let inputs: Vec<usize> = [proj, modality, positional]
            .iter()
            .flatten()
            .map(|v| v.0)
            .collect();
        let op = Op::Embed {
            proj: proj.map(|v| v.0),
            modality: modality.map(|v| v.0),
            positional: positional.map(|v| v.0),
            present,
            k,
        };
        Ok(self.push(mat(batch * k, dim, out), &inputs, op))
    }

    /// Builds `[batch * n, dim]` by concatenating, per sample, the matching
    /// `seg`-row block of each part. A part with exactly `seg` rows is shared
    /// across the batch.
    pub fn interleave(&mut self, parts: &[(Var, usize)], batch: usize) -> Result<Var> {
        let dim = self
            .value(
                parts
                    .first()
                    .ok_or_else(|| contract("interleave of nothing"))?
                    .0,
            )
            .cols();
        let mut spec = Vec::with_capacity(parts.len());
        for &(v, seg) in parts {
            let (r, c) = dims(self.value(v));
            if c != dim {
                return Err(contract(format!(
                    "interleave part has {c} columns, expected {dim}"
                )));
            }
            let shared = r == seg;
            if !shared && r != seg * batch {
                return Err(contract(format!(
                    "part of {r} rows does not fit {batch}x{seg}"
                )));
            }
            spec.push((v.0, seg, shared));
        }
        let n: usize = spec.iter().map(|s| s.1).sum();
        let mut out = Vec::with_capacity(batch * n * dim);
        for b in 0..batch {
            for &(idx, seg, shared) in &spec {
                let d = self.nodes[idx].value.data();
                let start = if shared { 0 } else { b * seg * dim };
                out.extend_from_slice(&d[start..start + seg * dim]);
            }
        }
        let inputs: Vec<usize> = spec.iter().map(|s| s.0).collect();
        Ok(self.push(
            mat(batch * n, dim, out),
            &inputs,
            Op::Interleave { parts: spec, batch },
        ))
    }

    /// Means over row ranges of each `seg`-row segment; output holds
    /// `ranges.len()` rows per segment.
    pub fn segment_mean(&mut self, x: Var, seg: usize, ranges: &[(usize, usize)]) -> Result<Var> {
        let (rows, c) = dims(self.value(x));
        if seg == 0 || rows % seg != 0 {
            return Err(contract(format!(
                "{rows} rows do not split into segments of {seg}"
            )));
        }
        if ranges.is_empty() || ranges.iter().any(|&(s, l)| l == 0 || s + l > seg) {
            return Err(contract(
                "segment ranges must be non-empty and inside the segment",
            ));
        }
        let batch = rows / seg;
        let nr = ranges.len();
        let xs = self.value(x).data();
        let mut out = vec![0.0; batch * nr * c];
        for b in 0..batch {
            for (ri, &(s, l)) in ranges.iter().enumerate() {
                let orow = &mut out[(b * nr + ri) * c..][..c];
                for t in s..s + l {
                    let xr = &xs[(b * seg + t) * c..][..c];
                    orow.iter_mut().zip(xr).for_each(|(o, v)| *o += v);
                }
                let inv = 1.0 / l as f64;
                orow.iter_mut().for_each(|o| *o *= inv);
            }
        }
        let op = Op::SegmentMean {
            x: x.0,
            seg,
            ranges: ranges.to_vec(),
        };
        Ok(self.push(mat(batch * nr, c, out), &[x.0], op))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = dims(self.value(logits));
        if labels.len() != r {
            return Err(contract(format!("{} labels for {r} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        self.value(logits).ensure_finite("logits")?;
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &l) in probs.chunks_mut(c).zip(labels) {
            let lse = log_sum_exp(row);
            loss -= row[l] - lse;
            softmax_in_place(row);
        }
        loss /= r as f64;
        let op = Op::SoftmaxCe {
            logits: logits.0,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), &[logits.0], op))
    }

    /// Mean KL divergence `KL(teacher || student)` over rows. The teacher
    /// logits are plain values, so no gradient can reach the teacher.
    pub fn kl_divergence(&mut self, teacher_logits: &Tensor, student_logits: Var) -> Result<Var> {
        let (r, c) = dims(self.value(student_logits));
        if teacher_logits.rows() != r || teacher_logits.cols() != c {
            return Err(contract(format!(
                "teacher logits {:?} vs student logits {r}x{c}",
                teacher_logits.shape()
            )));
        }
        teacher_logits.ensure_finite("teacher logits")?;
        self.value(student_logits).ensure_finite("student logits")?;
        let mut tp = teacher_logits.data().to_vec();
        let mut sp = self.value(student_logits).data().to_vec();
        let mut loss = 0.0;
        for (trow, srow) in tp.chunks_mut(c).zip(sp.chunks_mut(c)) {
            let tl = log_sum_exp(trow);
            let sl = log_sum_exp(srow);
            for j in 0..c {
                let log_t = trow[j] - tl;
                let log_s = srow[j] - sl;
                let pt = log_t.exp();
                if pt > 0.0 {
                    loss += pt * (log_t - log_s);
                }
            }
            softmax_in_place(trow);
            softmax_in_place(srow);
        }
        loss /= r as f64;
        let op = Op::KlDiv {
            student: student_logits.0,
            teacher_probs: tp,
            student_probs: sp,
        };
        Ok(self.push(Tensor::scalar(loss), &[student_logits.0], op))
    }

    /// `sum_i w_i * x_i` over equally shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| contract("weighted sum of nothing"))?
            .0;
        let (r, c) = dims(self.value(first));
        let mut out = vec![0.0; r * c];
        for &(v, w) in terms {
            if self.value(v).len() != r * c {
                return Err(contract("weighted sum shape mismatch"));
            }
            out.iter_mut()
                .zip(self.value(v).data())
                .for_each(|(o, x)| *o += w * x);
        }
        let inputs: Vec<usize> = terms.iter().map(|t| t.0 .0).collect();
        let spec = terms.iter().map(|&(v, w)| (v.0, w)).collect();
        Ok(self.push(mat(r, c, out), &inputs, Op::WeightedSum(spec)))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(m), &[x.0], Op::MeanAll(x.0))
    }

    /// Back-propagates from a scalar root; previous gradients are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // ops hold indices only into earlier nodes, so splitting the borrow
        // between `nodes` and `grads` is sound
        let nodes = std::mem::take(&mut self.nodes);
        let node = &nodes[i];
        let val = |idx: usize| &nodes[idx].value;
        let mut grads = std::mem::take(&mut self.grads);
        macro_rules! acc {
            ($idx:expr) => {{
                let idx: usize = $idx;
                if nodes[idx].requires_grad {
                    let len = nodes[idx].value.len();
                    Some(grads[idx].get_or_insert_with(|| vec![0.0; len]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (r, k) = dims(val(a));
                let c = val(b).cols();
                if let Some(ga) = acc!(a) {
                    matmul_a_bt_acc(g, val(b).data(), ga, r, k, c);
                }
                if let Some(gb) = acc!(b) {
                    matmul_at_b_acc(val(a).data(), g, gb, r, k, c);
                }
            }
            &Op::AddBias(x, b) => {
                let c = val(x).cols();
                if let Some(gx) = acc!(x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if let Some(gb) = acc!(b) {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
            }
            &Op::Add(a, b) => {
                for idx in [a, b] {
                    if let Some(gi) = acc!(idx) {
                        gi.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                    }
                }
            }
            &Op::Scale(x, s) => {
                if let Some(gx) = acc!(x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += s * v);
                }
            }
            Op::Gelu { x, tanh } => {
                let xs = val(*x).data();
                if let Some(gx) = acc!(*x) {
                    for (((o, &v), &gv), &t) in gx.iter_mut().zip(xs).zip(g).zip(tanh) {
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                        *o += gv * d;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = val(*x).cols();
                let gn = val(*gain).data();
                if let Some(gg) = acc!(*gain) {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = acc!(*bias) {
                    for grow in g.chunks(c) {
                        gb.iter_mut().zip(grow).for_each(|(o, v)| *o += v);
                    }
                }
                if let Some(gx) = acc!(*x) {
                    let cf = c as f64;
                    for (r, (grow, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..c {
                            let dh = grow[j] * gn[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[j];
                        }
                        let is = inv_std[r];
                        let orow = &mut gx[r * c..(r + 1) * c];
                        for j in 0..c {
                            let dh = grow[j] * gn[j];
                            orow[j] += is / cf * (cf * dh - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                let c = node.value.cols();
                let p = node.value.data();
                if let Some(gx) = acc!(x) {
                    for ((orow, prow), grow) in gx.chunks_mut(c).zip(p.chunks(c)).zip(g.chunks(c)) {
                        let s = dot(prow, grow);
                        for j in 0..c {
                            orow[j] += prow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                seg,
                heads,
                probs,
                mask,
            } => {
                let (rows, dim) = dims(val(*q));
                let (seg, heads) = (*seg, *heads);
                let batch = rows / seg;
                let dh = dim / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let qs = val(*q).data();
                let ks = val(*k).data();
                let vs = val(*v).data();
                let mut gq = vec![0.0; rows * dim];
                let mut gk = vec![0.0; rows * dim];
                let mut gv = vec![0.0; rows * dim];
                let mut dp = vec![0.0; seg];
                for b in 0..batch {
                    for h in 0..heads {
                        let base = (b * heads + h) * seg * seg;
                        for i in 0..seg {
                            let gout = &g[(b * seg + i) * dim + h * dh..][..dh];
                            let prow = &probs[base + i * seg..base + (i + 1) * seg];
                            for j in 0..seg {
                                let m = mask.as_ref().map_or(1.0, |m| m[base + i * seg + j]);
                                let vj = &vs[(b * seg + j) * dim + h * dh..][..dh];
                                dp[j] = if m == 0.0 { 0.0 } else { dot(gout, vj) * m };
                                let w = prow[j] * m;
                                if w != 0.0 {
                                    let gvj = &mut gv[(b * seg + j) * dim + h * dh..][..dh];
                                    gvj.iter_mut().zip(gout).for_each(|(o, x)| *o += w * x);
                                }
                            }
                            let s = dot(prow, &dp);
                            let qi = &qs[(b * seg + i) * dim + h * dh..][..dh];
                            for j in 0..seg {
                                let ds = prow[j] * (dp[j] - s) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &ks[(b * seg + j) * dim + h * dh..][..dh];
                                let gqi = &mut gq[(b * seg + i) * dim + h * dh..][..dh];
                                gqi.iter_mut().zip(kj).for_each(|(o, x)| *o += ds * x);
                                let gkj = &mut gk[(b * seg + j) * dim + h * dh..][..dh];
                                gkj.iter_mut().zip(qi).for_each(|(o, x)| *o += ds * x);
                            }
                        }
                    }
                }
                for (idx, local) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if let Some(gi) = acc!(idx) {
                        gi.iter_mut().zip(&local).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::ThetaAverage { x, k, groups } => {
                let c = val(*x).cols();
                let kr = groups.len();
                let batch = val(*x).rows() / k;
                if let Some(gx) = acc!(*x) {
                    for b in 0..batch {
                        for (gi, &(start, len)) in groups.iter().enumerate() {
                            let grow = &g[(b * kr + gi) * c..][..c];
                            let inv = 1.0 / len as f64;
                            for t in start..start + len {
                                let orow = &mut gx[(b * k + t) * c..][..c];
                                orow.iter_mut().zip(grow).for_each(|(o, v)| *o += inv * v);
                            }
                        }
                    }
                }
            }
            Op::Embed {
                proj,
                modality,
                positional,
                present,
                k,
            } => {
                let kd = g.len() / present.len();
                let dim = kd / k;
                if let Some(p) = proj {
                    if let Some(gp) = acc!(*p) {
                        for (b, slot) in present.iter().enumerate() {
                            if let Some(i) = slot {
                                let src = &g[b * kd..(b + 1) * kd];
                                gp[i * kd..(i + 1) * kd]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(o, v)| *o += v);
                            }
                        }
                    }
                }
                if let Some(m) = modality {
                    if let Some(gm) = acc!(*m) {
                        for row in g.chunks(dim) {
                            gm.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                        }
                    }
                }
                if let Some(p) = positional {
                    if let Some(gp) = acc!(*p) {
                        for block in g.chunks(kd) {
                            gp.iter_mut().zip(block).for_each(|(o, v)| *o += v);
                        }
                    }
                }
            }
            Op::Interleave { parts, batch } => {
                let dim = node.value.cols();
                let n: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(idx, seg, shared) in parts {
                    if let Some(gi) = acc!(idx) {
                        for b in 0..*batch {
                            let src = &g[(b * n + offset) * dim..][..seg * dim];
                            let start = if shared { 0 } else { b * seg * dim };
                            gi[start..start + seg * dim]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(o, v)| *o += v);
                        }
                    }
                    offset += seg;
                }
            }
            Op::SegmentMean { x, seg, ranges } => {
                let c = val(*x).cols();
                let batch = val(*x).rows() / seg;
                let nr = ranges.len();
                if let Some(gx) = acc!(*x) {
                    for b in 0..batch {
                        for (ri, &(s, l)) in ranges.iter().enumerate() {
                            let grow = &g[(b * nr + ri) * c..][..c];
                            let inv = 1.0 / l as f64;
                            for t in s..s + l {
                                let orow = &mut gx[(b * seg + t) * c..][..c];
                                orow.iter_mut().zip(grow).for_each(|(o, v)| *o += inv * v);
                            }
                        }
                    }
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let c = val(*logits).cols();
                let r = labels.len() as f64;
                if let Some(gl) = acc!(*logits) {
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let y = if j == l { 1.0 } else { 0.0 };
                            gl[i * c + j] += g[0] * (probs[i * c + j] - y) / r;
                        }
                    }
                }
            }
            Op::KlDiv {
                student,
                teacher_probs,
                student_probs,
            } => {
                let r = val(*student).rows() as f64;
                if let Some(gs) = acc!(*student) {
                    for ((o, s), t) in gs.iter_mut().zip(student_probs).zip(teacher_probs) {
                        *o += g[0] * (s - t) / r;
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(idx, w) in terms {
                    if let Some(gi) = acc!(idx) {
                        gi.iter_mut().zip(g).for_each(|(o, v)| *o += w * v);
                    }
                }
            }
            &Op::MeanAll(x) => {
                let n = val(x).len() as f64;
                if let Some(gx) = acc!(x) {
                    gx.iter_mut().for_each(|o| *o += g[0] / n);
                }
            }
        }
        self.grads = grads;
        self.nodes = nodes;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    let inv = 1.0 / s;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Numerically stable softmax of a single vector.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(contract("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(crate::error::Error::InvalidValue(
            "softmax input is not finite".into(),
        ));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}
