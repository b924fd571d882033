//! Reverse-mode differentiation tape.
//!
//! A [`Tape`] is a Wengert list: every op appends a node holding the
//! forward value, references to its inputs and whatever the gradient
//! rule needs. Node ids grow monotonically, so the recorded graph is
//! acyclic and a reverse sweep visits nodes in reverse topological
//! order exactly once. A tape is single-owner and never shared across
//! threads; parallelism lives inside ops with fixed chunk boundaries.

use std::ops::Range;

use rayon::prelude::*;

use super::kernels::{
    channel_moments, col2im, combine_moments, gemm, gemm_at, gemm_bt, im2col, same_geom,
    valid_geom, ConvGeom,
};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// How batch statistics are scoped during a training-mode batch norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnScope {
    /// Shard moments are combined into one global (mean, var) before
    /// normalizing, so every row sees statistics of the whole batch.
    Global,
    /// Each shard normalizes with its own local moments.
    PerShard,
}

/// Statistics source for a batch-norm op.
pub enum BnMode<'a> {
    /// Compute moments from the batch, scoped over shard `bounds`.
    Train {
        bounds: &'a [Range<usize>],
        scope: BnScope,
    },
    /// Use externally supplied per-channel `(mean, var)`; these are
    /// treated as constants by the backward pass.
    Moments(&'a [(f64, f64)]),
}

#[derive(Debug, Clone)]
struct BnGroup {
    range: Range<usize>,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
enum BnBack {
    /// Moments were computed from the data; gradients flow through them.
    Stats { groups: Vec<BnGroup> },
    /// Moments were supplied; they are constants for backward.
    Frozen { mean: Vec<f64>, inv_std: Vec<f64> },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Dense {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Conv2d {
        x: usize,
        k: usize,
        stride: usize,
        geom: ConvGeom,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        back: BnBack,
        batch_moments: Option<Vec<(f64, f64)>>,
    },
    Relu {
        x: usize,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: f64,
    },
    L2NormalizeRows {
        x: usize,
        norms: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SumAll {
        x: usize,
    },
    MeanAll {
        x: usize,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Batch chunk size used by the parallel conv kernels. Fixed, so the
/// reduction tree is identical for every worker count.
const CONV_CHUNK: usize = 16;

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

    /// Records a leaf holding a copy of `t`. The leaf participates in
    /// backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), t.requires_grad(), Op::Leaf)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.set_requires_grad(false), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    /// Gradient accumulated at `v` by previous backward calls.
    pub fn grad_of(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.id].grad.as_deref()
    }

    /// Forward values of every node in recording order.
    pub fn node_values(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().map(|n| &n.value)
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var {
            id: self.nodes.len() - 1,
        }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn data(&self, id: usize) -> &[f64] {
        self.nodes[id].value.data()
    }

    fn shape(&self, id: usize) -> &[usize] {
        self.nodes[id].value.shape()
    }

    // ----- ops ---------------------------------------------------------

    /// Fully connected layer `y = x · w (+ b)`.
    ///
    /// `x` is `[B, I]`, `w` is `[I, O]`, `b` is `[O]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x.id).to_vec(), self.shape(w.id).to_vec());
        if xs.len() != 2 {
            return Err(Error::dimension("dense", 0, format!("input must be 2-d, got {xs:?}")));
        }
        if ws.len() != 2 || ws[0] != xs[1] {
            return Err(Error::dimension(
                "dense",
                1,
                format!("input columns {} vs weight rows {:?}", xs[1], ws),
            ));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[1]);
        if let Some(bias) = b {
            let bs = self.shape(bias.id);
            if bs != [out] {
                return Err(Error::dimension(
                    "dense",
                    0,
                    format!("bias shape {bs:?} vs output width {out}"),
                ));
            }
        }
        let mut y = vec![0.0; batch * out];
        gemm(batch, inp, out, self.data(x.id), self.data(w.id), &mut y, 1.0, 0.0);
        if let Some(bias) = b {
            let bd = self.data(bias.id);
            for row in y.chunks_mut(out) {
                for (v, add) in row.iter_mut().zip(bd) {
                    *v += add;
                }
            }
        }
        let needs = self.needs(x.id) || self.needs(w.id) || b.is_some_and(|bb| self.needs(bb.id));
        Ok(self.push(
            Tensor::from_vec(&[batch, out], y)?,
            needs,
            Op::Dense {
                x: x.id,
                w: w.id,
                b: b.map(|bb| bb.id),
            },
        ))
    }

    /// Cross-correlation of `x: [B, C, H, W]` with `kernel: [K, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be positive"));
        }
        let xs = self.shape(x.id).to_vec();
        let ks = self.shape(kernel.id).to_vec();
        if xs.len() != 4 {
            return Err(Error::dimension("conv2d", 0, format!("input must be 4-d, got {xs:?}")));
        }
        if ks.len() != 4 {
            return Err(Error::dimension("conv2d", 0, format!("kernel must be 4-d, got {ks:?}")));
        }
        if ks[1] != xs[1] {
            return Err(Error::dimension(
                "conv2d",
                1,
                format!("input channels {} vs kernel channels {}", xs[1], ks[1]),
            ));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, kh, kw) = (ks[0], ks[2], ks[3]);
        let geom = match padding {
            Padding::Same => same_geom(h, w, kh, kw, stride),
            Padding::Valid => match valid_geom(h, w, kh, kw, stride) {
                Some(g) => g,
                None => {
                    let axis = if kh > h { 2 } else { 3 };
                    return Err(Error::dimension(
                        "conv2d",
                        axis,
                        format!("kernel {kh}x{kw} exceeds input {h}x{w} with valid padding"),
                    ));
                }
            },
        };
        let patch = c * kh * kw;
        let plane = geom.out_h * geom.out_w;
        let mut y = vec![0.0; b * k * plane];
        let xd = self.data(x.id);
        let kd = self.data(kernel.id);
        let img_len = c * h * w;
        y.par_chunks_mut(CONV_CHUNK * k * plane)
            .enumerate()
            .for_each(|(chunk_idx, out_slab)| {
                let mut col = vec![0.0; plane * patch];
                let mut out_t = vec![0.0; plane * k];
                let base = chunk_idx * CONV_CHUNK;
                for (i, out_img) in out_slab.chunks_mut(k * plane).enumerate() {
                    let bi = base + i;
                    im2col(&xd[bi * img_len..(bi + 1) * img_len], c, h, w, kh, kw, stride, geom, &mut col);
                    // out_t[plane, k] = col[plane, patch] * kernel[k, patch]^T
                    gemm_bt(plane, patch, k, &col, kd, &mut out_t, 1.0, 0.0);
                    // transpose to [k, plane]
                    for p in 0..plane {
                        for ch in 0..k {
                            out_img[ch * plane + p] = out_t[p * k + ch];
                        }
                    }
                }
            });
        let needs = self.needs(x.id) || self.needs(kernel.id);
        Ok(self.push(
            Tensor::from_vec(&[b, k, geom.out_h, geom.out_w], y)?,
            needs,
            Op::Conv2d {
                x: x.id,
                k: kernel.id,
                stride,
                geom,
            },
        ))
    }

    /// Batch normalization over `[B, C, H, W]` with per-channel
    /// `gamma`/`beta`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: BnMode<'_>,
    ) -> Result<Var> {
        let xs = self.shape(x.id).to_vec();
        if xs.len() != 4 {
            return Err(Error::dimension("batch_norm", 0, format!("input must be 4-d, got {xs:?}")));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = self.shape(v.id);
            if s != [c] {
                return Err(Error::dimension(
                    "batch_norm",
                    1,
                    format!("{name} shape {s:?} vs {c} channels"),
                ));
            }
        }
        let plane = h * w;
        let (back, batch_moments) = match mode {
            BnMode::Train { bounds, scope } => {
                if bounds.is_empty() {
                    return Err(Error::contract("batch_norm: empty shard bounds"));
                }
                let covered: usize = bounds.iter().map(|r| r.len()).sum();
                if covered != b || bounds.iter().any(|r| r.end > b) {
                    return Err(Error::contract(format!(
                        "batch_norm: shard bounds {bounds:?} do not tile batch of {b}"
                    )));
                }
                let shard_stats: Vec<Vec<(f64, f64)>> = bounds
                    .iter()
                    .map(|r| channel_moments(self.data(x.id), c, h, w, r.clone()))
                    .collect();
                let combined: Vec<(f64, f64)> = (0..c)
                    .map(|ch| {
                        let per: Vec<(usize, f64, f64)> = bounds
                            .iter()
                            .zip(&shard_stats)
                            .map(|(r, st)| (r.len() * plane, st[ch].0, st[ch].1))
                            .collect();
                        combine_moments(&per)
                    })
                    .collect();
                let groups = match scope {
                    BnScope::Global => vec![BnGroup {
                        range: 0..b,
                        mean: combined.iter().map(|m| m.0).collect(),
                        inv_std: combined.iter().map(|m| 1.0 / (m.1 + eps).sqrt()).collect(),
                    }],
                    BnScope::PerShard => bounds
                        .iter()
                        .zip(&shard_stats)
                        .map(|(r, st)| BnGroup {
                            range: r.clone(),
                            mean: st.iter().map(|m| m.0).collect(),
                            inv_std: st.iter().map(|m| 1.0 / (m.1 + eps).sqrt()).collect(),
                        })
                        .collect(),
                };
                (BnBack::Stats { groups }, Some(combined))
            }
            BnMode::Moments(moments) => {
                if moments.len() != c {
                    return Err(Error::dimension(
                        "batch_norm",
                        1,
                        format!("{} supplied moments vs {} channels", moments.len(), c),
                    ));
                }
                if let Some((i, m)) = moments.iter().enumerate().find(|(_, m)| m.1 < 0.0) {
                    return Err(Error::contract(format!(
                        "batch_norm: negative variance {} for channel {i}",
                        m.1
                    )));
                }
                (
                    BnBack::Frozen {
                        mean: moments.iter().map(|m| m.0).collect(),
                        inv_std: moments.iter().map(|m| 1.0 / (m.1 + eps).sqrt()).collect(),
                    },
                    None,
                )
            }
        };

        let xd = self.data(x.id);
        let gd = self.data(gamma.id);
        let bd = self.data(beta.id);
        let mut y = vec![0.0; xd.len()];
        let apply = |y: &mut [f64], range: Range<usize>, mean: &[f64], inv_std: &[f64]| {
            for bi in range {
                for ch in 0..c {
                    let base = (bi * c + ch) * plane;
                    let (m, s, g, bt) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                    for off in base..base + plane {
                        y[off] = g * (xd[off] - m) * s + bt;
                    }
                }
            }
        };
        match &back {
            BnBack::Stats { groups } => {
                for grp in groups {
                    apply(&mut y, grp.range.clone(), &grp.mean, &grp.inv_std);
                }
            }
            BnBack::Frozen { mean, inv_std } => apply(&mut y, 0..b, mean, inv_std),
        }
        let needs = self.needs(x.id) || self.needs(gamma.id) || self.needs(beta.id);
        Ok(self.push(
            Tensor::from_vec(&xs, y)?,
            needs,
            Op::BatchNorm {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                back,
                batch_moments,
            },
        ))
    }

    /// Combined per-channel batch moments recorded by a training-mode
    /// batch norm, for running-statistic updates.
    pub fn bn_batch_moments(&self, v: Var) -> Option<&[(f64, f64)]> {
        match &self.nodes[v.id].op {
            Op::BatchNorm { batch_moments, .. } => batch_moments.as_deref(),
            _ => None,
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y: Vec<f64> = self.data(x.id).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x.id).to_vec();
        let needs = self.needs(x.id);
        self.push(
            Tensor::from_vec(&shape, y).expect("same shape"),
            needs,
            Op::Relu { x: x.id },
        )
    }

    /// Max pooling over `[B, C, H, W]` with square kernel `k`.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, padding: Padding) -> Result<Var> {
        let xs = self.shape(x.id).to_vec();
        if xs.len() != 4 {
            return Err(Error::dimension("max_pool2d", 0, format!("input must be 4-d, got {xs:?}")));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let geom = match padding {
            Padding::Same => same_geom(h, w, k, k, stride),
            Padding::Valid => valid_geom(h, w, k, k, stride).ok_or_else(|| {
                Error::dimension("max_pool2d", 2, format!("window {k} exceeds input {h}x{w}"))
            })?,
        };
        let plane = geom.out_h * geom.out_w;
        let xd = self.data(x.id);
        let mut y = vec![0.0; b * c * plane];
        let mut argmax = vec![0usize; b * c * plane];
        for bi in 0..b {
            for ch in 0..c {
                let in_base = (bi * c + ch) * h * w;
                let out_base = (bi * c + ch) * plane;
                for oy in 0..geom.out_h {
                    for ox in 0..geom.out_w {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - geom.pad_top as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - geom.pad_left as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = in_base + iy as usize * w + ix as usize;
                                if xd[idx] > best {
                                    best = xd[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        y[out_base + oy * geom.out_w + ox] = best;
                        argmax[out_base + oy * geom.out_w + ox] = best_idx;
                    }
                }
            }
        }
        let needs = self.needs(x.id);
        Ok(self.push(
            Tensor::from_vec(&[b, c, geom.out_h, geom.out_w], y)?,
            needs,
            Op::MaxPool2d { x: x.id, argmax },
        ))
    }

    /// Spatial mean over `[B, C, H, W]`, producing `[B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x.id).to_vec();
        if xs.len() != 4 {
            return Err(Error::dimension("global_avg_pool", 0, format!("input must be 4-d, got {xs:?}")));
        }
        let (b, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let xd = self.data(x.id);
        let mut y = vec![0.0; b * c];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                let mut sum = 0.0;
                for v in &xd[base..base + plane] {
                    sum += v;
                }
                y[bi * c + ch] = sum / plane as f64;
            }
        }
        let needs = self.needs(x.id);
        Ok(self.push(
            Tensor::from_vec(&[b, c], y)?,
            needs,
            Op::GlobalAvgPool { x: x.id },
        ))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a.id) != self.shape(b.id) {
            return Err(Error::dimension(
                "add",
                0,
                format!("{:?} vs {:?}", self.shape(a.id), self.shape(b.id)),
            ));
        }
        let y: Vec<f64> = self
            .data(a.id)
            .iter()
            .zip(self.data(b.id))
            .map(|(x, z)| x + z)
            .collect();
        let shape = self.shape(a.id).to_vec();
        let needs = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(
            Tensor::from_vec(&shape, y)?,
            needs,
            Op::Add { a: a.id, b: b.id },
        ))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a.id) != self.shape(b.id) {
            return Err(Error::dimension(
                "mul",
                0,
                format!("{:?} vs {:?}", self.shape(a.id), self.shape(b.id)),
            ));
        }
        let y: Vec<f64> = self
            .data(a.id)
            .iter()
            .zip(self.data(b.id))
            .map(|(x, z)| x * z)
            .collect();
        let shape = self.shape(a.id).to_vec();
        let needs = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(
            Tensor::from_vec(&shape, y)?,
            needs,
            Op::Mul { a: a.id, b: b.id },
        ))
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y: Vec<f64> = self.data(x.id).iter().map(|v| v * c).collect();
        let shape = self.shape(x.id).to_vec();
        let needs = self.needs(x.id);
        self.push(
            Tensor::from_vec(&shape, y).expect("same shape"),
            needs,
            Op::Scale { x: x.id, c },
        )
    }

    /// Normalizes each row of `[N, D]` to unit Euclidean norm. Zero rows
    /// stay zero and contribute zero gradient.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x.id).to_vec();
        if xs.len() != 2 {
            return Err(Error::dimension("l2_normalize", 0, format!("input must be 2-d, got {xs:?}")));
        }
        let (n, d) = (xs[0], xs[1]);
        let xd = self.data(x.id);
        let mut y = vec![0.0; n * d];
        let mut norms = vec![0.0; n];
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[i] = norm;
            if norm > 0.0 {
                for (o, v) in y[i * d..(i + 1) * d].iter_mut().zip(row) {
                    *o = v / norm;
                }
            }
        }
        let needs = self.needs(x.id);
        Ok(self.push(
            Tensor::from_vec(&xs, y)?,
            needs,
            Op::L2NormalizeRows { x: x.id, norms },
        ))
    }

    /// Mean softmax cross-entropy of `logits: [B, K]` against integer
    /// labels, producing a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let xs = self.shape(logits.id).to_vec();
        if xs.len() != 2 {
            return Err(Error::dimension("softmax_cross_entropy", 0, format!("logits must be 2-d, got {xs:?}")));
        }
        let (b, k) = (xs[0], xs[1]);
        if labels.len() != b {
            return Err(Error::contract(format!(
                "softmax_cross_entropy: {} labels for batch of {b}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(format!(
                "softmax_cross_entropy: label {bad} out of range for {k} classes"
            )));
        }
        let xd = self.data(logits.id);
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for bi in 0..b {
            let row = &xd[bi * k..(bi + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (p, v) in probs[bi * k..(bi + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp();
                denom += *p;
            }
            for p in probs[bi * k..(bi + 1) * k].iter_mut() {
                *p /= denom;
            }
            loss -= probs[bi * k + labels[bi]].ln();
        }
        loss /= b as f64;
        let needs = self.needs(logits.id);
        Ok(self.push(
            Tensor::scalar(loss),
            needs,
            Op::SoftmaxCrossEntropy {
                logits: logits.id,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut sum = 0.0;
        for v in self.data(x.id) {
            sum += v;
        }
        let needs = self.needs(x.id);
        self.push(Tensor::scalar(sum), needs, Op::SumAll { x: x.id })
    }

    /// Mean of all elements, producing a scalar.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.data(x.id).len();
        let mut sum = 0.0;
        for v in self.data(x.id) {
            sum += v;
        }
        let needs = self.needs(x.id);
        self.push(Tensor::scalar(sum / n as f64), needs, Op::MeanAll { x: x.id })
    }

    // ----- backward ----------------------------------------------------

    /// Backpropagates from a scalar loss, seeding its gradient with 1.
    ///
    /// Gradients add into any already present from earlier calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.id].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.id].value.shape()
            )));
        }
        self.seed_and_sweep(loss, &[1.0])
    }

    /// Backpropagates from `v` with an externally computed cotangent,
    /// for losses whose gradient is produced analytically off-tape.
    pub fn backward_with(&mut self, v: Var, cotangent: &[f64]) -> Result<()> {
        if cotangent.len() != self.nodes[v.id].value.len() {
            return Err(Error::contract(format!(
                "cotangent length {} vs value length {}",
                cotangent.len(),
                self.nodes[v.id].value.len()
            )));
        }
        self.seed_and_sweep(v, cotangent)
    }

    fn seed_and_sweep(&mut self, from: Var, seed: &[f64]) -> Result<()> {
        // Per-sweep adjoint buffers are transient; only leaves keep a
        // persistent grad store, which accumulates across calls.
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        adj[from.id] = Some(seed.to_vec());

        for id in (0..=from.id).rev() {
            let Some(go) = adj[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                let store = node.grad.get_or_insert_with(|| vec![0.0; node.value.len()]);
                for (g, d) in store.iter_mut().zip(&go) {
                    *g += d;
                }
                continue;
            }
            self.propagate(id, &go, &mut adj)?;
        }
        Ok(())
    }

    fn bump(&self, adj: &mut [Option<Vec<f64>>], id: usize, delta: &[f64]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let slot = adj[id].get_or_insert_with(|| vec![0.0; self.nodes[id].value.len()]);
        for (g, d) in slot.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn propagate(&mut self, id: usize, go: &[f64], adj: &mut Vec<Option<Vec<f64>>>) -> Result<()> {
        // Ops are cloned cheaply by reference juggling: records own their
        // saved buffers, values stay in place.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (batch, inp) = (self.shape(*x)[0], self.shape(*x)[1]);
                let out = self.shape(*w)[1];
                if self.needs(*x) {
                    let mut dx = vec![0.0; batch * inp];
                    gemm_bt(batch, out, inp, go, self.data(*w), &mut dx, 1.0, 0.0);
                    self.bump(adj, *x, &dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; inp * out];
                    gemm_at(inp, batch, out, self.data(*x), go, &mut dw, 1.0, 0.0);
                    self.bump(adj, *w, &dw);
                }
                if let Some(bias) = b {
                    if self.needs(*bias) {
                        let mut db = vec![0.0; out];
                        for row in go.chunks(out) {
                            for (d, g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        self.bump(adj, *bias, &db);
                    }
                }
            }
            Op::Conv2d { x, k, stride, geom } => {
                let xs = self.shape(*x).to_vec();
                let ks = self.shape(*k).to_vec();
                let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (kout, kh, kw) = (ks[0], ks[2], ks[3]);
                let patch = c * kh * kw;
                let plane = geom.out_h * geom.out_w;
                let img_len = c * h * w;
                let xd = self.data(*x);
                let kd = self.data(*k);

                if self.needs(*x) {
                    let mut dx = vec![0.0; b * img_len];
                    dx.par_chunks_mut(CONV_CHUNK * img_len)
                        .enumerate()
                        .for_each(|(chunk_idx, dx_slab)| {
                            let mut go_t = vec![0.0; plane * kout];
                            let mut dcol = vec![0.0; plane * patch];
                            let base = chunk_idx * CONV_CHUNK;
                            for (i, dx_img) in dx_slab.chunks_mut(img_len).enumerate() {
                                let bi = base + i;
                                let gslice = &go[bi * kout * plane..(bi + 1) * kout * plane];
                                for ch in 0..kout {
                                    for p in 0..plane {
                                        go_t[p * kout + ch] = gslice[ch * plane + p];
                                    }
                                }
                                // dcol[plane, patch] = go_t[plane, kout] * kernel[kout, patch]
                                gemm(plane, kout, patch, &go_t, kd, &mut dcol, 1.0, 0.0);
                                col2im(&dcol, c, h, w, kh, kw, *stride, *geom, dx_img);
                            }
                        });
                    self.bump(adj, *x, &dx);
                }
                if self.needs(*k) {
                    let chunks = b.div_ceil(CONV_CHUNK);
                    let partials: Vec<Vec<f64>> = (0..chunks)
                        .into_par_iter()
                        .map(|chunk_idx| {
                            let mut col = vec![0.0; plane * patch];
                            let mut go_t = vec![0.0; plane * kout];
                            let mut dk = vec![0.0; kout * patch];
                            let lo = chunk_idx * CONV_CHUNK;
                            let hi = (lo + CONV_CHUNK).min(b);
                            for bi in lo..hi {
                                im2col(&xd[bi * img_len..(bi + 1) * img_len], c, h, w, kh, kw, *stride, *geom, &mut col);
                                let gslice = &go[bi * kout * plane..(bi + 1) * kout * plane];
                                for ch in 0..kout {
                                    for p in 0..plane {
                                        go_t[p * kout + ch] = gslice[ch * plane + p];
                                    }
                                }
                                // dk[kout, patch] += go_t[plane, kout]^T * col[plane, patch]
                                gemm_at(kout, plane, patch, &go_t, &col, &mut dk, 1.0, 1.0);
                            }
                            dk
                        })
                        .collect();
                    let mut dk = vec![0.0; kout * patch];
                    for partial in &partials {
                        for (d, p) in dk.iter_mut().zip(partial) {
                            *d += p;
                        }
                    }
                    self.bump(adj, *k, &dk);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                back,
                ..
            } => {
                let xs = self.shape(*x).to_vec();
                let (b, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                let xd = self.data(*x);
                let gd = self.data(*gamma);
                let mut dx = vec![0.0; xd.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                match back {
                    BnBack::Stats { groups } => {
                        for grp in groups {
                            let n = (grp.range.len() * plane) as f64;
                            for ch in 0..c {
                                let (m, s) = (grp.mean[ch], grp.inv_std[ch]);
                                let mut s1 = 0.0;
                                let mut s2 = 0.0;
                                for bi in grp.range.clone() {
                                    let base = (bi * c + ch) * plane;
                                    for off in base..base + plane {
                                        let xh = (xd[off] - m) * s;
                                        s1 += go[off];
                                        s2 += go[off] * xh;
                                    }
                                }
                                dgamma[ch] += s2;
                                dbeta[ch] += s1;
                                let g = gd[ch] * s;
                                let (c1, c2) = (s1 / n, s2 / n);
                                for bi in grp.range.clone() {
                                    let base = (bi * c + ch) * plane;
                                    for off in base..base + plane {
                                        let xh = (xd[off] - m) * s;
                                        dx[off] = g * (go[off] - c1 - xh * c2);
                                    }
                                }
                            }
                        }
                    }
                    BnBack::Frozen { mean, inv_std } => {
                        for ch in 0..c {
                            let (m, s) = (mean[ch], inv_std[ch]);
                            let g = gd[ch] * s;
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for bi in 0..b {
                                let base = (bi * c + ch) * plane;
                                for off in base..base + plane {
                                    let xh = (xd[off] - m) * s;
                                    s1 += go[off];
                                    s2 += go[off] * xh;
                                    dx[off] = g * go[off];
                                }
                            }
                            dgamma[ch] += s2;
                            dbeta[ch] += s1;
                        }
                    }
                }
                if self.needs(*x) {
                    self.bump(adj, *x, &dx);
                }
                if self.needs(*gamma) {
                    self.bump(adj, *gamma, &dgamma);
                }
                if self.needs(*beta) {
                    self.bump(adj, *beta, &dbeta);
                }
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = self
                    .data(*x)
                    .iter()
                    .zip(go)
                    .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.bump(adj, *x, &dx);
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![0.0; self.data(*x).len()];
                for (g, idx) in go.iter().zip(argmax) {
                    dx[*idx] += g;
                }
                self.bump(adj, *x, &dx);
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.shape(*x).to_vec();
                let (b, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                let mut dx = vec![0.0; b * c * plane];
                for bi in 0..b {
                    for ch in 0..c {
                        let g = go[bi * c + ch] / plane as f64;
                        let base = (bi * c + ch) * plane;
                        for d in &mut dx[base..base + plane] {
                            *d = g;
                        }
                    }
                }
                self.bump(adj, *x, &dx);
            }
            Op::Add { a, b } => {
                self.bump(adj, *a, go);
                self.bump(adj, *b, go);
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da: Vec<f64> = self.data(*b).iter().zip(go).map(|(v, g)| v * g).collect();
                    self.bump(adj, *a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = self.data(*a).iter().zip(go).map(|(v, g)| v * g).collect();
                    self.bump(adj, *b, &db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = go.iter().map(|g| g * c).collect();
                self.bump(adj, *x, &dx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let d = self.shape(*x)[1];
                let xd = self.data(*x);
                let mut dx = vec![0.0; xd.len()];
                for (i, norm) in norms.iter().enumerate() {
                    if *norm == 0.0 {
                        continue;
                    }
                    let row = &xd[i * d..(i + 1) * d];
                    let grow = &go[i * d..(i + 1) * d];
                    let mut dot = 0.0;
                    for (v, g) in row.iter().zip(grow) {
                        dot += v * g / norm;
                    }
                    for j in 0..d {
                        dx[i * d + j] = (grow[j] - row[j] / norm * dot) / norm;
                    }
                }
                self.bump(adj, *x, &dx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let b = labels.len();
                let scale = go[0] / b as f64;
                let mut dl = vec![0.0; probs.len()];
                for bi in 0..b {
                    for j in 0..k {
                        let onehot = if labels[bi] == j { 1.0 } else { 0.0 };
                        dl[bi * k + j] = (probs[bi * k + j] - onehot) * scale;
                    }
                }
                self.bump(adj, *logits, &dl);
            }
            Op::SumAll { x } => {
                let dx = vec![go[0]; self.data(*x).len()];
                self.bump(adj, *x, &dx);
            }
            Op::MeanAll { x } => {
                let n = self.data(*x).len();
                let dx = vec![go[0] / n as f64; n];
                self.bump(adj, *x, &dx);
            }
        }
        self.nodes[id].op = op;
        Ok(())
    }
}
