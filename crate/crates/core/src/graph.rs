//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every op appends a node holding its forward value
//! and whatever it needs for the backward pass. Nodes are appended in
//! topological order, so [`Graph::backward`] walks the tape once in reverse.
//! Gradients are persisted for leaves only and accumulate across repeated
//! `backward` calls until [`Graph::zero_grad`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{gemm_nn, gemm_nt, gemm_tn};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution over `[N, C, H, W]` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Channel layout for batch normalization: element `(o, c, i)` lives at
/// `(o * channels + c) * inner + i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnLayout {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

impl BnLayout {
    /// `[rows, channels]` matrices.
    pub fn rows(rows: usize, channels: usize) -> Self {
        BnLayout {
            outer: rows,
            channels,
            inner: 1,
        }
    }

    /// `[N, C, H, W]` feature maps.
    pub fn nchw(shape: &[usize]) -> Self {
        BnLayout {
            outer: shape[0],
            channels: shape[1],
            inner: shape[2..].iter().product(),
        }
    }

    fn count(&self) -> usize {
        self.outer * self.inner
    }
}

/// Per-channel batch statistics observed by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// A bilinear tap: four `(flat spatial index, weight)` pairs.
type Taps<T> = [(u32, T); 4];

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        target: Vec<T>,
        rows: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Bilinear {
        x: Var,
        batch: usize,
        channels: usize,
        plane: usize,
        taps: Vec<Taps<T>>,
    },
    Concat {
        parts: Vec<Var>,
        widths: Vec<usize>,
        rows: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
        width: usize,
    },
    RepeatRows {
        x: Var,
        times: usize,
        width: usize,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape. See the module docs.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf holding a copy of `t`; it is differentiable iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::Shape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        self.input(shape, data, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Accumulated gradient of a differentiable leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- ops ------------------------------------------------------------

    /// Matrix product of `[m, k] · [k, n]`, or batched `[B, m, k] · [B, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b1, m, k], [b2, k2, n]) if k == k2 && b1 == b2 => (*b1, *m, *k, *n),
            _ => return Err(Error::dim("matmul", &sa, &sb)),
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for bi in 0..batch {
                gemm_nn(
                    m,
                    k,
                    n,
                    &av[bi * m * k..(bi + 1) * m * k],
                    &bv[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::MatMul { a, b, batch, m, k, n }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let w = last_dim(self.shape(x));
        if numel(self.shape(bias)) != w {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let bv = self.value(bias);
        let out = self
            .value(x)
            .chunks(w)
            .flat_map(|row| row.iter().zip(bv).map(|(a, b)| *a + *b))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias { x, bias }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|x| *x * s).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), rg)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let w = last_dim(self.shape(a));
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(w) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Softmax(a), rg)
    }

    /// Mean over rows of `-Σ_k target · log softmax(logits)`.
    ///
    /// Every target row must sum to one within `1e-5`.
    pub fn cross_entropy(&mut self, logits: Var, target: &[T]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || target.len() != numel(&shape) {
            return Err(Error::dim("cross_entropy", &shape, &[target.len()]));
        }
        let (rows, k) = (shape[0], shape[1]);
        for (r, row) in target.chunks(k.max(1)).enumerate() {
            let s: f64 = row.iter().map(|v| v.as_f64()).sum();
            if (s - 1.0).abs() > 1e-5 || row.iter().any(|v| *v < T::zero()) {
                return Err(Error::Validation(alloc::format!(
                    "target row {r} is not a distribution (sum {s})"
                )));
            }
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = T::zero();
        for (prow, trow) in probs.chunks_mut(k).zip(target.chunks(k)) {
            let lse = log_sum_exp(prow);
            let mut acc = T::zero();
            for (p, t) in prow.iter_mut().zip(trow) {
                let logp = *p - lse;
                if *t != T::zero() {
                    acc = acc - *t * logp;
                }
                *p = logp.exp();
            }
            total = total + acc;
        }
        let loss = if rows == 0 { T::zero() } else { total / T::lit(rows as f64) };
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                probs,
                target: target.to_vec(),
                rows,
            },
            rg,
        ))
    }

    /// 2-D convolution of `x: [N, C, H, W]` with `w: [O, C, k, k]` and an
    /// optional bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let ok = sx.len() == 4
            && sw.len() == 4
            && sw[1] == sx[1]
            && sw[2] == sw[3]
            && stride >= 1
            && sx[2] + 2 * pad >= sw[2]
            && sx[3] + 2 * pad >= sw[3];
        if !ok {
            return Err(Error::dim("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if numel(self.shape(b)) != sw[0] {
                return Err(Error::dim("conv2d bias", &sw, self.shape(b)));
            }
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_channels: sx[1],
            height: sx[2],
            width: sx[3],
            out_channels: sw[0],
            kernel: sw[2],
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let plane = oh * ow;
        let patch = geom.patch();
        let in_sz = geom.in_channels * geom.height * geom.width;
        let mut out = vec![T::zero(); geom.batch * geom.out_channels * plane];
        let mut cols = vec![T::zero(); patch * plane];
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            let bv = b.map(|b| &self.nodes[b.0].value);
            for n in 0..geom.batch {
                im2col(&geom, &xv[n * in_sz..(n + 1) * in_sz], &mut cols);
                let o = &mut out[n * geom.out_channels * plane..(n + 1) * geom.out_channels * plane];
                if let Some(bv) = bv {
                    for (oc, chunk) in o.chunks_mut(plane).enumerate() {
                        chunk.iter_mut().for_each(|v| *v = bv[oc]);
                    }
                }
                gemm_nn(geom.out_channels, patch, plane, wv, &cols, o);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.map_or(false, |b| self.rg(b));
        Ok(self.push(
            vec![geom.batch, geom.out_channels, oh, ow],
            out,
            Op::Conv2d { x, w, b, geom },
            rg,
        ))
    }

    /// Samples every map of `x: [N, C, H, W]` at normalized `(y, x)` points
    /// in `[0, 1]²` (pixel centers at `(i + 0.5) / extent`), returning
    /// `[N · P, C]` with row `n · P + p`. Coordinates outside the map are
    /// clamped to the border. Differentiable in `x` only.
    pub fn bilinear_sample(&mut self, x: Var, points: &[(f64, f64)]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (batch, channels, h, w) = match sx.as_slice() {
            [n, c, h, w] => (*n, *c, *h, *w),
            [c, h, w] => (1, *c, *h, *w),
            _ => return Err(Error::dim("bilinear_sample", &sx, &[4])),
        };
        let taps: Vec<Taps<T>> = points.iter().map(|&(py, px)| bilinear_taps(py, px, h, w)).collect();
        let plane = h * w;
        let np = points.len();
        let mut out = vec![T::zero(); batch * np * channels];
        {
            let xv = &self.nodes[x.0].value;
            for n in 0..batch {
                for (p, tp) in taps.iter().enumerate() {
                    let orow = &mut out[(n * np + p) * channels..(n * np + p + 1) * channels];
                    for (c, o) in orow.iter_mut().enumerate() {
                        let base = (n * channels + c) * plane;
                        let mut acc = T::zero();
                        for &(idx, wt) in tp {
                            acc = acc + wt * xv[base + idx as usize];
                        }
                        *o = acc;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![batch * np, channels],
            out,
            Op::Bilinear {
                x,
                batch,
                channels,
                plane,
                taps,
            },
            rg,
        ))
    }

    /// Concatenates `[rows, w_i]` inputs along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Config("concat of zero tensors".into()));
        }
        let rows = numel(self.shape(parts[0])) / last_dim(self.shape(parts[0])).max(1);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let w = last_dim(s);
            if numel(s) != rows * w {
                return Err(Error::dim("concat", self.shape(parts[0]), s));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            vec![rows, total],
            out,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
                rows,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(a)) {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().fold(T::zero(), |acc, v| acc + *v);
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.value(a).iter().fold(T::zero(), |acc, v| acc + *v) / T::lit(n as f64);
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Mean(a), rg)
    }

    /// Batch normalization. With `running = None` the batch statistics are
    /// used and returned; otherwise the supplied `(mean, var)` are treated
    /// as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let c = layout.channels;
        if numel(self.shape(x)) != layout.outer * c * layout.inner
            || numel(self.shape(gamma)) != c
            || numel(self.shape(beta)) != c
        {
            return Err(Error::dim("batch_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let count = layout.count().max(1);
        let (mean, var, train) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), false),
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for o in 0..layout.outer {
                    for (ch, m) in mean.iter_mut().enumerate() {
                        let base = (o * c + ch) * layout.inner;
                        for v in &xv[base..base + layout.inner] {
                            *m = *m + *v;
                        }
                    }
                }
                let inv_n = T::lit(1.0 / count as f64);
                mean.iter_mut().for_each(|m| *m = *m * inv_n);
                for o in 0..layout.outer {
                    for (ch, s) in var.iter_mut().enumerate() {
                        let base = (o * c + ch) * layout.inner;
                        for v in &xv[base..base + layout.inner] {
                            let d = *v - mean[ch];
                            *s = *s + d * d;
                        }
                    }
                }
                var.iter_mut().for_each(|s| *s = *s * inv_n);
                (mean, var, true)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..layout.outer {
            for ch in 0..c {
                let base = (o * c + ch) * layout.inner;
                for i in base..base + layout.inner {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            self.shape(x).to_vec(),
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, train.then_some(BatchStats { mean, var })))
    }

    /// Selects rows of a `[n, w]` matrix (indices may repeat).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let width = last_dim(&s);
        let n = numel(&s) / width.max(1);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(alloc::format!("row index {bad} out of range for {n} rows")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&xv[i * width..(i + 1) * width]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![idx.len(), width],
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
                width,
            },
            rg,
        ))
    }

    /// Repeats every row of `[n, w]` `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let s = self.shape(x).to_vec();
        let width = last_dim(&s);
        let n = numel(&s) / width.max(1);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * times * width);
        for row in xv.chunks(width) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        let rg = self.rg(x);
        self.push(vec![n * times, width], out, Op::RepeatRows { x, times, width }, rg)
    }

    // ---- backward -------------------------------------------------------

    /// Backpropagates from a scalar `loss`, adding `∂loss/∂leaf` into every
    /// differentiable leaf's gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, g, &mut adj);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: Vec<T>, adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        // accumulate into the adjoint of `v`, allocating lazily
        let acc = |adj: &mut [Option<Vec<T>>], v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {
                let slot = self.grads[i].get_or_insert_with(|| vec![T::zero(); g.len()]);
                for (s, d) in slot.iter_mut().zip(&g) {
                    *s = *s + *d;
                }
            }
            &Op::MatMul { a, b, batch, m, k, n } => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                acc(adj, a, &mut |da| {
                    for bi in 0..batch {
                        gemm_nt(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[bi * k * n..(bi + 1) * k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                });
                acc(adj, b, &mut |db| {
                    for bi in 0..batch {
                        gemm_tn(
                            k,
                            m,
                            n,
                            &av[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut db[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(adj, a, &mut |d| add_into(d, &g));
                acc(adj, b, &mut |d| add_into(d, &g));
            }
            &Op::AddBias { x, bias } => {
                acc(adj, x, &mut |d| add_into(d, &g));
                let w = nodes[bias.0].value.len();
                acc(adj, bias, &mut |d| {
                    for row in g.chunks(w) {
                        add_into(d, row);
                    }
                });
            }
            &Op::Mul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                acc(adj, a, &mut |d| {
                    for ((d, gi), bi) in d.iter_mut().zip(&g).zip(bv) {
                        *d = *d + *gi * *bi;
                    }
                });
                acc(adj, b, &mut |d| {
                    for ((d, gi), ai) in d.iter_mut().zip(&g).zip(av) {
                        *d = *d + *gi * *ai;
                    }
                });
            }
            &Op::Scale(a, s) => {
                acc(adj, a, &mut |d| {
                    for (d, gi) in d.iter_mut().zip(&g) {
                        *d = *d + *gi * s;
                    }
                });
            }
            &Op::Relu(a) => {
                let av = &nodes[a.0].value;
                acc(adj, a, &mut |d| {
                    for ((d, gi), x) in d.iter_mut().zip(&g).zip(av) {
                        if *x > T::zero() {
                            *d = *d + *gi;
                        }
                    }
                });
            }
            &Op::Softmax(a) => {
                let y = &node.value;
                let w = last_dim(&node.shape);
                acc(adj, a, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(w).zip(g.chunks(w)).zip(y.chunks(w)) {
                        let s = grow.iter().zip(yrow).fold(T::zero(), |s, (gi, yi)| s + *gi * *yi);
                        for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = *d + *yi * (*gi - s);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                probs,
                target,
                rows,
            } => {
                let scale = if *rows == 0 { T::zero() } else { g[0] / T::lit(*rows as f64) };
                acc(adj, *logits, &mut |d| {
                    let k = probs.len() / (*rows).max(1);
                    for ((drow, prow), trow) in d.chunks_mut(k.max(1)).zip(probs.chunks(k.max(1))).zip(target.chunks(k.max(1))) {
                        let tsum = trow.iter().fold(T::zero(), |s, t| s + *t);
                        for ((d, p), t) in drow.iter_mut().zip(prow).zip(trow) {
                            *d = *d + scale * (*p * tsum - *t);
                        }
                    }
                });
            }
            &Op::Conv2d { x, w, b, geom } => {
                let plane = geom.out_height() * geom.out_width();
                let patch = geom.patch();
                let in_sz = geom.in_channels * geom.height * geom.width;
                let out_sz = geom.out_channels * plane;
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                if let Some(b) = b {
                    acc(adj, b, &mut |db| {
                        for n in 0..geom.batch {
                            for (oc, chunk) in g[n * out_sz..(n + 1) * out_sz].chunks(plane).enumerate() {
                                db[oc] = chunk.iter().fold(db[oc], |s, v| s + *v);
                            }
                        }
                    });
                }
                let mut cols = vec![T::zero(); patch * plane];
                if nodes[w.0].requires_grad {
                    acc(adj, w, &mut |dw| {
                        for n in 0..geom.batch {
                            im2col(&geom, &xv[n * in_sz..(n + 1) * in_sz], &mut cols);
                            gemm_nt(geom.out_channels, plane, patch, &g[n * out_sz..(n + 1) * out_sz], &cols, dw);
                        }
                    });
                }
                acc(adj, x, &mut |dx| {
                    for n in 0..geom.batch {
                        cols.iter_mut().for_each(|v| *v = T::zero());
                        gemm_tn(patch, geom.out_channels, plane, wv, &g[n * out_sz..(n + 1) * out_sz], &mut cols);
                        col2im(&geom, &cols, &mut dx[n * in_sz..(n + 1) * in_sz]);
                    }
                });
            }
            Op::Bilinear {
                x,
                batch,
                channels,
                plane,
                taps,
            } => {
                let np = taps.len();
                acc(adj, *x, &mut |dx| {
                    for n in 0..*batch {
                        for (p, tp) in taps.iter().enumerate() {
                            let grow = &g[(n * np + p) * channels..(n * np + p + 1) * channels];
                            for (c, gv) in grow.iter().enumerate() {
                                let base = (n * channels + c) * plane;
                                for &(idx, wt) in tp {
                                    let d = &mut dx[base + idx as usize];
                                    *d = *d + wt * *gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, widths, rows } => {
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    acc(adj, p, &mut |d| {
                        for r in 0..*rows {
                            add_into(&mut d[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            &Op::Reshape(a) => acc(adj, a, &mut |d| add_into(d, &g)),
            &Op::Sum(a) => acc(adj, a, &mut |d| d.iter_mut().for_each(|v| *v = *v + g[0])),
            &Op::Mean(a) => {
                let s = g[0] / T::lit(nodes[a.0].value.len().max(1) as f64);
                acc(adj, a, &mut |d| d.iter_mut().for_each(|v| *v = *v + s));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                train,
            } => {
                let c = layout.channels;
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for o in 0..layout.outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * layout.inner;
                        for i in base..base + layout.inner {
                            sum_g[ch] = sum_g[ch] + g[i];
                            sum_gx[ch] = sum_gx[ch] + g[i] * xhat[i];
                        }
                    }
                }
                acc(adj, *beta, &mut |d| add_into(d, &sum_g));
                acc(adj, *gamma, &mut |d| add_into(d, &sum_gx));
                let gv = &nodes[gamma.0].value;
                let inv_m = T::lit(1.0 / layout.count().max(1) as f64);
                acc(adj, *x, &mut |d| {
                    for o in 0..layout.outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * layout.inner;
                            let k = gv[ch] * inv_std[ch];
                            for i in base..base + layout.inner {
                                let v = if *train {
                                    k * (g[i] - inv_m * sum_g[ch] - xhat[i] * inv_m * sum_gx[ch])
                                } else {
                                    k * g[i]
                                };
                                d[i] = d[i] + v;
                            }
                        }
                    }
                });
            }
            Op::GatherRows { x, idx, width } => {
                acc(adj, *x, &mut |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut d[i * width..(i + 1) * width], &g[r * width..(r + 1) * width]);
                    }
                });
            }
            &Op::RepeatRows { x, times, width } => {
                acc(adj, x, &mut |d| {
                    for (i, drow) in d.chunks_mut(width).enumerate() {
                        for t in 0..times {
                            let r = i * times + t;
                            add_into(drow, &g[r * width..(r + 1) * width]);
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    for (a, b) in d.iter_mut().zip(g) {
        *a = *a + *b;
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    let s = row.iter().fold(T::zero(), |s, &v| s + (v - m).exp());
    m + s.ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s = s + *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

fn bilinear_taps<T: Scalar>(py: f64, px: f64, h: usize, w: usize) -> Taps<T> {
    let axis = |p: f64, n: usize| -> (usize, usize, f64) {
        let f = (p * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = f as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, f - i0 as f64)
    };
    let (y0, y1, fy) = axis(py, h);
    let (x0, x1, fx) = axis(px, w);
    let idx = |y: usize, x: usize| (y * w + x) as u32;
    [
        (idx(y0, x0), T::lit((1.0 - fy) * (1.0 - fx))),
        (idx(y0, x1), T::lit((1.0 - fy) * fx)),
        (idx(y1, x0), T::lit(fy * (1.0 - fx))),
        (idx(y1, x1), T::lit(fy * fx)),
    ]
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    let k = g.kernel;
    for c in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.height && (ix as usize) < g.width {
                            x[(c * g.height + iy as usize) * g.width + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    let k = g.kernel;
    for c in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        let d = &mut dx[(c * g.height + iy as usize) * g.width + ix as usize];
                        *d = *d + src[oy * ow + ox];
                    }
                }
            }
        }
    }
}
