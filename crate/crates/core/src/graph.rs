//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation appends a node holding its forward value plus whatever it
//! needs for the backward pass. Nodes are stored in creation order, so a
//! reverse sweep visits each node after all of its consumers.

use std::sync::Arc;

use rayon::prelude::*;

use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a normalization op groups elements for statistics and affine terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormLayout {
    /// `[rows, cols]`; statistics per row, affine per column (layer norm).
    Rows { rows: usize, cols: usize },
    /// `[rows, cols]`; statistics per column over all rows (batch norm on vectors).
    Columns { rows: usize, cols: usize },
    /// `[batch, channels, spatial]`; instance statistics on channels `< split`,
    /// batch statistics on the remaining channels.
    Ibn {
        batch: usize,
        channels: usize,
        spatial: usize,
        split: usize,
    },
}

impl NormLayout {
    fn len(&self) -> usize {
        match *self {
            NormLayout::Rows { rows, cols } | NormLayout::Columns { rows, cols } => rows * cols,
            NormLayout::Ibn {
                batch,
                channels,
                spatial,
                ..
            } => batch * channels * spatial,
        }
    }

    fn channels(&self) -> usize {
        match *self {
            NormLayout::Rows { cols, .. } | NormLayout::Columns { cols, .. } => cols,
            NormLayout::Ibn { channels, .. } => channels,
        }
    }

    fn num_groups(&self) -> usize {
        match *self {
            NormLayout::Rows { rows, .. } => rows,
            NormLayout::Columns { cols, .. } => cols,
            NormLayout::Ibn {
                batch,
                channels,
                split,
                ..
            } => batch * split + (channels - split),
        }
    }

    /// First group index that uses batch statistics (and may be replaced by
    /// running statistics in inference mode).
    fn first_batch_group(&self) -> usize {
        match *self {
            NormLayout::Rows { rows, .. } => rows,
            NormLayout::Columns { .. } => 0,
            NormLayout::Ibn { batch, split, .. } => batch * split,
        }
    }

    /// `(group, channel)` of flat element `e`.
    #[inline]
    fn locate(&self, e: usize) -> (usize, usize) {
        match *self {
            NormLayout::Rows { cols, .. } => (e / cols, e % cols),
            NormLayout::Columns { cols, .. } => (e % cols, e % cols),
            NormLayout::Ibn {
                batch,
                channels,
                spatial,
                split,
            } => {
                let b = e / (channels * spatial);
                let c = (e / spatial) % channels;
                let g = if c < split {
                    b * split + c
                } else {
                    batch * split + c - split
                };
                (g, c)
            }
        }
    }
}

/// Batch statistics observed by a normalization node, for running-stat updates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance.
    pub var: Vec<T>,
    /// Elements per group.
    pub count: usize,
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
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

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddRowBroadcast(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Relu(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: NormLayout,
        xhat: Vec<T>,
        rstd: Vec<T>,
        fixed: bool,
    },
    Attention {
        qkv: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
        probs: Arc<Vec<T>>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Gather {
        src: Var,
        idx: Arc<Vec<usize>>,
    },
    RowGather {
        src: Var,
        idx: Arc<Vec<usize>>,
    },
    ConcatRows(Vec<Var>),
    RowMean {
        src: Var,
        groups: Arc<Vec<Vec<usize>>>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
        eps: T,
    },
    ScalarFn {
        inputs: Vec<Var>,
        grads: Vec<Tensor<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// A tape of differentiable operations.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Attention probabilities `[batch, heads, tokens, tokens]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(usize, usize, usize, &[T])> {
        match &self.nodes[v.0].op {
            Op::Attention {
                batch,
                tokens,
                heads,
                probs,
                ..
            } => Some((*batch, *heads, *tokens, probs.as_slice())),
            _ => None,
        }
    }

    /// `(param, var)` for every parameter leaf recorded in the graph.
    pub fn param_vars(&self) -> Vec<(ParamId, Var)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, Var(i))))
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf that is not tied to a stored parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(bv.rows(), k, "matmul inner dimension mismatch");
        let out = matmul(av.data(), bv.data(), m, k, n);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(bias);
        assert_eq!(bv.len(), xv.cols(), "bias length mismatch");
        let mut out = xv.clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRowBroadcast(x, bias), &[x, bias])
    }

    /// `x · w + b` with `w: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row_broadcast(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.len(), self.value(b).len(), "add shape mismatch");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scaled(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_fwd);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu(a), &[a])
    }

    /// Normalizes `x` per the layout, then applies `gamma * xhat + beta`.
    ///
    /// `running` supplies `(mean, var)` for the batch-statistic groups; when
    /// given, those groups use it instead of the current batch. Returns the
    /// batch statistics that were computed for those groups (empty when
    /// `running` was supplied or the layout has none).
    pub fn norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        layout: NormLayout,
        eps: T,
        running: Option<(&[T], &[T])>,
    ) -> (Var, BatchStats<T>) {
        let xv = self.value(x);
        assert_eq!(xv.len(), layout.len(), "norm layout does not match input");
        let channels = layout.channels();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        assert_eq!(gv.len(), channels);
        assert_eq!(bv.len(), channels);

        let ng = layout.num_groups();
        let first_batch = layout.first_batch_group();
        let mut sum = vec![T::zero(); ng];
        let mut count = vec![0usize; ng];
        for (e, &v) in xv.data().iter().enumerate() {
            let (g, _) = layout.locate(e);
            sum[g] += v;
            count[g] += 1;
        }
        let mut mean: Vec<T> = sum
            .iter()
            .zip(&count)
            .map(|(&s, &c)| s / T::of_usize(c.max(1)))
            .collect();
        let mut var = vec![T::zero(); ng];
        for (e, &v) in xv.data().iter().enumerate() {
            let (g, _) = layout.locate(e);
            let d = v - mean[g];
            var[g] += d * d;
        }
        for (v, &c) in var.iter_mut().zip(&count) {
            *v /= T::of_usize(c.max(1));
        }

        let batch_stats = if first_batch < ng && running.is_none() {
            BatchStats {
                mean: mean[first_batch..].to_vec(),
                var: var[first_batch..].to_vec(),
                count: count[first_batch],
            }
        } else {
            BatchStats {
                mean: Vec::new(),
                var: Vec::new(),
                count: 0,
            }
        };
        let fixed = running.is_some() && first_batch < ng;
        if let Some((rm, rv)) = running {
            assert_eq!(rm.len(), ng - first_batch, "running stats length mismatch");
            mean[first_batch..].copy_from_slice(rm);
            var[first_batch..].copy_from_slice(rv);
        }
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for (e, &v) in xv.data().iter().enumerate() {
            let (g, c) = layout.locate(e);
            let h = (v - mean[g]) * rstd[g];
            xhat[e] = h;
            out[e] = gv[c] * h + bv[c];
        }
        let shape = xv.shape().to_vec();
        let var_node = self.push(
            Tensor::from_vec(&shape, out),
            Op::Norm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                rstd,
                fixed,
            },
            &[x, gamma, beta],
        );
        (var_node, batch_stats)
    }

    /// Multi-head self-attention core on packed `qkv: [batch*tokens, 3*dim]`.
    /// Returns the head-concatenated context `[batch*tokens, dim]`.
    pub fn attention(&mut self, qkv: Var, batch: usize, tokens: usize, heads: usize) -> Var {
        let qv = self.value(qkv);
        let dim3 = qv.cols();
        assert_eq!(dim3 % 3, 0);
        let dim = dim3 / 3;
        assert_eq!(dim % heads, 0, "dim not divisible by heads");
        assert_eq!(qv.rows(), batch * tokens);
        let dh = dim / heads;
        let scale = T::one() / T::of_usize(dh).sqrt();
        let data = qv.data();

        let blocks: Vec<(Vec<T>, Vec<T>)> = (0..batch * heads)
            .into_par_iter()
            .map(|bh| {
                let (b, h) = (bh / heads, bh % heads);
                let mut probs = vec![T::zero(); tokens * tokens];
                let mut ctx = vec![T::zero(); tokens * dh];
                for t in 0..tokens {
                    let qrow = &data[(b * tokens + t) * dim3 + h * dh..][..dh];
                    let prow = &mut probs[t * tokens..(t + 1) * tokens];
                    let mut mx = T::neg_infinity();
                    for (s, p) in prow.iter_mut().enumerate() {
                        let krow = &data[(b * tokens + s) * dim3 + dim + h * dh..][..dh];
                        *p = crate::scalar::dot(qrow, krow) * scale;
                        mx = mx.max(*p);
                    }
                    let mut z = T::zero();
                    for p in prow.iter_mut() {
                        *p = (*p - mx).exp();
                        z += *p;
                    }
                    for p in prow.iter_mut() {
                        *p /= z;
                    }
                    let crow = &mut ctx[t * dh..(t + 1) * dh];
                    for (s, &p) in prow.iter().enumerate() {
                        let vrow = &data[(b * tokens + s) * dim3 + 2 * dim + h * dh..][..dh];
                        for (c, &v) in crow.iter_mut().zip(vrow) {
                            *c += p * v;
                        }
                    }
                }
                (probs, ctx)
            })
            .collect();

        let mut probs = vec![T::zero(); batch * heads * tokens * tokens];
        let mut out = vec![T::zero(); batch * tokens * dim];
        for (bh, (p, ctx)) in blocks.into_iter().enumerate() {
            let (b, h) = (bh / heads, bh % heads);
            probs[bh * tokens * tokens..(bh + 1) * tokens * tokens].copy_from_slice(&p);
            for t in 0..tokens {
                out[(b * tokens + t) * dim + h * dh..][..dh]
                    .copy_from_slice(&ctx[t * dh..(t + 1) * dh]);
            }
        }
        self.push(
            Tensor::from_vec(&[batch * tokens, dim], out),
            Op::Attention {
                qkv,
                batch,
                tokens,
                heads,
                probs: Arc::new(probs),
            },
            &[qkv],
        )
    }

    /// Convolution of `x: [batch, in_c, h, w]` with `w: [out_c, in_c*k*k]`
    /// and bias `b: [out_c]`. Output `[batch, out_c, ho, wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let xv = self.value(x);
        assert_eq!(
            xv.len(),
            geom.batch * geom.in_channels * geom.height * geom.width,
            "conv input does not match geometry"
        );
        let wv = self.value(w);
        assert_eq!(wv.len(), geom.out_channels * geom.patch_len());
        let bv = self.value(b);
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let plen = geom.patch_len();
        let per_img_cols = ho * wo * plen;
        let mut cols = vec![T::zero(); geom.batch * per_img_cols];
        cols.par_chunks_mut(per_img_cols)
            .enumerate()
            .for_each(|(bi, c)| im2col(xv.data(), bi, &geom, c));
        let per_img_out = geom.out_channels * ho * wo;
        let mut out = vec![T::zero(); geom.batch * per_img_out];
        out.par_chunks_mut(per_img_out)
            .zip(cols.par_chunks(per_img_cols))
            .for_each(|(o, c)| {
                let r = matmul_nt(wv.data(), c, geom.out_channels, plen, ho * wo);
                for (oc, chunk) in o.chunks_mut(ho * wo).enumerate() {
                    let bias = bv.data()[oc];
                    for (dst, &src) in chunk.iter_mut().zip(&r[oc * ho * wo..(oc + 1) * ho * wo]) {
                        *dst = src + bias;
                    }
                }
            });
        self.push(
            Tensor::from_vec(&[geom.batch, geom.out_channels, ho, wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            &[x, w, b],
        )
    }

    /// Flat element gather: `out[i] = src[idx[i]]`.
    pub fn gather(&mut self, src: Var, idx: Arc<Vec<usize>>, shape: &[usize]) -> Var {
        let sv = self.value(src).data();
        let out: Vec<T> = idx.iter().map(|&i| sv[i]).collect();
        self.push(Tensor::from_vec(shape, out), Op::Gather { src, idx }, &[src])
    }

    /// Row gather: output row `i` is source row `idx[i]`.
    pub fn row_gather(&mut self, src: Var, idx: Arc<Vec<usize>>) -> Var {
        let sv = self.value(src);
        let c = sv.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(sv.row(i));
        }
        self.push(
            Tensor::from_vec(&[idx.len(), c], out),
            Op::RowGather { src, idx },
            &[src],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), c, "concat column mismatch");
            out.extend_from_slice(v.data());
        }
        let rows = out.len() / c;
        self.push(
            Tensor::from_vec(&[rows, c], out),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Output row `i` is the mean of source rows listed in `groups[i]`.
    pub fn row_mean(&mut self, src: Var, groups: Arc<Vec<Vec<usize>>>) -> Var {
        let sv = self.value(src);
        let c = sv.cols();
        let mut out = vec![T::zero(); groups.len() * c];
        for (g, rows) in groups.iter().enumerate() {
            assert!(!rows.is_empty(), "empty pooling group");
            let inv = T::one() / T::of_usize(rows.len());
            let dst = &mut out[g * c..(g + 1) * c];
            for &r in rows {
                for (d, &s) in dst.iter_mut().zip(sv.row(r)) {
                    *d += s;
                }
            }
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        self.push(
            Tensor::from_vec(&[groups.len(), c], out),
            Op::RowMean { src, groups },
            &[src],
        )
    }

    /// Divides each row by `max(‖row‖, eps)`. The second value reports
    /// whether any row fell under the guard.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: T) -> (Var, bool) {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut guarded = false;
        for row in out.data_mut().chunks_mut(c) {
            let n = crate::scalar::l2_norm(row);
            if n <= eps {
                guarded = true;
            }
            let d = n.max(eps);
            for v in row.iter_mut() {
                *v /= d;
            }
            norms.push(n);
        }
        (self.push(out, Op::L2Normalize { x, norms, eps }, &[x]), guarded)
    }

    /// Scalar node with externally computed value and input gradients.
    pub fn scalar_fn(&mut self, inputs: &[Var], value: T, grads: Vec<Tensor<T>>) -> Var {
        assert_eq!(inputs.len(), grads.len());
        for (v, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.value(*v).len(), g.len(), "scalar_fn gradient shape mismatch");
        }
        self.push(
            Tensor::from_vec(&[1], vec![value]),
            Op::ScalarFn {
                inputs: inputs.to_vec(),
                grads,
            },
            inputs,
        )
    }

    /// Backpropagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let rv = &self.nodes[root.0].value;
        grads[root.0] = Some(Tensor::full(rv.shape(), T::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let da = matmul_nt(g.data(), bv.data(), m, n, k);
                    acc(grads, *a, Tensor::from_vec(av.shape(), da));
                }
                if self.wants(*b) {
                    let db = matmul_tn(av.data(), g.data(), m, k, n);
                    acc(grads, *b, Tensor::from_vec(bv.shape(), db));
                }
            }
            Op::AddRowBroadcast(x, b) => {
                if self.wants(*x) {
                    acc(grads, *x, g.clone());
                }
                if self.wants(*b) {
                    let c = g.cols();
                    let mut db = vec![T::zero(); c];
                    for row in g.data().chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(grads, *b, Tensor::from_vec(self.value(*b).shape(), db));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone().reshape(self.value(*a).shape()));
                }
                if self.wants(*b) {
                    acc(grads, *b, g.clone().reshape(self.value(*b).shape()));
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    acc(grads, *a, g.scaled(*s));
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let xv = self.value(*a);
                    let d: Vec<T> = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gy)| gy * gelu_grad(x))
                        .collect();
                    acc(grads, *a, Tensor::from_vec(xv.shape(), d));
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let xv = self.value(*a);
                    let d: Vec<T> = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gy)| if x > T::zero() { gy } else { T::zero() })
                        .collect();
                    acc(grads, *a, Tensor::from_vec(xv.shape(), d));
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                rstd,
                fixed,
            } => {
                let gv = self.value(*gamma).data();
                let channels = layout.channels();
                let mut dgamma = vec![T::zero(); channels];
                let mut dbeta = vec![T::zero(); channels];
                let ng = layout.num_groups();
                let first_batch = layout.first_batch_group();
                let mut s1 = vec![T::zero(); ng];
                let mut s2 = vec![T::zero(); ng];
                let mut cnt = vec![0usize; ng];
                let mut dxhat = vec![T::zero(); xhat.len()];
                for (e, &gy) in g.data().iter().enumerate() {
                    let (grp, c) = layout.locate(e);
                    dgamma[c] += gy * xhat[e];
                    dbeta[c] += gy;
                    let dh = gy * gv[c];
                    dxhat[e] = dh;
                    s1[grp] += dh;
                    s2[grp] += dh * xhat[e];
                    cnt[grp] += 1;
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); xhat.len()];
                    for (e, d) in dx.iter_mut().enumerate() {
                        let (grp, _) = layout.locate(e);
                        let frozen = *fixed && grp >= first_batch;
                        *d = if frozen {
                            dxhat[e] * rstd[grp]
                        } else {
                            let n = T::of_usize(cnt[grp]);
                            rstd[grp] * (dxhat[e] - s1[grp] / n - xhat[e] * s2[grp] / n)
                        };
                    }
                    acc(grads, *x, Tensor::from_vec(self.value(*x).shape(), dx));
                }
                if self.wants(*gamma) {
                    acc(grads, *gamma, Tensor::from_vec(self.value(*gamma).shape(), dgamma));
                }
                if self.wants(*beta) {
                    acc(grads, *beta, Tensor::from_vec(self.value(*beta).shape(), dbeta));
                }
            }
            Op::Attention {
                qkv,
                batch,
                tokens,
                heads,
                probs,
            } => {
                if !self.wants(*qkv) {
                    return;
                }
                let (batch, tokens, heads) = (*batch, *tokens, *heads);
                let qv = self.value(*qkv);
                let dim3 = qv.cols();
                let dim = dim3 / 3;
                let dh = dim / heads;
                let scale = T::one() / T::of_usize(dh).sqrt();
                let data = qv.data();
                let gd = g.data();
                let blocks: Vec<Vec<T>> = (0..batch * heads)
                    .into_par_iter()
                    .map(|bh| {
                        let (b, h) = (bh / heads, bh % heads);
                        let p = &probs[bh * tokens * tokens..(bh + 1) * tokens * tokens];
                        // [tokens, 3*dh] laid out as dq | dk | dv
                        let mut local = vec![T::zero(); tokens * 3 * dh];
                        let mut dp = vec![T::zero(); tokens];
                        for t in 0..tokens {
                            let go = &gd[(b * tokens + t) * dim + h * dh..][..dh];
                            let prow = &p[t * tokens..(t + 1) * tokens];
                            for s in 0..tokens {
                                let vrow = &data[(b * tokens + s) * dim3 + 2 * dim + h * dh..][..dh];
                                dp[s] = crate::scalar::dot(go, vrow);
                                let dv = &mut local[s * 3 * dh + 2 * dh..][..dh];
                                for (d, &o) in dv.iter_mut().zip(go) {
                                    *d += prow[s] * o;
                                }
                            }
                            let inner: T = prow.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                            let qrow = &data[(b * tokens + t) * dim3 + h * dh..][..dh];
                            for s in 0..tokens {
                                let ds = prow[s] * (dp[s] - inner) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let krow = &data[(b * tokens + s) * dim3 + dim + h * dh..][..dh];
                                for j in 0..dh {
                                    local[t * 3 * dh + j] += ds * krow[j];
                                    local[s * 3 * dh + dh + j] += ds * qrow[j];
                                }
                            }
                        }
                        local
                    })
                    .collect();
                let mut dq = vec![T::zero(); qv.len()];
                for (bh, local) in blocks.into_iter().enumerate() {
                    let (b, h) = (bh / heads, bh % heads);
                    for t in 0..tokens {
                        let row = &mut dq[(b * tokens + t) * dim3..(b * tokens + t + 1) * dim3];
                        for part in 0..3 {
                            row[part * dim + h * dh..][..dh]
                                .copy_from_slice(&local[t * 3 * dh + part * dh..][..dh]);
                        }
                    }
                }
                acc(grads, *qkv, Tensor::from_vec(qv.shape(), dq));
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (ho, wo) = (geom.out_height(), geom.out_width());
                let plen = geom.patch_len();
                let per_img_out = geom.out_channels * ho * wo;
                let per_img_cols = ho * wo * plen;
                let wv = self.value(*w);
                if self.wants(*w) {
                    let partial: Vec<Vec<T>> = g
                        .data()
                        .par_chunks(per_img_out)
                        .zip(cols.par_chunks(per_img_cols))
                        .map(|(go, c)| matmul(go, c, geom.out_channels, ho * wo, plen))
                        .collect();
                    let mut dw = vec![T::zero(); wv.len()];
                    for p in partial {
                        for (d, v) in dw.iter_mut().zip(p) {
                            *d += v;
                        }
                    }
                    acc(grads, *w, Tensor::from_vec(wv.shape(), dw));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); geom.out_channels];
                    for go in g.data().chunks(per_img_out) {
                        for (oc, chunk) in go.chunks(ho * wo).enumerate() {
                            db[oc] += chunk.iter().copied().sum::<T>();
                        }
                    }
                    acc(grads, *b, Tensor::from_vec(self.value(*b).shape(), db));
                }
                if self.wants(*x) {
                    let per_img_in = geom.in_channels * geom.height * geom.width;
                    let mut dx = vec![T::zero(); geom.batch * per_img_in];
                    dx.par_chunks_mut(per_img_in)
                        .zip(g.data().par_chunks(per_img_out))
                        .for_each(|(dxi, go)| {
                            let dcols = matmul_tn(go, wv.data(), geom.out_channels, ho * wo, plen);
                            col2im(&dcols, *geom, dxi);
                        });
                    acc(grads, *x, Tensor::from_vec(self.value(*x).shape(), dx));
                }
            }
            Op::Gather { src, idx } => {
                if self.wants(*src) {
                    let sv = self.value(*src);
                    let mut d = vec![T::zero(); sv.len()];
                    for (&i, &gv) in idx.iter().zip(g.data()) {
                        d[i] += gv;
                    }
                    acc(grads, *src, Tensor::from_vec(sv.shape(), d));
                }
            }
            Op::RowGather { src, idx } => {
                if self.wants(*src) {
                    let sv = self.value(*src);
                    let c = sv.cols();
                    let mut d = vec![T::zero(); sv.len()];
                    for (o, &i) in idx.iter().enumerate() {
                        for (dst, &gv) in d[i * c..(i + 1) * c].iter_mut().zip(g.row(o)) {
                            *dst += gv;
                        }
                    }
                    acc(grads, *src, Tensor::from_vec(sv.shape(), d));
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    if self.wants(p) {
                        acc(
                            grads,
                            p,
                            Tensor::from_vec(pv.shape(), g.data()[offset..offset + n].to_vec()),
                        );
                    }
                    offset += n;
                }
            }
            Op::RowMean { src, groups } => {
                if self.wants(*src) {
                    let sv = self.value(*src);
                    let c = sv.cols();
                    let mut d = vec![T::zero(); sv.len()];
                    for (gi, rows) in groups.iter().enumerate() {
                        let inv = T::one() / T::of_usize(rows.len());
                        for &r in rows {
                            for (dst, &gv) in d[r * c..(r + 1) * c].iter_mut().zip(g.row(gi)) {
                                *dst += gv * inv;
                            }
                        }
                    }
                    acc(grads, *src, Tensor::from_vec(sv.shape(), d));
                }
            }
            Op::L2Normalize { x, norms, eps } => {
                if self.wants(*x) {
                    let y = &node.value;
                    let c = y.cols();
                    let mut d = vec![T::zero(); y.len()];
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dst = &mut d[r * c..(r + 1) * c];
                        if n > *eps {
                            let proj = crate::scalar::dot(yr, gr);
                            for j in 0..c {
                                dst[j] = (gr[j] - yr[j] * proj) / n;
                            }
                        } else {
                            for j in 0..c {
                                dst[j] = gr[j] / *eps;
                            }
                        }
                    }
                    acc(grads, *x, Tensor::from_vec(y.shape(), d));
                }
            }
            Op::ScalarFn { inputs, grads: local } => {
                let up = g.data()[0];
                for (v, lg) in inputs.iter().zip(local) {
                    if self.wants(*v) {
                        acc(grads, *v, lg.scaled(up));
                    }
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu_fwd<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}

/// Unfolds image `bi` into `[ho*wo, in_c*k*k]` patch rows.
fn im2col<T: Scalar>(x: &[T], bi: usize, geom: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let k = geom.kernel;
    let plen = geom.patch_len();
    let img = &x[bi * geom.in_channels * geom.height * geom.width..];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * plen..][..plen];
            let mut j = 0;
            for c in 0..geom.in_channels {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        row[j] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < geom.height
                            && (ix as usize) < geom.width
                        {
                            img[(c * geom.height + iy as usize) * geom.width + ix as usize]
                        } else {
                            T::zero()
                        };
                        j += 1;
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(dcols: &[T], geom: ConvGeom, dx: &mut [T]) {
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let k = geom.kernel;
    let plen = geom.patch_len();
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &dcols[(oy * wo + ox) * plen..][..plen];
            let mut j = 0;
            for c in 0..geom.in_channels {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if iy >= 0
                            && ix >= 0
                            && (iy as usize) < geom.height
                            && (ix as usize) < geom.width
                        {
                            dx[(c * geom.height + iy as usize) * geom.width + ix as usize] += row[j];
                        }
                        j += 1;
                    }
                }
            }
        }
    }
}
