//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node. Parameters
//! are borrowed from a [`ParamStore`] instead of copied. [`Graph::backward`] walks
//! the tape in reverse and returns [`Gradients`] for leaves and parameters.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Guard on row norms before dividing by them.
pub const NORM_EPSILON: f64 = 1e-12;

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    AddRow { x: Var, bias: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    MaxPool2d { x: Var, argmax: Vec<u32> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, seq: usize, probs: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    SoftmaxCe { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Mse { x: Var, target: Vec<T> },
    RowNormalize { x: Var, norms: Vec<T> },
    NtXent { s: Var, tau: T, probs: Vec<T> },
    Sum(Var),
    Mean(Var),
    Dot { x: Var, w: Vec<T> },
}

struct Node<T> {
    value: Option<Vec<T>>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Real> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value: Some(value),
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(t.into_data(), shape, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.params.expect("graph was built without a parameter store");
        let shape = store.value(id).shape().to_vec();
        self.nodes.push(Node {
            value: None,
            shape,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(data), _) => data,
            (None, Op::Param(id)) => self.params.unwrap().value(*id).data(),
            _ => unreachable!("node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("{op} expects a matrix, got {s:?}"))),
        }
    }

    // ---- operations ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) @ op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ra, ca) = self.dims2(a, "matmul")?;
        let (rb, cb) = self.dims2(b, "matmul")?;
        let (m, k, rsa, csa) = if ta { (ca, ra, 1, ca as isize) } else { (ra, ca, ca as isize, 1) };
        let (k2, n, rsb, csb) = if tb { (cb, rb, 1, cb as isize) } else { (rb, cb, cb as isize, 1) };
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a),
            rsa,
            csa,
            self.value(b),
            rsb,
            csb,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, ta, tb }, ng))
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap();
        if self.shape(bias) != [cols] {
            return Err(Error::dim("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out: Vec<T> = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, shape, Op::AddRow { x, bias }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, shape, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, shape, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(out, shape, Op::Scale(x, s), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(out, shape, Op::Relu(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(out, shape.to_vec(), Op::Reshape(x), ng))
    }

    /// 2-D convolution. `x` is `[batch, in_c, h, w]`, `w` is `[out_c, in_c, kh, kw]`,
    /// `b` is `[out_c]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (batch, in_c, h, wd) = match self.shape(x) {
            [n, c, h, w] => (*n, *c, *h, *w),
            s => return Err(Error::Shape(format!("conv2d input must be rank 4, got {s:?}"))),
        };
        let (out_c, kh, kw) = match self.shape(w) {
            [o, c, kh, kw] if *c == in_c => (*o, *kh, *kw),
            _ => return Err(Error::dim("conv2d", self.shape(x), self.shape(w))),
        };
        if self.shape(b) != [out_c] {
            return Err(Error::dim("conv2d bias", self.shape(w), self.shape(b)));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::dim("conv2d", self.shape(x), self.shape(w)));
        }
        let geom = ConvGeom {
            batch,
            in_c,
            h,
            w: wd,
            out_c,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kw) / stride + 1,
        };
        let npix = geom.out_pixels();
        let plen = geom.patch_len();
        let mut cols = vec![T::zero(); plen * npix];
        let mut out = vec![T::zero(); batch * out_c * npix];
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        for n in 0..batch {
            kernels::im2col(&xv[n * geom.in_len()..(n + 1) * geom.in_len()], &geom, &mut cols);
            let dst = &mut out[n * out_c * npix..(n + 1) * out_c * npix];
            for (o, row) in dst.chunks_mut(npix).enumerate() {
                row.iter_mut().for_each(|v| *v = bv[o]);
            }
            T::gemm(
                out_c, plen, npix, T::one(), wv, plen as isize, 1, &cols, npix as isize, 1,
                T::one(), dst, npix as isize, 1,
            );
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            out,
            vec![batch, out_c, geom.out_h, geom.out_w],
            Op::Conv2d { x, w, b, geom },
            ng,
        ))
    }

    /// Non-overlapping max pooling with window and stride `size`; trailing
    /// rows/columns that do not fill a window are dropped.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let (n, c, h, w) = match self.shape(x) {
            [n, c, h, w] => (*n, *c, *h, *w),
            s => return Err(Error::Shape(format!("max_pool2d input must be rank 4, got {s:?}"))),
        };
        let (oh, ow) = (h / size, w / size);
        if size == 0 || oh == 0 || ow == 0 {
            return Err(Error::Shape(format!(
                "max_pool2d window {size} does not fit {:?}",
                self.shape(x)
            )));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (oy * size + dy) * w + ox * size + dx;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, vec![n, c, oh, ow], Op::MaxPool2d { x, argmax }, ng))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// per-column gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let (g, bt) = (self.value(gamma), self.value(beta));
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * r;
                xhat.push(xh);
                out.push(xh * g[j] + bt[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(out, shape, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng))
    }

    /// Causal multi-head attention over rows `[batch*seq, dim]`: position `t`
    /// of each sequence attends only to positions `<= t`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq: usize) -> Result<Var> {
        let (rows, dim) = self.dims2(q, "attention")?;
        if self.shape(k) != [rows, dim] || self.shape(v) != [rows, dim] {
            return Err(Error::dim("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || dim % heads != 0 || seq == 0 || rows % seq != 0 {
            return Err(Error::Config(format!(
                "attention: dim {dim} / heads {heads} / seq {seq} incompatible with {rows} rows"
            )));
        }
        let batch = rows / seq;
        let mut out = vec![T::zero(); rows * dim];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        kernels::attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            batch,
            seq,
            dim,
            heads,
            true,
            &mut out,
            &mut probs,
        );
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(out, vec![rows, dim], Op::Attention { q, k, v, heads, seq, probs }, ng))
    }

    /// Gathers rows of `table` (`[vocab, dim]`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.dims2(table, "embedding")?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    context: "embedding",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        let ng = self.needs(table);
        Ok(self.push(out, vec![ids.len(), dim], Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, vocab) = self.dims2(logits, "softmax_cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::dim("softmax_cross_entropy", &[rows, vocab], &[targets.len()]));
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(rows * vocab);
        let mut loss = T::zero();
        for (row, &t) in lv.chunks(vocab).zip(targets) {
            if t >= vocab {
                return Err(Error::Index {
                    context: "softmax_cross_entropy target",
                    index: t,
                    bound: vocab,
                });
            }
            let lse = log_sum_exp(row);
            loss += lse - row[t];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let out = vec![loss / T::lit(rows as f64)];
        let ng = self.needs(logits);
        Ok(self.push(
            out,
            vec![1],
            Op::SoftmaxCe { logits, targets: targets.to_vec(), probs },
            ng,
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &[T]) -> Result<Var> {
        if target.len() != self.value(x).len() {
            return Err(Error::dim("mse", self.shape(x), &[target.len()]));
        }
        let n = T::lit(target.len() as f64);
        let loss = self
            .value(x)
            .iter()
            .zip(target)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / n;
        let ng = self.needs(x);
        Ok(self.push(vec![loss], vec![1], Op::Mse { x, target: target.to_vec() }, ng))
    }

    /// Scales every row to unit Euclidean norm. Fails on rows with norm below
    /// [`NORM_EPSILON`].
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let (_, d) = self.dims2(x, "row_normalize")?;
        let xv = self.value(x);
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(xv.len());
        for (i, row) in xv.chunks(d).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm.as_f64() >= NORM_EPSILON) {
                return Err(Error::Numeric(format!("row {i} has (near) zero norm")));
            }
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(out, shape, Op::RowNormalize { x, norms }, ng))
    }

    /// Normalized-temperature cross-entropy over a `[2N, 2N]` similarity matrix
    /// whose rows `(2k, 2k+1)` are positive pairs. The diagonal is excluded from
    /// every denominator.
    pub fn nt_xent(&mut self, s: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
        }
        let (m, m2) = self.dims2(s, "nt_xent")?;
        if m != m2 || m < 2 || m % 2 != 0 {
            return Err(Error::Shape(format!(
                "nt_xent expects an even square matrix, got {:?}",
                self.shape(s)
            )));
        }
        let tau_t = T::lit(tau);
        let sv = self.value(s);
        let mut probs = vec![T::zero(); m * m];
        let mut total = T::zero();
        let mut logits = vec![T::zero(); m - 1];
        for i in 0..m {
            let row = &sv[i * m..(i + 1) * m];
            let mut idx = 0;
            for (k, &v) in row.iter().enumerate() {
                if k != i {
                    logits[idx] = v / tau_t;
                    idx += 1;
                }
            }
            let lse = log_sum_exp(&logits);
            let j = i ^ 1;
            total += lse - row[j] / tau_t;
            for (k, &v) in row.iter().enumerate() {
                if k != i {
                    probs[i * m + k] = (v / tau_t - lse).exp();
                }
            }
        }
        let out = vec![total / T::lit(m as f64)];
        let ng = self.needs(s);
        Ok(self.push(out, vec![1], Op::NtXent { s, tau: tau_t, probs }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum();
        let ng = self.needs(x);
        self.push(vec![total], vec![1], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).len() as f64);
        let total = self.value(x).iter().copied().sum::<T>() / n;
        let ng = self.needs(x);
        self.push(vec![total], vec![1], Op::Mean(x), ng)
    }

    /// Inner product with a constant weight vector; turns any node into a scalar
    /// for gradient checks.
    pub fn dot_const(&mut self, x: Var, w: &[T]) -> Result<Var> {
        if w.len() != self.value(x).len() {
            return Err(Error::dim("dot_const", self.shape(x), &[w.len()]));
        }
        let total = self.value(x).iter().zip(w).map(|(&a, &b)| a * b).sum();
        let ng = self.needs(x);
        Ok(self.push(vec![total], vec![1], Op::Dot { x, w: w.to_vec() }, ng))
    }

    // ---- backward ----

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[idx] = Some(g);
            }
        }
        let param_nodes = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, param_nodes })
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ra, ca) = (self.shape(*a)[0], self.shape(*a)[1]);
                let (rb, cb) = (self.shape(*b)[0], self.shape(*b)[1]);
                let (m, k, rsa, csa) = if *ta { (ca, ra, 1, ca as isize) } else { (ra, ca, ca as isize, 1) };
                let (n, rsb, csb) = if *tb { (rb, 1, cb as isize) } else { (cb, cb as isize, 1) };
                let n_is = n as isize;
                if let Some(da) = self.buf(grads, *a) {
                    let bv = self.value(*b);
                    if !*ta {
                        T::gemm(m, n, k, T::one(), g, n_is, 1, bv, csb, rsb, T::one(), da, k as isize, 1);
                    } else {
                        T::gemm(k, n, m, T::one(), bv, rsb, csb, g, 1, n_is, T::one(), da, m as isize, 1);
                    }
                }
                if let Some(db) = self.buf(grads, *b) {
                    let av = self.value(*a);
                    if !*tb {
                        T::gemm(k, m, n, T::one(), av, csa, rsa, g, n_is, 1, T::one(), db, n_is, 1);
                    } else {
                        T::gemm(n, m, k, T::one(), g, 1, n_is, av, rsa, csa, T::one(), db, k as isize, 1);
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if let Some(dx) = self.buf(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if let Some(db) = self.buf(grads, *bias) {
                    let cols = db.len();
                    for row in g.chunks(cols) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.buf(grads, *v) {
                        d.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = self.buf(grads, *a) {
                    let bv = self.value(*b);
                    for ((d, &gv), &o) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * o;
                    }
                }
                if let Some(db) = self.buf(grads, *b) {
                    let av = self.value(*a);
                    for ((d, &gv), &o) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * o;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.buf(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *s);
                }
            }
            Op::Relu(x) => {
                if let Some(dx) = self.buf(grads, *x) {
                    let xv = self.value(*x);
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.buf(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Conv2d { x, w, b, geom } => self.conv_backward(*x, *w, *b, geom, g, grads),
            Op::MaxPool2d { x, argmax } => {
                if let Some(dx) = self.buf(grads, *x) {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src as usize] += gv;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.shape(*gamma)[0];
                let dn = T::lit(d as f64);
                if let Some(dgamma) = self.buf(grads, *gamma) {
                    for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dgamma[j] += grow[j] * xrow[j];
                        }
                    }
                }
                if let Some(dbeta) = self.buf(grads, *beta) {
                    for grow in g.chunks(d) {
                        dbeta.iter_mut().zip(grow).for_each(|(a, &v)| *a += v);
                    }
                }
                let gam = self.value(*gamma);
                if let Some(dx) = self.buf(grads, *x) {
                    for (r, ((grow, xrow), dxrow)) in
                        g.chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).enumerate()
                    {
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = grow[j] * gam[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xrow[j];
                        }
                        mean_dxh /= dn;
                        mean_dxh_xh /= dn;
                        for j in 0..d {
                            let dxh = grow[j] * gam[j];
                            dxrow[j] += rstd[r] * (dxh - mean_dxh - xrow[j] * mean_dxh_xh);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, seq, probs } => {
                let (rows, dim) = (self.shape(*q)[0], self.shape(*q)[1]);
                let mut dq = self.needs(*q).then(|| vec![T::zero(); rows * dim]);
                let mut dk = self.needs(*k).then(|| vec![T::zero(); rows * dim]);
                let mut dv = self.needs(*v).then(|| vec![T::zero(); rows * dim]);
                kernels::attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    g,
                    rows / seq,
                    *seq,
                    dim,
                    *heads,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                for (var, part) in [(q, dq), (k, dk), (v, dv)] {
                    if let (Some(buf), Some(part)) = (self.buf(grads, *var), part) {
                        buf.iter_mut().zip(&part).for_each(|(d, &p)| *d += p);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(dt) = self.buf(grads, *table) {
                    let dim = self.shape(*table)[1];
                    for (row, &id) in g.chunks(dim).zip(ids) {
                        dt[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::SoftmaxCe { logits, targets, probs } => {
                if let Some(dl) = self.buf(grads, *logits) {
                    let vocab = self.shape(*logits)[1];
                    let scale = g[0] / T::lit(targets.len() as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..vocab {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            dl[r * vocab + j] += scale * (probs[r * vocab + j] - onehot);
                        }
                    }
                }
            }
            Op::Mse { x, target } => {
                if let Some(dx) = self.buf(grads, *x) {
                    let scale = g[0] * T::lit(2.0) / T::lit(target.len() as f64);
                    let xv = self.value(*x);
                    for ((d, &a), &b) in dx.iter_mut().zip(xv).zip(target) {
                        *d += scale * (a - b);
                    }
                }
            }
            Op::RowNormalize { x, norms } => {
                if let Some(dx) = self.buf(grads, *x) {
                    let d = self.shape(*x)[1];
                    let y = node.value.as_ref().unwrap();
                    for (r, norm) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let proj: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] += (gr[j] - yr[j] * proj) / *norm;
                        }
                    }
                }
            }
            Op::NtXent { s, tau, probs } => {
                if let Some(ds) = self.buf(grads, *s) {
                    let m = self.shape(*s)[0];
                    let scale = g[0] / (T::lit(m as f64) * *tau);
                    for i in 0..m {
                        let j = i ^ 1;
                        for k in 0..m {
                            if k == i {
                                continue;
                            }
                            let pos = if k == j { T::one() } else { T::zero() };
                            ds[i * m + k] += scale * (probs[i * m + k] - pos);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.buf(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = self.buf(grads, *x) {
                    let s = g[0] / T::lit(dx.len() as f64);
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Dot { x, w } => {
                if let Some(dx) = self.buf(grads, *x) {
                    dx.iter_mut().zip(w).for_each(|(d, &c)| *d += g[0] * c);
                }
            }
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        geom: &ConvGeom,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let npix = geom.out_pixels();
        let plen = geom.patch_len();
        let oc = geom.out_c;
        if let Some(db) = self.buf(grads, b) {
            for n in 0..geom.batch {
                for o in 0..oc {
                    let start = (n * oc + o) * npix;
                    db[o] += g[start..start + npix].iter().copied().sum::<T>();
                }
            }
        }
        let need_w = self.needs(w);
        let need_x = self.needs(x);
        if !need_w && !need_x {
            return;
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let mut cols = vec![T::zero(); plen * npix];
        let mut dw = need_w.then(|| vec![T::zero(); oc * plen]);
        let mut dx = need_x.then(|| vec![T::zero(); geom.batch * geom.in_len()]);
        for n in 0..geom.batch {
            let gn = &g[n * oc * npix..(n + 1) * oc * npix];
            if let Some(dw) = dw.as_deref_mut() {
                kernels::im2col(&xv[n * geom.in_len()..(n + 1) * geom.in_len()], geom, &mut cols);
                // dW += dY @ cols^T
                T::gemm(
                    oc, npix, plen, T::one(), gn, npix as isize, 1, &cols, 1, npix as isize,
                    T::one(), dw, plen as isize, 1,
                );
            }
            if let Some(dx) = dx.as_deref_mut() {
                // dcols = W^T @ dY
                T::gemm(
                    plen, oc, npix, T::one(), wv, 1, plen as isize, gn, npix as isize, 1,
                    T::zero(), &mut cols, npix as isize, 1,
                );
                kernels::col2im(&cols, geom, &mut dx[n * geom.in_len()..(n + 1) * geom.in_len()]);
            }
        }
        if let (Some(buf), Some(part)) = (self.buf(grads, w), dw) {
            buf.iter_mut().zip(&part).for_each(|(d, &p)| *d += p);
        }
        if let (Some(buf), Some(part)) = (self.buf(grads, x), dx) {
            buf.iter_mut().zip(&part).for_each(|(d, &p)| *d += p);
        }
    }
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln()
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    param_nodes: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf or parameter node; `None` when it did not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient per parameter id, summed over every node that read the parameter.
    pub fn for_params(&self, store: &ParamStore<T>) -> Vec<Option<Vec<T>>> {
        let mut out: Vec<Option<Vec<T>>> = (0..store.len()).map(|_| None).collect();
        for &(id, node) in &self.param_nodes {
            if let Some(g) = &self.grads[node] {
                match &mut out[id.index()] {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &v)| *a += v),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}
