//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node holding its forward
//! value. [`Graph::backward`] walks the tape in reverse and returns the
//! gradient of one output with respect to every node that depends on a
//! differentiable leaf.

use std::borrow::Cow;

use super::attention;
use crate::error::{Error, Result};
use crate::model::FourierEncoder;
use crate::real::{gemm, Real, Trans};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<'p, T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    ScaleRows(Var, Vec<T>),
    Reshape(Var),
    LayerNorm {
        x: Var,
        weight: Option<Var>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Silu(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    SquareError(Var, Vec<T>),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
    },
    Fourier(Var, &'p FourierEncoder),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        starts: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<'p, T: Real> {
    value: Cow<'p, Tensor<T>>,
    op: Op<'p, T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Real> {
    nodes: Vec<Node<'p, T>>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shapes(ts: &[&Tensor<impl Real>]) -> String {
    ts.iter()
        .map(|t| format!("{:?}", t.shape()))
        .collect::<Vec<_>>()
        .join(", ")
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor<T>>, op: Op<'p, T>, needs_grad: bool) -> Var {
        if cfg!(feature = "nan-check") {
            assert!(value.all_finite(), "non-finite value produced");
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<'p, T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    /// Differentiable leaf borrowing a parameter tensor.
    pub fn param(&mut self, t: &'p Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Differentiable leaf owning its value.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'p Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(Error::shape("matmul", shapes(&[av, bv])));
        }
        let out = av.matmul(bv)?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, shapes(&[av, bv])));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    /// Sum of several same-shaped values.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("add_all of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.derived(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.derived(out, Op::AddScalar(x), &[x])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.derived(out, Op::Scale(x, c), &[x])
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != factors.len() {
            return Err(Error::shape(
                "scale_rows",
                format!("{:?} with {} factors", xv.shape(), factors.len()),
            ));
        }
        let mut out = xv.clone();
        for (i, &f) in factors.iter().enumerate() {
            for v in out.row_mut(i) {
                *v *= f;
            }
        }
        Ok(self.derived(out, Op::ScaleRows(x, factors), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.derived(out, Op::Reshape(x), &[x]))
    }

    /// Normalizes each row over the last axis, optionally scaling by a
    /// learned per-column weight. There is no bias.
    pub fn layer_norm(&mut self, x: Var, weight: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if let Some(w) = weight {
            let wv = self.value(w);
            if wv.len() != cols {
                return Err(Error::shape("layer_norm", shapes(&[xv, wv])));
            }
        }
        let eps = T::of(LAYER_NORM_EPS);
        let n = T::of(cols as f64);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(w) = weight {
            let wv = self.value(w).data();
            for row in out.chunks_mut(cols) {
                for (o, &g) in row.iter_mut().zip(wv) {
                    *o *= g;
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let mut inputs = vec![x];
        inputs.extend(weight);
        Ok(self.derived(
            out,
            Op::LayerNorm {
                x,
                weight,
                xhat,
                rstd,
            },
            &inputs,
        ))
    }

    /// GELU, tanh approximation (GPT-2).
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.derived(out, Op::Gelu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.derived(out, Op::Silu(x), &[x])
    }

    /// Selects rows of `x`; also serves as embedding lookup.
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (n, cols) = (xv.rows(), xv.cols());
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} of {:?}", xv.shape()),
            ));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in &rows {
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::new([rows.len(), cols], data)?;
        Ok(self.derived(out, Op::GatherRows(x, rows), &[x]))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids.to_vec())
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if start + len > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{} of {:?}", start + len, xv.shape()),
            ));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::new([rows, len], data)?;
        Ok(self.derived(out, Op::SliceCols(x, start), &[x]))
    }

    /// Splits the columns into `parts` equal chunks.
    pub fn chunk_cols(&mut self, x: Var, parts: usize) -> Result<Vec<Var>> {
        let cols = self.value(x).cols();
        if parts == 0 || !cols.is_multiple_of(parts) {
            return Err(Error::shape("chunk_cols", format!("{cols} columns into {parts}")));
        }
        let w = cols / parts;
        (0..parts).map(|i| self.slice_cols(x, i * w, w)).collect()
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.value(xs[0]).rows();
        if xs.iter().any(|&v| self.value(v).rows() != rows) {
            let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
            return Err(Error::shape("concat_cols", shapes(&vals)));
        }
        let total: usize = xs.iter().map(|&v| self.value(v).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in xs {
                data.extend_from_slice(self.value(v).row(r));
            }
        }
        let out = Tensor::new([rows, total], data)?;
        Ok(self.derived(out, Op::ConcatCols(xs.to_vec()), xs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.derived(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::of(xv.len() as f64);
        self.derived(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Per-row squared Euclidean distance to a constant target, `[rows, 1]`.
    pub fn square_error(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::shape("square_error", shapes(&[pv, target])));
        }
        let cols = pv.cols();
        let diff: Vec<T> = pv.data().iter().zip(target.data()).map(|(&a, &b)| a - b).collect();
        let data = diff.chunks(cols).map(|r| r.iter().map(|&d| d * d).sum()).collect();
        let out = Tensor::new([pv.rows(), 1], data)?;
        Ok(self.derived(out, Op::SquareError(pred, diff), &[pred]))
    }

    /// Row-wise softmax after adding an optional additive mask (use
    /// `-inf` to exclude an entry).
    pub fn softmax(&mut self, x: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.shape() != xv.shape() {
                return Err(Error::shape("softmax", shapes(&[xv, m])));
            }
        }
        let cols = xv.cols();
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            let row = out.row_mut(r);
            if let Some(m) = mask {
                for (v, &mv) in row.iter_mut().zip(&m.data()[r * cols..(r + 1) * cols]) {
                    *v += mv;
                }
            }
            softmax_in_place(row);
        }
        Ok(self.derived(out, Op::Softmax(x), &[x]))
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax
    /// of `logits`. Columns listed in `banned` get probability zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], banned: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, cols) = (lv.rows(), lv.cols());
        if targets.len() != rows || targets.iter().chain(banned).any(|&t| t >= cols) {
            return Err(Error::shape(
                "cross_entropy",
                format!("{:?} with {} targets", lv.shape(), targets.len()),
            ));
        }
        if targets.iter().any(|t| banned.contains(t)) {
            return Err(Error::InvalidArgument("cross_entropy target is banned".into()));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = T::zero();
        for (r, row) in probs.chunks_mut(cols).enumerate() {
            for &b in banned {
                row[b] = T::neg_infinity();
            }
            softmax_in_place(row);
            loss -= row[targets[r]].ln();
        }
        Ok(self.derived(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Fourier features of every element of `x`; `[rows, k]` becomes
    /// `[rows, k * channels]`.
    pub fn fourier(&mut self, x: Var, enc: &'p FourierEncoder) -> Var {
        let xv = self.value(x);
        let c = enc.channels();
        let mut data = Vec::with_capacity(xv.len() * c);
        for &v in xv.data() {
            enc.encode_into(v.f64(), &mut data);
        }
        let out = Tensor::new([xv.rows(), xv.cols() * c], data).expect("sized above");
        self.derived(out, Op::Fourier(x, enc), &[x])
    }

    /// Multi-head block-causal attention over `[t, width]` queries, keys
    /// and values.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, doc_ids: &[usize], heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (t, width) = (qv.rows(), qv.cols());
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() || doc_ids.len() != t {
            return Err(Error::shape(
                "attention",
                format!("{} with {} doc ids", shapes(&[qv, kv, vv]), doc_ids.len()),
            ));
        }
        if heads == 0 || width % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("width {width} not divisible by {heads} heads"),
            ));
        }
        let starts = attention::document_starts(doc_ids)?;
        let (out, probs) = attention::forward(qv.data(), kv.data(), vv.data(), t, width, heads, &starts);
        let out = Tensor::new([t, width], out)?;
        Ok(self.derived(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                starts,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Gradient of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let seed = Tensor::ones(self.value(output).shape().to_vec());
        self.backward_with(output, seed)
    }

    /// Vector-Jacobian product seeded with `seed` at `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.value(output).shape(), "seed shape");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[output.0].needs_grad {
            grads[output.0] = Some(seed);
        }
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient matches value shape")
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, T::one(), gd, Trans::No, bv.data(), Trans::Yes, T::zero(), &mut da);
                    self.accumulate(grads, a, self.like(a, da));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, T::one(), av.data(), Trans::Yes, gd, Trans::No, T::zero(), &mut db);
                    self.accumulate(grads, b, self.like(b, db));
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.nodes[a.0].needs_grad {
                    let d = gd.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, a, self.like(a, d));
                }
                if self.nodes[b.0].needs_grad {
                    let d = gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, b, self.like(b, d));
                }
            }
            &Op::AddScalar(x) => self.accumulate(grads, x, g.clone()),
            &Op::Scale(x, c) => self.accumulate(grads, x, g.map(|v| v * c)),
            Op::ScaleRows(x, factors) => {
                let mut d = g.clone();
                for (r, &f) in factors.iter().enumerate() {
                    for v in d.row_mut(r) {
                        *v *= f;
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d.into_data()));
            }
            &Op::Reshape(x) => self.accumulate(grads, x, self.like(x, gd.to_vec())),
            Op::LayerNorm {
                x,
                weight,
                xhat,
                rstd,
            } => {
                let cols = self.value(*x).cols();
                let n = T::of(cols as f64);
                let w = weight.map(|w| self.value(w).data());
                let mut dx = vec![T::zero(); gd.len()];
                let mut dw = weight.map(|_| vec![T::zero(); cols]);
                for (r, (grow, hrow)) in gd.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                    let dxhat: Vec<T> = match w {
                        Some(w) => grow.iter().zip(w).map(|(&a, &b)| a * b).collect(),
                        None => grow.to_vec(),
                    };
                    if let Some(dw) = &mut dw {
                        for c in 0..cols {
                            dw[c] += grow[c] * hrow[c];
                        }
                    }
                    let mean_d = dxhat.iter().copied().sum::<T>() / n;
                    let mean_dh = dxhat.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for c in 0..cols {
                        dx[r * cols + c] = rstd[r] * (dxhat[c] - mean_d - hrow[c] * mean_dh);
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
                if let (Some(w), Some(dw)) = (weight, dw) {
                    self.accumulate(grads, *w, self.like(*w, dw));
                }
            }
            &Op::Gelu(x) => {
                let d = gd.iter().zip(self.value(x).data()).map(|(&g, &v)| g * gelu_grad(v)).collect();
                self.accumulate(grads, x, self.like(x, d));
            }
            &Op::Silu(x) => {
                let d = gd
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&g, &v)| {
                        let s = sigmoid(v);
                        g * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, x, self.like(x, d));
            }
            Op::GatherRows(x, rows) => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut d = vec![T::zero(); xv.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for c in 0..cols {
                        d[r * cols + c] += gd[k * cols + c];
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            &Op::SliceCols(x, start) => {
                let xv = self.value(x);
                let (cols, len) = (xv.cols(), g.cols());
                let mut d = vec![T::zero(); xv.len()];
                for r in 0..xv.rows() {
                    d[r * cols + start..r * cols + start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, x, self.like(x, d));
            }
            Op::ConcatCols(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let xv = self.value(x);
                    let c = xv.cols();
                    let mut d = Vec::with_capacity(xv.len());
                    for r in 0..xv.rows() {
                        d.extend_from_slice(&g.row(r)[offset..offset + c]);
                    }
                    offset += c;
                    self.accumulate(grads, x, self.like(x, d));
                }
            }
            &Op::Sum(x) => {
                let d = vec![gd[0]; self.value(x).len()];
                self.accumulate(grads, x, self.like(x, d));
            }
            &Op::Mean(x) => {
                let n = self.value(x).len();
                let d = vec![gd[0] / T::of(n as f64); n];
                self.accumulate(grads, x, self.like(x, d));
            }
            Op::SquareError(pred, diff) => {
                let cols = self.value(*pred).cols();
                let two = T::of(2.0);
                let d = diff
                    .iter()
                    .enumerate()
                    .map(|(k, &df)| two * df * gd[k / cols])
                    .collect();
                self.accumulate(grads, *pred, self.like(*pred, d));
            }
            &Op::Softmax(x) => {
                let y = &node.value;
                let cols = y.cols();
                let mut d = vec![T::zero(); y.len()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        d[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, x, self.like(x, d));
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let cols = self.value(*logits).cols();
                let mut d: Vec<T> = probs.iter().map(|&p| p * gd[0]).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * cols + t] -= gd[0];
                }
                self.accumulate(grads, *logits, self.like(*logits, d));
            }
            &Op::Fourier(x, enc) => {
                let xv = self.value(x);
                let c = enc.channels();
                let d = xv
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| T::of(enc.derivative_dot(v.f64(), &gd[k * c..(k + 1) * c])))
                    .collect();
                self.accumulate(grads, x, self.like(x, d));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                starts,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (t, width) = (qv.rows(), qv.cols());
                let (dq, dk, dv) = attention::backward(
                    qv.data(),
                    kv.data(),
                    vv.data(),
                    probs,
                    gd,
                    t,
                    width,
                    *heads,
                    starts,
                );
                self.accumulate(grads, *q, self.like(*q, dq));
                self.accumulate(grads, *k, self.like(*k, dk));
                self.accumulate(grads, *v, self.like(*v, dv));
            }
        }
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut denom = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        denom += *v;
    }
    for v in row.iter_mut() {
        *v /= denom;
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_C: f64 = 0.044715;

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + T::of(GELU_C) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + T::of(GELU_C) * x * x * x);
    let th = u.tanh();
    let du = k * (T::one() + T::of(3.0 * GELU_C) * x * x);
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * du
}
