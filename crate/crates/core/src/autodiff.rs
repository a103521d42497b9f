//! Reverse-mode differentiation on an explicit tape.
//!
//! Nodes are appended in evaluation order, so the reverse sweep is a single
//! backwards pass over the arena. Each op stores a closure producing exact
//! vector-Jacobian products for its parents; the correctness contract is
//! agreement with central finite differences, which the tests here enforce
//! op by op.
//!
//! A tape created with [`Tape::no_grad`] runs the identical forward
//! arithmetic but records no closures, so inference and training forward
//! passes are bit-identical.

use alloc::boxed::Box;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::Cell;

use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Everything a backward closure may look at.
pub struct BackArgs<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub upstream: &'a Tensor,
}

type BackFn = Box<dyn Fn(&BackArgs<'_>) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackFn>,
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    flops: Cell<u64>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, dims: &[usize]) -> Tensor {
        match self.by_node[v.0].as_ref() {
            Some(t) => t.clone(),
            None => Tensor::zeros(dims),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            flops: Cell::new(0),
        }
    }

    /// Forward-only tape: identical arithmetic, no backward closures.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
            flops: Cell::new(0),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Multiply-accumulate count of the matrix products recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    fn bump_flops(&self, n: u64) {
        self.flops.set(self.flops.get() + n);
    }

    /// Append a node. Building block for fused ops defined outside this
    /// module; `backward` must return one gradient per parent, shaped like
    /// that parent's value.
    pub fn push(&mut self, parents: &[Var], value: Tensor, backward: Option<BackFn>) -> Var {
        let node = if self.grad_enabled {
            Node {
                value,
                parents: parents.iter().map(|v| v.0).collect(),
                backward,
            }
        } else {
            Node {
                value,
                parents: Vec::new(),
                backward: None,
            }
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(&[], value, None)
    }

    /// A copy of `v`'s value with the history cut (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate for every node
    /// reachable from `loss`, leaves included.
    pub fn backward(&self, loss: Var) -> Grads {
        assert!(self.grad_enabled, "backward() on a no_grad tape");
        assert_eq!(self.value(loss).len(), 1, "backward() requires a scalar loss");
        let mut by_node: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        by_node[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if by_node[i].is_none() {
                continue;
            }
            let node = &self.nodes[i];
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let upstream = by_node[i].take().expect("checked above");
            let args = BackArgs {
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                upstream: &upstream,
            };
            let parent_grads = back(&args);
            assert_eq!(parent_grads.len(), node.parents.len(), "backward arity mismatch");
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                debug_assert_eq!(self.nodes[p].value.dims(), g.dims(), "gradient shape mismatch");
                match &mut by_node[p] {
                    Some(acc) => acc.add_scaled(&g, 1.0),
                    slot @ None => *slot = Some(g),
                }
            }
            by_node[i] = Some(upstream);
        }
        Grads { by_node }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(
            &[a, b],
            value,
            Some(Box::new(|args| vec![args.upstream.clone(), args.upstream.clone()])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(
            &[a, b],
            value,
            Some(Box::new(|args| {
                vec![args.upstream.clone(), args.upstream.map(|g| -g)]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(
            &[a, b],
            value,
            Some(Box::new(|args| {
                vec![
                    args.upstream.zip(args.inputs[1], |g, y| g * y),
                    args.upstream.zip(args.inputs[0], |g, x| g * x),
                ]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let value = self.value(a).map(|x| c * x);
        self.push(
            &[a],
            value,
            Some(Box::new(move |args| vec![args.upstream.map(|g| c * g)])),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu_f);
        self.push(
            &[a],
            value,
            Some(Box::new(|args| {
                vec![args.upstream.zip(args.inputs[0], |g, x| g * gelu_df(x))]
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::expf);
        self.push(
            &[a],
            value,
            Some(Box::new(|args| {
                vec![args.upstream.zip(args.output, |g, y| g * y)]
            })),
        )
    }

    // ---- matrix products ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul(self.value(a), self.value(b));
        self.bump_flops((value.rows() * value.cols() * self.value(a).cols()) as u64);
        self.push(
            &[a, b],
            value,
            Some(Box::new(|args| {
                vec![
                    matmul_nt(args.upstream, args.inputs[1]),
                    matmul_tn(args.inputs[0], args.upstream),
                ]
            })),
        )
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = matmul_nt(self.value(a), self.value(b));
        self.bump_flops((value.rows() * value.cols() * self.value(a).cols()) as u64);
        self.push(
            &[a, b],
            value,
            Some(Box::new(|args| {
                vec![
                    matmul(args.upstream, args.inputs[1]),
                    matmul_tn(args.upstream, args.inputs[0]),
                ]
            })),
        )
    }

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        assert_eq!(xv.cols(), wv.rows(), "linear: inner dims disagree");
        assert_eq!(wv.cols(), bv.len(), "linear: bias length disagrees");
        let mut value = matmul(xv, wv);
        for r in 0..value.rows() {
            for (o, &bb) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        self.bump_flops((value.rows() * value.cols() * xv.cols()) as u64);
        self.push(
            &[x, w, b],
            value,
            Some(Box::new(|args| {
                let gx = matmul_nt(args.upstream, args.inputs[1]);
                let gw = matmul_tn(args.inputs[0], args.upstream);
                let mut gb = Tensor::zeros(args.inputs[2].dims());
                for r in 0..args.upstream.rows() {
                    for (acc, &g) in gb.data_mut().iter_mut().zip(args.upstream.row(r)) {
                        *acc += g;
                    }
                }
                vec![gx, gw, gb]
            })),
        )
    }

    // ---- broadcasts over rows / columns ----

    /// Add a length-`cols` vector to every row.
    pub fn add_bcast_row(&mut self, x: Var, v: Var) -> Var {
        let xv = self.value(x);
        let vv = self.value(v);
        assert_eq!(xv.cols(), vv.len(), "add_bcast_row length mismatch");
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, &b) in value.row_mut(r).iter_mut().zip(vv.data()) {
                *o += b;
            }
        }
        self.push(
            &[x, v],
            value,
            Some(Box::new(|args| {
                let mut gv = Tensor::zeros(args.inputs[1].dims());
                for r in 0..args.upstream.rows() {
                    for (acc, &g) in gv.data_mut().iter_mut().zip(args.upstream.row(r)) {
                        *acc += g;
                    }
                }
                vec![args.upstream.clone(), gv]
            })),
        )
    }

    /// Multiply every row elementwise by a length-`cols` vector.
    pub fn mul_bcast_row(&mut self, x: Var, v: Var) -> Var {
        let xv = self.value(x);
        let vv = self.value(v);
        assert_eq!(xv.cols(), vv.len(), "mul_bcast_row length mismatch");
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, &b) in value.row_mut(r).iter_mut().zip(vv.data()) {
                *o *= b;
            }
        }
        self.push(
            &[x, v],
            value,
            Some(Box::new(|args| {
                let x = args.inputs[0];
                let v = args.inputs[1];
                let mut gx = args.upstream.clone();
                for r in 0..gx.rows() {
                    for (o, &b) in gx.row_mut(r).iter_mut().zip(v.data()) {
                        *o *= b;
                    }
                }
                let mut gv = Tensor::zeros(v.dims());
                for r in 0..args.upstream.rows() {
                    for ((acc, &g), &xx) in
                        gv.data_mut().iter_mut().zip(args.upstream.row(r)).zip(x.row(r))
                    {
                        *acc += g * xx;
                    }
                }
                vec![gx, gv]
            })),
        )
    }

    /// Add `v[i]` to every element of row `i`.
    pub fn add_bcast_col(&mut self, x: Var, v: Var) -> Var {
        let xv = self.value(x);
        let vv = self.value(v);
        assert_eq!(xv.rows(), vv.len(), "add_bcast_col length mismatch");
        let mut value = xv.clone();
        for r in 0..value.rows() {
            let add = vv.data()[r];
            for o in value.row_mut(r) {
                *o += add;
            }
        }
        self.push(
            &[x, v],
            value,
            Some(Box::new(|args| {
                let mut gv = Tensor::zeros(args.inputs[1].dims());
                for r in 0..args.upstream.rows() {
                    gv.data_mut()[r] = args.upstream.row(r).iter().sum();
                }
                vec![args.upstream.clone(), gv]
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(
            &[x],
            value,
            Some(Box::new(|args| {
                let g = args.upstream.item();
                vec![Tensor::filled(args.inputs[0].dims(), g)]
            })),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f32;
        let value = Tensor::scalar(self.value(x).sum() / n);
        self.push(
            &[x],
            value,
            Some(Box::new(move |args| {
                let g = args.upstream.item() / n;
                vec![Tensor::filled(args.inputs[0].dims(), g)]
            })),
        )
    }

    /// Row sums of a 2D tensor, returned as a length-`rows` vector.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let rows = xv.rows();
        let mut value = Tensor::zeros(&[rows]);
        for r in 0..rows {
            value.data_mut()[r] = xv.row(r).iter().sum();
        }
        self.push(
            &[x],
            value,
            Some(Box::new(|args| {
                let mut g = Tensor::zeros(args.inputs[0].dims());
                for r in 0..g.rows() {
                    let u = args.upstream.data()[r];
                    for o in g.row_mut(r) {
                        *o = u;
                    }
                }
                vec![g]
            })),
        )
    }

    /// Column means of a 2D tensor, returned as a length-`cols` vector.
    pub fn col_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut value = Tensor::zeros(&[cols]);
        for r in 0..rows {
            for (acc, &v) in value.data_mut().iter_mut().zip(xv.row(r)) {
                *acc += v;
            }
        }
        for v in value.data_mut() {
            *v /= rows as f32;
        }
        self.push(
            &[x],
            value,
            Some(Box::new(move |args| {
                let mut g = Tensor::zeros(args.inputs[0].dims());
                let inv = 1.0 / rows as f32;
                for r in 0..rows {
                    for (o, &u) in g.row_mut(r).iter_mut().zip(args.upstream.data()) {
                        *o = u * inv;
                    }
                }
                vec![g]
            })),
        )
    }

    /// Mean of squared elementwise differences (the L2 reconstruction loss).
    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    // ---- normalization ----

    /// Per-row standardization: zero mean, unit variance, no affine part.
    /// `eps` sits inside the square root.
    pub fn layer_norm(&mut self, x: Var, eps: f32) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        assert!(cols >= 2, "layer_norm requires feature dim >= 2");
        let mut value = Tensor::zeros(&[rows, cols]);
        let mut inv_sigma = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f32>() / cols as f32;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let inv = 1.0 / libm::sqrtf(var + eps);
            inv_sigma.push(inv);
            for (o, &v) in value.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        self.push(
            &[x],
            value,
            Some(Box::new(move |args| {
                let y = args.output;
                let (rows, cols) = (y.rows(), y.cols());
                let mut g = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    let gy = args.upstream.row(r);
                    let yy = y.row(r);
                    let mean_g = gy.iter().sum::<f32>() / cols as f32;
                    let mean_gy = gy.iter().zip(yy).map(|(&a, &b)| a * b).sum::<f32>() / cols as f32;
                    let inv = inv_sigma[r];
                    for ((o, &gg), &yv) in g.row_mut(r).iter_mut().zip(gy).zip(yy) {
                        *o = inv * (gg - mean_g - yv * mean_gy);
                    }
                }
                vec![g]
            })),
        )
    }

    /// Per-row L2 normalization onto the unit sphere.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        const EPS: f32 = 1e-12;
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut value = Tensor::zeros(&[rows, cols]);
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let n = libm::sqrtf(row.iter().map(|&v| v * v).sum::<f32>() + EPS);
            norms.push(n);
            for (o, &v) in value.row_mut(r).iter_mut().zip(row) {
                *o = v / n;
            }
        }
        self.push(
            &[x],
            value,
            Some(Box::new(move |args| {
                let x = args.inputs[0];
                let (rows, cols) = (x.rows(), x.cols());
                let mut g = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    let gy = args.upstream.row(r);
                    let xx = x.row(r);
                    let n = norms[r];
                    let dot: f32 = gy.iter().zip(xx).map(|(&a, &b)| a * b).sum();
                    let n3 = n * n * n;
                    for ((o, &gg), &xv) in g.row_mut(r).iter_mut().zip(gy).zip(xx) {
                        *o = gg / n - xv * dot / n3;
                    }
                }
                vec![g]
            })),
        )
    }

    // ---- softmax family ----

    /// Row softmax over allowed entries only; disallowed entries are exactly
    /// zero in the output and receive zero gradient. Every row must have at
    /// least one allowed entry.
    pub fn masked_softmax_rows(&mut self, x: Var, allowed: Arc<Vec<bool>>) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        assert_eq!(allowed.len(), rows * cols, "mask shape mismatch");
        let mut value = Tensor::zeros(&[rows, cols]);
        for r in 0..rows {
            let row = xv.row(r);
            let m = &allowed[r * cols..(r + 1) * cols];
            let mut max = f32::NEG_INFINITY;
            for (i, &v) in row.iter().enumerate() {
                if m[i] && v > max {
                    max = v;
                }
            }
            assert!(max > f32::NEG_INFINITY, "all-masked softmax row {r}");
            let mut z = 0.0;
            let out = value.row_mut(r);
            for i in 0..cols {
                if m[i] {
                    let e = libm::expf(row[i] - max);
                    out[i] = e;
                    z += e;
                }
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        }
        self.push(
            &[x],
            value,
            Some(Box::new(move |args| {
                let y = args.output;
                let (rows, cols) = (y.rows(), y.cols());
                let mut g = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    let yy = y.row(r);
                    let gy = args.upstream.row(r);
                    let dot: f32 = yy.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gg) in g.row_mut(r).iter_mut().zip(yy).zip(gy) {
                        *o = yv * (gg - dot);
                    }
                }
                vec![g]
            })),
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let allowed = Arc::new(vec![true; n]);
        self.masked_softmax_rows(x, allowed)
    }

    /// Numerically stable per-row `log softmax`.
    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut value = Tensor::zeros(&[rows, cols]);
        for r in 0..rows {
            let row = xv.row(r);
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + libm::logf(row.iter().map(|&v| libm::expf(v - max)).sum::<f32>());
            for (o, &v) in value.row_mut(r).iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        self.push(
            &[x],
            value,
            Some(Box::new(|args| {
                let y = args.output;
                let (rows, cols) = (y.rows(), y.cols());
                let mut g = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    let gy = args.upstream.row(r);
                    let sum_g: f32 = gy.iter().sum();
                    for ((o, &gg), &yv) in g.row_mut(r).iter_mut().zip(gy).zip(y.row(r)) {
                        *o = gg - libm::expf(yv) * sum_g;
                    }
                }
                vec![g]
            })),
        )
    }

    /// Sum over rows of `-log softmax(logits)[target]`. Targets must be in
    /// range; the caller validates.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: Arc<Vec<u32>>) -> Var {
        let lv = self.value(logits);
        let (rows, cols) = (lv.rows(), lv.cols());
        assert_eq!(targets.len(), rows, "one target per logit row");
        let mut total = 0.0f32;
        for r in 0..rows {
            let row = lv.row(r);
            let t = targets[r] as usize;
            assert!(t < cols, "target {t} out of range for {cols} classes");
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + libm::logf(row.iter().map(|&v| libm::expf(v - max)).sum::<f32>());
            total += lse - row[t];
        }
        let value = Tensor::scalar(total);
        self.push(
            &[logits],
            value,
            Some(Box::new(move |args| {
                let lv = args.inputs[0];
                let (rows, cols) = (lv.rows(), lv.cols());
                let u = args.upstream.item();
                let mut g = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    let row = lv.row(r);
                    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let mut z = 0.0;
                    for &v in row {
                        z += libm::expf(v - max);
                    }
                    let t = targets[r] as usize;
                    for (i, (o, &v)) in g.row_mut(r).iter_mut().zip(row).enumerate() {
                        let p = libm::expf(v - max) / z;
                        *o = u * (p - if i == t { 1.0 } else { 0.0 });
                    }
                }
                vec![g]
            })),
        )
    }

    // ---- gathers, slices, concatenation ----

    /// Select rows of `table` by index; backward scatter-adds into the table.
    pub fn gather_rows(&mut self, table: Var, ids: Arc<Vec<u32>>) -> Var {
        let tv = self.value(table);
        let cols = tv.cols();
        let rows_in = tv.rows();
        let mut value = Tensor::zeros(&[ids.len(), cols]);
        for (r, &id) in ids.iter().enumerate() {
            assert!((id as usize) < rows_in, "gather id {id} out of range {rows_in}");
            value.row_mut(r).copy_from_slice(tv.row(id as usize));
        }
        self.push(
            &[table],
            value,
            Some(Box::new(move |args| {
                let mut g = Tensor::zeros(args.inputs[0].dims());
                for (r, &id) in ids.iter().enumerate() {
                    let src = args.upstream.row(r);
                    for (o, &u) in g.row_mut(id as usize).iter_mut().zip(src) {
                        *o += u;
                    }
                }
                vec![g]
            })),
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        assert!(start < end && end <= xv.rows(), "row slice out of range");
        let mut value = Tensor::zeros(&[end - start, cols]);
        for r in start..end {
            value.row_mut(r - start).copy_from_slice(xv.row(r));
        }
        self.push(
            &[x],
            value,
            Some(Box::new(move |args| {
                let mut g = Tensor::zeros(args.inputs[0].dims());
                for r in start..end {
                    g.row_mut(r).copy_from_slice(args.upstream.row(r - start));
                }
                vec![g]
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut value = Tensor::zeros(&[total, cols]);
        let mut offset = 0;
        let mut row_counts = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            for r in 0..pv.rows() {
                value.row_mut(offset + r).copy_from_slice(pv.row(r));
            }
            row_counts.push(pv.rows());
            offset += pv.rows();
        }
        self.push(
            parts,
            value,
            Some(Box::new(move |args| {
                let mut out = Vec::with_capacity(row_counts.len());
                let mut offset = 0;
                for (&rows, input) in row_counts.iter().zip(args.inputs.iter()) {
                    let mut g = Tensor::zeros(input.dims());
                    for r in 0..rows {
                        g.row_mut(r).copy_from_slice(args.upstream.row(offset + r));
                    }
                    out.push(g);
                    offset += rows;
                }
                out
            })),
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        assert!(start < end && end <= cols, "column slice out of range");
        let mut value = Tensor::zeros(&[rows, end - start]);
        for r in 0..rows {
            value.row_mut(r).copy_from_slice(&xv.row(r)[start..end]);
        }
        self.push(
            &[x],
            value,
            Some(Box::new(move |args| {
                let mut g = Tensor::zeros(args.inputs[0].dims());
                for r in 0..g.rows() {
                    g.row_mut(r)[start..end].copy_from_slice(args.upstream.row(r));
                }
                vec![g]
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(&[rows, total]);
        let mut col_counts = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            let c = pv.cols();
            for r in 0..rows {
                value.row_mut(r)[offset..offset + c].copy_from_slice(pv.row(r));
            }
            col_counts.push(c);
            offset += c;
        }
        self.push(
            parts,
            value,
            Some(Box::new(move |args| {
                let mut out = Vec::with_capacity(col_counts.len());
                let mut offset = 0;
                for (&c, input) in col_counts.iter().zip(args.inputs.iter()) {
                    let mut g = Tensor::zeros(input.dims());
                    for r in 0..g.rows() {
                        g.row_mut(r).copy_from_slice(&args.upstream.row(r)[offset..offset + c]);
                    }
                    out.push(g);
                    offset += c;
                }
                out
            })),
        )
    }

    /// Straight-through estimator: forward takes `quantized`, backward passes
    /// the upstream gradient to `z` unchanged.
    pub fn straight_through(&mut self, z: Var, quantized: Tensor) -> Var {
        assert_eq!(self.value(z).dims(), quantized.dims(), "straight_through shape mismatch");
        self.push(
            &[z],
            quantized,
            Some(Box::new(|args| vec![args.upstream.clone()])),
        )
    }
}

fn gelu_f(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * core::f32::consts::FRAC_1_SQRT_2))
}

fn gelu_df(x: f32) -> f32 {
    let phi_big = 0.5 * (1.0 + libm::erff(x * core::f32::consts::FRAC_1_SQRT_2));
    let phi_small = libm::expf(-0.5 * x * x) / libm::sqrtf(2.0 * core::f32::consts::PI);
    phi_big + x * phi_small
}

/// Central finite-difference oracle for gradient checks.
///
/// Perturbs every coordinate of a chosen input with step `h` and compares the
/// quotient against the analytic gradient at relative tolerance `tol`
/// (absolute floor `tol` for near-zero pairs). Independent of the tape: the
/// loss is re-evaluated from scratch on each probe.
pub mod grad_check {
    use super::Tensor;
    use alloc::vec::Vec;

    pub const FD_STEP: f32 = 1e-3;
    pub const FD_TOL: f32 = 1e-3;

    /// Max relative error between the analytic gradient of `inputs[which]`
    /// and central differences of `loss`.
    pub fn max_rel_error(
        loss: &mut dyn FnMut(&[Tensor]) -> f32,
        inputs: &[Tensor],
        which: usize,
        analytic: &Tensor,
        step: f32,
    ) -> f32 {
        let mut probe: Vec<Tensor> = inputs.to_vec();
        let mut worst = 0.0f32;
        for i in 0..inputs[which].len() {
            let orig = probe[which].data()[i];
            probe[which].data_mut()[i] = orig + step;
            let up = loss(&probe) as f64;
            probe[which].data_mut()[i] = orig - step;
            let down = loss(&probe) as f64;
            probe[which].data_mut()[i] = orig;
            let fd = ((up - down) / (2.0 * step as f64)) as f32;
            let ad = analytic.data()[i];
            let denom = ad.abs().max(fd.abs()).max(1.0);
            let rel = (ad - fd).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::grad_check::{max_rel_error, FD_STEP, FD_TOL};
    use super::*;
    use crate::rng::{fill_normal, stream_rng, STREAM_INIT};

    fn randn(dims: &[usize], seed: u64) -> Tensor {
        let mut rng = stream_rng(seed, &[STREAM_INIT]);
        let mut t = Tensor::zeros(dims);
        fill_normal(&mut rng, 1.0, t.data_mut());
        t
    }

    /// Check gradients of a scalar graph w.r.t. every input.
    fn check_all(build: impl Fn(&mut Tape, &[Var]) -> Var, inputs: &[Tensor]) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);
        let mut eval = |xs: &[Tensor]| {
            let mut t = Tape::no_grad();
            let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
            let l = build(&mut t, &vs);
            t.value(l).item()
        };
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads.get_or_zeros(*v, inputs[i].dims());
            let err = max_rel_error(&mut eval, inputs, i, &analytic, FD_STEP);
            assert!(err <= FD_TOL, "input {i}: rel err {err}");
        }
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(randn(&[3, 4], 1));
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.set(i, i, 1.0);
        }
        let w = tape.leaf(eye);
        let b = tape.leaf(Tensor::zeros(&[4]));
        let y = tape.linear(x, w, b);
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let x0 = tape.leaf(Tensor::zeros(&[2, 4]));
        let w2 = tape.leaf(randn(&[4, 3], 2));
        let b2 = tape.leaf(Tensor::from_vec(&[3], alloc::vec![1.0, -2.0, 0.5]));
        let y2 = tape.linear(x0, w2, b2);
        for r in 0..2 {
            assert_eq!(tape.value(y2).row(r), &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn linear_gradients() {
        check_all(
            |t, vs| {
                let y = t.linear(vs[0], vs[1], vs[2]);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            &[randn(&[3, 5], 3), randn(&[5, 4], 4), randn(&[4], 5)],
        );
    }

    #[test]
    fn matmul_gradients() {
        check_all(
            |t, vs| {
                let y = t.matmul(vs[0], vs[1]);
                let sq = t.mul(y, y);
                t.sum_all(sq)
            },
            &[randn(&[2, 3], 6), randn(&[3, 4], 7)],
        );
        check_all(
            |t, vs| {
                let y = t.matmul_nt(vs[0], vs[1]);
                let sq = t.mul(y, y);
                t.sum_all(sq)
            },
            &[randn(&[2, 3], 8), randn(&[4, 3], 9)],
        );
    }

    #[test]
    fn layer_norm_moments_and_gradients() {
        let x = randn(&[4, 8], 10);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = tape.layer_norm(xv, 1e-6);
        for r in 0..4 {
            let row = tape.value(y).row(r);
            let mean = row.iter().sum::<f32>() / 8.0;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / 8.0;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
        check_all(
            |t, vs| {
                let y = t.layer_norm(vs[0], 1e-6);
                let w = t.leaf(randn(&[4, 8], 11));
                let p = t.mul(y, w);
                t.sum_all(p)
            },
            &[x],
        );
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[1, 6], 3.7));
        let y = tape.layer_norm(x, 1e-6);
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-3, "normalized constant row should vanish, got {v}");
        }
    }

    #[test]
    fn softmax_rows_are_stochastic_and_masked_zero() {
        let x = randn(&[3, 5], 12);
        let mut mask = vec![true; 15];
        mask[1] = false;
        mask[7] = false;
        mask[8] = false;
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let y = tape.masked_softmax_rows(xv, Arc::new(mask.clone()));
        for r in 0..3 {
            let row = tape.value(y).row(r);
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            for (c, &v) in row.iter().enumerate() {
                if !mask[r * 5 + c] {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn masked_softmax_gradients() {
        let mut mask = vec![true; 12];
        mask[2] = false;
        mask[5] = false;
        let m = Arc::new(mask);
        check_all(
            move |t, vs| {
                let y = t.masked_softmax_rows(vs[0], m.clone());
                let w = t.leaf(randn(&[3, 4], 13));
                let p = t.mul(y, w);
                t.sum_all(p)
            },
            &[randn(&[3, 4], 14)],
        );
    }

    #[test]
    #[should_panic(expected = "all-masked")]
    fn all_masked_row_panics() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        let mut mask = vec![true; 6];
        mask[3] = false;
        mask[4] = false;
        mask[5] = false;
        tape.masked_softmax_rows(x, Arc::new(mask));
    }

    #[test]
    fn cross_entropy_values_and_gradients() {
        // Uniform logits over K classes -> ln K.
        let k = 8192;
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[1, k]));
        let loss = tape.cross_entropy_sum(logits, Arc::new(vec![17]));
        let expect = libm::logf(k as f32);
        assert!((tape.value(loss).item() - expect).abs() < 1e-3, "ln K");

        // Dominant target logit -> ~0 loss.
        let mut t2 = Tape::new();
        let mut dom = Tensor::zeros(&[1, 64]);
        dom.set(0, 5, 20.0);
        let lv = t2.leaf(dom);
        let l2 = t2.cross_entropy_sum(lv, Arc::new(vec![5]));
        assert!(t2.value(l2).item() < 1e-6);

        let targets = Arc::new(vec![1u32, 3, 0]);
        check_all(
            move |t, vs| t.cross_entropy_sum(vs[0], targets.clone()),
            &[randn(&[3, 6], 15)],
        );
    }

    #[test]
    fn gather_scatter_gradients() {
        let ids = Arc::new(vec![2u32, 0, 2, 1]);
        check_all(
            move |t, vs| {
                let g = t.gather_rows(vs[0], ids.clone());
                let w = t.leaf(randn(&[4, 3], 16));
                let p = t.mul(g, w);
                t.sum_all(p)
            },
            &[randn(&[5, 3], 17)],
        );
    }

    #[test]
    fn slice_concat_roundtrip_and_gradients() {
        let x = randn(&[6, 4], 18);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let a = tape.slice_rows(xv, 0, 2);
        let b = tape.slice_rows(xv, 2, 6);
        let back = tape.concat_rows(&[a, b]);
        assert_eq!(tape.value(back).data(), x.data());

        let c = tape.slice_cols(xv, 0, 1);
        let d = tape.slice_cols(xv, 1, 4);
        let back2 = tape.concat_cols(&[c, d]);
        assert_eq!(tape.value(back2).data(), x.data());

        check_all(
            |t, vs| {
                let a = t.slice_rows(vs[0], 1, 3);
                let b = t.slice_cols(a, 0, 2);
                let sq = t.mul(b, b);
                t.sum_all(sq)
            },
            &[x],
        );
    }

    #[test]
    fn straight_through_passes_gradient() {
        let z = randn(&[2, 3], 19);
        let q = randn(&[2, 3], 20);
        let mut tape = Tape::new();
        let zv = tape.leaf(z);
        let st = tape.straight_through(zv, q.clone());
        assert_eq!(tape.value(st).data(), q.data());
        let w = tape.leaf(randn(&[2, 3], 21));
        let p = tape.mul(st, w);
        let loss = tape.sum_all(p);
        let grads = tape.backward(loss);
        // dL/dz == dL/dq == w, elementwise.
        assert_eq!(grads.get(zv).unwrap().data(), tape.value(w).data());
    }

    #[test]
    fn l2_normalize_and_misc_gradients() {
        check_all(
            |t, vs| {
                let y = t.l2_normalize_rows(vs[0]);
                let w = t.leaf(randn(&[3, 4], 22));
                let p = t.mul(y, w);
                t.sum_all(p)
            },
            &[randn(&[3, 4], 23)],
        );
        check_all(
            |t, vs| {
                let y = t.gelu(vs[0]);
                t.sum_all(y)
            },
            &[randn(&[2, 5], 24)],
        );
        check_all(
            |t, vs| {
                let y = t.log_softmax_rows(vs[0]);
                let e = t.exp(y);
                let w = t.leaf(randn(&[2, 5], 25));
                let p = t.mul(e, w);
                t.sum_all(p)
            },
            &[randn(&[2, 5], 26)],
        );
        check_all(
            |t, vs| {
                let s = t.col_mean(vs[0]);
                let q = t.mul(s, s);
                t.sum_all(q)
            },
            &[randn(&[4, 3], 27)],
        );
        check_all(
            |t, vs| {
                let s = t.row_sum(vs[0]);
                let q = t.mul(s, s);
                t.sum_all(q)
            },
            &[randn(&[4, 3], 28)],
        );
        check_all(
            |t, vs| {
                let a = t.add_bcast_col(vs[0], vs[1]);
                let b = t.mul_bcast_row(a, vs[2]);
                let c = t.add_bcast_row(b, vs[3]);
                let sq = t.mul(c, c);
                t.mean_all(sq)
            },
            &[
                randn(&[3, 4], 29),
                randn(&[3], 30),
                randn(&[4], 31),
                randn(&[4], 32),
            ],
        );
    }

    #[test]
    fn no_grad_matches_grad_forward() {
        let x = randn(&[4, 4], 33);
        let w = randn(&[4, 4], 34);
        let run = |grad: bool| {
            let mut tape = if grad { Tape::new() } else { Tape::no_grad() };
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(w.clone());
            let h = tape.matmul(xv, wv);
            let n = tape.layer_norm(h, 1e-6);
            let g = tape.gelu(n);
            tape.value(g).clone()
        };
        assert_eq!(run(true).data(), run(false).data());
    }
}
