//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! walks the tape in reverse and returns the gradient of a scalar output with
//! respect to every node that requires one. The op set is exactly what the
//! encoder, channel and decoder need: dense layers, pointwise activations,
//! row gathers for neighborhoods, grouped reductions over neighbor slots,
//! batch normalization and the Chamfer loss.

use std::rc::Rc;

use crate::tensor::{gemm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const BN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Tanh(Var),
    Gather(Var, Rc<[usize]>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    GroupMax {
        src: Var,
        argmax: Vec<usize>,
    },
    GroupSum {
        src: Var,
        group: usize,
    },
    GroupSoftmax {
        src: Var,
        group: usize,
    },
    BatchNorm {
        src: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Chamfer {
        src: Var,
        target: Rc<Matrix>,
        seg_src: usize,
        seg_tgt: usize,
        nn_src: Vec<usize>,
        nn_tgt: Vec<usize>,
    },
    Mean(Var),
    Standardize {
        src: Var,
        weight: f64,
        gain: f64,
        batch_mean: f64,
        batch_std: f64,
        deviation: f64,
        std_grad: bool,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is wanted (parameters, probed inputs).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = gemm(self.value(a), false, self.value(b), false);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// Adds a `1 x cols` row vector to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a row vector");
        assert_eq!(b.cols(), self.value(a).cols(), "bias width mismatch");
        let mut value = self.value(a).clone();
        let cols = value.cols();
        let brow = b.data().to_vec();
        for chunk in value.data_mut().chunks_mut(cols) {
            for (x, bb) in chunk.iter_mut().zip(&brow) {
                *x += bb;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(value, Op::AddBias(a, bias), rg)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Matrix::from_vec(x.rows(), x.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p - q);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p * q);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `a * scale + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| x * scale + shift);
        let rg = self.rg(a);
        self.push(value, Op::Affine(a, scale), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    /// Selects rows of `a` by index; indices may repeat.
    pub fn gather(&mut self, a: Var, idx: Rc<[usize]>) -> Var {
        let src = self.value(a);
        let cols = src.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx.iter() {
            data.extend_from_slice(src.row(i));
        }
        let value = Matrix::from_vec(idx.len(), cols, data);
        let rg = self.rg(a);
        self.push(value, Op::Gather(a, idx), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            let c = m.cols();
            for r in 0..rows {
                value.row_mut(r)[off..off + c].copy_from_slice(m.row(r));
            }
            off += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(a).clone().reshaped(rows, cols);
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Column-wise max over consecutive blocks of `group` rows.
    pub fn group_max(&mut self, a: Var, group: usize) -> Var {
        let src = self.value(a);
        assert!(
            group > 0 && src.rows().is_multiple_of(group),
            "group_max: rows not divisible by group"
        );
        let (groups, cols) = (src.rows() / group, src.cols());
        let mut value = Matrix::zeros(groups, cols);
        let mut argmax = vec![0usize; groups * cols];
        for g in 0..groups {
            for c in 0..cols {
                let mut best = g * group;
                let mut best_v = src.get(best, c);
                for r in g * group + 1..(g + 1) * group {
                    let v = src.get(r, c);
                    if v > best_v {
                        best_v = v;
                        best = r;
                    }
                }
                value.set(g, c, best_v);
                argmax[g * cols + c] = best;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::GroupMax { src: a, argmax }, rg)
    }

    /// Column-wise sum over consecutive blocks of `group` rows.
    pub fn group_sum(&mut self, a: Var, group: usize) -> Var {
        let src = self.value(a);
        assert!(
            group > 0 && src.rows().is_multiple_of(group),
            "group_sum: rows not divisible by group"
        );
        let (groups, cols) = (src.rows() / group, src.cols());
        let mut value = Matrix::zeros(groups, cols);
        for g in 0..groups {
            let out = value.row_mut(g);
            for r in g * group..(g + 1) * group {
                for (o, x) in out.iter_mut().zip(src.row(r)) {
                    *o += x;
                }
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::GroupSum { src: a, group }, rg)
    }

    /// Softmax over each block of `group` rows, independently per column.
    pub fn group_softmax(&mut self, a: Var, group: usize) -> Var {
        let src = self.value(a);
        assert!(
            group > 0 && src.rows().is_multiple_of(group),
            "group_softmax: rows not divisible by group"
        );
        let (groups, cols) = (src.rows() / group, src.cols());
        let mut value = src.clone();
        let mut maxes = vec![0.0; cols];
        let mut sums = vec![0.0; cols];
        for g in 0..groups {
            let rows = g * group..(g + 1) * group;
            maxes.fill(f64::NEG_INFINITY);
            for r in rows.clone() {
                for (m, &x) in maxes.iter_mut().zip(value.row(r)) {
                    *m = m.max(x);
                }
            }
            sums.fill(0.0);
            for r in rows.clone() {
                for ((x, m), s) in value.row_mut(r).iter_mut().zip(&maxes).zip(sums.iter_mut()) {
                    *x = (*x - m).exp();
                    *s += *x;
                }
            }
            for r in rows {
                for (x, s) in value.row_mut(r).iter_mut().zip(&sums) {
                    *x /= s;
                }
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::GroupSoftmax { src: a, group }, rg)
    }

    /// Per-column normalization followed by `gamma * xhat + beta`.
    ///
    /// With `running = None` the statistics of the rows of `a` are used and
    /// returned (training mode); otherwise the given `(mean, var)` are
    /// treated as constants.
    pub fn batch_norm(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> (Var, Option<BatchStats>) {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let (mean, var_biased, stats) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), None),
            None => {
                let mut mean = vec![0.0; cols];
                for r in 0..rows {
                    for (m, v) in mean.iter_mut().zip(x.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; cols];
                for r in 0..rows {
                    for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                let unbiased: Vec<f64> = var.iter().map(|s| s / (rows.max(2) - 1) as f64).collect();
                var.iter_mut().for_each(|s| *s /= rows as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var_biased
            .iter()
            .map(|v| 1.0 / (v + BN_EPS).sqrt())
            .collect();
        let mut xhat = x.clone();
        for r in 0..rows {
            for ((v, m), s) in xhat.row_mut(r).iter_mut().zip(&mean).zip(&inv_std) {
                *v = (*v - m) * s;
            }
        }
        let (g, b) = (
            self.value(gamma).data().to_vec(),
            self.value(beta).data().to_vec(),
        );
        let mut value = xhat.clone();
        for r in 0..rows {
            for ((v, gg), bb) in value.row_mut(r).iter_mut().zip(&g).zip(&b) {
                *v = *v * gg + bb;
            }
        }
        let rg = self.rg(a) || self.rg(gamma) || self.rg(beta);
        let batch_stats = stats.is_some();
        let v = self.push(
            value,
            Op::BatchNorm {
                src: a,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        (v, stats)
    }

    /// Per-segment Chamfer distance between the `3`-column rows of `src` and
    /// a fixed `target`.
    ///
    /// Both are split into equally sized consecutive segments (one per cloud
    /// in a batch); the output is a `segments x 1` column of losses.
    pub fn chamfer(&mut self, src: Var, target: Rc<Matrix>, segments: usize) -> Var {
        let a = self.value(src);
        assert!(
            a.cols() == 3 && target.cols() == 3,
            "chamfer expects 3-column coordinates"
        );
        assert!(
            segments > 0
                && a.rows().is_multiple_of(segments)
                && target.rows().is_multiple_of(segments)
        );
        let (seg_src, seg_tgt) = (a.rows() / segments, target.rows() / segments);
        let mut nn_src = vec![0usize; a.rows()];
        let mut nn_tgt = vec![0usize; target.rows()];
        let mut best_tgt = vec![f64::INFINITY; target.rows()];
        let mut value = Matrix::zeros(segments, 1);
        for s in 0..segments {
            let mut forward = 0.0;
            #[allow(clippy::needless_range_loop)]
            for i in s * seg_src..(s + 1) * seg_src {
                let p = a.row(i);
                let mut best = f64::INFINITY;
                for j in s * seg_tgt..(s + 1) * seg_tgt {
                    let q = target.row(j);
                    let d = sq_dist(p, q);
                    if d < best {
                        best = d;
                        nn_src[i] = j;
                    }
                    if d < best_tgt[j] {
                        best_tgt[j] = d;
                        nn_tgt[j] = i;
                    }
                }
                forward += best;
            }
            let backward: f64 = best_tgt[s * seg_tgt..(s + 1) * seg_tgt].iter().sum();
            value.set(s, 0, forward / seg_src as f64 + backward / seg_tgt as f64);
        }
        let rg = self.rg(src);
        self.push(
            value,
            Op::Chamfer {
                src,
                target,
                seg_src,
                seg_tgt,
                nn_src,
                nn_tgt,
            },
            rg,
        )
    }

    /// Mean of all entries, as a `1 x 1` matrix.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::from_vec(1, 1, vec![m.sum() / m.len() as f64]);
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// `gain (a - mean) / deviation` over all entries, where `mean` and
    /// `deviation` blend the prior `(mean, deviation)` with the entries' own
    /// statistics by `weight`; `deviation` is floored at `floor`.
    /// Gradients flow through the entries' statistics. Returns the entries'
    /// mean and standard deviation alongside.
    pub fn standardize(
        &mut self,
        a: Var,
        prior: (f64, f64),
        weight: f64,
        gain: f64,
        floor: f64,
    ) -> (Var, f64, f64) {
        let m = self.value(a);
        let n = m.len() as f64;
        let batch_mean = m.sum() / n;
        let batch_std = (m
            .data()
            .iter()
            .map(|x| (x - batch_mean) * (x - batch_mean))
            .sum::<f64>()
            / n)
            .sqrt();
        let mean = (1.0 - weight) * prior.0 + weight * batch_mean;
        let blended = (1.0 - weight) * prior.1 + weight * batch_std;
        let deviation = blended.max(floor);
        let std_grad = blended > floor && batch_std > 0.0;
        let value = m.map(|x| gain * (x - mean) / deviation);
        let rg = self.rg(a);
        let op = Op::Standardize {
            src: a,
            weight,
            gain,
            batch_mean,
            batch_std,
            deviation,
            std_grad,
        };
        (self.push(value, op, rg), batch_mean, batch_std)
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(
            self.value(out).shape(),
            (1, 1),
            "backward expects a scalar output"
        );
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Grads { grads }
    }

    fn backprop_node(&self, node: &Node, gy: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, g: Matrix| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, gemm(gy, false, self.value(*b), true));
                }
                if self.rg(*b) {
                    acc(*b, gemm(self.value(*a), true, gy, false));
                }
            }
            Op::AddBias(a, bias) => {
                acc(*a, gy.clone());
                if self.rg(*bias) {
                    let mut gb = Matrix::zeros(1, gy.cols());
                    for r in 0..gy.rows() {
                        for (s, x) in gb.data_mut().iter_mut().zip(gy.row(r)) {
                            *s += x;
                        }
                    }
                    acc(*bias, gb);
                }
            }
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, hadamard(gy, self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, hadamard(gy, self.value(*a)));
                }
            }
            Op::Affine(a, scale) => acc(*a, gy.map(|x| x * scale)),
            Op::Relu(a) => {
                let y = &node.value;
                let data = gy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                acc(*a, Matrix::from_vec(gy.rows(), gy.cols(), data));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let data = gy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &v)| g * (1.0 - v * v))
                    .collect();
                acc(*a, Matrix::from_vec(gy.rows(), gy.cols(), data));
            }
            Op::Gather(a, idx) => {
                let src = self.value(*a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, x) in ga.row_mut(i).iter_mut().zip(gy.row(r)) {
                        *o += x;
                    }
                }
                acc(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.rg(p) {
                        let mut g = Matrix::zeros(gy.rows(), c);
                        for r in 0..gy.rows() {
                            g.row_mut(r).copy_from_slice(&gy.row(r)[off..off + c]);
                        }
                        acc(p, g);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.value(p).shape();
                    if self.rg(p) {
                        acc(
                            p,
                            Matrix::from_vec(r, c, gy.data()[off * c..(off + r) * c].to_vec()),
                        );
                    }
                    off += r;
                }
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, gy.clone().reshaped(r, c));
            }
            Op::GroupMax { src, argmax } => {
                let s = self.value(*src);
                let cols = s.cols();
                let mut ga = Matrix::zeros(s.rows(), cols);
                for (k, &row) in argmax.iter().enumerate() {
                    let c = k % cols;
                    let d = ga.data_mut();
                    d[row * cols + c] += gy.data()[k];
                }
                acc(*src, ga);
            }
            Op::GroupSum { src, group } => {
                let s = self.value(*src);
                let mut ga = Matrix::zeros(s.rows(), s.cols());
                for r in 0..s.rows() {
                    ga.row_mut(r).copy_from_slice(gy.row(r / group));
                }
                acc(*src, ga);
            }
            Op::GroupSoftmax { src, group } => {
                let y = &node.value;
                let (rows, cols) = y.shape();
                let mut ga = Matrix::zeros(rows, cols);
                let mut dot = vec![0.0; cols];
                for g in 0..rows / group {
                    dot.fill(0.0);
                    for r in g * group..(g + 1) * group {
                        for ((d, yy), gg) in dot.iter_mut().zip(y.row(r)).zip(gy.row(r)) {
                            *d += yy * gg;
                        }
                    }
                    for r in g * group..(g + 1) * group {
                        let out = ga.row_mut(r);
                        for c in 0..cols {
                            out[c] = y.get(r, c) * (gy.get(r, c) - dot[c]);
                        }
                    }
                }
                acc(*src, ga);
            }
            Op::BatchNorm {
                src,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (rows, cols) = xhat.shape();
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dgamma[c] += gy.get(r, c) * xhat.get(r, c);
                        dbeta[c] += gy.get(r, c);
                    }
                }
                if self.rg(*src) {
                    let mut gx = Matrix::zeros(rows, cols);
                    let m = rows as f64;
                    for r in 0..rows {
                        for c in 0..cols {
                            let dxhat = gy.get(r, c) * g[c];
                            let v = if *batch_stats {
                                // sum(dxhat) = g*dbeta, sum(dxhat*xhat) = g*dgamma
                                inv_std[c] / m
                                    * (m * dxhat
                                        - g[c] * dbeta[c]
                                        - xhat.get(r, c) * g[c] * dgamma[c])
                            } else {
                                dxhat * inv_std[c]
                            };
                            gx.set(r, c, v);
                        }
                    }
                    acc(*src, gx);
                }
                acc(*gamma, Matrix::from_vec(1, cols, dgamma));
                acc(*beta, Matrix::from_vec(1, cols, dbeta));
            }
            Op::Chamfer {
                src,
                target,
                seg_src,
                seg_tgt,
                nn_src,
                nn_tgt,
            } => {
                let a = self.value(*src);
                let mut ga = Matrix::zeros(a.rows(), 3);
                for (i, &nn) in nn_src.iter().enumerate() {
                    let w = gy.get(i / seg_src, 0) * 2.0 / *seg_src as f64;
                    let q = target.row(nn);
                    let p = a.row(i);
                    let out = ga.row_mut(i);
                    for c in 0..3 {
                        out[c] += w * (p[c] - q[c]);
                    }
                }
                for (j, &i) in nn_tgt.iter().enumerate() {
                    let w = gy.get(j / seg_tgt, 0) * 2.0 / *seg_tgt as f64;
                    let q = target.row(j);
                    let p = a.row(i).to_vec();
                    let out = ga.row_mut(i);
                    for c in 0..3 {
                        out[c] += w * (p[c] - q[c]);
                    }
                }
                acc(*src, ga);
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::filled(r, c, gy.get(0, 0) / (r * c) as f64));
            }
            Op::Standardize {
                src,
                weight,
                gain,
                batch_mean,
                batch_std,
                deviation,
                std_grad,
            } => {
                let x = self.value(*src);
                let n = x.len() as f64;
                let sum_g: f64 = gy.data().iter().sum();
                let sum_gy: f64 = gy
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y)
                    .sum();
                let shift = weight * gain * sum_g / (n * deviation);
                let spread = if *std_grad {
                    weight * sum_gy / (deviation * n * batch_std)
                } else {
                    0.0
                };
                let data = gy
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, v)| gain * g / deviation - shift - spread * (v - batch_mean))
                    .collect();
                acc(*src, Matrix::from_vec(x.rows(), x.cols(), data));
            }
        }
    }
}

#[inline]
pub(crate) fn sq_dist(p: &[f64], q: &[f64]) -> f64 {
    let dx = p[0] - q[0];
    let dy = p[1] - q[1];
    let dz = p[2] - q[2];
    dx * dx + dy * dy + dz * dz
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}
