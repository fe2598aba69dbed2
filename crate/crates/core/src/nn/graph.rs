//! Tape-based reverse-mode differentiation over [`Tensor2`] values.
//!
//! A [`Graph`] records every operation in creation order; [`Graph::backward`]
//! walks the tape in reverse and returns gradients for the parameters that
//! took part in the computation. Shape errors inside the graph are
//! programming errors and panic; user-facing shape checks happen in the
//! model functions that build graphs.

use std::collections::HashMap;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow { x: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor2, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Tensor2> },
    Gather { table: Var, ids: Vec<usize> },
    RepeatRows { x: Var, counts: Vec<usize> },
    PadRows(Var),
    SliceRows { x: Var, start: usize },
    Unfold { x: Var, kernel: usize },
    Dropout { x: Var, mask: Vec<f64> },
    L1 { pred: Var, target: Tensor2, rows: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor2 },
    LinearComb(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
}

/// `c = beta * c + a * b` on strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above keep every strided access in bounds, and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Per-parameter gradients indexed by [`ParamId`]; `None` for parameters
/// the loss does not depend on.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<Option<Tensor2>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor2> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Global L2 norm over all present gradients.
    pub fn norm(&self) -> f64 {
        let mut s = 0.0;
        for g in self.params.iter().flatten() {
            for v in &g.data {
                s += v * v;
            }
        }
        s.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().flatten().all(Tensor2::is_finite)
    }
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor2) -> Var {
        self.push(t, Op::Constant)
    }

    /// Graph variable for a stored parameter, created once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(self.store.value(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.shape();
        let (n, bstr) = if trans_b {
            assert_eq!(bv.cols, k, "matmul_bt inner dimension");
            (bv.rows, (1, bv.cols))
        } else {
            assert_eq!(bv.rows, k, "matmul inner dimension");
            (bv.cols, (bv.cols, 1))
        };
        let mut out = Tensor2::zeros(m, n);
        gemm(m, k, n, &av.data, (k, 1), &bv.data, bstr, &mut out.data, (n, 1), 0.0);
        self.push(out, Op::MatMul { a, b, trans_b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        self.push(Tensor2::from_vec(av.rows, av.cols, data), Op::Add(a, b))
    }

    /// Adds a `1 x C` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert_eq!((1, xv.cols), bv.shape(), "bias shape");
        let mut out = xv.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow { x, bias })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shapes");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        self.push(Tensor2::from_vec(av.rows, av.cols, data), Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    /// Row-wise layer normalization with affine `1 x C` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let (rows, cols) = xv.shape();
        assert_eq!(g.shape(), (1, cols));
        assert_eq!(b.shape(), (1, cols));
        let mut xhat = Tensor2::zeros(rows, cols);
        let mut out = Tensor2::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data[c] + b.data[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product self-attention over already projected
    /// `T x D` queries, keys and values. Heads split the columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = qv.shape();
        assert_eq!(kv.shape(), (t, d));
        assert_eq!(vv.shape(), (t, d));
        assert!(heads > 0 && d % heads == 0, "width must split across heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor2::zeros(t, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut s = Tensor2::zeros(t, t);
            gemm(t, dh, t, &qv.data[off..], (d, 1), &kv.data[off..], (1, d), &mut s.data, (t, 1), 0.0);
            for r in 0..t {
                let row = s.row_mut(r);
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = (*x * scale - max).exp();
                    sum += *x;
                }
                for x in row.iter_mut() {
                    *x /= sum;
                }
            }
            gemm(t, t, dh, &s.data, (t, 1), &vv.data[off..], (d, 1), &mut out.data[off..], (d, 1), 0.0);
            probs.push(s);
        }
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    /// Attention probabilities of the most recent attention node over `q`.
    pub fn attention_probs(&self, attn: Var) -> &[Tensor2] {
        match &self.nodes[attn.0].op {
            Op::Attention { probs, .. } => probs,
            _ => panic!("not an attention node"),
        }
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let out = self.value(table).select_rows(ids);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Row `i` repeated `counts[i]` times, in order.
    pub fn repeat_rows(&mut self, x: Var, counts: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows, counts.len(), "one count per row");
        let idx: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(i, &c)| std::iter::repeat_n(i, c))
            .collect();
        let out = xv.select_rows(&idx);
        self.push(
            out,
            Op::RepeatRows {
                x,
                counts: counts.to_vec(),
            },
        )
    }

    /// Zero rows appended up to `rows` (which must not be smaller).
    pub fn pad_rows(&mut self, x: Var, rows: usize) -> Var {
        let xv = self.value(x);
        assert!(rows >= xv.rows, "pad_rows cannot shrink");
        if rows == xv.rows {
            return x;
        }
        let out = xv.pad_rows(rows);
        self.push(out, Op::PadRows(x))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.rows, "slice out of range");
        let out = Tensor2::from_vec(len, xv.cols, xv.data[start * xv.cols..(start + len) * xv.cols].to_vec());
        self.push(out, Op::SliceRows { x, start })
    }

    /// Same-padded sliding windows: row `t` concatenates rows
    /// `t - kernel/2 .. t - kernel/2 + kernel` (zeros outside the range).
    pub fn unfold(&mut self, x: Var, kernel: usize) -> Var {
        assert!(kernel % 2 == 1, "odd kernels only");
        if kernel == 1 {
            return x;
        }
        let xv = self.value(x);
        let (t, c) = xv.shape();
        let half = kernel / 2;
        let mut out = Tensor2::zeros(t, kernel * c);
        for r in 0..t {
            for j in 0..kernel {
                let src = r as isize + j as isize - half as isize;
                if src >= 0 && (src as usize) < t {
                    out.data[r * kernel * c + j * c..r * kernel * c + (j + 1) * c]
                        .copy_from_slice(xv.row(src as usize));
                }
            }
        }
        self.push(out, Op::Unfold { x, kernel })
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = xv.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor2::from_vec(xv.rows, xv.cols, data);
        self.push(out, Op::Dropout { x, mask })
    }

    /// Mean absolute error over the first `min(T_p, T_t)` rows.
    pub fn l1(&mut self, pred: Var, target: &Tensor2) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.cols, target.cols, "l1 widths");
        let rows = pv.rows.min(target.rows);
        let n = rows * pv.cols;
        let mut sum = 0.0;
        for i in 0..n {
            sum += (pv.data[i] - target.data[i]).abs();
        }
        let loss = if n == 0 { 0.0 } else { sum / n as f64 };
        self.push(
            Tensor2::scalar(loss),
            Op::L1 {
                pred,
                target: target.clone(),
                rows,
            },
        )
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, labels.len(), "one label per row");
        let mut probs = Tensor2::zeros(lv.rows, lv.cols);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            assert!(label < lv.cols, "label out of range");
            let row = lv.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - row[label];
            for (c, &x) in row.iter().enumerate() {
                probs.set(r, c, (x - log_z).exp());
            }
        }
        let loss = if labels.is_empty() {
            0.0
        } else {
            total / labels.len() as f64
        };
        self.push(
            Tensor2::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// `sum_i w_i * x_i`, accumulated left to right.
    pub fn linear_comb(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "empty combination");
        let first = self.value(terms[0].0);
        let shape = first.shape();
        let mut out = first.map(|v| v * terms[0].1);
        for &(v, w) in &terms[1..] {
            let tv = self.value(v);
            assert_eq!(tv.shape(), shape, "combination shapes");
            for (o, x) in out.data.iter_mut().zip(&tv.data) {
                *o += w * x;
            }
        }
        self.push(out, Op::LinearComb(terms.to_vec()))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Tensor2>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2::scalar(1.0));
        let mut out = Gradients {
            params: vec![None; self.store.len()],
        };

        fn slot<'a>(grads: &'a mut [Option<Tensor2>], nodes: &[Node], v: Var) -> &'a mut Tensor2 {
            grads[v.0].get_or_insert_with(|| {
                let (r, c) = nodes[v.0].value.shape();
                Tensor2::zeros(r, c)
            })
        }
        fn add_into(grads: &mut [Option<Tensor2>], nodes: &[Node], v: Var, f: impl Fn(usize) -> f64) {
            let g = slot(grads, nodes, v);
            for (i, x) in g.data.iter_mut().enumerate() {
                *x += f(i);
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let nodes = &self.nodes;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    out.params[id.0] = Some(gy);
                    continue;
                }
                Op::MatMul { a, b, trans_b } => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = av.shape();
                    let n = node.value.cols;
                    // dA = dY * B^T (or dY * B when B was transposed).
                    let bstr = if *trans_b { (k, 1) } else { (1, n) };
                    let ga = slot(&mut grads, nodes, *a);
                    gemm(m, n, k, &gy.data, (n, 1), &bv.data, bstr, &mut ga.data, (k, 1), 1.0);
                    let gb = slot(&mut grads, nodes, *b);
                    if *trans_b {
                        // dB = dY^T * A, shape n x k.
                        gemm(n, m, k, &gy.data, (1, n), &av.data, (k, 1), &mut gb.data, (k, 1), 1.0);
                    } else {
                        // dB = A^T * dY, shape k x n.
                        gemm(k, m, n, &av.data, (1, k), &gy.data, (n, 1), &mut gb.data, (n, 1), 1.0);
                    }
                }
                Op::Add(a, b) => {
                    add_into(&mut grads, nodes, *a, |j| gy.data[j]);
                    add_into(&mut grads, nodes, *b, |j| gy.data[j]);
                }
                Op::AddRow { x, bias } => {
                    add_into(&mut grads, nodes, *x, |j| gy.data[j]);
                    let cols = gy.cols;
                    let gb = slot(&mut grads, nodes, *bias);
                    for r in 0..gy.rows {
                        for (o, g) in gb.data.iter_mut().zip(gy.row(r)) {
                            *o += g;
                        }
                    }
                    debug_assert_eq!(gb.cols, cols);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    add_into(&mut grads, nodes, *a, |j| gy.data[j] * bv.data[j]);
                    add_into(&mut grads, nodes, *b, |j| gy.data[j] * av.data[j]);
                }
                Op::Scale(x, s) => {
                    add_into(&mut grads, nodes, *x, |j| gy.data[j] * s);
                }
                Op::Relu(x) => {
                    let xv = &nodes[x.0].value;
                    add_into(&mut grads, nodes, *x, |j| if xv.data[j] > 0.0 { gy.data[j] } else { 0.0 });
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    add_into(&mut grads, nodes, *x, |j| gy.data[j] * (1.0 - y.data[j] * y.data[j]));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let g = &nodes[gamma.0].value;
                    let (rows, cols) = xhat.shape();
                    let gg = slot(&mut grads, nodes, *gamma);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg.data[c] += gy.get(r, c) * xhat.get(r, c);
                        }
                    }
                    let gbeta = slot(&mut grads, nodes, *beta);
                    for r in 0..rows {
                        for c in 0..cols {
                            gbeta.data[c] += gy.get(r, c);
                        }
                    }
                    let gx = slot(&mut grads, nodes, *x);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            dxhat[c] = gy.get(r, c) * g.data[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xhat.get(r, c);
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        for c in 0..cols {
                            gx.data[r * cols + c] +=
                                inv_std[r] * (dxhat[c] - mean_d - xhat.get(r, c) * mean_dx);
                        }
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                    let (t, d) = qv.shape();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Tensor2::zeros(t, d);
                    let mut gk = Tensor2::zeros(t, d);
                    let mut gv = Tensor2::zeros(t, d);
                    let mut dp = Tensor2::zeros(t, t);
                    for (h, p) in probs.iter().enumerate() {
                        let off = h * dh;
                        // dV_h = P^T dO_h
                        gemm(t, t, dh, &p.data, (1, t), &gy.data[off..], (d, 1), &mut gv.data[off..], (d, 1), 0.0);
                        // dP = dO_h V_h^T
                        gemm(t, dh, t, &gy.data[off..], (d, 1), &vv.data[off..], (1, d), &mut dp.data, (t, 1), 0.0);
                        // dS = P * (dP - rowsum(dP * P)), scaled.
                        for r in 0..t {
                            let pr = p.row(r);
                            let dr = dp.row_mut(r);
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for (x, &pv) in dr.iter_mut().zip(pr) {
                                *x = pv * (*x - dot) * scale;
                            }
                        }
                        // dQ_h = dS K_h ; dK_h = dS^T Q_h
                        gemm(t, t, dh, &dp.data, (t, 1), &kv.data[off..], (d, 1), &mut gq.data[off..], (d, 1), 0.0);
                        gemm(t, t, dh, &dp.data, (1, t), &qv.data[off..], (d, 1), &mut gk.data[off..], (d, 1), 0.0);
                    }
                    add_into(&mut grads, nodes, *q, |j| gq.data[j]);
                    add_into(&mut grads, nodes, *k, |j| gk.data[j]);
                    add_into(&mut grads, nodes, *v, |j| gv.data[j]);
                }
                Op::Gather { table, ids } => {
                    let gt = slot(&mut grads, nodes, *table);
                    let cols = gt.cols;
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            gt.data[id * cols + c] += gy.data[r * cols + c];
                        }
                    }
                }
                Op::RepeatRows { x, counts } => {
                    let gx = slot(&mut grads, nodes, *x);
                    let cols = gx.cols;
                    let mut src = 0;
                    for (i, &n) in counts.iter().enumerate() {
                        for _ in 0..n {
                            for c in 0..cols {
                                gx.data[i * cols + c] += gy.data[src * cols + c];
                            }
                            src += 1;
                        }
                    }
                }
                Op::PadRows(x) => {
                    let n = nodes[x.0].value.len();
                    add_into(&mut grads, nodes, *x, |j| gy.data[j]);
                    debug_assert!(n <= gy.len());
                }
                Op::SliceRows { x, start } => {
                    let off = start * gy.cols;
                    let gx = slot(&mut grads, nodes, *x);
                    for (j, g) in gy.data.iter().enumerate() {
                        gx.data[off + j] += g;
                    }
                }
                Op::Unfold { x, kernel } => {
                    let gx = slot(&mut grads, nodes, *x);
                    let (t, c) = gx.shape();
                    let half = kernel / 2;
                    for r in 0..t {
                        for j in 0..*kernel {
                            let src = r as isize + j as isize - half as isize;
                            if src >= 0 && (src as usize) < t {
                                let s = src as usize;
                                for ch in 0..c {
                                    gx.data[s * c + ch] += gy.data[r * kernel * c + j * c + ch];
                                }
                            }
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    add_into(&mut grads, nodes, *x, |j| gy.data[j] * mask[j]);
                }
                Op::L1 { pred, target, rows } => {
                    let pv = &nodes[pred.0].value;
                    let n = rows * pv.cols;
                    let w = if n == 0 { 0.0 } else { gy.item() / n as f64 };
                    let gp = slot(&mut grads, nodes, *pred);
                    for j in 0..n {
                        let diff = pv.data[j] - target.data[j];
                        let sign = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        gp.data[j] += w * sign;
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let w = if labels.is_empty() {
                        0.0
                    } else {
                        gy.item() / labels.len() as f64
                    };
                    let gl = slot(&mut grads, nodes, *logits);
                    let cols = gl.cols;
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..cols {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            gl.data[r * cols + c] += w * (probs.get(r, c) - onehot);
                        }
                    }
                }
                Op::LinearComb(terms) => {
                    for &(v, w) in terms {
                        add_into(&mut grads, nodes, v, |j| w * gy.data[j]);
                    }
                }
            }
        }
        out
    }
}
