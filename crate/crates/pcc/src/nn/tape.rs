//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse and accumulates gradients for every recorded node.
//! Tapes are cheap and single-use: training builds one tape per sample, reads
//! the leaf gradients, and drops it.
//!
//! Shape mismatches inside tape ops are programming errors and panic; the
//! public pipeline API validates shapes before anything reaches a tape.

use std::cell::RefCell;
use std::ops::Range;

use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// M x N plus a 1 x N row, broadcast over rows.
    AddRow(Var, Var),
    /// Replicate a 1 x N row into M x N.
    BroadcastRow(Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        eps: f64,
    },
    SliceCols(Var, Range<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    /// Output row i = input row index[i]. Indices may repeat.
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    /// Per-column mean of the k largest entries; `picked[c*k..][..k]` holds
    /// the chosen row indices for column c.
    TopKColMean {
        x: Var,
        k: usize,
        picked: Vec<usize>,
    },
    /// Class-averaged binary cross-entropy against a fixed target, with
    /// probability clipping. Terms before `from_class` are excluded.
    BceMean {
        p: Var,
        target: Vec<f64>,
        eps: f64,
        from_class: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Record of one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients keyed by [`Var`], produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, zero tensor if the node was unused.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Copy of the value at `v`.
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Read the scalar held by a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let t = &nodes[v.0].value;
        assert_eq!(t.shape(), (1, 1), "scalar() on non-scalar node");
        t.data()[0]
    }

    // ----- graph construction -------------------------------------------

    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)
        };
        self.push(value, Op::Matmul(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
            let mut out = ta.clone();
            out.add_scaled(tb, 1.0);
            out
        };
        self.push(value, Op::Add(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| x * y)
                .collect();
            Tensor::from_vec(ta.rows(), ta.cols(), data)
        };
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|v| v * factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tr) = (&nodes[a.0].value, &nodes[row.0].value);
            assert_eq!(tr.rows(), 1, "add_row expects a 1 x N row");
            assert_eq!(ta.cols(), tr.cols(), "add_row width mismatch");
            let mut out = ta.clone();
            for r in 0..out.rows() {
                for (o, &b) in out.row_mut(r).iter_mut().zip(tr.row(0)) {
                    *o += b;
                }
            }
            out
        };
        self.push(value, Op::AddRow(a, row))
    }

    pub fn broadcast_row(&self, row: Var, rows: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let tr = &nodes[row.0].value;
            assert_eq!(tr.rows(), 1, "broadcast_row expects a 1 x N row");
            let mut out = Tensor::zeros(rows, tr.cols());
            for r in 0..rows {
                out.row_mut(r).copy_from_slice(tr.row(0));
            }
            out
        };
        self.push(value, Op::BroadcastRow(row))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn gelu(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let value = softmax_rows_forward(&self.nodes.borrow()[a.0].value);
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&self, x: Var, gain: Var, shift: Var, eps: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            layer_norm_forward(
                &nodes[x.0].value,
                &nodes[gain.0].value,
                &nodes[shift.0].value,
                eps,
            )
        };
        self.push(value, Op::LayerNorm { x, gain, shift, eps })
    }

    pub fn slice_cols(&self, a: Var, range: Range<usize>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            assert!(range.end <= t.cols(), "slice_cols out of range");
            let mut out = Tensor::zeros(t.rows(), range.len());
            for r in 0..t.rows() {
                out.row_mut(r).copy_from_slice(&t.row(r)[range.clone()]);
            }
            out
        };
        self.push(value, Op::SliceCols(a, range))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows();
            let total: usize = parts.iter().map(|p| nodes[p.0].value.cols()).sum();
            let mut out = Tensor::zeros(rows, total);
            for r in 0..rows {
                let mut offset = 0;
                for p in parts {
                    let t = &nodes[p.0].value;
                    assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                    out.row_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row(r));
                    offset += t.cols();
                }
            }
            out
        };
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let value = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.cols();
            let total: usize = parts.iter().map(|p| nodes[p.0].value.rows()).sum();
            let mut out = Tensor::zeros(total, cols);
            let mut r_out = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                assert_eq!(t.cols(), cols, "concat_rows col mismatch");
                for r in 0..t.rows() {
                    out.row_mut(r_out).copy_from_slice(t.row(r));
                    r_out += 1;
                }
            }
            out
        };
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&self, a: Var, index: Vec<usize>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let mut out = Tensor::zeros(index.len(), t.cols());
            for (r, &src) in index.iter().enumerate() {
                assert!(src < t.rows(), "gather_rows index out of range");
                out.row_mut(r).copy_from_slice(t.row(src));
            }
            out
        };
        self.push(value, Op::GatherRows(a, index))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let s: f64 = nodes[a.0].value.data().iter().sum();
            Tensor::from_vec(1, 1, vec![s])
        };
        self.push(value, Op::SumAll(a))
    }

    pub fn topk_col_mean(&self, x: Var, k: usize) -> Var {
        let (value, picked) = {
            let nodes = self.nodes.borrow();
            topk_col_mean_forward(&nodes[x.0].value, k)
        };
        self.push(value, Op::TopKColMean { x, k, picked })
    }

    pub fn bce_mean(&self, p: Var, target: Vec<f64>, eps: f64, from_class: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[p.0].value;
            assert_eq!(t.rows(), 1, "bce_mean expects a 1 x C prediction row");
            assert_eq!(t.cols(), target.len(), "bce_mean target length mismatch");
            assert!(from_class < target.len(), "bce_mean excludes every class");
            let loss = bce_mean_forward(t.row(0), &target, eps, from_class);
            Tensor::from_vec(1, 1, vec![loss])
        };
        self.push(value, Op::BceMean { p, target, eps, from_class })
    }

    // ----- backward ------------------------------------------------------

    /// Accumulate d(loss)/d(node) for every node, seeding `loss` with 1.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        {
            let t = &nodes[loss.0].value;
            assert_eq!(t.shape(), (1, 1), "backward seed must be scalar");
        }
        grads[loss.0] = Some(Tensor::from_vec(1, 1, vec![1.0]));

        for idx in (0..nodes.len()).rev() {
            let Some(grad_out) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(grad_out);
                    continue;
                }
                Op::Matmul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    accumulate(&mut grads, *a, grad_out.matmul_nt(tb));
                    accumulate(&mut grads, *b, ta.matmul_tn(&grad_out));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, grad_out.clone());
                    accumulate(&mut grads, *b, grad_out);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let ga = elementwise_mul(&grad_out, tb);
                    let gb = elementwise_mul(&grad_out, ta);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, factor) => {
                    accumulate(&mut grads, *a, grad_out.map(|v| v * factor));
                }
                Op::AddRow(a, row) => {
                    let gr = sum_rows(&grad_out);
                    accumulate(&mut grads, *a, grad_out);
                    accumulate(&mut grads, *row, gr);
                }
                Op::BroadcastRow(row) => {
                    accumulate(&mut grads, *row, sum_rows(&grad_out));
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, grad_out.transpose());
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let g = zip_map(&grad_out, y, |g, y| g * y * (1.0 - y));
                    accumulate(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let g = zip_map(&grad_out, y, |g, y| g * (1.0 - y * y));
                    accumulate(&mut grads, *a, g);
                }
                Op::Gelu(a) => {
                    let x = &nodes[a.0].value;
                    let g = zip_map(&grad_out, x, |g, x| g * gelu_derivative(x));
                    accumulate(&mut grads, *a, g);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut gx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = grad_out.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for (o, (&y, &g)) in
                            gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr.iter()))
                        {
                            *o = y * (g - dot);
                        }
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::LayerNorm { x, gain, shift, eps } => {
                    let (gx, ggain, gshift) = layer_norm_backward(
                        &nodes[x.0].value,
                        &nodes[gain.0].value,
                        *eps,
                        &grad_out,
                    );
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, ggain);
                    accumulate(&mut grads, *shift, gshift);
                }
                Op::SliceCols(a, range) => {
                    let src = &nodes[a.0].value;
                    let mut gx = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        gx.row_mut(r)[range.clone()].copy_from_slice(grad_out.row(r));
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = nodes[p.0].value.cols();
                        let mut gp = Tensor::zeros(grad_out.rows(), w);
                        for r in 0..grad_out.rows() {
                            gp.row_mut(r).copy_from_slice(&grad_out.row(r)[offset..offset + w]);
                        }
                        accumulate(&mut grads, *p, gp);
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut r_src = 0;
                    for p in parts {
                        let h = nodes[p.0].value.rows();
                        let mut gp = Tensor::zeros(h, grad_out.cols());
                        for r in 0..h {
                            gp.row_mut(r).copy_from_slice(grad_out.row(r_src + r));
                        }
                        accumulate(&mut grads, *p, gp);
                        r_src += h;
                    }
                }
                Op::GatherRows(a, index) => {
                    let src = &nodes[a.0].value;
                    let mut gx = Tensor::zeros(src.rows(), src.cols());
                    for (r, &dst) in index.iter().enumerate() {
                        let gr = grad_out.row(r);
                        for (o, &g) in gx.row_mut(dst).iter_mut().zip(gr) {
                            *o += g;
                        }
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::SumAll(a) => {
                    let src = &nodes[a.0].value;
                    let g = grad_out.data()[0];
                    accumulate(&mut grads, *a, Tensor::filled(src.rows(), src.cols(), g));
                }
                Op::TopKColMean { x, k, picked } => {
                    let src = &nodes[x.0].value;
                    let mut gx = Tensor::zeros(src.rows(), src.cols());
                    let inv_k = 1.0 / *k as f64;
                    for c in 0..src.cols() {
                        let g = grad_out.get(0, c) * inv_k;
                        for &r in &picked[c * k..(c + 1) * k] {
                            gx.set(r, c, gx.get(r, c) + g);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::BceMean { p, target, eps, from_class } => {
                    let pv = &nodes[p.0].value;
                    let g = grad_out.data()[0];
                    let n = (target.len() - from_class) as f64;
                    let mut gp = Tensor::zeros(1, pv.cols());
                    for c in *from_class..pv.cols() {
                        let raw = pv.get(0, c);
                        // Inside the clip window the term is -[y ln p + (1-y) ln(1-p)];
                        // outside it the clipped value is constant, so the gradient is 0.
                        if raw > *eps && raw < 1.0 - *eps {
                            let y = target[c];
                            gp.set(0, c, g * (-y / raw + (1.0 - y) / (1.0 - raw)) / n);
                        }
                    }
                    accumulate(&mut grads, *p, gp);
                }
            }
        }

        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_scaled(&g, 1.0),
        slot => *slot = Some(g),
    }
}

fn elementwise_mul(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

fn sum_rows(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, &v) in out.row_mut(0).iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out
}

// ----- shared forward kernels ---------------------------------------------
// The plain-data pipeline operations call these same functions, so the tape
// and the public API cannot drift apart.

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows_forward(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let out_row = out.row_mut(r);
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
    out
}

pub fn layer_norm_forward(x: &Tensor, gain: &Tensor, shift: &Tensor, eps: f64) -> Tensor {
    assert_eq!(gain.shape(), (1, x.cols()));
    assert_eq!(shift.shape(), (1, x.cols()));
    let n = x.cols() as f64;
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + eps).sqrt();
        for (c, (o, &v)) in out.row_mut(r).iter_mut().zip(row).enumerate() {
            *o = (v - mean) * inv_std * gain.get(0, c) + shift.get(0, c);
        }
    }
    out
}

fn layer_norm_backward(
    x: &Tensor,
    gain: &Tensor,
    eps: f64,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let n = x.cols() as f64;
    let mut gx = Tensor::zeros(x.rows(), x.cols());
    let mut ggain = Tensor::zeros(1, x.cols());
    let mut gshift = Tensor::zeros(1, x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + eps).sqrt();
        let go = grad_out.row(r);

        // x_hat = (x - mean) * inv_std; d x_hat = go * gain
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..x.cols() {
            let xhat = (row[c] - mean) * inv_std;
            let dxhat = go[c] * gain.get(0, c);
            ggain.set(0, c, ggain.get(0, c) + go[c] * xhat);
            gshift.set(0, c, gshift.get(0, c) + go[c]);
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
        }
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        for c in 0..x.cols() {
            let xhat = (row[c] - mean) * inv_std;
            let dxhat = go[c] * gain.get(0, c);
            gx.set(r, c, inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat));
        }
    }
    (gx, ggain, gshift)
}

/// Per-column mean of the k largest entries. Ties break toward the lower row
/// index. Returns the pooled 1 x C row and the chosen indices, k per column.
pub fn topk_col_mean_forward(x: &Tensor, k: usize) -> (Tensor, Vec<usize>) {
    assert!(k >= 1 && k <= x.rows(), "top-k k out of range");
    let mut out = Tensor::zeros(1, x.cols());
    let mut picked = Vec::with_capacity(k * x.cols());
    let mut order: Vec<usize> = Vec::with_capacity(x.rows());
    for c in 0..x.cols() {
        order.clear();
        order.extend(0..x.rows());
        order.sort_by(|&a, &b| {
            x.get(b, c)
                .partial_cmp(&x.get(a, c))
                .expect("NaN in top-k pooling input")
                .then(a.cmp(&b))
        });
        let mut sum = 0.0;
        for &r in &order[..k] {
            sum += x.get(r, c);
            picked.push(r);
        }
        out.set(0, c, sum / k as f64);
    }
    (out, picked)
}

/// Class-averaged BCE with clipping, over classes `from_class..C`.
pub fn bce_mean_forward(p: &[f64], target: &[f64], eps: f64, from_class: usize) -> f64 {
    let n = (target.len() - from_class) as f64;
    let mut loss = 0.0;
    for c in from_class..target.len() {
        let pc = p[c].clamp(eps, 1.0 - eps);
        let y = target[c];
        loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
    }
    loss / n
}
