use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Variance floor used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows(Var, Vec<f64>),
    MeanRows(Var),
    Sum(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2NormalizeRows(..) => "l2_normalize_rows",
            Op::MeanRows(..) => "mean_rows",
            Op::Sum(..) => "sum",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    is_param: bool,
}

/// Record of one forward computation.
///
/// Operations panic on shape mismatches (a caller bug). Non-finite results do
/// not panic; the first offending node is remembered and reported by
/// [`Graph::check`] and [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    failure: Option<AutodiffError>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Variables that received a gradient, in creation order.
    pub fn vars(&self) -> Vec<Var> {
        (0..self.grads.len()).filter(|&i| self.grads[i].is_some()).map(Var).collect()
    }

    /// Gradient of `v`, or zeros of `shape` when `v` received none.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    /// Every node created with [`Graph::param`], in creation order.
    pub fn params(&self) -> Vec<Var> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].is_param).map(Var).collect()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First non-finite value recorded during the forward pass, if any.
    pub fn check(&self) -> Result<()> {
        match &self.failure {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad, false)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool, is_param: bool) -> Var {
        let id = self.nodes.len();
        if self.failure.is_none() && !value.is_finite() {
            self.failure = Some(AutodiffError::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_param,
        });
        Var(id)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Adds a constant without copying its values.
    pub fn constant_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.push_shared(t, Op::Leaf, false, false)
    }

    /// Adds a trainable leaf; its gradient is kept by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_shared(Arc::new(t), Op::Leaf, true, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMulNt(a, b), rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert!(
            x.same_shape(y),
            "{}: shape {:?} vs {:?}",
            op.name(),
            x.shape(),
            y.shape()
        );
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let v = Tensor::new(x.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(v, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |p, q| p * q, Op::Mul(a, b))
    }

    /// Adds the single-row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        let (r, c) = x.dims();
        assert_eq!(b.dims(), (1, c), "add_row: bias {:?} vs {:?}", b.shape(), x.shape());
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let v = Tensor::matrix(r, c, data);
        let rg = self.rg(&[a, bias]);
        self.push(v, Op::AddRow(a, bias), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            softmax_into(x.row_slice(i), &mut data);
        }
        let v = Tensor::matrix(r, c, data);
        let rg = self.rg(&[a]);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` (each `1 x c`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.dims();
        let gv = self.value(gamma);
        let bv = self.value(beta);
        assert_eq!(gv.dims(), (1, c), "layer_norm gamma shape");
        assert_eq!(bv.dims(), (1, c), "layer_norm beta shape");
        let mut xhat = Vec::with_capacity(r * c);
        let mut out = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (k, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * gv.data()[k] + bv.data()[k]);
            }
        }
        let v = Tensor::matrix(r, c, out);
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: Tensor::matrix(r, c, xhat),
                inv_std,
            },
            rg,
        )
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims();
        let mut norms = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = x.row_slice(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            data.extend(row.iter().map(|v| v / n));
        }
        let v = Tensor::matrix(r, c, data);
        let rg = self.rg(&[a]);
        self.push(v, Op::L2NormalizeRows(a, norms), rg)
    }

    /// Mean over rows, giving a `1 x c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(x.row_slice(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let v = Tensor::matrix(1, c, out);
        let rg = self.rg(&[a]);
        self.push(v, Op::MeanRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut r = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), c, "concat_rows width mismatch");
            r += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::matrix(r, c, data);
        let rg = self.rg(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let t = self.value(p);
                assert_eq!(t.rows(), r, "concat_cols height mismatch");
                t.cols()
            })
            .collect();
        let c: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let v = Tensor::matrix(r, c, data);
        let rg = self.rg(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice_rows(start, end);
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceRows(a, start), rg)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims();
        assert!(start < end && end <= c, "column slice out of range");
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&x.row_slice(i)[start..end]);
        }
        let v = Tensor::matrix(r, end - start, data);
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceCols(a, start), rg)
    }

    /// Mean cross-entropy of raw `logits` (`batch x classes`) against class
    /// indices, through a fused log-softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = self.value(logits);
        let (r, c) = x.dims();
        assert_eq!(targets.len(), r, "cross_entropy: one target per row");
        let mut probs = Vec::with_capacity(r * c);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < c, "cross_entropy: target {t} out of {c} classes");
            let row = x.row_slice(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let v = Tensor::scalar(loss / r as f64);
        let rg = self.rg(&[logits]);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs: Tensor::matrix(r, c, probs),
            },
            rg,
        )
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check()?;
        let out = self.value(loss);
        if !out.is_scalar() {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::new(out.shape().to_vec(), vec![1.0]));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(g) = grads[i].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            if !g.is_finite() {
                return Err(AutodiffError::NonFinite {
                    op: node.op.name(),
                    node: i,
                });
            }
            self.propagate(&node.op, i, &g, &mut grads);
            if node.is_param {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, op: &Op, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &self.nodes[id].value;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = g.matmul_nt(self.value(*b));
                    self.accumulate(grads, *a, reshape_like(ga, self.value(*a)));
                }
                if self.requires_grad(*b) {
                    let gb = self.value(*a).matmul_tn(g);
                    self.accumulate(grads, *b, reshape_like(gb, self.value(*b)));
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a b^T: da = g b, db = g^T a
                if self.requires_grad(*a) {
                    let ga = g.matmul(self.value(*b));
                    self.accumulate(grads, *a, reshape_like(ga, self.value(*a)));
                }
                if self.requires_grad(*b) {
                    let gb = g.matmul_tn(self.value(*a));
                    self.accumulate(grads, *b, reshape_like(gb, self.value(*b)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let gb = zip(g, self.value(*b), |p, q| p * q);
                    self.accumulate(grads, *a, gb);
                }
                if self.requires_grad(*b) {
                    let ga = zip(g, self.value(*a), |p, q| p * q);
                    self.accumulate(grads, *b, ga);
                }
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*bias) {
                    let (r, c) = g.dims();
                    let mut gb = vec![0.0; c];
                    for i in 0..r {
                        for (o, v) in gb.iter_mut().zip(g.row_slice(i)) {
                            *o += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, gb));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::Gelu(a) => {
                let gx = zip(g, self.value(*a), |gv, x| gv * gelu_grad(x));
                self.accumulate(grads, *a, gx);
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = y.dims();
                let mut gx = Vec::with_capacity(r * c);
                for i in 0..r {
                    let yr = y.row_slice(i);
                    let gr = g.row_slice(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    gx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::new(shape, gx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = xhat.dims();
                let gam = self.value(*gamma).data();
                if self.requires_grad(*x) {
                    let mut gx = Vec::with_capacity(r * c);
                    for i in 0..r {
                        let hr = xhat.row_slice(i);
                        let gr = g.row_slice(i);
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        gx.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(d, h)| inv_std[i] * (d - mean_dh - h * mean_dh_h)),
                        );
                    }
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::new(shape, gx));
                }
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut gg = vec![0.0; c];
                    let mut gbeta = vec![0.0; c];
                    for i in 0..r {
                        for k in 0..c {
                            let gv = g.get(i, k);
                            gg[k] += gv * xhat.get(i, k);
                            gbeta[k] += gv;
                        }
                    }
                    let gs = self.value(*gamma).shape().to_vec();
                    let bs = self.value(*beta).shape().to_vec();
                    self.accumulate(grads, *gamma, Tensor::new(gs, gg));
                    self.accumulate(grads, *beta, Tensor::new(bs, gbeta));
                }
            }
            Op::L2NormalizeRows(a, norms) => {
                let (r, c) = y.dims();
                let mut gx = Vec::with_capacity(r * c);
                for i in 0..r {
                    let yr = y.row_slice(i);
                    let gr = g.row_slice(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    gx.extend(yr.iter().zip(gr).map(|(yv, gv)| (gv - yv * dot) / norms[i]));
                }
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::new(shape, gx));
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let (r, c) = x.dims();
                let mut gx = Vec::with_capacity(r * c);
                for _ in 0..r {
                    gx.extend(g.data().iter().map(|v| v / r as f64));
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), gx));
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Tensor::filled(x.shape(), g.item()));
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let t = self.value(*p);
                    let n = t.rows();
                    if self.requires_grad(*p) {
                        let piece = g.slice_rows(start, start + n);
                        self.accumulate(grads, *p, reshape_like(piece, t));
                    }
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, _) = g.dims();
                let mut start = 0;
                for p in parts {
                    let t = self.value(*p);
                    let w = t.cols();
                    if self.requires_grad(*p) {
                        let mut piece = Vec::with_capacity(r * w);
                        for i in 0..r {
                            piece.extend_from_slice(&g.row_slice(i)[start..start + w]);
                        }
                        self.accumulate(grads, *p, Tensor::new(t.shape().to_vec(), piece));
                    }
                    start += w;
                }
            }
            Op::SliceRows(a, start) => {
                let x = self.value(*a);
                let mut gx = vec![0.0; x.len()];
                let off = start * x.cols();
                gx[off..off + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), gx));
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let (r, c) = x.dims();
                let w = g.cols();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + w].copy_from_slice(g.row_slice(i));
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), gx));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (r, c) = probs.dims();
                let scale = g.item() / r as f64;
                let mut gx = probs.data().to_vec();
                for (i, &t) in targets.iter().enumerate() {
                    gx[i * c + t] -= 1.0;
                }
                for v in &mut gx {
                    *v *= scale;
                }
                let shape = self.value(*logits).shape().to_vec();
                self.accumulate(grads, *logits, Tensor::new(shape, gx));
            }
        }
    }
}

fn reshape_like(t: Tensor, like: &Tensor) -> Tensor {
    if t.shape() == like.shape() {
        t
    } else {
        Tensor::new(like.shape().to_vec(), t.into_data())
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::new(b.shape().to_vec(), data)
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_into(row: &[f64], out: &mut Vec<f64>) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut z = 0.0;
    for &v in row {
        let e = (v - m).exp();
        z += e;
        out.push(e);
    }
    for v in &mut out[start..] {
        *v /= z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let p = g.param(Tensor::row(vec![0.3, -1.0, 2.0]));
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::new();
        let p = g.param(Tensor::matrix(2, 3, vec![0.1, 2.0, -1.0, 0.5, 0.5, 3.0]));
        let s = g.softmax_rows(p);
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        for v in grads.get(p).unwrap().data() {
            assert!(v.abs() < 1e-15, "{v}");
        }
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = [2.0, 1.0, 0.1];
        let mut g = Graph::new();
        let p = g.param(Tensor::row(logits.to_vec()));
        let l = g.cross_entropy(p, &[0]);
        let grads = g.backward(l).unwrap();
        let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
        let expected: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(i, v)| v.exp() / z - if i == 0 { 1.0 } else { 0.0 })
            .collect();
        for (a, e) in grads.get(p).unwrap().data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
        // Central differences with step 1e-4.
        let f = |x: &[f64]| {
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - x[0]
        };
        for i in 0..3 {
            let mut up = logits.to_vec();
            let mut dn = logits.to_vec();
            up[i] += 1e-4;
            dn[i] -= 1e-4;
            let fd = (f(&up) - f(&dn)) / 2e-4;
            assert!((fd - expected[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let p = g.param(Tensor::row(vec![1.0, 2.0]));
        let y = g.scale(p, 2.0);
        assert!(matches!(g.backward(y), Err(AutodiffError::Contract(_))));
    }

    #[test]
    fn nan_names_the_op() {
        let mut g = Graph::new();
        let p = g.param(Tensor::row(vec![0.0, 0.0]));
        let y = g.l2_normalize_rows(p);
        let l = g.sum(y);
        match g.backward(l) {
            Err(AutodiffError::NonFinite { op, .. }) => assert_eq!(op, "l2_normalize_rows"),
            other => panic!("expected numerical failure, got {:?}", other.err()),
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let x = g.param(Tensor::matrix(1, 2, vec![1.0, 1.0]));
        let y = g.matmul(x, w);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(grads.vars(), vec![x]);
        assert_eq!(g.params(), vec![x]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1000.0, 1.0, -5.0, 0.0, 0.0, 0.0]));
        let s = g.softmax_rows(x);
        let t = g.value(s);
        for i in 0..2 {
            let sum: f64 = t.row_slice(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(t.row_slice(i).iter().all(|&v| v >= 0.0));
        }
    }
}
