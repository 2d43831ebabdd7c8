//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Forward calls record one op per result tensor; `backward` replays the
//! record in exact reverse order and accumulates gradients into every
//! upstream node. A tape supports one backward pass; build a fresh tape for
//! the next forward.

use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const GELU_COEFF: f64 = 0.044715;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    MatMul { a: Var, b: Var, out: Var },
    Transpose { x: Var, out: Var },
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    AddBias { x: Var, bias: Var, out: Var },
    Affine { x: Var, mul: f64, out: Var },
    Exp { x: Var, out: Var },
    SoftmaxRows { x: Var, out: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, out: Var },
    Gelu { x: Var, out: Var },
    LeakyRelu { x: Var, slope: f64, out: Var },
    SliceRows { x: Var, start: usize, out: Var },
    SliceCols { x: Var, start: usize, out: Var },
    ConcatCols { parts: Vec<Var>, out: Var },
    ConcatRows { parts: Vec<Var>, out: Var },
    Reshape { x: Var, out: Var },
    Sum { x: Var, out: Var },
    MeanAll { x: Var, out: Var },
    MseLoss { pred: Var, target: Var, out: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, out: Var },
}

pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    ops: Vec<Op>,
    watched: Vec<(ParamId, Var)>,
    used: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            watched: Vec::new(),
            used: false,
        }
    }

    /// Record an input tensor. Its gradient is tracked but not extracted.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.clone())
    }

    /// Record a parameter tensor; its gradient is reported by `watched_grads`.
    pub fn watch(&mut self, id: ParamId, t: &Tensor) -> Var {
        let v = self.push(t.clone());
        self.watched.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Gradient of the loss w.r.t. `v`. None if backward has not run or no
    /// path reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Parameter gradients recorded during backward. Parameters the loss
    /// never touched report a zero tensor.
    pub fn watched_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.watched
            .iter()
            .map(|&(id, v)| {
                let g = self.grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.values[v.0].shape()));
                (id, g)
            })
            .collect()
    }

    fn push(&mut self, t: Tensor) -> Var {
        self.values.push(t);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    fn want_2d(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.values[v.0].shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "{what} expects a 2-d tensor, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    // ---- op recording ------------------------------------------------------

    /// C = A @ B for A [m x k], B [k x n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.want_2d(a, "matmul lhs")?;
        let (kb, n) = self.want_2d(b, "matmul rhs")?;
        if ka != kb {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner dims differ: [{m} x {ka}] @ [{kb} x {n}]"
            )));
        }
        let out = matmul_nn(&self.values[a.0], &self.values[b.0]);
        let v = self.push(out);
        self.ops.push(Op::MatMul { a, b, out: v });
        Ok(v)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.want_2d(x, "transpose")?;
        let out = transpose(&self.values[x.0]);
        let v = self.push(out);
        self.ops.push(Op::Transpose { x, out: v });
        Ok(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.want_same_shape(a, b, "add")?;
        let out = zip(&self.values[a.0], &self.values[b.0], |x, y| x + y);
        let v = self.push(out);
        self.ops.push(Op::Add { a, b, out: v });
        Ok(v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.want_same_shape(a, b, "sub")?;
        let out = zip(&self.values[a.0], &self.values[b.0], |x, y| x - y);
        let v = self.push(out);
        self.ops.push(Op::Sub { a, b, out: v });
        Ok(v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.want_same_shape(a, b, "mul")?;
        let out = zip(&self.values[a.0], &self.values[b.0], |x, y| x * y);
        let v = self.push(out);
        self.ops.push(Op::Mul { a, b, out: v });
        Ok(v)
    }

    /// Rows of x [m x n] plus bias [1 x n].
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.want_2d(x, "add_bias input")?;
        let (br, bn) = self.want_2d(bias, "add_bias bias")?;
        if br != 1 || bn != n {
            return Err(Error::ShapeMismatch(format!(
                "add_bias wants bias [1 x {n}], got [{br} x {bn}]"
            )));
        }
        let xv = &self.values[x.0];
        let bv = self.values[bias.0].as_slice().to_vec();
        let mut out = xv.clone();
        for i in 0..out.rows() {
            let row = &mut out.as_mut_slice()[i * n..(i + 1) * n];
            for j in 0..n {
                row[j] += bv[j];
            }
        }
        let v = self.push(out);
        self.ops.push(Op::AddBias { x, bias, out: v });
        Ok(v)
    }

    /// Elementwise mul*x + add.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let out = self.values[x.0].map(|v| mul * v + add);
        let v = self.push(out);
        self.ops.push(Op::Affine { x, mul, out: v });
        v
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(f64::exp);
        let v = self.push(out);
        self.ops.push(Op::Exp { x, out: v });
        v
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.want_2d(x, "softmax_rows")?;
        if n == 0 {
            return Err(Error::ShapeMismatch("softmax_rows on zero-width rows".into()));
        }
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let row = self.values[x.0].row_slice(i);
            softmax_into(row, &mut out.as_mut_slice()[i * n..(i + 1) * n]);
        }
        let v = self.push(out);
        self.ops.push(Op::SoftmaxRows { x, out: v });
        Ok(v)
    }

    /// Row-wise layer normalization: gain * (x - mean) / sqrt(var + eps) + bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.want_2d(x, "layer_norm input")?;
        for (v, what) in [(gain, "gain"), (bias, "bias")] {
            let (r, c) = self.want_2d(v, "layer_norm param")?;
            if r != 1 || c != n {
                return Err(Error::ShapeMismatch(format!(
                    "layer_norm {what} wants [1 x {n}], got [{r} x {c}]"
                )));
            }
        }
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let row = self.values[x.0].row_slice(i);
            let (mean, rstd) = row_stats(row);
            let o = &mut out.as_mut_slice()[i * n..(i + 1) * n];
            let g = self.values[gain.0].as_slice();
            let b = self.values[bias.0].as_slice();
            for j in 0..n {
                o[j] = g[j] * (row[j] - mean) * rstd + b[j];
            }
        }
        let v = self.push(out);
        self.ops.push(Op::LayerNorm { x, gain, bias, out: v });
        Ok(v)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(gelu_scalar);
        let v = self.push(out);
        self.ops.push(Op::Gelu { x, out: v });
        v
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.values[x.0].map(|v| if v >= 0.0 { v } else { slope * v });
        let v = self.push(out);
        self.ops.push(Op::LeakyRelu { x, slope, out: v });
        v
    }

    /// Rows start..start+len of x.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.want_2d(x, "slice_rows")?;
        if start + len > m {
            return Err(Error::IndexOutOfRange { index: start + len, len: m });
        }
        let data = self.values[x.0].as_slice()[start * n..(start + len) * n].to_vec();
        let out = Tensor::from_vec(&[len, n], data)?;
        let v = self.push(out);
        self.ops.push(Op::SliceRows { x, start, out: v });
        Ok(v)
    }

    /// Columns start..start+len of x.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.want_2d(x, "slice_cols")?;
        if start + len > n {
            return Err(Error::IndexOutOfRange { index: start + len, len: n });
        }
        let mut out = Tensor::zeros(&[m, len]);
        for i in 0..m {
            let src = &self.values[x.0].row_slice(i)[start..start + len];
            out.as_mut_slice()[i * len..(i + 1) * len].copy_from_slice(src);
        }
        let v = self.push(out);
        self.ops.push(Op::SliceCols { x, start, out: v });
        Ok(v)
    }

    /// Horizontal concatenation of 2-d tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("concat_cols of zero parts".into()));
        }
        let (m, _) = self.want_2d(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.want_2d(p, "concat_cols part")?;
            if r != m {
                return Err(Error::ShapeMismatch(format!(
                    "concat_cols row counts differ: {m} vs {r}"
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[m, total]);
        for i in 0..m {
            let mut at = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                out.as_mut_slice()[i * total + at..i * total + at + w]
                    .copy_from_slice(self.values[p.0].row_slice(i));
                at += w;
            }
        }
        let v = self.push(out);
        self.ops.push(Op::ConcatCols { parts: parts.to_vec(), out: v });
        Ok(v)
    }

    /// Vertical concatenation of 2-d tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("concat_rows of zero parts".into()));
        }
        let (_, n) = self.want_2d(parts[0], "concat_rows")?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.want_2d(p, "concat_rows part")?;
            if c != n {
                return Err(Error::ShapeMismatch(format!(
                    "concat_rows column counts differ: {n} vs {c}"
                )));
            }
            total += r;
        }
        let mut data = Vec::with_capacity(total * n);
        for &p in parts {
            data.extend_from_slice(self.values[p.0].as_slice());
        }
        let out = Tensor::from_vec(&[total, n], data)?;
        let v = self.push(out);
        self.ops.push(Op::ConcatRows { parts: parts.to_vec(), out: v });
        Ok(v)
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.values[x.0].reshape(shape)?;
        let v = self.push(out);
        self.ops.push(Op::Reshape { x, out: v });
        Ok(v)
    }

    /// Sum of all elements, as a 1x1 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.values[x.0].sum());
        let v = self.push(out);
        self.ops.push(Op::Sum { x, out: v });
        v
    }

    /// Mean of all elements, as a 1x1 tensor.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.values[x.0].mean());
        let v = self.push(out);
        self.ops.push(Op::MeanAll { x, out: v });
        v
    }

    /// Mean squared error over all elements, as a 1x1 tensor.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.want_same_shape(pred, target, "mse_loss")?;
        let p = &self.values[pred.0];
        let t = &self.values[target.0];
        let n = p.numel().max(1);
        let sum: f64 = p
            .as_slice()
            .iter()
            .zip(t.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let v = self.push(Tensor::scalar(sum / n as f64));
        self.ops.push(Op::MseLoss { pred, target, out: v });
        Ok(v)
    }

    /// Cross-entropy of logits [m x c] against integer labels, averaged over
    /// rows and computed through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, c) = self.want_2d(logits, "cross_entropy")?;
        if labels.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy wants {m} labels, got {}",
                labels.len()
            )));
        }
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(Error::LabelOutOfRange { label, classes: c });
            }
            let row = self.values[logits.0].row_slice(i);
            total += log_sum_exp(row) - row[label];
        }
        let v = self.push(Tensor::scalar(total / m as f64));
        self.ops.push(Op::CrossEntropy { logits, labels: labels.to_vec(), out: v });
        Ok(v)
    }

    // ---- composite helpers -------------------------------------------------

    /// x @ w + bias.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, bias)
    }

    /// Mean of scalar vars.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("mean_of zero parts".into()));
        }
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(self.affine(acc, 1.0 / parts.len() as f64, 0.0))
    }

    /// Inverted dropout: in training mode, zeroes each element with
    /// probability `rate` and scales survivors by 1/(1-rate). Identity when
    /// not training or rate is 0.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !training || rate == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::OutOfRange(format!("dropout rate {rate} not in [0, 1)")));
        }
        let keep = 1.0 - rate;
        let mask = Tensor::from_vec(
            self.values[x.0].shape(),
            (0..self.values[x.0].numel())
                .map(|_| {
                    if crate::rng::uniform(rng, 0.0, 1.0) < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect(),
        )?;
        let m = self.leaf(&mask);
        self.mul(x, m)
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulate gradients of a scalar loss into every node. Errors if the
    /// loss is not a single element or the tape already ran backward.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.used {
            return Err(Error::OutOfRange(
                "tape already consumed by backward; build a new forward".into(),
            ));
        }
        self.used = true;
        if self.values[loss.0].numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward wants a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        self.grads[loss.0] = Some(Tensor::filled(self.values[loss.0].shape(), 1.0));

        for idx in (0..self.ops.len()).rev() {
            let out = match &self.ops[idx] {
                Op::MatMul { out, .. }
                | Op::Transpose { out, .. }
                | Op::Add { out, .. }
                | Op::Sub { out, .. }
                | Op::Mul { out, .. }
                | Op::AddBias { out, .. }
                | Op::Affine { out, .. }
                | Op::Exp { out, .. }
                | Op::SoftmaxRows { out, .. }
                | Op::LayerNorm { out, .. }
                | Op::Gelu { out, .. }
                | Op::LeakyRelu { out, .. }
                | Op::SliceRows { out, .. }
                | Op::SliceCols { out, .. }
                | Op::ConcatCols { out, .. }
                | Op::ConcatRows { out, .. }
                | Op::Reshape { out, .. }
                | Op::Sum { out, .. }
                | Op::MeanAll { out, .. }
                | Op::MseLoss { out, .. }
                | Op::CrossEntropy { out, .. } => *out,
            };
            let Some(g_out) = self.grads[out.0].clone() else {
                continue;
            };
            self.replay(idx, &g_out);
        }
        Ok(())
    }

    fn replay(&mut self, idx: usize, g: &Tensor) {
        // Ops are moved out temporarily so replay can borrow self mutably.
        match std::mem::replace(&mut self.ops[idx], Op::Sum { x: Var(0), out: Var(0) }) {
            Op::MatMul { a, b, out } => {
                let da = matmul_nt(g, &self.values[b.0]);
                let db = matmul_tn(&self.values[a.0], g);
                self.add_grad(a, da);
                self.add_grad(b, db);
                self.ops[idx] = Op::MatMul { a, b, out };
            }
            Op::Transpose { x, out } => {
                self.add_grad(x, transpose(g));
                self.ops[idx] = Op::Transpose { x, out };
            }
            Op::Add { a, b, out } => {
                self.add_grad(a, g.clone());
                self.add_grad(b, g.clone());
                self.ops[idx] = Op::Add { a, b, out };
            }
            Op::Sub { a, b, out } => {
                self.add_grad(a, g.clone());
                self.add_grad(b, g.map(|v| -v));
                self.ops[idx] = Op::Sub { a, b, out };
            }
            Op::Mul { a, b, out } => {
                let da = zip(g, &self.values[b.0], |x, y| x * y);
                let db = zip(g, &self.values[a.0], |x, y| x * y);
                self.add_grad(a, da);
                self.add_grad(b, db);
                self.ops[idx] = Op::Mul { a, b, out };
            }
            Op::AddBias { x, bias, out } => {
                let n = g.cols();
                let mut db = Tensor::zeros(&[1, n]);
                for i in 0..g.rows() {
                    let row = g.row_slice(i);
                    for j in 0..n {
                        db.as_mut_slice()[j] += row[j];
                    }
                }
                self.add_grad(x, g.clone());
                self.add_grad(bias, db);
                self.ops[idx] = Op::AddBias { x, bias, out };
            }
            Op::Affine { x, mul, out } => {
                self.add_grad(x, g.map(|v| mul * v));
                self.ops[idx] = Op::Affine { x, mul, out };
            }
            Op::Exp { x, out } => {
                let dx = zip(g, &self.values[out.0], |gv, y| gv * y);
                self.add_grad(x, dx);
                self.ops[idx] = Op::Exp { x, out };
            }
            Op::SoftmaxRows { x, out } => {
                let y = &self.values[out.0];
                let (m, n) = (y.rows(), y.cols());
                let mut dx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let yr = y.row_slice(i);
                    let gr = g.row_slice(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let dr = &mut dx.as_mut_slice()[i * n..(i + 1) * n];
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.add_grad(x, dx);
                self.ops[idx] = Op::SoftmaxRows { x, out };
            }
            Op::LayerNorm { x, gain, bias, out } => {
                let xv = &self.values[x.0];
                let gv = self.values[gain.0].as_slice().to_vec();
                let (m, n) = (xv.rows(), xv.cols());
                let mut dx = Tensor::zeros(&[m, n]);
                let mut dgain = Tensor::zeros(&[1, n]);
                let mut dbias = Tensor::zeros(&[1, n]);
                for i in 0..m {
                    let row = xv.row_slice(i);
                    let gr = g.row_slice(i);
                    let (mean, rstd) = row_stats(row);
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * rstd).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(&gv).map(|(a, b)| a * b).collect();
                    let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    let dr = &mut dx.as_mut_slice()[i * n..(i + 1) * n];
                    for j in 0..n {
                        dr[j] = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dgain.as_mut_slice()[j] += gr[j] * xhat[j];
                        dbias.as_mut_slice()[j] += gr[j];
                    }
                }
                self.add_grad(x, dx);
                self.add_grad(gain, dgain);
                self.add_grad(bias, dbias);
                self.ops[idx] = Op::LayerNorm { x, gain, bias, out };
            }
            Op::Gelu { x, out } => {
                let dx = zip(g, &self.values[x.0], |gv, v| gv * gelu_grad_scalar(v));
                self.add_grad(x, dx);
                self.ops[idx] = Op::Gelu { x, out };
            }
            Op::LeakyRelu { x, slope, out } => {
                let dx = zip(g, &self.values[x.0], |gv, v| {
                    gv * if v >= 0.0 { 1.0 } else { slope }
                });
                self.add_grad(x, dx);
                self.ops[idx] = Op::LeakyRelu { x, slope, out };
            }
            Op::SliceRows { x, start, out } => {
                let n = self.values[x.0].cols();
                let len = self.values[out.0].rows();
                let mut dx = Tensor::zeros(self.values[x.0].shape());
                dx.as_mut_slice()[start * n..(start + len) * n].copy_from_slice(g.as_slice());
                self.add_grad(x, dx);
                self.ops[idx] = Op::SliceRows { x, start, out };
            }
            Op::SliceCols { x, start, out } => {
                let (m, n) = (self.values[x.0].rows(), self.values[x.0].cols());
                let len = self.values[out.0].cols();
                let mut dx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    dx.as_mut_slice()[i * n + start..i * n + start + len]
                        .copy_from_slice(g.row_slice(i));
                }
                self.add_grad(x, dx);
                self.ops[idx] = Op::SliceCols { x, start, out };
            }
            Op::ConcatCols { parts, out } => {
                let m = g.rows();
                let mut at = 0;
                for &p in &parts {
                    let w = self.values[p.0].cols();
                    let mut dp = Tensor::zeros(&[m, w]);
                    for i in 0..m {
                        dp.as_mut_slice()[i * w..(i + 1) * w]
                            .copy_from_slice(&g.row_slice(i)[at..at + w]);
                    }
                    self.add_grad(p, dp);
                    at += w;
                }
                self.ops[idx] = Op::ConcatCols { parts, out };
            }
            Op::ConcatRows { parts, out } => {
                let n = g.cols();
                let mut at = 0;
                for &p in &parts {
                    let r = self.values[p.0].rows();
                    let dp = Tensor::from_vec(
                        &[r, n],
                        g.as_slice()[at * n..(at + r) * n].to_vec(),
                    )
                    .expect("concat_rows backward split");
                    self.add_grad(p, dp);
                    at += r;
                }
                self.ops[idx] = Op::ConcatRows { parts, out };
            }
            Op::Reshape { x, out } => {
                let dx = g
                    .reshape(self.values[x.0].shape())
                    .expect("reshape backward preserves element count");
                self.add_grad(x, dx);
                self.ops[idx] = Op::Reshape { x, out };
            }
            Op::Sum { x, out } => {
                let gs = g.item();
                self.add_grad(x, Tensor::filled(self.values[x.0].shape(), gs));
                self.ops[idx] = Op::Sum { x, out };
            }
            Op::MeanAll { x, out } => {
                let n = self.values[x.0].numel().max(1) as f64;
                let gs = g.item() / n;
                self.add_grad(x, Tensor::filled(self.values[x.0].shape(), gs));
                self.ops[idx] = Op::MeanAll { x, out };
            }
            Op::MseLoss { pred, target, out } => {
                let gs = g.item();
                let n = self.values[pred.0].numel().max(1) as f64;
                let dp = zip(&self.values[pred.0], &self.values[target.0], |p, t| {
                    gs * 2.0 * (p - t) / n
                });
                let dt = dp.map(|v| -v);
                self.add_grad(pred, dp);
                self.add_grad(target, dt);
                self.ops[idx] = Op::MseLoss { pred, target, out };
            }
            Op::CrossEntropy { logits, labels, out } => {
                let gs = g.item();
                let lv = &self.values[logits.0];
                let (m, c) = (lv.rows(), lv.cols());
                let mut dl = Tensor::zeros(&[m, c]);
                for (i, &label) in labels.iter().enumerate() {
                    let row = lv.row_slice(i);
                    let dr = &mut dl.as_mut_slice()[i * c..(i + 1) * c];
                    softmax_into(row, dr);
                    dr[label] -= 1.0;
                    for v in dr.iter_mut() {
                        *v *= gs / m as f64;
                    }
                }
                self.add_grad(logits, dl);
                self.ops[idx] = Op::CrossEntropy { logits, labels, out };
            }
        }
    }

    fn add_grad(&mut self, v: Var, g: Tensor) {
        match &mut self.grads[v.0] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape(), "grad accumulation shape mismatch");
                for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn want_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::ShapeMismatch(format!(
                "{what} shapes differ: {:?} vs {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        Ok(())
    }
}

// ---- kernels ----------------------------------------------------------------

/// C = A @ B.
pub fn matmul_nn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = a.row_slice(i);
        for (kk, &aik) in arow.iter().enumerate().take(k) {
            let brow = b.row_slice(kk);
            let orow = &mut out.as_mut_slice()[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

/// C = A @ B^T.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let m = a.rows();
    let l = b.rows();
    let mut out = Tensor::zeros(&[m, l]);
    for i in 0..m {
        let arow = a.row_slice(i);
        for j in 0..l {
            let brow = b.row_slice(j);
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out.as_mut_slice()[i * l + j] = dot;
        }
    }
    out
}

/// C = A^T @ B.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    let mut out = Tensor::zeros(&[k, n]);
    for i in 0..m {
        let arow = a.row_slice(i);
        let brow = b.row_slice(i).to_vec();
        for (kk, &aik) in arow.iter().enumerate().take(k) {
            let orow = &mut out.as_mut_slice()[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

pub fn transpose(x: &Tensor) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            out.as_mut_slice()[j * m + i] = x.as_slice()[i * n + j];
        }
    }
    out
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_vec(
        a.shape(),
        a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("zip preserves shape")
}

/// Stable softmax of one row.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

/// log(sum(exp(row))) with max subtraction.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-row mean and reciprocal standard deviation with the layer-norm epsilon.
fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

pub fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEFF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEFF * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Independent i-j-k matmul for checking the production kernel.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a.get2(i, kk) * b.get2(kk, j);
                }
                out.set2(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut r = rng::seeded(10);
        for _ in 0..30 {
            let m = rng::below(&mut r, 16) + 1;
            let k = rng::below(&mut r, 16) + 1;
            let n = rng::below(&mut r, 16) + 1;
            let a = rng::randn_tensor(&[m, k], 1.0, &mut r);
            let b = rng::randn_tensor(&[k, n], 1.0, &mut r);
            let mut tape = Tape::new();
            let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
            let c = tape.matmul(va, vb).unwrap();
            let want = matmul_oracle(&a, &b);
            for (got, expect) in tape.value(c).as_slice().iter().zip(want.as_slice()) {
                let rel = (got - expect).abs() / expect.abs().max(1e-8);
                assert!(rel <= 1e-5, "matmul drifted from oracle: {got} vs {expect}");
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[4, 2]));
        assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::row(&[1000.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y).as_slice();
        assert!((v[0] - 1.0).abs() <= 1e-12 && v[1].abs() <= 1e-12, "got {v:?}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng::seeded(11);
        let x = rng::randn_tensor(&[5, 7], 3.0, &mut r);
        let mut tape = Tape::new();
        let vx = tape.leaf(&x);
        let y = tape.softmax_rows(vx).unwrap();
        for i in 0..5 {
            let s: f64 = tape.value(y).row_slice(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn layer_norm_keeps_an_already_normalized_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::row(&[1.0, -1.0]));
        let g = tape.leaf(&Tensor::row(&[1.0, 1.0]));
        let b = tape.leaf(&Tensor::row(&[0.0, 0.0]));
        let y = tape.layer_norm(x, g, b).unwrap();
        let v = tape.value(y).as_slice();
        assert!((v[0] - 1.0).abs() <= 1e-4 && (v[1] + 1.0).abs() <= 1e-4, "got {v:?}");
    }

    #[test]
    fn layer_norm_constant_row_yields_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::row(&[4.2, 4.2, 4.2]));
        let g = tape.leaf(&Tensor::row(&[1.0, 1.0, 1.0]));
        let b = tape.leaf(&Tensor::row(&[0.5, -0.5, 0.0]));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[0.5, -0.5, 0.0]);
    }

    #[test]
    fn gelu_matches_frozen_scalar_values() {
        // Frozen from the tanh-approximation formula evaluated in extended
        // precision: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::row(&[1.5, -0.7, 0.0]));
        let y = tape.gelu(x);
        let v = tape.value(y).as_slice();
        assert!((v[0] - 1.3995715769802328).abs() <= 1e-12);
        assert!((v[1] - -0.16942986529488321).abs() <= 1e-12);
        assert_eq!(v[2], 0.0);
    }

    #[test]
    fn leaky_relu_scales_negatives() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::row(&[-1.0, 2.0, 0.0]));
        let y = tape.leaky_relu(x, 0.2);
        assert_eq!(tape.value(y).as_slice(), &[-0.2, 2.0, 0.0]);
    }

    #[test]
    fn mse_of_identical_tensors_is_zero() {
        let mut r = rng::seeded(12);
        let x = rng::randn_tensor(&[3, 3], 1.0, &mut r);
        let mut tape = Tape::new();
        let (a, b) = (tape.leaf(&x), tape.leaf(&x));
        let l = tape.mse_loss(a, b).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_c() {
        for c in [2usize, 5, 16] {
            let mut tape = Tape::new();
            let x = tape.leaf(&Tensor::zeros(&[1, c]));
            let l = tape.cross_entropy(x, &[0]).unwrap();
            assert!((tape.value(l).item() - (c as f64).ln()).abs() <= 1e-12);
        }
    }

    #[test]
    fn cross_entropy_matches_frozen_scalar_oracle() {
        // Frozen: -log softmax([2,0])[0] = ln(e^2 + 1) - 2.
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::row(&[2.0, 0.0]));
        let l = tape.cross_entropy(x, &[0]).unwrap();
        assert!((tape.value(l).item() - 0.1269280110429727).abs() <= 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[1, 3]));
        assert!(matches!(
            tape.cross_entropy(x, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn structural_ops_round_trip() {
        let t = Tensor::from_vec(&[2, 4], (0..8).map(|v| v as f64).collect()).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let left = tape.slice_cols(x, 0, 2).unwrap();
        let right = tape.slice_cols(x, 2, 2).unwrap();
        let back = tape.concat_cols(&[left, right]).unwrap();
        assert_eq!(tape.value(back).as_slice(), t.as_slice());

        let top = tape.slice_rows(x, 0, 1).unwrap();
        assert_eq!(tape.value(top).as_slice(), &[0.0, 1.0, 2.0, 3.0]);

        let tt = tape.transpose(x).unwrap();
        let ttt = tape.transpose(tt).unwrap();
        assert_eq!(tape.value(ttt).as_slice(), t.as_slice());
    }

    #[test]
    fn backward_accumulates_through_shared_inputs() {
        // y = x*x summed; dy/dx = 2x must accumulate from both mul arms.
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::row(&[3.0, -2.0]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().as_slice(), &[6.0, -4.0]);
    }

    #[test]
    fn backward_of_sum_of_losses_is_sum_of_backwards() {
        let mut r = rng::seeded(13);
        let x = rng::randn_tensor(&[3, 4], 1.0, &mut r);
        let target = rng::randn_tensor(&[3, 4], 1.0, &mut r);

        let build = |tape: &mut Tape, x: Var, which: u8| -> Var {
            match which {
                0 => {
                    let sq = tape.mul(x, x).unwrap();
                    tape.sum(sq)
                }
                _ => {
                    let t = tape.leaf(&target);
                    tape.mse_loss(x, t).unwrap()
                }
            }
        };

        let grad_of = |which: Option<u8>| -> Tensor {
            let mut tape = Tape::new();
            let vx = tape.leaf(&x);
            let loss = match which {
                Some(w) => build(&mut tape, vx, w),
                None => {
                    let a = build(&mut tape, vx, 0);
                    let b = build(&mut tape, vx, 1);
                    tape.add(a, b).unwrap()
                }
            };
            tape.backward(loss).unwrap();
            tape.grad(vx).unwrap().clone()
        };

        let joint = grad_of(None);
        let a = grad_of(Some(0));
        let b = grad_of(Some(1));
        for i in 0..joint.numel() {
            let want = a.as_slice()[i] + b.as_slice()[i];
            assert!((joint.as_slice()[i] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::row(&[1.0]));
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert!(tape.backward(l).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::row(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let mut r = rng::seeded(14);
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::row(&[1.0, 2.0, 3.0]));
        let y = tape.dropout(x, 0.5, false, &mut r).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_training_mode_zeroes_or_rescales() {
        let mut r = rng::seeded(15);
        let vals = Tensor::filled(&[1, 1000], 1.0);
        let mut tape = Tape::new();
        let x = tape.leaf(&vals);
        let y = tape.dropout(x, 0.5, true, &mut r).unwrap();
        let mut kept = 0usize;
        for &v in tape.value(y).as_slice() {
            assert!(v == 0.0 || (v - 2.0).abs() <= 1e-12, "unexpected dropout value {v}");
            if v != 0.0 {
                kept += 1;
            }
        }
        // Keep rate should hover near 0.5 for 1000 draws.
        assert!((350..=650).contains(&kept), "kept {kept} of 1000");
    }
}
