//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape itself is a valid
//! topological order and [`Graph::backward`] simply walks it in reverse.
//! Only the handful of operations the traversability network and its
//! losses need are provided.

use rand::Rng;

use super::conv::{self, Dims};
use super::params::{ParamId, ParamStore};
use super::tensor::{axpy, dot, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Affine { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, scale: Vec<f64> },
    Relu { x: Var },
    Dropout { x: Var, mask: Vec<f64> },
    Sigmoid { x: Var },
    SegmentMax { x: Var, argmax: Vec<u32> },
    Conv3x3 { x: Var, w: Var, b: Var, dims: [usize; 3] },
    GatherRows { x: Var, idx: Vec<usize> },
    SubConst { x: Var },
    Sub { a: Var, b: Var },
    RowSqNorm { x: Var },
    AddScalar { x: Var },
    Recip { x: Var },
    Square { x: Var },
    Mean { x: Var },
    WeightedSum { terms: Vec<(Var, f64)> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Output of a training-mode batch norm: the normalized node plus the batch
/// statistics used (for running-average updates).
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const NO_ARGMAX: u32 = u32::MAX;

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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// A constant input; gradients never flow into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// A differentiable leaf that is not tied to a parameter (used for
    /// gradient checks with respect to inputs).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: None }, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Leaf { param: Some(id) }, true)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn expect_2d(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].value.shape;
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!("{what}: expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `x W + b` with `x: [n, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.expect_2d(x, "linear input")?;
        let (win, dout) = self.expect_2d(w, "linear weight")?;
        if win != din {
            return Err(Error::ShapeMismatch(format!("linear: input width {din} vs weight rows {win}")));
        }
        if let Some(b) = b {
            if self.value(b).len() != dout {
                return Err(Error::ShapeMismatch("linear: bias length".into()));
            }
        }
        let mut out = vec![0.0; n * dout];
        {
            let xv = &self.value(x).data;
            let wv = &self.value(w).data;
            let bv = b.map(|b| &self.value(b).data);
            for r in 0..n {
                let o = &mut out[r * dout..(r + 1) * dout];
                if let Some(bv) = bv {
                    o.copy_from_slice(bv);
                }
                for (i, &xi) in xv[r * din..(r + 1) * din].iter().enumerate() {
                    if xi != 0.0 {
                        axpy(o, xi, &wv[i * dout..(i + 1) * dout]);
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.map_or(false, |b| self.rg(b));
        Ok(self.push(Tensor { shape: vec![n, dout], data: out }, Op::Linear { x, w, b }, rg))
    }

    /// Training-mode batch normalization over the rows of `x: [n, c]`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c) = self.expect_2d(x, "batch_norm input")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::ShapeMismatch("batch_norm: affine length".into()));
        }
        let xv = &self.value(x).data;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if n > 0 {
            for r in 0..n {
                for (m, v) in mean.iter_mut().zip(&xv[r * c..(r + 1) * c]) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            for r in 0..n {
                for k in 0..c {
                    let d = xv[r * c + k] - mean[k];
                    var[k] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= n as f64);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = &self.value(gamma).data;
        let bta = &self.value(beta).data;
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            for k in 0..c {
                let h = (xv[r * c + k] - mean[k]) * inv_std[k];
                xhat[r * c + k] = h;
                out[r * c + k] = g[k] * h + bta[k];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor { shape: vec![n, c], data: out },
            Op::BatchNorm { x, gamma, beta, xhat, inv_std },
            rg,
        );
        Ok((v, BatchStats { mean, var }))
    }

    /// Eval-mode batch normalization with fixed statistics.
    pub fn batch_norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c) = self.expect_2d(x, "batch_norm input")?;
        if mean.len() != c || var.len() != c || self.value(gamma).len() != c {
            return Err(Error::ShapeMismatch("batch_norm: statistics length".into()));
        }
        let scale: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = &self.value(x).data;
        let g = &self.value(gamma).data;
        let bta = &self.value(beta).data;
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            for k in 0..c {
                let h = (xv[r * c + k] - mean[k]) * scale[k];
                xhat[r * c + k] = h;
                out[r * c + k] = g[k] * h + bta[k];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor { shape: vec![n, c], data: out },
            Op::Affine { x, gamma, beta, xhat, scale },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = &self.value(x);
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|v| v.max(0.0)).collect() };
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let t = self.value(x);
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().zip(&mask).map(|(a, m)| a * m).collect() };
        let rg = self.rg(x);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| crate::supervision::sigmoid(v)).collect(),
        };
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    /// Column-wise max over row segments of `x: [rows, c]`.
    ///
    /// Segment `k` covers rows `offsets[k]..offsets[k + 1]` and is written to
    /// output row `targets[k]` of an `[n_out, c]` result. Output rows without
    /// a segment, and empty segments, are zero.
    pub fn segment_max(&mut self, x: Var, offsets: &[usize], targets: &[usize], n_out: usize) -> Result<Var> {
        let (rows, c) = self.expect_2d(x, "segment_max input")?;
        if offsets.len() != targets.len() + 1 || offsets.last().copied() != Some(rows) {
            return Err(Error::ShapeMismatch("segment_max: offsets do not cover the input".into()));
        }
        let xv = &self.value(x).data;
        let mut out = vec![0.0; n_out * c];
        let mut argmax = vec![NO_ARGMAX; n_out * c];
        for (k, &t) in targets.iter().enumerate() {
            if t >= n_out {
                return Err(Error::ShapeMismatch("segment_max: target row out of range".into()));
            }
            let (s, e) = (offsets[k], offsets[k + 1]);
            if s == e {
                continue;
            }
            let o = &mut out[t * c..(t + 1) * c];
            let a = &mut argmax[t * c..(t + 1) * c];
            o.copy_from_slice(&xv[s * c..(s + 1) * c]);
            a.iter_mut().for_each(|v| *v = s as u32);
            for r in (s + 1)..e {
                let row = &xv[r * c..(r + 1) * c];
                for ch in 0..c {
                    if row[ch] > o[ch] {
                        o[ch] = row[ch];
                        a[ch] = r as u32;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![n_out, c], data: out }, Op::SegmentMax { x, argmax }, rg))
    }

    /// Same-padded 3x3 convolution over `x: [batch, h, w, cin]` (channels
    /// last) with `W: [9, cin, cout]` (tap-major, taps in row-major order)
    /// and `b: [cout]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape.clone();
        let ws = self.value(w).shape.clone();
        if xs.len() != 4 || ws.len() != 3 || ws[0] != 9 || ws[1] != xs[3] {
            return Err(Error::ShapeMismatch(format!("conv3x3: input {xs:?}, weight {ws:?}")));
        }
        let (bsz, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[2];
        if self.value(b).len() != cout {
            return Err(Error::ShapeMismatch("conv3x3: bias length".into()));
        }
        let dims = Dims { batch: bsz, h, w: wd, cin, cout };
        let out = conv::forward(&self.value(x).data, &self.value(w).data, Some(&self.value(b).data), dims);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor { shape: vec![bsz, h, wd, cout], data: out },
            Op::Conv3x3 { x, w, b, dims: [bsz, h, wd] },
            rg,
        ))
    }

    /// Reinterprets `x` with a new shape of the same size.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::ShapeMismatch(format!("reshape to {shape:?}")));
        }
        // identity backward, same as subtracting a constant
        let data = self.value(x).data.clone();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::SubConst { x }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rows = t.rows();
        let c = t.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &r in idx {
            if r >= rows {
                return Err(Error::ShapeMismatch(format!("gather_rows: row {r} of {rows}")));
            }
            out.extend_from_slice(&t.data[r * c..(r + 1) * c]);
        }
        let mut shape = t.shape.clone();
        if shape.is_empty() {
            shape.push(idx.len());
        } else {
            shape[0] = idx.len();
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data: out }, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    /// `x - c`, with `c` broadcast over rows when it has one row's length,
    /// or elementwise when it matches `x`.
    pub fn sub_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols().max(1);
        let data: Vec<f64> = if c.len() == t.len() {
            t.data.iter().zip(c).map(|(a, b)| a - b).collect()
        } else if c.len() == cols {
            t.data.iter().enumerate().map(|(k, a)| a - c[k % cols]).collect()
        } else {
            return Err(Error::ShapeMismatch(format!("sub_const: {} vs shape {:?}", c.len(), t.shape)));
        };
        let shape = t.shape.clone();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::SubConst { x }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(Error::ShapeMismatch(format!("sub: {:?} vs {:?}", ta.shape, tb.shape)));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Sub { a, b }, rg))
    }

    /// Squared Euclidean norm of each row: `[n, d] -> [n]`.
    pub fn row_sq_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, c) = (t.rows(), t.cols());
        let data = (0..n).map(|r| t.data[r * c..(r + 1) * c].iter().map(|v| v * v).sum()).collect();
        let rg = self.rg(x);
        self.push(Tensor { shape: vec![n], data }, Op::RowSqNorm { x }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|v| v + c).collect() };
        let rg = self.rg(x);
        self.push(out, Op::AddScalar { x }, rg)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|v| 1.0 / v).collect() };
        let rg = self.rg(x);
        self.push(out, Op::Recip { x }, rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|v| v * v).collect() };
        let rg = self.rg(x);
        self.push(out, Op::Square { x }, rg)
    }

    /// Mean of all entries as a one-element tensor; the mean of an empty
    /// tensor is defined as 0.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = if t.is_empty() { 0.0 } else { t.data.iter().sum::<f64>() / t.len() as f64 };
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean { x }, rg)
    }

    /// `sum_k w_k * v_k` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        let shape = self.value(first).shape.clone();
        let mut data = vec![0.0; self.value(first).len()];
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != data.len() {
                return Err(Error::ShapeMismatch("weighted_sum: operand shapes differ".into()));
            }
            for (d, x) in data.iter_mut().zip(&t.data) {
                *d += w * x;
            }
        }
        let rg = terms.iter().any(|(v, _)| self.rg(*v));
        Ok(self.push(Tensor { shape, data }, Op::WeightedSum { terms: terms.to_vec() }, rg))
    }

    fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Back-propagates from a one-element `loss`, replacing any previous
    /// gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(gy);
                continue;
            }
            self.backprop_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Linear { x, w, b } => {
                let (n, din) = (val(*x).rows(), val(*x).cols());
                let dout = val(*w).cols();
                if let Some(b) = b {
                    if need(*b) {
                        let gb = Self::acc(grads, *b, dout);
                        for r in 0..n {
                            for (a, g) in gb.iter_mut().zip(&gy[r * dout..(r + 1) * dout]) {
                                *a += g;
                            }
                        }
                    }
                }
                if need(*w) {
                    let xv = &val(*x).data;
                    let gw = Self::acc(grads, *w, din * dout);
                    for r in 0..n {
                        let g = &gy[r * dout..(r + 1) * dout];
                        for i in 0..din {
                            let xi = xv[r * din + i];
                            if xi != 0.0 {
                                axpy(&mut gw[i * dout..(i + 1) * dout], xi, g);
                            }
                        }
                    }
                }
                if need(*x) {
                    let wv = &val(*w).data;
                    let gx = Self::acc(grads, *x, n * din);
                    for r in 0..n {
                        let g = &gy[r * dout..(r + 1) * dout];
                        for i in 0..din {
                            gx[r * din + i] += dot(g, &wv[i * dout..(i + 1) * dout]);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let c = inv_std.len();
                let n = if c == 0 { 0 } else { xhat.len() / c };
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for r in 0..n {
                    for k in 0..c {
                        sum_g[k] += gy[r * c + k];
                        sum_gx[k] += gy[r * c + k] * xhat[r * c + k];
                    }
                }
                if need(*gamma) {
                    let gg = Self::acc(grads, *gamma, c);
                    gg.iter_mut().zip(&sum_gx).for_each(|(a, v)| *a += v);
                }
                if need(*beta) {
                    let gb = Self::acc(grads, *beta, c);
                    gb.iter_mut().zip(&sum_g).for_each(|(a, v)| *a += v);
                }
                if need(*x) && n > 0 {
                    let g = &val(*gamma).data;
                    let nf = n as f64;
                    let gx = Self::acc(grads, *x, n * c);
                    for r in 0..n {
                        for k in 0..c {
                            let e = r * c + k;
                            gx[e] += g[k] * inv_std[k] / nf * (nf * gy[e] - sum_g[k] - xhat[e] * sum_gx[k]);
                        }
                    }
                }
            }
            Op::Affine { x, gamma, beta, xhat, scale } => {
                let c = scale.len();
                let n = if c == 0 { 0 } else { xhat.len() / c };
                if need(*gamma) {
                    let gg = Self::acc(grads, *gamma, c);
                    for r in 0..n {
                        for k in 0..c {
                            gg[k] += gy[r * c + k] * xhat[r * c + k];
                        }
                    }
                }
                if need(*beta) {
                    let gb = Self::acc(grads, *beta, c);
                    for r in 0..n {
                        for k in 0..c {
                            gb[k] += gy[r * c + k];
                        }
                    }
                }
                if need(*x) {
                    let g = &val(*gamma).data;
                    let gx = Self::acc(grads, *x, n * c);
                    for r in 0..n {
                        for k in 0..c {
                            gx[r * c + k] += gy[r * c + k] * g[k] * scale[k];
                        }
                    }
                }
            }
            Op::Relu { x } => {
                let xv = &val(*x).data;
                let gx = Self::acc(grads, *x, xv.len());
                for ((a, g), v) in gx.iter_mut().zip(gy).zip(xv) {
                    if *v > 0.0 {
                        *a += g;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let gx = Self::acc(grads, *x, mask.len());
                for ((a, g), m) in gx.iter_mut().zip(gy).zip(mask) {
                    *a += g * m;
                }
            }
            Op::Sigmoid { x } => {
                let s = &node.value.data;
                let gx = Self::acc(grads, *x, s.len());
                for ((a, g), s) in gx.iter_mut().zip(gy).zip(s) {
                    *a += g * s * (1.0 - s);
                }
            }
            Op::SegmentMax { x, argmax } => {
                let c = val(*x).cols();
                let len = val(*x).len();
                let gx = Self::acc(grads, *x, len);
                for (e, &src) in argmax.iter().enumerate() {
                    if src != NO_ARGMAX {
                        gx[src as usize * c + e % c] += gy[e];
                    }
                }
            }
            Op::Conv3x3 { x, w, b, dims } => {
                let [bsz, h, wd] = *dims;
                let cin = val(*x).shape[3];
                let cout = val(*w).shape[2];
                if need(*b) {
                    let gb = Self::acc(grads, *b, cout);
                    for p in 0..bsz * h * wd {
                        for (a, g) in gb.iter_mut().zip(&gy[p * cout..(p + 1) * cout]) {
                            *a += g;
                        }
                    }
                }
                let dims = Dims { batch: bsz, h, w: wd, cin, cout };
                if need(*w) {
                    let gw = conv::grad_weight(&val(*x).data, gy, dims);
                    let a = Self::acc(grads, *w, gw.len());
                    a.iter_mut().zip(&gw).for_each(|(a, v)| *a += v);
                }
                if need(*x) {
                    let gx = conv::grad_input(gy, &val(*w).data, dims);
                    let a = Self::acc(grads, *x, gx.len());
                    a.iter_mut().zip(&gx).for_each(|(a, v)| *a += v);
                }
            }
            Op::GatherRows { x, idx } => {
                let c = val(*x).cols();
                let len = val(*x).len();
                let gx = Self::acc(grads, *x, len);
                for (k, &r) in idx.iter().enumerate() {
                    for (a, g) in gx[r * c..(r + 1) * c].iter_mut().zip(&gy[k * c..(k + 1) * c]) {
                        *a += g;
                    }
                }
            }
            Op::SubConst { x } | Op::AddScalar { x } => {
                let gx = Self::acc(grads, *x, gy.len());
                gx.iter_mut().zip(gy).for_each(|(a, g)| *a += g);
            }
            Op::Sub { a, b } => {
                if need(*a) {
                    let ga = Self::acc(grads, *a, gy.len());
                    ga.iter_mut().zip(gy).for_each(|(x, g)| *x += g);
                }
                if need(*b) {
                    let gb = Self::acc(grads, *b, gy.len());
                    gb.iter_mut().zip(gy).for_each(|(x, g)| *x -= g);
                }
            }
            Op::RowSqNorm { x } => {
                let t = val(*x);
                let c = t.cols();
                let gx = Self::acc(grads, *x, t.len());
                for (e, (a, v)) in gx.iter_mut().zip(&t.data).enumerate() {
                    *a += 2.0 * v * gy[e / c];
                }
            }
            Op::Recip { x } => {
                let xv = &val(*x).data;
                let gx = Self::acc(grads, *x, xv.len());
                for ((a, g), v) in gx.iter_mut().zip(gy).zip(xv) {
                    *a -= g / (v * v);
                }
            }
            Op::Square { x } => {
                let xv = &val(*x).data;
                let gx = Self::acc(grads, *x, xv.len());
                for ((a, g), v) in gx.iter_mut().zip(gy).zip(xv) {
                    *a += 2.0 * v * g;
                }
            }
            Op::Mean { x } => {
                let len = val(*x).len();
                if len > 0 {
                    let gx = Self::acc(grads, *x, len);
                    let g = gy[0] / len as f64;
                    gx.iter_mut().for_each(|a| *a += g);
                }
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    if need(v) {
                        let gv = Self::acc(grads, v, gy.len());
                        gv.iter_mut().zip(gy).for_each(|(a, g)| *a += w * g);
                    }
                }
            }
        }
    }

    /// Adds the gradients of all parameter leaves into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                let g = self.grads.get(i).and_then(|g| g.as_deref());
                match g {
                    Some(g) => store.accumulate_grad(id, g),
                    None => store.accumulate_grad(id, &vec![0.0; node.value.len()]),
                }
            }
        }
    }

    /// Parameters leaves in this graph.
    pub fn param_leaves(&self) -> Vec<(ParamId, Var)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { param: Some(id) } => Some((id, Var(i))),
                _ => None,
            })
            .collect()
    }

    /// Piecewise-linear branch taken by every ReLU and max-pool node; a
    /// change between two evaluations means a kink was crossed.
    pub fn kink_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu { x } => out.extend(self.nodes[x.0].value.data.iter().map(|v| (*v > 0.0) as u32)),
                Op::SegmentMax { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamGroup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape, data: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() }
    }

    /// Central differences of `f` with respect to every entry of `x0`.
    fn numeric_grad(x0: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; x0.len()];
        for k in 0..x0.len() {
            let mut p = x0.clone();
            p.data[k] += h;
            let mut m = x0.clone();
            m.data[k] -= h;
            out[k] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
    }

    fn check(x0: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let y = build(&mut g, x);
        g.backward(y).unwrap();
        let analytic = g.grad(x).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; x0.len()]);
        let numeric = numeric_grad(&x0, 1e-4, |t| {
            let mut g = Graph::new();
            let x = g.input(t.clone());
            let y = build(&mut g, x);
            g.value(y).item()
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(rel_err(*a, *n) < 1e-4, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn squared_norm_gradient_is_twice_w() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::Encoder, Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let w2 = g.reshape(w, vec![1, 3]).unwrap();
        let n = g.row_sq_norm(w2);
        let loss = g.mean(n);
        g.backward(loss).unwrap();
        g.accumulate_param_grads(&mut store);
        assert_eq!(store.get(id).grad.as_deref(), Some(&[2.0, -4.0, 1.0][..]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(x), Err(Error::Graph(_))));
    }

    #[test]
    fn detached_branch_gets_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let d = g.detach(x);
        let s = g.sub(x, d).unwrap();
        let sq = g.row_sq_norm(d);
        let a = g.mean(sq);
        let b = g.row_sq_norm(s);
        let b = g.mean(b);
        let loss = g.weighted_sum(&[(a, 1.0), (b, 1.0)]).unwrap();
        g.backward(loss).unwrap();
        // only the (x - d) path reaches x, and it is zero at x == d
        assert!(g.grad(x).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_and_sigmoid_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_tensor(&mut rng, vec![4, 3]);
        let b = rand_tensor(&mut rng, vec![3]);
        check(rand_tensor(&mut rng, vec![5, 4]), |g, x| {
            let w = g.constant(w.clone());
            let b = g.constant(b.clone());
            let y = g.linear(x, w, Some(b)).unwrap();
            let s = g.sigmoid(y);
            let q = g.square(s);
            g.mean(q)
        });
        let x0 = rand_tensor(&mut rng, vec![5, 4]);
        check(w.clone(), |g, w| {
            let x = g.constant(x0.clone());
            let y = g.linear(x, w, None).unwrap();
            let n = g.row_sq_norm(y);
            g.mean(n)
        });
    }

    #[test]
    fn batch_norm_gradients_and_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gamma = rand_tensor(&mut rng, vec![3]);
        let beta = rand_tensor(&mut rng, vec![3]);
        let proj = rand_tensor(&mut rng, vec![6, 3]);
        check(rand_tensor(&mut rng, vec![6, 3]), |g, x| {
            let ga = g.constant(gamma.clone());
            let be = g.constant(beta.clone());
            let (y, _) = g.batch_norm(x, ga, be, 1e-5).unwrap();
            let p = g.constant(proj.clone());
            let d = g.sub(y, p).unwrap();
            let n = g.row_sq_norm(d);
            let c = g.add_scalar(n, 0.5);
            let r = g.recip(c);
            g.mean(r)
        });

        let mut g = Graph::new();
        let x = g.input(Tensor { shape: vec![50, 2], data: (0..100).map(|_| rng.gen_range(-3.0..5.0)).collect() });
        let one = g.constant(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let zero = g.constant(Tensor::zeros(vec![2]));
        let (y, _) = g.batch_norm(x, one, zero, 1e-5).unwrap();
        let t = g.value(y);
        for k in 0..2 {
            let col: Vec<f64> = (0..50).map(|r| t.data[r * 2 + k]).collect();
            let m = col.iter().sum::<f64>() / 50.0;
            let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / 50.0;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn segment_max_and_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let offsets = vec![0, 3, 3, 7];
        let targets = vec![4, 0, 1];
        check(rand_tensor(&mut rng, vec![7, 2]), |g, x| {
            let m = g.segment_max(x, &offsets, &targets, 5).unwrap();
            let s = g.gather_rows(m, &[1, 4, 4]).unwrap();
            let q = g.square(s);
            g.mean(q)
        });
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 1], vec![1.0, 5.0, 2.0]).unwrap());
        let m = g.segment_max(x, &[0, 3, 3], &[1, 0], 3).unwrap();
        assert_eq!(g.value(m).data, vec![0.0, 5.0, 0.0]);
    }

    #[test]
    fn padding_rows_do_not_change_the_pool() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 2], vec![0.3, 0.0, 0.1, 0.7]).unwrap());
        let a = g.segment_max(x, &[0, 2], &[0], 1).unwrap();
        let mut padded = g.value(x).data.clone();
        padded.extend([0.0, 0.0, 0.0, 0.0]);
        let xp = g.constant(Tensor::new(vec![4, 2], padded).unwrap());
        let b = g.segment_max(xp, &[0, 4], &[0], 1).unwrap();
        // post-ReLU activations are non-negative, so zero rows never win
        assert_eq!(g.value(a).data, g.value(b).data);
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = rand_tensor(&mut rng, vec![9, 2, 3]);
        let b = rand_tensor(&mut rng, vec![3]);
        let x0 = rand_tensor(&mut rng, vec![2, 3, 4, 2]);
        check(x0.clone(), |g, x| {
            let w = g.constant(w.clone());
            let b = g.constant(b.clone());
            let y = g.conv3x3(x, w, b).unwrap();
            let q = g.square(y);
            g.mean(q)
        });
        check(w.clone(), |g, w| {
            let x = g.constant(x0.clone());
            let b = g.constant(b.clone());
            let y = g.conv3x3(x, w, b).unwrap();
            let q = g.square(y);
            g.mean(q)
        });
        check(b.clone(), |g, b| {
            let x = g.constant(x0.clone());
            let w = g.constant(w.clone());
            let y = g.conv3x3(x, w, b).unwrap();
            let q = g.square(y);
            g.mean(q)
        });
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, wd, cin, cout) = (4, 5, 2, 3);
        let x = rand_tensor(&mut rng, vec![1, h, wd, cin]);
        let w = rand_tensor(&mut rng, vec![9, cin, cout]);
        let b = rand_tensor(&mut rng, vec![cout]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv3x3(xv, wv, bv).unwrap();
        let out = g.value(y);
        for i in 0..h {
            for j in 0..wd {
                for co in 0..cout {
                    let mut s = b.data[co];
                    for di in -1i32..=1 {
                        for dj in -1i32..=1 {
                            let (ii, jj) = (i as i32 + di, j as i32 + dj);
                            if ii < 0 || jj < 0 || ii >= h as i32 || jj >= wd as i32 {
                                continue;
                            }
                            let tap = ((di + 1) * 3 + dj + 1) as usize;
                            for ci in 0..cin {
                                s += x.data[((ii as usize) * wd + jj as usize) * cin + ci]
                                    * w.data[(tap * cin + ci) * cout + co];
                            }
                        }
                    }
                    assert!((out.data[(i * wd + j) * cout + co] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dropout_and_fixed_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gamma = rand_tensor(&mut rng, vec![3]);
        let beta = rand_tensor(&mut rng, vec![3]);
        check(rand_tensor(&mut rng, vec![4, 3]), |g, x| {
            let mut r = ChaCha8Rng::seed_from_u64(77);
            let ga = g.constant(gamma.clone());
            let be = g.constant(beta.clone());
            let y = g.batch_norm_fixed(x, ga, be, &[0.1, -0.2, 0.3], &[1.0, 2.0, 0.5], 1e-5).unwrap();
            let d = g.dropout(y, 0.3, &mut r);
            let s = g.sigmoid(d);
            let q = g.square(s);
            g.mean(q)
        });
    }
}
