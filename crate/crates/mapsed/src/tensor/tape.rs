//! Reverse-mode differentiation over a recording tape.
//!
//! Operations append nodes to an arena; node indices only ever point
//! backwards, so replaying the arena in reverse is a topological traversal
//! that visits each node exactly once. One tape per training step; tapes
//! are never shared across threads.

use super::{conv2d_bwd, conv2d_fwd, conv3d_bwd, conv3d_fwd, matmul_raw, ConvParams, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize, f64),
    Relu(usize),
    Abs(usize),
    Exp(usize),
    SumAll(usize),
    Reshape(usize),
    Permute { src: usize, perm: Vec<usize> },
    Concat { a: usize, b: usize, axis: usize },
    Matmul { a: usize, b: usize },
    SoftmaxRows(usize),
    Conv2d { input: usize, kernel: usize, bias: usize },
    Conv3d { input: usize, kernel: usize, bias: usize },
    AvgPool2(usize),
    Upsample2(usize),
    MinScalars(Vec<usize>),
    LogSumExpScalars(Vec<usize>),
    Slice0 { src: usize, idx: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    param: bool,
}

/// A Wengert tape: values plus the provenance needed to run the chain rule
/// backwards from a scalar root.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, param: bool) -> Var {
        self.nodes.push(Node { value, op, param });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Record a constant input (no gradient of interest).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Record a learnable parameter; its gradient is kept after `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root w.r.t. `v`. `None` if no
    /// gradient flowed to `v` (or `backward` has not run).
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape().to_vec(),
            data: g.clone(),
        })
    }

    /// Gradient for a parameter var, zeros if nothing flowed to it.
    pub fn param_grad(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor {
                shape: self.nodes[v.0].value.shape().to_vec(),
                data: g.clone(),
            },
            None => Tensor::zeros(self.nodes[v.0].value.shape()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Recorded operations ──────────────────────────────────────────

    fn binary_same_shape(&mut self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(Error::dim(op, "shape", sa.iter().product(), sb.iter().product()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Add(a.0, b.0), false))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Sub(a.0, b.0), false))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Mul(a.0, b.0), false))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.map(|v| v * c);
        self.push(value, Op::Scale(a.0, c), false)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.map(|v| v + c);
        self.push(value, Op::Offset(a.0, c), false)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|v| v.max(0.0));
        self.push(value, Op::Relu(a.0), false)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(f64::abs);
        self.push(value, Op::Abs(a.0), false)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(f64::exp);
        self.push(value, Op::Exp(a.0), false)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.0), false)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a.0), false))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let value = super::permute(&self.nodes[a.0].value, perm)?;
        Ok(self.push(value, Op::Permute { src: a.0, perm: perm.to_vec() }, false))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let value = super::concat(&self.nodes[a.0].value, &self.nodes[b.0].value, axis)?;
        Ok(self.push(value, Op::Concat { a: a.0, b: b.0, axis }, false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = super::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(value, Op::Matmul { a: a.0, b: b.0 }, false))
    }

    /// Softmax along the last axis of a 2D tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].value.ndim() != 2 {
            return Err(Error::dim("softmax_rows", "rank", 2, self.nodes[a.0].value.ndim()));
        }
        let value = super::softmax(&self.nodes[a.0].value, 1)?;
        Ok(self.push(value, Op::SoftmaxRows(a.0), false))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let p = ConvParams::new(
            self.nodes[kernel.0].value.clone(),
            self.nodes[bias.0].value.clone(),
        )?;
        super::conv2d_same(&self.nodes[input.0].value, &p)?; // validate
        let value = conv2d_fwd(&self.nodes[input.0].value, &p.kernel, &p.bias);
        Ok(self.push(value, Op::Conv2d { input: input.0, kernel: kernel.0, bias: bias.0 }, false))
    }

    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let p = ConvParams::new(
            self.nodes[kernel.0].value.clone(),
            self.nodes[bias.0].value.clone(),
        )?;
        super::conv3d_same(&self.nodes[input.0].value, &p)?; // validate
        let value = conv3d_fwd(&self.nodes[input.0].value, &p.kernel, &p.bias);
        Ok(self.push(value, Op::Conv3d { input: input.0, kernel: kernel.0, bias: bias.0 }, false))
    }

    /// 2x2 average pooling over the last two axes of a `c x h x w` tensor.
    /// Requires even spatial dims.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.shape();
        if s.len() != 3 {
            return Err(Error::dim("avg_pool2", "rank", 3, s.len()));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim("avg_pool2", "even spatial dims", h / 2 * 2, h));
        }
        let x = self.nodes[a.0].value.data();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += x[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
                        }
                    }
                    out[(ch * oh + y) * ow + xx] = acc / 4.0;
                }
            }
        }
        Ok(self.push(Tensor { shape: vec![c, oh, ow], data: out }, Op::AvgPool2(a.0), false))
    }

    /// Nearest-neighbor 2x upsampling over the last two axes of a
    /// `c x h x w` tensor.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.shape();
        if s.len() != 3 {
            return Err(Error::dim("upsample2", "rank", 3, s.len()));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let x = self.nodes[a.0].value.data();
        let (oh, ow) = (h * 2, w * 2);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ch * oh + y) * ow + xx] = x[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(Tensor { shape: vec![c, oh, ow], data: out }, Op::Upsample2(a.0), false))
    }

    /// Minimum of a non-empty set of scalars. Backward routes the gradient
    /// to the first argmin.
    pub fn min_scalars(&mut self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(Error::Contract("min_scalars: empty input set".into()));
        }
        let mut best = f64::INFINITY;
        for v in vars {
            let t = &self.nodes[v.0].value;
            if t.len() != 1 {
                return Err(Error::dim("min_scalars", "scalar", 1, t.len()));
            }
            best = best.min(t.data()[0]);
        }
        let srcs = vars.iter().map(|v| v.0).collect();
        Ok(self.push(Tensor::scalar(best), Op::MinScalars(srcs), false))
    }

    /// Extract the `idx`-th block along axis 0, dropping that axis.
    pub fn slice0(&mut self, a: Var, idx: usize) -> Result<Var> {
        let s = self.nodes[a.0].value.shape().to_vec();
        if s.len() < 2 {
            return Err(Error::dim("slice0", "rank", 2, s.len()));
        }
        if idx >= s[0] {
            return Err(Error::dim("slice0", "index", s[0].saturating_sub(1), idx));
        }
        let block: usize = s[1..].iter().product();
        let data = self.nodes[a.0].value.data()[idx * block..(idx + 1) * block].to_vec();
        let value = Tensor::from_vec(&s[1..], data)?;
        Ok(self.push(value, Op::Slice0 { src: a.0, idx }, false))
    }

    /// log(sum(exp(s_i))) over a non-empty set of scalars, computed in
    /// shifted form for stability.
    pub fn logsumexp_scalars(&mut self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(Error::Contract("logsumexp_scalars: empty input set".into()));
        }
        let mut vals = Vec::with_capacity(vars.len());
        for v in vars {
            let t = &self.nodes[v.0].value;
            if t.len() != 1 {
                return Err(Error::dim("logsumexp_scalars", "scalar", 1, t.len()));
            }
            vals.push(t.data()[0]);
        }
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let srcs = vars.iter().map(|v| v.0).collect();
        Ok(self.push(Tensor::scalar(lse), Op::LogSumExpScalars(srcs), false))
    }

    // ── Backward pass ────────────────────────────────────────────────

    fn accum(&mut self, idx: usize, g: &[f64]) {
        match &mut self.grads[idx] {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => self.grads[idx] = Some(g.to_vec()),
        }
    }

    /// Run reverse-mode accumulation from a scalar root. Gradients from any
    /// previous run are cleared first.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let g = match &self.grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accum(a, &g);
                    self.accum(b, &g);
                }
                Op::Sub(a, b) => {
                    self.accum(a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accum(b, &neg);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> =
                        g.iter().zip(self.nodes[b].value.data()).map(|(x, y)| x * y).collect();
                    let db: Vec<f64> =
                        g.iter().zip(self.nodes[a].value.data()).map(|(x, y)| x * y).collect();
                    self.accum(a, &da);
                    self.accum(b, &db);
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                    self.accum(a, &da);
                }
                Op::Offset(a, _) => self.accum(a, &g),
                Op::Relu(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    self.accum(a, &da);
                }
                Op::Abs(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(gv, &x)| gv * x.signum() * if x == 0.0 { 0.0 } else { 1.0 })
                        .collect();
                    self.accum(a, &da);
                }
                Op::Exp(a) => {
                    let da: Vec<f64> =
                        g.iter().zip(self.nodes[i].value.data()).map(|(gv, &y)| gv * y).collect();
                    self.accum(a, &da);
                }
                Op::SumAll(a) => {
                    let da = vec![g[0]; self.nodes[a].value.len()];
                    self.accum(a, &da);
                }
                Op::Reshape(a) => self.accum(a, &g),
                Op::Permute { src, perm } => {
                    // Gradient flows through the inverse permutation.
                    let mut inv = vec![0usize; perm.len()];
                    for (i_axis, &p) in perm.iter().enumerate() {
                        inv[p] = i_axis;
                    }
                    let gt = Tensor {
                        shape: self.nodes[i].value.shape().to_vec(),
                        data: g.clone(),
                    };
                    let back = super::permute(&gt, &inv).expect("inverse permutation");
                    self.accum(src, back.data());
                }
                Op::Concat { a, b, axis } => {
                    let sa = self.nodes[a].value.shape().to_vec();
                    let sb = self.nodes[b].value.shape().to_vec();
                    let outer: usize = sa[..axis].iter().product();
                    let inner: usize = sa[axis + 1..].iter().product();
                    let a_blk = sa[axis] * inner;
                    let b_blk = sb[axis] * inner;
                    let mut da = vec![0.0; self.nodes[a].value.len()];
                    let mut db = vec![0.0; self.nodes[b].value.len()];
                    for o in 0..outer {
                        let base = o * (a_blk + b_blk);
                        da[o * a_blk..(o + 1) * a_blk]
                            .copy_from_slice(&g[base..base + a_blk]);
                        db[o * b_blk..(o + 1) * b_blk]
                            .copy_from_slice(&g[base + a_blk..base + a_blk + b_blk]);
                    }
                    self.accum(a, &da);
                    self.accum(b, &db);
                }
                Op::Matmul { a, b } => {
                    let (p, q) = {
                        let s = self.nodes[a].value.shape();
                        (s[0], s[1])
                    };
                    let r = self.nodes[b].value.shape()[1];
                    // dA = G B^T, dB = A^T G
                    let bt = super::permute(&self.nodes[b].value, &[1, 0]).unwrap();
                    let da = matmul_raw(&g, bt.data(), p, r, q);
                    let at = super::permute(&self.nodes[a].value, &[1, 0]).unwrap();
                    let db = matmul_raw(at.data(), &g, q, p, r);
                    self.accum(a, &da);
                    self.accum(b, &db);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.nodes[i].value.data();
                    let (rows, cols) = {
                        let s = self.nodes[i].value.shape();
                        (s[0], s[1])
                    };
                    let mut da = vec![0.0; rows * cols];
                    for rr in 0..rows {
                        let base = rr * cols;
                        let dot: f64 =
                            (0..cols).map(|c| g[base + c] * y[base + c]).sum();
                        for c in 0..cols {
                            da[base + c] = y[base + c] * (g[base + c] - dot);
                        }
                    }
                    self.accum(a, &da);
                }
                Op::Conv2d { input, kernel, bias } => {
                    let gt = Tensor {
                        shape: self.nodes[i].value.shape().to_vec(),
                        data: g.clone(),
                    };
                    let (di, dk, db) =
                        conv2d_bwd(&gt, &self.nodes[input].value, &self.nodes[kernel].value);
                    self.accum(input, di.data());
                    self.accum(kernel, dk.data());
                    self.accum(bias, db.data());
                }
                Op::Conv3d { input, kernel, bias } => {
                    let gt = Tensor {
                        shape: self.nodes[i].value.shape().to_vec(),
                        data: g.clone(),
                    };
                    let (di, dk, db) =
                        conv3d_bwd(&gt, &self.nodes[input].value, &self.nodes[kernel].value);
                    self.accum(input, di.data());
                    self.accum(kernel, dk.data());
                    self.accum(bias, db.data());
                }
                Op::AvgPool2(a) => {
                    let s = self.nodes[a].value.shape().to_vec();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (oh, ow) = (h / 2, w / 2);
                    let mut da = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let gv = g[(ch * oh + y) * ow + xx] / 4.0;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        da[(ch * h + 2 * y + dy) * w + 2 * xx + dx] += gv;
                                    }
                                }
                            }
                        }
                    }
                    self.accum(a, &da);
                }
                Op::Upsample2(a) => {
                    let s = self.nodes[a].value.shape().to_vec();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (oh, ow) = (h * 2, w * 2);
                    let mut da = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                da[(ch * h + y / 2) * w + xx / 2] += g[(ch * oh + y) * ow + xx];
                            }
                        }
                    }
                    self.accum(a, &da);
                }
                Op::MinScalars(srcs) => {
                    let mut best = 0;
                    for (j, &s) in srcs.iter().enumerate() {
                        if self.nodes[s].value.data()[0] < self.nodes[srcs[best]].value.data()[0] {
                            best = j;
                        }
                    }
                    self.accum(srcs[best], &[g[0]]);
                }
                Op::LogSumExpScalars(srcs) => {
                    let lse = self.nodes[i].value.data()[0];
                    for &s in &srcs {
                        let w = (self.nodes[s].value.data()[0] - lse).exp();
                        self.accum(s, &[g[0] * w]);
                    }
                }
                Op::Slice0 { src, idx } => {
                    let block = g.len();
                    let mut da = vec![0.0; self.nodes[src].value.len()];
                    da[idx * block..(idx + 1) * block].copy_from_slice(&g);
                    self.accum(src, &da);
                }
            }
        }
        Ok(())
    }

    /// True when `v` was registered via [`Tape::param`].
    pub fn is_param(&self, v: Var) -> bool {
        self.nodes[v.0].param
    }
}
