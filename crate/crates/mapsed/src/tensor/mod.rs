//! Dense ND tensors (64-bit floats, row-major) and the numeric operations
//! the model needs. Reverse-mode differentiation lives in [`tape`].

pub mod tape;

use crate::error::{Error, Result};

/// A dense n-dimensional array of `f64`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    /// A scalar is represented as a one-element rank-1 tensor.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::dim("Tensor::from_vec", "data length", expected, data.len()));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &dim)) in idx.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of range on axis {i} (dim {dim})");
            let _ = i;
            off = off * dim + ix;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Frobenius norm: sqrt of the sum of squared entries.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat index of the largest entry (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// Same data, new shape. Element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::dim("reshape", "element count", self.data.len(), expected));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Learnable weights of a convolution: `kernel` is
/// `out_ch x in_ch x k x k` (2D) or `out_ch x in_ch x k x k x k` (3D),
/// `bias` is `out_ch`. Spatial size must be 1 or 3 so that zero
/// same-padding preserves spatial extent.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    pub fn new(kernel: Tensor, bias: Tensor) -> Result<Self> {
        let nd = kernel.ndim();
        if nd != 4 && nd != 5 {
            return Err(Error::dim("ConvParams", "kernel rank", 4, nd));
        }
        let k = kernel.shape()[2];
        if k != 1 && k != 3 {
            return Err(Error::dim("ConvParams", "kernel size", 3, k));
        }
        for &d in &kernel.shape()[2..] {
            if d != k {
                return Err(Error::dim("ConvParams", "kernel size", k, d));
            }
        }
        if bias.ndim() != 1 || bias.shape()[0] != kernel.shape()[0] {
            return Err(Error::dim("ConvParams", "bias length", kernel.shape()[0], bias.len()));
        }
        Ok(ConvParams { kernel, bias })
    }

    /// 2D kernel, entries uniform in +-1/sqrt(fan_in), zero bias.
    pub fn init_2d(out_ch: usize, in_ch: usize, k: usize, rng: &mut impl rand::Rng) -> Self {
        use rand::RngExt;
        let bound = 1.0 / ((in_ch * k * k) as f64).sqrt();
        let n = out_ch * in_ch * k * k;
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        ConvParams {
            kernel: Tensor::from_vec(&[out_ch, in_ch, k, k], data).unwrap(),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    /// 3D kernel, entries uniform in +-1/sqrt(fan_in), zero bias.
    pub fn init_3d(out_ch: usize, in_ch: usize, k: usize, rng: &mut impl rand::Rng) -> Self {
        use rand::RngExt;
        let bound = 1.0 / ((in_ch * k * k * k) as f64).sqrt();
        let n = out_ch * in_ch * k * k * k;
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        ConvParams {
            kernel: Tensor::from_vec(&[out_ch, in_ch, k, k, k], data).unwrap(),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    /// 1x1 kernel that passes channels through unchanged (out_ch == in_ch).
    pub fn identity_1x1(ch: usize) -> Self {
        let mut kernel = Tensor::zeros(&[ch, ch, 1, 1]);
        for c in 0..ch {
            kernel.set(&[c, c, 0, 0], 1.0);
        }
        ConvParams { kernel, bias: Tensor::zeros(&[ch]) }
    }

    pub fn zeros_2d(out_ch: usize, in_ch: usize, k: usize) -> Self {
        ConvParams {
            kernel: Tensor::zeros(&[out_ch, in_ch, k, k]),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn zeros_3d(out_ch: usize, in_ch: usize, k: usize) -> Self {
        ConvParams {
            kernel: Tensor::zeros(&[out_ch, in_ch, k, k, k]),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[2]
    }
}

fn check_conv2d(input: &Tensor, params: &ConvParams) -> Result<()> {
    if input.ndim() != 3 {
        return Err(Error::dim("conv2d_same", "input rank", 3, input.ndim()));
    }
    if params.kernel.ndim() != 4 {
        return Err(Error::dim("conv2d_same", "kernel rank", 4, params.kernel.ndim()));
    }
    if params.in_channels() != input.shape()[0] {
        return Err(Error::dim("conv2d_same", "in_channels", params.in_channels(), input.shape()[0]));
    }
    Ok(())
}

fn check_conv3d(input: &Tensor, params: &ConvParams) -> Result<()> {
    if input.ndim() != 4 {
        return Err(Error::dim("conv3d_same", "input rank", 4, input.ndim()));
    }
    if params.kernel.ndim() != 5 {
        return Err(Error::dim("conv3d_same", "kernel rank", 5, params.kernel.ndim()));
    }
    if params.in_channels() != input.shape()[0] {
        return Err(Error::dim("conv3d_same", "in_channels", params.in_channels(), input.shape()[0]));
    }
    Ok(())
}

/// 2D convolution with zero same-padding. Input `c_in x h x w`,
/// output `c_out x h x w`.
pub fn conv2d_same(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    check_conv2d(input, params)?;
    Ok(conv2d_fwd(input, &params.kernel, &params.bias))
}

/// 3D convolution with zero same-padding. Input `c_in x d x h x w`,
/// output `c_out x d x h x w`.
pub fn conv3d_same(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    check_conv3d(input, params)?;
    Ok(conv3d_fwd(input, &params.kernel, &params.bias))
}

// Raw kernels, shared between the public ops and the tape. Shapes are
// assumed validated.

pub(crate) fn conv2d_fwd(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, k) = (kernel.shape()[0], kernel.shape()[2]);
    let pad = k / 2;
    let x = input.data();
    let ker = kernel.data();
    let mut out = vec![0.0; co * h * w];
    for o in 0..co {
        let b = bias.data()[o];
        for v in &mut out[o * h * w..(o + 1) * h * w] {
            *v = b;
        }
        for i in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let wgt = ker[((o * ci + i) * k + ky) * k + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let dy = ky as isize - pad as isize;
                    let dx = kx as isize - pad as isize;
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = ((h as isize - dy).min(h as isize)) as usize;
                    for y in y_lo..y_hi {
                        let sy = (y as isize + dy) as usize;
                        let x_lo = (-dx).max(0) as usize;
                        let x_hi = ((w as isize - dx).min(w as isize)) as usize;
                        let orow = (o * h + y) * w;
                        let irow = (i * h + sy) * w;
                        for xx in x_lo..x_hi {
                            let sx = (xx as isize + dx) as usize;
                            out[orow + xx] += wgt * x[irow + sx];
                        }
                    }
                }
            }
        }
    }
    Tensor { shape: vec![co, h, w], data: out }
}

pub(crate) fn conv2d_bwd(
    d_out: &Tensor,
    input: &Tensor,
    kernel: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, k) = (kernel.shape()[0], kernel.shape()[2]);
    let pad = k as isize / 2;
    let mut d_in = vec![0.0; ci * h * w];
    let mut d_ker = vec![0.0; co * ci * k * k];
    let mut d_bias = vec![0.0; co];
    let x = input.data();
    let ker = kernel.data();
    let g = d_out.data();
    for o in 0..co {
        for y in 0..h {
            for xx in 0..w {
                let gv = g[(o * h + y) * w + xx];
                if gv == 0.0 {
                    continue;
                }
                d_bias[o] += gv;
                for i in 0..ci {
                    for ky in 0..k {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let sx = xx as isize + kx as isize - pad;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let iidx = (i * h + sy as usize) * w + sx as usize;
                            let kidx = ((o * ci + i) * k + ky) * k + kx;
                            d_in[iidx] += gv * ker[kidx];
                            d_ker[kidx] += gv * x[iidx];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor { shape: input.shape.clone(), data: d_in },
        Tensor { shape: kernel.shape.clone(), data: d_ker },
        Tensor { shape: vec![co], data: d_bias },
    )
}

pub(crate) fn conv3d_fwd(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
    let (ci, d, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let (co, k) = (kernel.shape()[0], kernel.shape()[2]);
    let pad = k as isize / 2;
    let x = input.data();
    let ker = kernel.data();
    let mut out = vec![0.0; co * d * h * w];
    for o in 0..co {
        let b = bias.data()[o];
        for v in &mut out[o * d * h * w..(o + 1) * d * h * w] {
            *v = b;
        }
        for i in 0..ci {
            for kd in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let wgt = ker[(((o * ci + i) * k + kd) * k + ky) * k + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        let dz = kd as isize - pad;
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        for z in 0..d {
                            let sz = z as isize + dz;
                            if sz < 0 || sz >= d as isize {
                                continue;
                            }
                            for y in 0..h {
                                let sy = y as isize + dy;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                let orow = ((o * d + z) * h + y) * w;
                                let irow = ((i * d + sz as usize) * h + sy as usize) * w;
                                for xx in 0..w {
                                    let sx = xx as isize + dx;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    out[orow + xx] += wgt * x[irow + sx as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor { shape: vec![co, d, h, w], data: out }
}

pub(crate) fn conv3d_bwd(
    d_out: &Tensor,
    input: &Tensor,
    kernel: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (ci, d, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let (co, k) = (kernel.shape()[0], kernel.shape()[2]);
    let pad = k as isize / 2;
    let mut d_in = vec![0.0; ci * d * h * w];
    let mut d_ker = vec![0.0; co * ci * k * k * k];
    let mut d_bias = vec![0.0; co];
    let x = input.data();
    let ker = kernel.data();
    let g = d_out.data();
    for o in 0..co {
        for z in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    let gv = g[((o * d + z) * h + y) * w + xx];
                    if gv == 0.0 {
                        continue;
                    }
                    d_bias[o] += gv;
                    for i in 0..ci {
                        for kd in 0..k {
                            let sz = z as isize + kd as isize - pad;
                            if sz < 0 || sz >= d as isize {
                                continue;
                            }
                            for ky in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let sx = xx as isize + kx as isize - pad;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    let iidx =
                                        ((i * d + sz as usize) * h + sy as usize) * w + sx as usize;
                                    let kidx = (((o * ci + i) * k + kd) * k + ky) * k + kx;
                                    d_in[iidx] += gv * ker[kidx];
                                    d_ker[kidx] += gv * x[iidx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor { shape: input.shape.clone(), data: d_in },
        Tensor { shape: kernel.shape.clone(), data: d_ker },
        Tensor { shape: vec![co], data: d_bias },
    )
}

/// Numerically stable softmax along `axis`: slices along that axis are
/// shifted by their max, exponentiated, and normalized to sum to 1.
pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= input.ndim() {
        return Err(Error::dim("softmax", "axis", input.ndim().saturating_sub(1), axis));
    }
    let shape = input.shape();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = input.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                max = max.max(out[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..n {
                let e = (out[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..n {
                out[base + j * inner] /= sum;
            }
        }
    }
    Ok(Tensor { shape: shape.to_vec(), data: out })
}

/// Standard matrix product of a `p x q` and a `q x r` tensor.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 {
        return Err(Error::dim("matmul", "lhs rank", 2, a.ndim()));
    }
    if b.ndim() != 2 {
        return Err(Error::dim("matmul", "rhs rank", 2, b.ndim()));
    }
    let (p, q) = (a.shape()[0], a.shape()[1]);
    if b.shape()[0] != q {
        return Err(Error::dim("matmul", "inner", q, b.shape()[0]));
    }
    let r = b.shape()[1];
    Ok(Tensor { shape: vec![p, r], data: matmul_raw(a.data(), b.data(), p, q, r) })
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        for kk in 0..q {
            let av = a[i * q + kk];
            if av == 0.0 {
                continue;
            }
            let brow = kk * r;
            let orow = i * r;
            for j in 0..r {
                out[orow + j] += av * b[brow + j];
            }
        }
    }
    out
}

/// Rotate the last two axes counter-clockwise by `quarter_turns` * 90 degrees.
/// Odd turn counts require square spatial dims. Negative counts rotate
/// clockwise.
pub fn rotate90(input: &Tensor, quarter_turns: i64) -> Result<Tensor> {
    if input.ndim() < 2 {
        return Err(Error::dim("rotate90", "rank", 2, input.ndim()));
    }
    let turns = quarter_turns.rem_euclid(4) as usize;
    let n = input.ndim();
    let (h, w) = (input.shape()[n - 2], input.shape()[n - 1]);
    if turns % 2 == 1 && h != w {
        return Err(Error::dim("rotate90", "width (square grid required)", h, w));
    }
    if turns == 0 {
        return Ok(input.clone());
    }
    let lead: usize = input.shape()[..n - 2].iter().product();
    let mut out = vec![0.0; input.len()];
    let src = input.data();
    for l in 0..lead {
        let base = l * h * w;
        for i in 0..h {
            for j in 0..w {
                // Counter-clockwise convention; 180 degrees works for any
                // h x w, odd turn counts are square-only (checked above).
                let s = match turns {
                    1 => base + j * w + (w - 1 - i),
                    2 => base + (h - 1 - i) * w + (w - 1 - j),
                    _ => base + (h - 1 - j) * w + i,
                };
                out[base + i * w + j] = src[s];
            }
        }
    }
    Ok(Tensor { shape: input.shape.clone(), data: out })
}

/// Mirror the last axis: out[..., i, j] = in[..., i, w-1-j].
pub fn flip_horizontal(input: &Tensor) -> Tensor {
    let n = input.ndim();
    if n == 0 {
        return input.clone();
    }
    let w = input.shape()[n - 1];
    let lead: usize = input.shape()[..n - 1].iter().product();
    let mut out = vec![0.0; input.len()];
    for l in 0..lead {
        for j in 0..w {
            out[l * w + j] = input.data[l * w + (w - 1 - j)];
        }
    }
    Tensor { shape: input.shape.clone(), data: out }
}

/// Reorder axes. `perm[i]` names the source axis that becomes axis `i`.
pub fn permute(input: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let nd = input.ndim();
    if perm.len() != nd {
        return Err(Error::dim("permute", "perm length", nd, perm.len()));
    }
    let mut seen = vec![false; nd];
    for &p in perm {
        if p >= nd || seen[p] {
            return Err(Error::Contract(format!("permute: invalid permutation {perm:?}")));
        }
        seen[p] = true;
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| input.shape[p]).collect();
    let mut strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * input.shape[i + 1];
    }
    let mut out = vec![0.0; input.len()];
    let mut idx = vec![0usize; nd];
    for (o, slot) in out.iter_mut().enumerate() {
        // Decompose o into the output multi-index, map back to source.
        let mut rem = o;
        for i in (0..nd).rev() {
            idx[i] = rem % out_shape[i];
            rem /= out_shape[i];
        }
        let mut src = 0;
        for i in 0..nd {
            src += idx[i] * strides[perm[i]];
        }
        *slot = input.data[src];
    }
    Ok(Tensor { shape: out_shape, data: out })
}

/// Concatenate two tensors along `axis`; all other dims must agree.
pub fn concat(a: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor> {
    if a.ndim() != b.ndim() {
        return Err(Error::dim("concat", "rank", a.ndim(), b.ndim()));
    }
    if axis >= a.ndim() {
        return Err(Error::dim("concat", "axis", a.ndim().saturating_sub(1), axis));
    }
    for (i, (&da, &db)) in a.shape.iter().zip(&b.shape).enumerate() {
        if i != axis && da != db {
            return Err(Error::dim("concat", "off-axis dim", da, db));
        }
    }
    let mut shape = a.shape.clone();
    shape[axis] += b.shape[axis];
    let outer: usize = a.shape[..axis].iter().product();
    let inner: usize = a.shape[axis + 1..].iter().product();
    let a_blk = a.shape[axis] * inner;
    let b_blk = b.shape[axis] * inner;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for o in 0..outer {
        data.extend_from_slice(&a.data[o * a_blk..(o + 1) * a_blk]);
        data.extend_from_slice(&b.data[o * b_blk..(o + 1) * b_blk]);
    }
    Ok(Tensor { shape, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        let d = a.max_abs_diff(b);
        assert!(d <= tol, "max abs diff {d} > {tol}");
    }

    // Hand-unrolled direct convolution, the oracle for conv{2,3}d_same.
    fn conv2d_oracle(x: &Tensor, p: &ConvParams) -> Tensor {
        let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, k) = (p.out_channels(), p.kernel_size());
        let pad = k as isize / 2;
        let mut out = Tensor::zeros(&[co, h, w]);
        for o in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = p.bias.at(&[o]);
                    for i in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    acc += p.kernel.at(&[o, i, ky, kx])
                                        * x.at(&[i, sy as usize, sx as usize]);
                                }
                            }
                        }
                    }
                    out.set(&[o, y, xx], acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_identity_1x1() {
        let x = Tensor::from_vec(&[1, 2, 3], vec![1.0, -2.0, 3.5, 0.0, 7.0, -1.0]).unwrap();
        let p = ConvParams::new(
            Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap(),
            Tensor::zeros(&[1]),
        )
        .unwrap();
        assert_eq!(conv2d_same(&x, &p).unwrap(), x);
    }

    #[test]
    fn conv2d_zero_input_gives_bias() {
        let x = Tensor::zeros(&[2, 3, 3]);
        let p = ConvParams::new(
            Tensor::from_vec(&[2, 2, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            Tensor::from_vec(&[2], vec![0.5, -1.5]).unwrap(),
        )
        .unwrap();
        let out = conv2d_same(&x, &p).unwrap();
        for y in 0..3 {
            for xx in 0..3 {
                assert_eq!(out.at(&[0, y, xx]), 0.5);
                assert_eq!(out.at(&[1, y, xx]), -1.5);
            }
        }
    }

    #[test]
    fn conv2d_ones_kernel_on_center_one_hot() {
        let mut x = Tensor::zeros(&[1, 3, 3]);
        x.set(&[0, 1, 1], 1.0);
        let p = ConvParams::new(Tensor::filled(&[1, 1, 3, 3], 1.0), Tensor::zeros(&[1])).unwrap();
        let out = conv2d_same(&x, &p).unwrap();
        assert_close(&out, &Tensor::filled(&[1, 3, 3], 1.0), 0.0);
        assert_close(&out, &conv2d_oracle(&x, &p), 0.0);
    }

    #[test]
    fn conv2d_matches_oracle_on_random_input() {
        let mut rng = crate::testutil::rng(7);
        let x = crate::testutil::rand_tensor(&[3, 4, 5], &mut rng);
        let p = ConvParams::new(
            crate::testutil::rand_tensor(&[2, 3, 3, 3], &mut rng),
            crate::testutil::rand_tensor(&[2], &mut rng),
        )
        .unwrap();
        assert_close(&conv2d_same(&x, &p).unwrap(), &conv2d_oracle(&x, &p), 1e-12);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[2, 3, 3]);
        let p = ConvParams::new(Tensor::zeros(&[1, 3, 1, 1]), Tensor::zeros(&[1])).unwrap();
        match conv2d_same(&x, &p) {
            Err(Error::Dim { axis, .. }) => assert_eq!(axis, "in_channels"),
            other => panic!("expected Dim error, got {other:?}"),
        }
    }

    #[test]
    fn conv3d_identity_and_zero() {
        let x = Tensor::from_vec(&[1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let p = ConvParams::new(
            Tensor::from_vec(&[1, 1, 1, 1, 1], vec![1.0]).unwrap(),
            Tensor::zeros(&[1]),
        )
        .unwrap();
        assert_eq!(conv3d_same(&x, &p).unwrap(), x);

        let z = Tensor::zeros(&[1, 2, 2, 2]);
        let pz = ConvParams::new(Tensor::zeros(&[1, 1, 3, 3, 3]), Tensor::zeros(&[1])).unwrap();
        assert_eq!(conv3d_same(&z, &pz).unwrap(), z);
    }

    #[test]
    fn conv3d_ones_kernel_on_center_one_hot() {
        let mut x = Tensor::zeros(&[1, 3, 3, 3]);
        x.set(&[0, 1, 1, 1], 1.0);
        let p =
            ConvParams::new(Tensor::filled(&[1, 1, 3, 3, 3], 1.0), Tensor::zeros(&[1])).unwrap();
        let out = conv3d_same(&x, &p).unwrap();
        assert_close(&out, &Tensor::filled(&[1, 3, 3, 3], 1.0), 0.0);
    }

    #[test]
    fn conv_linearity_with_zero_bias() {
        let mut rng = crate::testutil::rng(11);
        let x = crate::testutil::rand_tensor(&[2, 4, 4], &mut rng);
        let y = crate::testutil::rand_tensor(&[2, 4, 4], &mut rng);
        let p = ConvParams::new(
            crate::testutil::rand_tensor(&[3, 2, 3, 3], &mut rng),
            Tensor::zeros(&[3]),
        )
        .unwrap();
        let (a, b) = (2.5, -0.75);
        let mut axby = Tensor::zeros(&[2, 4, 4]);
        for i in 0..x.len() {
            axby.data_mut()[i] = a * x.data()[i] + b * y.data()[i];
        }
        let lhs = conv2d_same(&axby, &p).unwrap();
        let cx = conv2d_same(&x, &p).unwrap();
        let cy = conv2d_same(&y, &p).unwrap();
        let mut rhs = Tensor::zeros(&[3, 4, 4]);
        for i in 0..rhs.len() {
            rhs.data_mut()[i] = a * cx.data()[i] + b * cy.data()[i];
        }
        assert_close(&lhs, &rhs, 1e-10);
    }

    #[test]
    fn softmax_symmetry_and_forced_values() {
        let t = softmax(&Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap(), 0).unwrap();
        assert_close(&t, &Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap(), 1e-15);
        let t = softmax(&Tensor::from_vec(&[2], vec![0.0, 3.0f64.ln()]).unwrap(), 0).unwrap();
        assert_close(&t, &Tensor::from_vec(&[2], vec![0.25, 0.75]).unwrap(), 1e-12);
    }

    #[test]
    fn softmax_matches_naive_oracle() {
        let mut rng = crate::testutil::rng(3);
        let x = crate::testutil::rand_tensor(&[5], &mut rng);
        let out = softmax(&x, 0).unwrap();
        let exps: Vec<f64> = x.data().iter().map(|v| v.exp()).collect();
        let s: f64 = exps.iter().sum();
        for (o, e) in out.data().iter().zip(&exps) {
            assert!((o - e / s).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance_and_row_sums() {
        let mut rng = crate::testutil::rng(5);
        let x = crate::testutil::rand_tensor(&[3, 4, 2], &mut rng);
        for axis in 0..3 {
            let s = softmax(&x, axis).unwrap();
            let shifted = softmax(&x.map(|v| v + 17.25), axis).unwrap();
            assert_close(&s, &shifted, 1e-10);
            // Slices along `axis` sum to 1.
            let n = x.shape()[axis];
            let inner: usize = x.shape()[axis + 1..].iter().product();
            let outer: usize = x.shape()[..axis].iter().product();
            for o in 0..outer {
                for i in 0..inner {
                    let total: f64 =
                        (0..n).map(|j| s.data()[o * n * inner + j * inner + i]).sum();
                    assert!((total - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn matmul_identity_zero_and_2x2() {
        let b = Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let id = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&id, &b).unwrap(), b);
        assert_eq!(matmul(&Tensor::zeros(&[2, 2]), &b).unwrap(), Tensor::zeros(&[2, 2]));
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &id).unwrap(), a);
        assert!(matches!(
            matmul(&a, &Tensor::zeros(&[3, 2])),
            Err(Error::Dim { axis: "inner", .. })
        ));
    }

    #[test]
    fn rotate90_ccw_convention() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = rotate90(&x, 1).unwrap();
        assert_eq!(r.data(), &[2.0, 4.0, 1.0, 3.0]);
        assert_eq!(rotate90(&x, 0).unwrap(), x);
        assert_eq!(rotate90(&x, 4).unwrap(), x);
        assert_eq!(rotate90(&rotate90(&x, 3).unwrap(), 1).unwrap(), x);
        assert_eq!(rotate90(&x, -1).unwrap(), rotate90(&x, 3).unwrap());
    }

    #[test]
    fn rotate90_rejects_non_square_odd_turns() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(rotate90(&x, 1).is_err());
        assert!(rotate90(&x, 2).is_ok());
    }

    #[test]
    fn flip_horizontal_cases() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(flip_horizontal(&x).data(), &[2.0, 1.0]);
        let sym = Tensor::from_vec(&[1, 3], vec![4.0, 9.0, 4.0]).unwrap();
        assert_eq!(flip_horizontal(&sym), sym);
    }

    #[test]
    fn permute_roundtrip() {
        let mut rng = crate::testutil::rng(13);
        let x = crate::testutil::rand_tensor(&[2, 3, 4], &mut rng);
        let p = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[3, 1, 2]), x.at(&[1, 2, 3]));
        let back = permute(&p, &[1, 2, 0]).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn concat_along_each_axis() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[1, 2], vec![5.0, 6.0]).unwrap();
        let c = concat(&a, &b, 0).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let d = concat(&a, &a, 1).unwrap();
        assert_eq!(d.shape(), &[2, 4]);
        assert_eq!(d.data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
    }
}
