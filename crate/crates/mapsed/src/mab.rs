//! Multi-axis Attention Block: attention over spatial positions and over
//! channels in parallel, fused by a convolutional bottleneck with a
//! residual connection. Shape-preserving for any `c x h x w` input.

use crate::error::Result;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{ConvParams, Tensor};

/// Row-stochastic attention matrix: `u x u` over flattened spatial
/// positions, or `c x c` over channels. Every row sums to 1.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub matrix: Tensor,
}

impl AttentionWeights {
    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        let (rows, cols) = (self.matrix.shape()[0], self.matrix.shape()[1]);
        let mut worst: f64 = 0.0;
        for r in 0..rows {
            let s: f64 = self.matrix.data()[r * cols..(r + 1) * cols].iter().sum();
            worst = worst.max((s - 1.0).abs());
        }
        worst
    }
}

/// Learnable weights of one MAB: four 1x1 projections and the three-layer
/// fusion bottleneck (1x1 -> 3x3 -> 1x1, input `2c` channels, output `c`).
#[derive(Debug, Clone, PartialEq)]
pub struct MabParams {
    pub phi_q: ConvParams,
    pub phi_k: ConvParams,
    pub phi_v: ConvParams,
    pub phi_c: ConvParams,
    pub fusion: [ConvParams; 3],
}

/// Default inner width of a fusion bottleneck: half the block channel
/// count rounded up, floored at 4 so tiny channel counts stay viable.
pub fn bottleneck_width(channels: usize) -> usize {
    channels.div_ceil(2).max(4)
}

impl MabParams {
    pub fn init(channels: usize, width: Option<usize>, rng: &mut impl rand::Rng) -> Self {
        let b = width.unwrap_or_else(|| bottleneck_width(channels));
        MabParams {
            phi_q: ConvParams::init_2d(channels, channels, 1, rng),
            phi_k: ConvParams::init_2d(channels, channels, 1, rng),
            phi_v: ConvParams::init_2d(channels, channels, 1, rng),
            phi_c: ConvParams::init_2d(channels, channels, 1, rng),
            fusion: [
                ConvParams::init_2d(b, 2 * channels, 1, rng),
                ConvParams::init_2d(b, b, 3, rng),
                ConvParams::init_2d(channels, b, 1, rng),
            ],
        }
    }

    /// All-zero fusion weights turn the block into the identity (pure
    /// residual); projections stay as they are.
    pub fn with_zero_fusion(mut self) -> Self {
        let b = self.fusion[0].out_channels();
        let c = self.phi_q.out_channels();
        self.fusion = [
            ConvParams::zeros_2d(b, 2 * c, 1),
            ConvParams::zeros_2d(b, b, 3),
            ConvParams::zeros_2d(c, b, 1),
        ];
        self
    }

    pub fn channels(&self) -> usize {
        self.phi_q.out_channels()
    }
}

/// Tape handles for one convolution's parameters.
#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub kernel: Var,
    pub bias: Var,
}

pub fn bind_conv(tape: &mut Tape, p: &ConvParams) -> ConvVars {
    ConvVars {
        kernel: tape.param(p.kernel.clone()),
        bias: tape.param(p.bias.clone()),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MabVars {
    pub phi_q: ConvVars,
    pub phi_k: ConvVars,
    pub phi_v: ConvVars,
    pub phi_c: ConvVars,
    pub fusion: [ConvVars; 3],
}

pub fn bind_mab(tape: &mut Tape, p: &MabParams) -> MabVars {
    MabVars {
        phi_q: bind_conv(tape, &p.phi_q),
        phi_k: bind_conv(tape, &p.phi_k),
        phi_v: bind_conv(tape, &p.phi_v),
        phi_c: bind_conv(tape, &p.phi_c),
        fusion: [
            bind_conv(tape, &p.fusion[0]),
            bind_conv(tape, &p.fusion[1]),
            bind_conv(tape, &p.fusion[2]),
        ],
    }
}

/// Attention over flattened spatial positions. Q, K, V are 1x1 convolutions
/// of Z; weights a[i][j] = softmax_j(q_i . k_j) over the u = h*w positions;
/// output column i is the a[i]-weighted sum of value columns. No 1/sqrt(d)
/// scaling.
pub fn spatial_attention_tape(tape: &mut Tape, z: Var, p: &MabVars) -> Result<(Var, Var)> {
    let shape = tape.value(z).shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let u = h * w;
    let q = tape.conv2d(z, p.phi_q.kernel, p.phi_q.bias)?;
    let k = tape.conv2d(z, p.phi_k.kernel, p.phi_k.bias)?;
    let v = tape.conv2d(z, p.phi_v.kernel, p.phi_v.bias)?;
    let qf = tape.reshape(q, &[c, u])?;
    let kf = tape.reshape(k, &[c, u])?;
    let vf = tape.reshape(v, &[c, u])?;
    let qt = tape.permute(qf, &[1, 0])?;
    let logits = tape.matmul(qt, kf)?;
    let a = tape.softmax_rows(logits)?;
    let at = tape.permute(a, &[1, 0])?;
    let zf = tape.matmul(vf, at)?;
    let zhat = tape.reshape(zf, &[c, h, w])?;
    Ok((zhat, a))
}

/// Attention over channels. Query, key and value share phi_c(Z); weights
/// compare channel rows of the flattened map; output is the weight matrix
/// times the flattened values.
pub fn channel_attention_tape(tape: &mut Tape, z: Var, p: &MabVars) -> Result<(Var, Var)> {
    let shape = tape.value(z).shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let u = h * w;
    let f = tape.conv2d(z, p.phi_c.kernel, p.phi_c.bias)?;
    let ff = tape.reshape(f, &[c, u])?;
    let ft = tape.permute(ff, &[1, 0])?;
    let logits = tape.matmul(ff, ft)?;
    let a = tape.softmax_rows(logits)?;
    let zf = tape.matmul(a, ff)?;
    let ztilde = tape.reshape(zf, &[c, h, w])?;
    Ok((ztilde, a))
}

/// Full block: Z' = fusion([spatial || channel]) + Z. The fusion bottleneck
/// applies a rectifier after its first and second convolutions, none after
/// the last, so zero fusion weights reduce the block to the identity.
pub fn mab_forward_tape(tape: &mut Tape, z: Var, p: &MabVars) -> Result<Var> {
    let (zhat, _) = spatial_attention_tape(tape, z, p)?;
    let (ztilde, _) = channel_attention_tape(tape, z, p)?;
    let cat = tape.concat(zhat, ztilde, 0)?;
    let b1 = tape.conv2d(cat, p.fusion[0].kernel, p.fusion[0].bias)?;
    let r1 = tape.relu(b1);
    let b2 = tape.conv2d(r1, p.fusion[1].kernel, p.fusion[1].bias)?;
    let r2 = tape.relu(b2);
    let b3 = tape.conv2d(r2, p.fusion[2].kernel, p.fusion[2].bias)?;
    tape.add(b3, z)
}

// ── Pure wrappers (throwaway tape) ──────────────────────────────────────

pub fn spatial_attention(z: &Tensor, p: &MabParams) -> Result<(Tensor, AttentionWeights)> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let pv = bind_mab(&mut tape, p);
    let (out, a) = spatial_attention_tape(&mut tape, zv, &pv)?;
    Ok((tape.value(out).clone(), AttentionWeights { matrix: tape.value(a).clone() }))
}

pub fn channel_attention(z: &Tensor, p: &MabParams) -> Result<(Tensor, AttentionWeights)> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let pv = bind_mab(&mut tape, p);
    let (out, a) = channel_attention_tape(&mut tape, zv, &pv)?;
    Ok((tape.value(out).clone(), AttentionWeights { matrix: tape.value(a).clone() }))
}

pub fn mab_forward(z: &Tensor, p: &MabParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let pv = bind_mab(&mut tape, p);
    let out = mab_forward_tape(&mut tape, zv, &pv)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv2d_same;
    use crate::testutil::{rand_tensor, rng};

    // Naive double-loop attention oracles, straight from the definitions.

    fn spatial_oracle(z: &Tensor, p: &MabParams) -> (Tensor, Tensor) {
        let (c, h, w) = (z.shape()[0], z.shape()[1], z.shape()[2]);
        let u = h * w;
        let q = conv2d_same(z, &p.phi_q).unwrap().reshape(&[c, u]).unwrap();
        let k = conv2d_same(z, &p.phi_k).unwrap().reshape(&[c, u]).unwrap();
        let v = conv2d_same(z, &p.phi_v).unwrap().reshape(&[c, u]).unwrap();
        let mut a = Tensor::zeros(&[u, u]);
        for i in 0..u {
            let logits: Vec<f64> = (0..u)
                .map(|j| (0..c).map(|ch| q.at(&[ch, i]) * k.at(&[ch, j])).sum())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            for j in 0..u {
                a.set(&[i, j], exps[j] / s);
            }
        }
        let mut out = Tensor::zeros(&[c, u]);
        for ch in 0..c {
            for i in 0..u {
                let val: f64 = (0..u).map(|j| a.at(&[i, j]) * v.at(&[ch, j])).sum();
                out.set(&[ch, i], val);
            }
        }
        (out.reshape(&[c, h, w]).unwrap(), a)
    }

    fn channel_oracle(z: &Tensor, p: &MabParams) -> (Tensor, Tensor) {
        let (c, h, w) = (z.shape()[0], z.shape()[1], z.shape()[2]);
        let u = h * w;
        let f = conv2d_same(z, &p.phi_c).unwrap().reshape(&[c, u]).unwrap();
        let mut a = Tensor::zeros(&[c, c]);
        for i in 0..c {
            let logits: Vec<f64> = (0..c)
                .map(|j| (0..u).map(|x| f.at(&[i, x]) * f.at(&[j, x])).sum())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            for j in 0..c {
                a.set(&[i, j], exps[j] / s);
            }
        }
        let mut out = Tensor::zeros(&[c, u]);
        for i in 0..c {
            for x in 0..u {
                let val: f64 = (0..c).map(|j| a.at(&[i, j]) * f.at(&[j, x])).sum();
                out.set(&[i, x], val);
            }
        }
        (out.reshape(&[c, h, w]).unwrap(), a)
    }

    fn mab_oracle(z: &Tensor, p: &MabParams) -> Tensor {
        let (zhat, _) = spatial_oracle(z, p);
        let (ztilde, _) = channel_oracle(z, p);
        let cat = crate::tensor::concat(&zhat, &ztilde, 0).unwrap();
        let b1 = conv2d_same(&cat, &p.fusion[0]).unwrap().map(|v| v.max(0.0));
        let b2 = conv2d_same(&b1, &p.fusion[1]).unwrap().map(|v| v.max(0.0));
        let b3 = conv2d_same(&b2, &p.fusion[2]).unwrap();
        let mut out = b3;
        for (o, zv) in out.data_mut().iter_mut().zip(z.data()) {
            *o += zv;
        }
        out
    }

    #[test]
    fn spatially_constant_input_gives_uniform_weights_and_identity_output() {
        let mut r = rng(31);
        let mut p = MabParams::init(2, None, &mut r);
        p.phi_v = ConvParams::identity_1x1(2);
        // Constant over (h, w), distinct per channel.
        let mut z = Tensor::zeros(&[2, 3, 3]);
        for y in 0..3 {
            for x in 0..3 {
                z.set(&[0, y, x], 1.25);
                z.set(&[1, y, x], -0.5);
            }
        }
        let (zhat, a) = spatial_attention(&z, &p).unwrap();
        assert!(a.max_row_sum_error() < 1e-12);
        for v in a.matrix.data() {
            assert!((v - 1.0 / 9.0).abs() < 1e-12);
        }
        assert!(zhat.max_abs_diff(&z) < 1e-12);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output_uniform_weights() {
        let mut r = rng(32);
        let p = MabParams::init(3, None, &mut r); // init biases are zero
        let z = Tensor::zeros(&[3, 2, 2]);
        let (zhat, a) = spatial_attention(&z, &p).unwrap();
        assert_eq!(zhat, Tensor::zeros(&[3, 2, 2]));
        for v in a.matrix.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn spatial_attention_matches_oracle() {
        let mut r = rng(33);
        for _ in 0..5 {
            let z = rand_tensor(&[2, 2, 2], &mut r);
            let p = MabParams::init(2, None, &mut r);
            let (zhat, a) = spatial_attention(&z, &p).unwrap();
            let (ozhat, oa) = spatial_oracle(&z, &p);
            assert!(zhat.max_abs_diff(&ozhat) < 1e-12);
            assert!(a.matrix.max_abs_diff(&oa) < 1e-12);
        }
    }

    #[test]
    fn single_channel_attention_is_trivial() {
        let mut r = rng(34);
        let z = rand_tensor(&[1, 3, 2], &mut r);
        let p = MabParams::init(1, None, &mut r);
        let (ztilde, a) = channel_attention(&z, &p).unwrap();
        assert_eq!(a.matrix.data(), &[1.0]);
        let fc = conv2d_same(&z, &p.phi_c).unwrap();
        assert!(ztilde.max_abs_diff(&fc) < 1e-12);
    }

    #[test]
    fn identical_channels_give_uniform_channel_weights() {
        let mut r = rng(35);
        let plane = rand_tensor(&[1, 2, 2], &mut r);
        let mut z = Tensor::zeros(&[3, 2, 2]);
        for c in 0..3 {
            for y in 0..2 {
                for x in 0..2 {
                    z.set(&[c, y, x], plane.at(&[0, y, x]));
                }
            }
        }
        let mut p = MabParams::init(3, None, &mut r);
        p.phi_c = ConvParams::identity_1x1(3);
        let (ztilde, a) = channel_attention(&z, &p).unwrap();
        for v in a.matrix.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!(ztilde.max_abs_diff(&z) < 1e-12);
    }

    #[test]
    fn channel_attention_matches_oracle() {
        let mut r = rng(36);
        for _ in 0..5 {
            let z = rand_tensor(&[3, 2, 2], &mut r);
            let p = MabParams::init(3, None, &mut r);
            let (ztilde, a) = channel_attention(&z, &p).unwrap();
            let (oz, oa) = channel_oracle(&z, &p);
            assert!(ztilde.max_abs_diff(&oz) < 1e-12);
            assert!(a.matrix.max_abs_diff(&oa) < 1e-12);
        }
    }

    #[test]
    fn zero_fusion_weights_make_block_identity() {
        let mut r = rng(37);
        let z = rand_tensor(&[3, 4, 4], &mut r);
        let p = MabParams::init(3, None, &mut r).with_zero_fusion();
        let out = mab_forward(&z, &p).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn forward_preserves_shape() {
        let mut r = rng(38);
        for &(c, h, w) in &[(1, 1, 1), (2, 3, 5), (4, 2, 2), (1, 6, 3)] {
            let z = rand_tensor(&[c, h, w], &mut r);
            let p = MabParams::init(c, None, &mut r);
            let out = mab_forward(&z, &p).unwrap();
            assert_eq!(out.shape(), z.shape());
            assert!(out.all_finite());
        }
    }

    #[test]
    fn forward_matches_composed_oracle() {
        let mut r = rng(39);
        for _ in 0..3 {
            let z = rand_tensor(&[2, 3, 3], &mut r);
            let p = MabParams::init(2, None, &mut r);
            let out = mab_forward(&z, &p).unwrap();
            let oracle = mab_oracle(&z, &p);
            assert!(out.max_abs_diff(&oracle) < 1e-12);
        }
    }

    #[test]
    fn forward_gradients_match_finite_differences() {
        let mut r = rng(40);
        let z = rand_tensor(&[3, 3, 3], &mut r);
        let p = MabParams::init(3, None, &mut r);

        let eval = |z: &Tensor, p: &MabParams| -> f64 {
            let out = mab_forward(z, p).unwrap();
            out.data().iter().map(|v| v * v).sum::<f64>() * 0.5
        };

        // Tape gradients of 0.5 * sum(out^2) w.r.t. z and all params.
        let mut tape = Tape::new();
        let zv = tape.param(z.clone());
        let pv = bind_mab(&mut tape, &p);
        let out = mab_forward_tape(&mut tape, zv, &pv).unwrap();
        let sq = tape.mul(out, out).unwrap();
        let s = tape.sum_all(sq);
        let root = tape.scale(s, 0.5);
        tape.backward(root).unwrap();

        let step = 1e-5;
        let check = |ad: f64, fd: f64, what: &str| {
            let denom = ad.abs().max(fd.abs());
            if denom > 1e-6 {
                assert!((ad - fd).abs() / denom <= 1e-4, "{what}: ad={ad} fd={fd}");
            } else {
                assert!((ad - fd).abs() < 1e-6, "{what}: ad={ad} fd={fd}");
            }
        };

        let gz = tape.param_grad(zv);
        for e in 0..z.len() {
            let mut zp = z.clone();
            zp.data_mut()[e] += step;
            let mut zm = z.clone();
            zm.data_mut()[e] -= step;
            let fd = (eval(&zp, &p) - eval(&zm, &p)) / (2.0 * step);
            check(gz.data()[e], fd, "z");
        }

        // Spot-check one projection kernel.
        let gq = tape.param_grad(pv.phi_q.kernel);
        for e in 0..p.phi_q.kernel.len() {
            let mut pp = p.clone();
            pp.phi_q.kernel.data_mut()[e] += step;
            let mut pm = p.clone();
            pm.phi_q.kernel.data_mut()[e] -= step;
            let fd = (eval(&z, &pp) - eval(&z, &pm)) / (2.0 * step);
            check(gq.data()[e], fd, "phi_q.kernel");
        }
    }

    #[test]
    fn attention_rows_sum_to_one_on_random_inputs() {
        let mut r = rng(41);
        for _ in 0..50 {
            let z = rand_tensor(&[2, 3, 2], &mut r);
            let p = MabParams::init(2, None, &mut r);
            let (_, a) = spatial_attention(&z, &p).unwrap();
            let (_, ac) = channel_attention(&z, &p).unwrap();
            assert!(a.max_row_sum_error() < 1e-9);
            assert!(ac.max_row_sum_error() < 1e-9);
        }
    }
}
