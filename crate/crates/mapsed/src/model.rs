//! The full forecaster: encoder (depth/breadth concatenations + MAB +
//! merge, stacked), decoder (two 3D bottlenecks + consecutive MAB passes),
//! and the per-frame dimension adapter (identity or a pre-trained VAE).
//!
//! Axis conventions, fixed once and used everywhere:
//! - Depth concatenation `f_d` stacks time into the channel axis,
//!   frame-major: channel index = t*c + k. In row-major storage this is a
//!   pure reshape of `m x c x h x w` into `(c*m) x h x w`.
//! - Breadth concatenation `f_s` stacks time along the height axis: row
//!   block t occupies rows [t*h, (t+1)*h) of a `c x (m*h) x w` tensor.
//! - Encoder 3D bottlenecks project the category axis (2c -> c for the
//!   merge, c -> c for the residual); decoder 3D bottlenecks project the
//!   time axis (m -> m, then m -> n).

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{self, Container};
use crate::mab::{
    bind_conv, bind_mab, bottleneck_width, mab_forward_tape, ConvVars, MabParams, MabVars,
};
use crate::opt::{apply_update, OptState, Optimizer};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{ConvParams, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MAPSEDC1";

/// Time/category arity of the core model (spatial extent is taken from the
/// input at forward time).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub m: usize,
    pub n: usize,
    pub c: usize,
}

/// Three-layer 3D bottleneck: 1x1x1 -> 3x3x3 -> 1x1x1 over a
/// channels-first `ch x d x h x w` tensor, rectifier after the first two.
#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck3d {
    pub convs: [ConvParams; 3],
}

impl Bottleneck3d {
    pub fn init(
        in_ch: usize,
        out_ch: usize,
        width: Option<usize>,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let b = width.unwrap_or_else(|| bottleneck_width(out_ch));
        Bottleneck3d {
            convs: [
                ConvParams::init_3d(b, in_ch, 1, rng),
                ConvParams::init_3d(b, b, 3, rng),
                ConvParams::init_3d(out_ch, b, 1, rng),
            ],
        }
    }

    pub fn zeros(in_ch: usize, out_ch: usize, width: Option<usize>) -> Self {
        let b = width.unwrap_or_else(|| bottleneck_width(out_ch));
        Bottleneck3d {
            convs: [
                ConvParams::zeros_3d(b, in_ch, 1),
                ConvParams::zeros_3d(b, b, 3),
                ConvParams::zeros_3d(out_ch, b, 1),
            ],
        }
    }

    /// Weights that pass the first `out_ch` input channels through
    /// unchanged (for nonnegative inputs, given the inner rectifiers).
    pub fn channel_identity(in_ch: usize, out_ch: usize) -> Self {
        let b = bottleneck_width(out_ch).max(out_ch);
        let mut c1 = ConvParams::zeros_3d(b, in_ch, 1);
        for ch in 0..out_ch.min(in_ch) {
            c1.kernel.set(&[ch, ch, 0, 0, 0], 1.0);
        }
        let mut c2 = ConvParams::zeros_3d(b, b, 3);
        for ch in 0..b {
            c2.kernel.set(&[ch, ch, 1, 1, 1], 1.0);
        }
        let mut c3 = ConvParams::zeros_3d(out_ch, b, 1);
        for ch in 0..out_ch {
            c3.kernel.set(&[ch, ch, 0, 0, 0], 1.0);
        }
        Bottleneck3d { convs: [c1, c2, c3] }
    }
}

/// One encoder layer: a MAB per observation angle plus the two 3D
/// bottlenecks that merge them back into the input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub dynamics: MabParams,
    pub semantics: MabParams,
    pub merge: Bottleneck3d,
    pub residual: Bottleneck3d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub bn1: Bottleneck3d,
    pub bn2: Bottleneck3d,
    pub dynamics: MabParams,
    pub semantics: MabParams,
}

/// Per-frame VAE: 3x3 encoder conv, 2x2 mean pooling, 1x1 heads for the
/// latent mean / log-variance, and the mirrored decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams {
    pub enc1: ConvParams,
    pub mu: ConvParams,
    pub logvar: ConvParams,
    pub dec1: ConvParams,
    pub dec2: ConvParams,
}

impl VaeParams {
    pub fn init(c: usize, hidden: usize, rng: &mut impl rand::Rng) -> Self {
        VaeParams {
            enc1: ConvParams::init_2d(hidden, c, 3, rng),
            mu: ConvParams::init_2d(c, hidden, 1, rng),
            logvar: ConvParams::init_2d(c, hidden, 1, rng),
            dec1: ConvParams::init_2d(hidden, c, 1, rng),
            dec2: ConvParams::init_2d(c, hidden, 3, rng),
        }
    }
}

/// Dimension adapter around the core model. The VAE variant holds frozen,
/// pre-trained weights; it halves each spatial side and keeps the channel
/// count.
#[derive(Debug, Clone, PartialEq)]
pub enum AdapterParams {
    Identity,
    Vae(VaeParams),
}

impl AdapterParams {
    pub fn mode_name(&self) -> &'static str {
        match self {
            AdapterParams::Identity => "identity",
            AdapterParams::Vae(_) => "vae",
        }
    }
}

/// All learnable state of the forecaster.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub shape: ModelShape,
    pub layers: Vec<EncoderLayerParams>,
    pub decoder: DecoderParams,
    pub adapter: AdapterParams,
}

impl ModelParams {
    /// Fresh parameters: `enc_layers` stacked encoder layers (the model
    /// uses two), kernels uniform in +-1/sqrt(fan_in), zero biases,
    /// identity adapter. Attach a pre-trained VAE with
    /// [`ModelParams::with_vae`].
    pub fn init(
        shape: ModelShape,
        enc_layers: usize,
        width: Option<usize>,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let (m, n, c) = (shape.m, shape.n, shape.c);
        let layers = (0..enc_layers)
            .map(|_| EncoderLayerParams {
                dynamics: MabParams::init(c * m, width, rng),
                semantics: MabParams::init(c, width, rng),
                merge: Bottleneck3d::init(2 * c, c, width, rng),
                residual: Bottleneck3d::init(c, c, width, rng),
            })
            .collect();
        let decoder = DecoderParams {
            bn1: Bottleneck3d::init(m, m, width, rng),
            bn2: Bottleneck3d::init(m, n, width, rng),
            dynamics: MabParams::init(c * n, width, rng),
            semantics: MabParams::init(c, width, rng),
        };
        ModelParams { shape, layers, decoder, adapter: AdapterParams::Identity }
    }

    pub fn with_vae(mut self, vae: VaeParams) -> Self {
        self.adapter = AdapterParams::Vae(vae);
        self
    }

    // ── Flat views over the TRAINABLE parameters (adapter excluded: the
    //    VAE is pre-trained and frozen) ─────────────────────────────────

    pub fn for_each_trainable(&self, mut f: impl FnMut(String, &Tensor)) {
        for (i, layer) in self.layers.iter().enumerate() {
            mab_for_each(&format!("enc{i}.dyn"), &layer.dynamics, &mut f);
            mab_for_each(&format!("enc{i}.sem"), &layer.semantics, &mut f);
            bn_for_each(&format!("enc{i}.merge"), &layer.merge, &mut f);
            bn_for_each(&format!("enc{i}.res"), &layer.residual, &mut f);
        }
        bn_for_each("dec.bn1", &self.decoder.bn1, &mut f);
        bn_for_each("dec.bn2", &self.decoder.bn2, &mut f);
        mab_for_each("dec.dyn", &self.decoder.dynamics, &mut f);
        mab_for_each("dec.sem", &self.decoder.semantics, &mut f);
    }

    fn for_each_trainable_mut(&mut self, mut f: impl FnMut(&mut Tensor)) {
        for layer in &mut self.layers {
            mab_for_each_mut(&mut layer.dynamics, &mut f);
            mab_for_each_mut(&mut layer.semantics, &mut f);
            bn_for_each_mut(&mut layer.merge, &mut f);
            bn_for_each_mut(&mut layer.residual, &mut f);
        }
        bn_for_each_mut(&mut self.decoder.bn1, &mut f);
        bn_for_each_mut(&mut self.decoder.bn2, &mut f);
        mab_for_each_mut(&mut self.decoder.dynamics, &mut f);
        mab_for_each_mut(&mut self.decoder.semantics, &mut f);
    }

    pub fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.for_each_trainable(|_, t| n += t.len());
        n
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_trainable());
        self.for_each_trainable(|_, t| out.extend_from_slice(t.data()));
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.for_each_trainable_mut(|t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        assert_eq!(off, flat.len(), "flat parameter vector length mismatch");
    }

    /// Trainable tensor names in flatten order (for diagnostics).
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_trainable(|n, _| names.push(n));
        names
    }

    // ── Checkpoint container ─────────────────────────────────────────

    pub fn to_container(&self, config_echo: &str) -> Container {
        let mut tensors = Vec::new();
        self.for_each_trainable(|name, t| tensors.push((name, t.clone())));
        if let AdapterParams::Vae(v) = &self.adapter {
            for (name, t) in vae_named(v) {
                tensors.push((name, t.clone()));
            }
        }
        let meta = vec![
            ("m".to_string(), self.shape.m.to_string()),
            ("n".to_string(), self.shape.n.to_string()),
            ("c".to_string(), self.shape.c.to_string()),
            ("enc_layers".to_string(), self.layers.len().to_string()),
            ("adapter".to_string(), self.adapter.mode_name().to_string()),
        ];
        Container { config_echo: config_echo.to_string(), meta, tensors }
    }

    /// Rebuild parameters from a container, consuming its tensors. Extra
    /// tensors (optimizer state etc.) are left in place for the caller.
    pub fn from_container(c: &mut Container) -> Result<Self> {
        let get_meta = |c: &Container, key: &str| -> Result<String> {
            c.meta_value(key)
                .map(str::to_string)
                .ok_or_else(|| Error::Parse(format!("checkpoint missing meta `{key}`")))
        };
        let parse = |c: &Container, key: &str| -> Result<usize> {
            get_meta(c, key)?
                .parse()
                .map_err(|_| Error::Parse(format!("checkpoint meta `{key}` not an integer")))
        };
        let shape =
            ModelShape { m: parse(c, "m")?, n: parse(c, "n")?, c: parse(c, "c")? };
        let enc_layers = parse(c, "enc_layers")?;
        let adapter_mode = get_meta(c, "adapter")?;

        fn conv(c: &mut Container, prefix: &str) -> Result<ConvParams> {
            let kernel = c.take_tensor(&format!("{prefix}.kernel"))?;
            let bias = c.take_tensor(&format!("{prefix}.bias"))?;
            ConvParams::new(kernel, bias)
        }
        fn mab(c: &mut Container, prefix: &str) -> Result<MabParams> {
            Ok(MabParams {
                phi_q: conv(c, &format!("{prefix}.phi_q"))?,
                phi_k: conv(c, &format!("{prefix}.phi_k"))?,
                phi_v: conv(c, &format!("{prefix}.phi_v"))?,
                phi_c: conv(c, &format!("{prefix}.phi_c"))?,
                fusion: [
                    conv(c, &format!("{prefix}.fuse0"))?,
                    conv(c, &format!("{prefix}.fuse1"))?,
                    conv(c, &format!("{prefix}.fuse2"))?,
                ],
            })
        }
        fn bn(c: &mut Container, prefix: &str) -> Result<Bottleneck3d> {
            Ok(Bottleneck3d {
                convs: [
                    conv(c, &format!("{prefix}.conv0"))?,
                    conv(c, &format!("{prefix}.conv1"))?,
                    conv(c, &format!("{prefix}.conv2"))?,
                ],
            })
        }

        let mut layers = Vec::with_capacity(enc_layers);
        for i in 0..enc_layers {
            layers.push(EncoderLayerParams {
                dynamics: mab(c, &format!("enc{i}.dyn"))?,
                semantics: mab(c, &format!("enc{i}.sem"))?,
                merge: bn(c, &format!("enc{i}.merge"))?,
                residual: bn(c, &format!("enc{i}.res"))?,
            });
        }
        let decoder = DecoderParams {
            bn1: bn(c, "dec.bn1")?,
            bn2: bn(c, "dec.bn2")?,
            dynamics: mab(c, "dec.dyn")?,
            semantics: mab(c, "dec.sem")?,
        };
        let adapter = match adapter_mode.as_str() {
            "identity" => AdapterParams::Identity,
            "vae" => AdapterParams::Vae(VaeParams {
                enc1: conv(c, "vae.enc1")?,
                mu: conv(c, "vae.mu")?,
                logvar: conv(c, "vae.logvar")?,
                dec1: conv(c, "vae.dec1")?,
                dec2: conv(c, "vae.dec2")?,
            }),
            other => {
                return Err(Error::Config(format!(
                    "checkpoint declares unknown adapter `{other}`"
                )))
            }
        };
        Ok(ModelParams { shape, layers, decoder, adapter })
    }

    pub fn save(&self, path: &Path, config_echo: &str) -> Result<()> {
        io::write_container_atomic(path, CHECKPOINT_MAGIC, &self.to_container(config_echo))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let mut c = io::read_container_file(path, CHECKPOINT_MAGIC)?;
        let echo = c.config_echo.clone();
        Ok((Self::from_container(&mut c)?, echo))
    }
}

fn mab_for_each(prefix: &str, p: &MabParams, f: &mut impl FnMut(String, &Tensor)) {
    for (name, cp) in [
        ("phi_q", &p.phi_q),
        ("phi_k", &p.phi_k),
        ("phi_v", &p.phi_v),
        ("phi_c", &p.phi_c),
        ("fuse0", &p.fusion[0]),
        ("fuse1", &p.fusion[1]),
        ("fuse2", &p.fusion[2]),
    ] {
        f(format!("{prefix}.{name}.kernel"), &cp.kernel);
        f(format!("{prefix}.{name}.bias"), &cp.bias);
    }
}

fn mab_for_each_mut(p: &mut MabParams, f: &mut impl FnMut(&mut Tensor)) {
    for cp in [&mut p.phi_q, &mut p.phi_k, &mut p.phi_v, &mut p.phi_c] {
        f(&mut cp.kernel);
        f(&mut cp.bias);
    }
    for cp in &mut p.fusion {
        f(&mut cp.kernel);
        f(&mut cp.bias);
    }
}

fn bn_for_each(prefix: &str, p: &Bottleneck3d, f: &mut impl FnMut(String, &Tensor)) {
    for (i, cp) in p.convs.iter().enumerate() {
        f(format!("{prefix}.conv{i}.kernel"), &cp.kernel);
        f(format!("{prefix}.conv{i}.bias"), &cp.bias);
    }
}

fn bn_for_each_mut(p: &mut Bottleneck3d, f: &mut impl FnMut(&mut Tensor)) {
    for cp in &mut p.convs {
        f(&mut cp.kernel);
        f(&mut cp.bias);
    }
}

fn vae_named(v: &VaeParams) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (name, cp) in [
        ("vae.enc1", &v.enc1),
        ("vae.mu", &v.mu),
        ("vae.logvar", &v.logvar),
        ("vae.dec1", &v.dec1),
        ("vae.dec2", &v.dec2),
    ] {
        out.push((format!("{name}.kernel"), &cp.kernel));
        out.push((format!("{name}.bias"), &cp.bias));
    }
    out
}

// ── Concatenation operations (pure) ─────────────────────────────────────

/// Stack time into the channel axis, frame-major: channel index = t*c + k.
/// A pure reshape in row-major storage.
pub fn concat_depth(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 4 {
        return Err(Error::dim("concat_depth", "rank", 4, x.ndim()));
    }
    let s = x.shape();
    x.reshape(&[s[0] * s[1], s[2], s[3]])
}

pub fn concat_depth_inverse(d: &Tensor, m: usize, c: usize) -> Result<Tensor> {
    if d.ndim() != 3 {
        return Err(Error::dim("concat_depth_inverse", "rank", 3, d.ndim()));
    }
    if d.shape()[0] != m * c {
        return Err(Error::dim("concat_depth_inverse", "channels", m * c, d.shape()[0]));
    }
    d.reshape(&[m, c, d.shape()[1], d.shape()[2]])
}

/// Stack time along the height axis: row block t occupies rows
/// [t*h, (t+1)*h) of the `c x (m*h) x w` result.
pub fn concat_breadth(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 4 {
        return Err(Error::dim("concat_breadth", "rank", 4, x.ndim()));
    }
    let s = x.shape().to_vec();
    let xt = crate::tensor::permute(x, &[1, 0, 2, 3])?;
    xt.reshape(&[s[1], s[0] * s[2], s[3]])
}

pub fn concat_breadth_inverse(sx: &Tensor, m: usize, h: usize) -> Result<Tensor> {
    if sx.ndim() != 3 {
        return Err(Error::dim("concat_breadth_inverse", "rank", 3, sx.ndim()));
    }
    if sx.shape()[1] != m * h {
        return Err(Error::dim("concat_breadth_inverse", "height", m * h, sx.shape()[1]));
    }
    let c = sx.shape()[0];
    let w = sx.shape()[2];
    let s4 = sx.reshape(&[c, m, h, w])?;
    crate::tensor::permute(&s4, &[1, 0, 2, 3])
}

// ── Tape bindings ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Bottleneck3dVars {
    pub convs: [ConvVars; 3],
}

fn bind_bn(tape: &mut Tape, p: &Bottleneck3d) -> Bottleneck3dVars {
    Bottleneck3dVars {
        convs: [
            bind_conv(tape, &p.convs[0]),
            bind_conv(tape, &p.convs[1]),
            bind_conv(tape, &p.convs[2]),
        ],
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayerVars {
    pub dynamics: MabVars,
    pub semantics: MabVars,
    pub merge: Bottleneck3dVars,
    pub residual: Bottleneck3dVars,
}

#[derive(Debug, Clone)]
pub struct DecoderVars {
    pub bn1: Bottleneck3dVars,
    pub bn2: Bottleneck3dVars,
    pub dynamics: MabVars,
    pub semantics: MabVars,
}

#[derive(Debug, Clone)]
pub enum AdapterVars {
    Identity,
    Vae(VaeVars),
}

#[derive(Debug, Clone)]
pub struct VaeVars {
    pub enc1: ConvVars,
    pub mu: ConvVars,
    pub logvar: ConvVars,
    pub dec1: ConvVars,
    pub dec2: ConvVars,
}

fn bind_vae(tape: &mut Tape, v: &VaeParams, trainable: bool) -> VaeVars {
    let mut bind = |tape: &mut Tape, p: &ConvParams| {
        if trainable {
            bind_conv(tape, p)
        } else {
            ConvVars {
                kernel: tape.constant(p.kernel.clone()),
                bias: tape.constant(p.bias.clone()),
            }
        }
    };
    VaeVars {
        enc1: bind(tape, &v.enc1),
        mu: bind(tape, &v.mu),
        logvar: bind(tape, &v.logvar),
        dec1: bind(tape, &v.dec1),
        dec2: bind(tape, &v.dec2),
    }
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub shape: ModelShape,
    pub layers: Vec<EncoderLayerVars>,
    pub decoder: DecoderVars,
    pub adapter: AdapterVars,
}

/// Register all parameters on the tape. Trainable tensors become tape
/// params in the same order as [`ModelParams::for_each_trainable`]; the
/// adapter binds as constants (it is frozen after pre-training).
pub fn bind_model(tape: &mut Tape, p: &ModelParams) -> ModelVars {
    let layers = p
        .layers
        .iter()
        .map(|l| EncoderLayerVars {
            dynamics: bind_mab(tape, &l.dynamics),
            semantics: bind_mab(tape, &l.semantics),
            merge: bind_bn(tape, &l.merge),
            residual: bind_bn(tape, &l.residual),
        })
        .collect();
    let decoder = DecoderVars {
        bn1: bind_bn(tape, &p.decoder.bn1),
        bn2: bind_bn(tape, &p.decoder.bn2),
        dynamics: bind_mab(tape, &p.decoder.dynamics),
        semantics: bind_mab(tape, &p.decoder.semantics),
    };
    let adapter = match &p.adapter {
        AdapterParams::Identity => AdapterVars::Identity,
        AdapterParams::Vae(v) => AdapterVars::Vae(bind_vae(tape, v, false)),
    };
    ModelVars { shape: p.shape, layers, decoder, adapter }
}

impl ModelVars {
    /// Trainable vars in [`ModelParams::for_each_trainable`] order.
    pub fn trainable_vars(&self) -> Vec<Var> {
        fn push_mab(mv: &MabVars, out: &mut Vec<Var>) {
            for cv in [&mv.phi_q, &mv.phi_k, &mv.phi_v, &mv.phi_c] {
                out.push(cv.kernel);
                out.push(cv.bias);
            }
            for cv in &mv.fusion {
                out.push(cv.kernel);
                out.push(cv.bias);
            }
        }
        fn push_bn(bv: &Bottleneck3dVars, out: &mut Vec<Var>) {
            for cv in &bv.convs {
                out.push(cv.kernel);
                out.push(cv.bias);
            }
        }
        let mut out = Vec::new();
        for l in &self.layers {
            push_mab(&l.dynamics, &mut out);
            push_mab(&l.semantics, &mut out);
            push_bn(&l.merge, &mut out);
            push_bn(&l.residual, &mut out);
        }
        push_bn(&self.decoder.bn1, &mut out);
        push_bn(&self.decoder.bn2, &mut out);
        push_mab(&self.decoder.dynamics, &mut out);
        push_mab(&self.decoder.semantics, &mut out);
        out
    }

    /// Flat gradient vector aligned with [`ModelParams::flatten`].
    pub fn flat_grads(&self, tape: &Tape) -> Vec<f64> {
        let mut out = Vec::new();
        for v in self.trainable_vars() {
            out.extend_from_slice(tape.param_grad(v).data());
        }
        out
    }
}

// ── Forward passes (tape) ────────────────────────────────────────────────

fn bottleneck3d_tape(tape: &mut Tape, x: Var, bv: &Bottleneck3dVars) -> Result<Var> {
    let b1 = tape.conv3d(x, bv.convs[0].kernel, bv.convs[0].bias)?;
    let r1 = tape.relu(b1);
    let b2 = tape.conv3d(r1, bv.convs[1].kernel, bv.convs[1].bias)?;
    let r2 = tape.relu(b2);
    tape.conv3d(r2, bv.convs[2].kernel, bv.convs[2].bias)
}

/// Apply a 3D bottleneck with the category axis as the convolution channel:
/// permute `m x q x h x w` to `q x m x h x w`, convolve q -> r, permute back.
fn category_bottleneck_tape(tape: &mut Tape, x: Var, bv: &Bottleneck3dVars) -> Result<Var> {
    let xc = tape.permute(x, &[1, 0, 2, 3])?;
    let yc = bottleneck3d_tape(tape, xc, bv)?;
    tape.permute(yc, &[1, 0, 2, 3])
}

/// Latent handles produced by the encoder.
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    /// First-layer dynamics D', in depth-concatenated form (c*m) x h x w.
    pub dynamics: Var,
    /// First-layer semantics S', in breadth-concatenated form c x (m*h) x w.
    /// This is the contrastive-learning target.
    pub semantics: Var,
    /// Merged latent U of the last layer, m x c x h x w.
    pub merged: Var,
}

/// One encoder layer. Returns (D', S', U) with U shaped like the input.
pub fn encoder_layer_tape(
    tape: &mut Tape,
    x: Var,
    lv: &EncoderLayerVars,
) -> Result<(Var, Var, Var)> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 4 {
        return Err(Error::dim("encoder_layer", "rank", 4, s.len()));
    }
    let (m, c, h, w) = (s[0], s[1], s[2], s[3]);

    let d = tape.reshape(x, &[c * m, h, w])?;
    let d_prime = mab_forward_tape(tape, d, &lv.dynamics)?;
    let x_d = tape.reshape(d_prime, &[m, c, h, w])?;

    let xt = tape.permute(x, &[1, 0, 2, 3])?;
    let sb = tape.reshape(xt, &[c, m * h, w])?;
    let s_prime = mab_forward_tape(tape, sb, &lv.semantics)?;
    let s4 = tape.reshape(s_prime, &[c, m, h, w])?;
    let x_s = tape.permute(s4, &[1, 0, 2, 3])?;

    let cat = tape.concat(x_d, x_s, 1)?; // m x 2c x h x w
    let merged = category_bottleneck_tape(tape, cat, &lv.merge)?;
    let residual = category_bottleneck_tape(tape, x, &lv.residual)?;
    let u = tape.add(merged, residual)?;
    Ok((d_prime, s_prime, u))
}

/// Stacked encoder. Layer k+1 consumes layer k's U. The returned D'/S' come
/// from the first layer (its input is the raw observation, which is what
/// the permutation-positive of the contrastive objective reorders).
pub fn encode_tape(tape: &mut Tape, x: Var, mv: &ModelVars) -> Result<LatentVars> {
    if mv.layers.is_empty() {
        return Err(Error::Contract("encoder has no layers".into()));
    }
    let (d0, s0, mut u) = encoder_layer_tape(tape, x, &mv.layers[0])?;
    for lv in &mv.layers[1..] {
        let (_, _, next) = encoder_layer_tape(tape, u, lv)?;
        u = next;
    }
    Ok(LatentVars { dynamics: d0, semantics: s0, merged: u })
}

/// Just the first-layer semantics path (what the contrastive loss compares
/// for positives and negatives).
pub fn semantics_extraction_tape(tape: &mut Tape, x: Var, mv: &ModelVars) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    let (m, c, h, w) = (s[0], s[1], s[2], s[3]);
    let xt = tape.permute(x, &[1, 0, 2, 3])?;
    let sb = tape.reshape(xt, &[c, m * h, w])?;
    let _ = w;
    let _ = h;
    mab_forward_tape(tape, sb, &mv.layers[0].semantics)
}

/// Decoder: two stacked 3D bottlenecks projecting the time axis m -> m -> n,
/// then a consecutive dynamics MAB pass and semantics MAB pass through the
/// concatenation bijections.
pub fn decode_tape(tape: &mut Tape, u: Var, mv: &ModelVars) -> Result<Var> {
    let s = tape.value(u).shape().to_vec();
    if s.len() != 4 {
        return Err(Error::dim("decode", "rank", 4, s.len()));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let n = mv.shape.n;

    let h1 = bottleneck3d_tape(tape, u, &mv.decoder.bn1)?;
    let yhat = bottleneck3d_tape(tape, h1, &mv.decoder.bn2)?; // n x c x h x w

    let d = tape.reshape(yhat, &[c * n, h, w])?;
    let dp = mab_forward_tape(tape, d, &mv.decoder.dynamics)?;
    let y_d = tape.reshape(dp, &[n, c, h, w])?;

    let yt = tape.permute(y_d, &[1, 0, 2, 3])?;
    let sb = tape.reshape(yt, &[c, n * h, w])?;
    let sp = mab_forward_tape(tape, sb, &mv.decoder.semantics)?;
    let s4 = tape.reshape(sp, &[c, n, h, w])?;
    tape.permute(s4, &[1, 0, 2, 3])
}

fn vae_encode_frame(
    tape: &mut Tape,
    frame: Var,
    vv: &VaeVars,
    noise: Option<&Tensor>,
) -> Result<(Var, Var, Var)> {
    let e1 = tape.conv2d(frame, vv.enc1.kernel, vv.enc1.bias)?;
    let r1 = tape.relu(e1);
    let pooled = tape.avg_pool2(r1)?;
    let mu = tape.conv2d(pooled, vv.mu.kernel, vv.mu.bias)?;
    let logvar = tape.conv2d(pooled, vv.logvar.kernel, vv.logvar.bias)?;
    let z = match noise {
        None => mu,
        Some(eps) => {
            let half = tape.scale(logvar, 0.5);
            let sigma = tape.exp(half);
            let e = tape.constant(eps.clone());
            let se = tape.mul(sigma, e)?;
            tape.add(mu, se)?
        }
    };
    Ok((z, mu, logvar))
}

fn vae_decode_frame(tape: &mut Tape, z: Var, vv: &VaeVars) -> Result<Var> {
    let d1 = tape.conv2d(z, vv.dec1.kernel, vv.dec1.bias)?;
    let r1 = tape.relu(d1);
    let up = tape.upsample2(r1)?;
    tape.conv2d(up, vv.dec2.kernel, vv.dec2.bias)
}

/// Stack per-frame 3D tensors into one 4D tensor along a new axis 0.
fn stack_frames(tape: &mut Tape, frames: &[Var]) -> Result<Var> {
    let fs = tape.value(frames[0]).shape().to_vec();
    let unit = [&[1usize][..], &fs[..]].concat();
    let mut acc = tape.reshape(frames[0], &unit)?;
    for &f in &frames[1..] {
        let fu = tape.reshape(f, &unit)?;
        acc = tape.concat(acc, fu, 0)?;
    }
    Ok(acc)
}

/// Map a stack of frames through the adapter encoder. Identity passes
/// through; the VAE halves spatial dims per frame. `noise` supplies one
/// standard-normal tensor per frame for the reparameterized sample; `None`
/// uses the latent mean (prediction mode).
pub fn adapter_encode_tape(
    tape: &mut Tape,
    x: Var,
    av: &AdapterVars,
    noise: Option<&[Tensor]>,
) -> Result<Var> {
    match av {
        AdapterVars::Identity => Ok(x),
        AdapterVars::Vae(vv) => {
            let s = tape.value(x).shape().to_vec();
            if s[2] % 2 != 0 || s[3] % 2 != 0 {
                return Err(Error::dim(
                    "adapter_encode",
                    "even spatial dims",
                    s[2] / 2 * 2,
                    s[2],
                ));
            }
            let mut frames = Vec::with_capacity(s[0]);
            for t in 0..s[0] {
                let f = tape.slice0(x, t)?;
                let eps = noise.map(|n| &n[t]);
                let (z, _, _) = vae_encode_frame(tape, f, vv, eps)?;
                frames.push(z);
            }
            stack_frames(tape, &frames)
        }
    }
}

/// Map latent frames back to observation space.
pub fn adapter_decode_tape(tape: &mut Tape, y: Var, av: &AdapterVars) -> Result<Var> {
    match av {
        AdapterVars::Identity => Ok(y),
        AdapterVars::Vae(vv) => {
            let s = tape.value(y).shape().to_vec();
            let mut frames = Vec::with_capacity(s[0]);
            for t in 0..s[0] {
                let f = tape.slice0(y, t)?;
                frames.push(vae_decode_frame(tape, f, vv)?);
            }
            stack_frames(tape, &frames)
        }
    }
}

/// Handles produced by a full forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub latent: LatentVars,
    /// Prediction in observation space, n x c x grid_h x grid_w.
    pub y_pred: Var,
}

/// Full forward: adapter-encode, encode, decode, adapter-decode.
pub fn model_forward_tape(
    tape: &mut Tape,
    x: &Tensor,
    mv: &ModelVars,
    noise: Option<&[Tensor]>,
) -> Result<ForwardVars> {
    if x.ndim() != 4 {
        return Err(Error::dim("model_forward", "rank", 4, x.ndim()));
    }
    if x.shape()[0] != mv.shape.m {
        return Err(Error::dim("model_forward", "history length", mv.shape.m, x.shape()[0]));
    }
    if x.shape()[1] != mv.shape.c {
        return Err(Error::dim("model_forward", "categories", mv.shape.c, x.shape()[1]));
    }
    let xv = tape.constant(x.clone());
    let enc_in = adapter_encode_tape(tape, xv, &mv.adapter, noise)?;
    let latent = encode_tape(tape, enc_in, mv)?;
    let y_core = decode_tape(tape, latent.merged, mv)?;
    let y_pred = adapter_decode_tape(tape, y_core, &mv.adapter)?;
    Ok(ForwardVars { latent, y_pred })
}

// ── Pure wrappers ────────────────────────────────────────────────────────

/// Extracted dynamics D', semantics S', and merged latent U for one input.
#[derive(Debug, Clone)]
pub struct LatentBundle {
    pub dynamics: Tensor,
    pub semantics: Tensor,
    pub merged: Tensor,
}

/// Core-space encoder (no adapter). Input m x c x h x w.
pub fn encode(x: &Tensor, params: &ModelParams) -> Result<LatentBundle> {
    let mut tape = Tape::new();
    let mv = bind_model(&mut tape, params);
    let xv = tape.constant(x.clone());
    let lv = encode_tape(&mut tape, xv, &mv)?;
    Ok(LatentBundle {
        dynamics: tape.value(lv.dynamics).clone(),
        semantics: tape.value(lv.semantics).clone(),
        merged: tape.value(lv.merged).clone(),
    })
}

/// Core-space decoder (no adapter). Input m x c x h x w, output n x c x h x w.
pub fn decode(u: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mv = bind_model(&mut tape, params);
    let uv = tape.constant(u.clone());
    let y = decode_tape(&mut tape, uv, &mv)?;
    Ok(tape.value(y).clone())
}

/// Observation-space prediction: adapter + encoder + decoder + adapter.
/// VAE adapters use the latent mean (no sampling).
pub fn predict(x: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mv = bind_model(&mut tape, params);
    let out = model_forward_tape(&mut tape, x, &mv, None)?;
    Ok(tape.value(out.y_pred).clone())
}

/// Identity-mode adapter passthrough / VAE-mode encode of a frame stack.
pub fn adapter_encode(x: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mv = bind_model(&mut tape, params);
    let xv = tape.constant(x.clone());
    let out = adapter_encode_tape(&mut tape, xv, &mv.adapter, None)?;
    Ok(tape.value(out).clone())
}

pub fn adapter_decode(y: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mv = bind_model(&mut tape, params);
    let yv = tape.constant(y.clone());
    let out = adapter_decode_tape(&mut tape, yv, &mv.adapter)?;
    Ok(tape.value(out).clone())
}

// ── VAE pre-training ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct VaePretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub hidden: usize,
}

impl Default for VaePretrainConfig {
    fn default() -> Self {
        VaePretrainConfig { epochs: 300, learning_rate: 1e-3, hidden: 8 }
    }
}

/// Evidence lower bound pieces for one frame: squared reconstruction error
/// plus the closed-form KL of the diagonal Gaussian to the standard normal,
/// 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar).
fn vae_frame_loss(tape: &mut Tape, frame: &Tensor, vv: &VaeVars, eps: &Tensor) -> Result<Var> {
    let fv = tape.constant(frame.clone());
    let (z, mu, logvar) = vae_encode_frame(tape, fv, vv, Some(eps))?;
    let recon = vae_decode_frame(tape, z, vv)?;
    let diff = tape.sub(recon, fv)?;
    let sq = tape.mul(diff, diff)?;
    let rec_loss = tape.sum_all(sq);

    let mu2 = tape.mul(mu, mu)?;
    let ev = tape.exp(logvar);
    let a = tape.add(mu2, ev)?;
    let b = tape.offset(a, -1.0);
    let inner = tape.sub(b, logvar)?;
    let kl_sum = tape.sum_all(inner);
    let kl = tape.scale(kl_sum, 0.5);
    tape.add(rec_loss, kl)
}

fn vae_flatten(v: &VaeParams) -> Vec<f64> {
    let mut out = Vec::new();
    for (_, t) in vae_named(v) {
        out.extend_from_slice(t.data());
    }
    out
}

fn vae_assign(v: &mut VaeParams, flat: &[f64]) {
    let mut off = 0;
    for cp in [&mut v.enc1, &mut v.mu, &mut v.logvar, &mut v.dec1, &mut v.dec2] {
        for t in [&mut cp.kernel, &mut cp.bias] {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
    assert_eq!(off, flat.len());
}

/// Pre-train the per-frame VAE on raw occurrence frames with the standard
/// ELBO (reparameterized sample, Adam). Returns the frozen parameters and
/// the per-epoch loss curve.
pub fn vae_pretrain(
    frames: &[Tensor],
    cfg: &VaePretrainConfig,
    rng: &mut impl rand::Rng,
) -> Result<(VaeParams, Vec<f64>)> {
    if frames.is_empty() {
        return Err(Error::Contract("vae_pretrain: no training frames".into()));
    }
    let c = frames[0].shape()[0];
    let (h, w) = (frames[0].shape()[1], frames[0].shape()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim("vae_pretrain", "even spatial dims", h / 2 * 2, h));
    }
    let mut params = VaeParams::init(c, cfg.hidden, rng);
    let mut opt = OptState::new(vae_flatten(&params).len());
    let mut curve = Vec::with_capacity(cfg.epochs);
    for step in 0..cfg.epochs {
        let mut tape = Tape::new();
        let vv = bind_vae(&mut tape, &params, true);
        let mut total: Option<Var> = None;
        for frame in frames {
            let eps_data: Vec<f64> =
                (0..c * (h / 2) * (w / 2)).map(|_| standard_normal(rng)).collect();
            let eps = Tensor::from_vec(&[c, h / 2, w / 2], eps_data)?;
            let l = vae_frame_loss(&mut tape, frame, &vv, &eps)?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let total = total.unwrap();
        let loss = tape.scale(total, 1.0 / frames.len() as f64);
        let loss_val = tape.value(loss).data()[0];
        if !loss_val.is_finite() {
            return Err(Error::NonFinite { step, last_good: None });
        }
        curve.push(loss_val);
        tape.backward(loss)?;

        let mut grads = Vec::new();
        for cv in [&vv.enc1, &vv.mu, &vv.logvar, &vv.dec1, &vv.dec2] {
            grads.extend_from_slice(tape.param_grad(cv.kernel).data());
            grads.extend_from_slice(tape.param_grad(cv.bias).data());
        }
        let mut flat = vae_flatten(&params);
        apply_update(Optimizer::adam_default(), &mut opt, &mut flat, &grads, cfg.learning_rate);
        vae_assign(&mut params, &flat);
    }
    Ok((params, curve))
}

/// Box-Muller standard normal draw.
pub fn standard_normal(rng: &mut impl rand::Rng) -> f64 {
    use rand::RngExt;
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{rand_tensor, rng};

    fn small_params(m: usize, n: usize, c: usize, seed: u64) -> ModelParams {
        let mut r = rng(seed);
        ModelParams::init(ModelShape { m, n, c }, 2, None, &mut r)
    }

    #[test]
    fn concat_depth_layout_and_roundtrip() {
        let mut r = rng(50);
        let x = rand_tensor(&[2, 3, 4, 4], &mut r);
        let d = concat_depth(&x).unwrap();
        assert_eq!(d.shape(), &[6, 4, 4]);
        // Channel 4 = frame 1, category 1 (0-based): t*c + k = 1*3 + 1.
        for y in 0..4 {
            for xx in 0..4 {
                assert_eq!(d.at(&[4, y, xx]), x.at(&[1, 1, y, xx]));
            }
        }
        let back = concat_depth_inverse(&d, 2, 3).unwrap();
        assert_eq!(back, x);

        let x1 = rand_tensor(&[1, 3, 2, 2], &mut r);
        assert_eq!(concat_depth(&x1).unwrap().data(), x1.data());
    }

    #[test]
    fn concat_breadth_layout_and_roundtrip() {
        let mut r = rng(51);
        let x = rand_tensor(&[2, 3, 10, 4], &mut r);
        let s = concat_breadth(&x).unwrap();
        assert_eq!(s.shape(), &[3, 20, 4]);
        // Row 13 = frame 1, row 3: t*h + i = 10 + 3.
        for k in 0..3 {
            for xx in 0..4 {
                assert_eq!(s.at(&[k, 13, xx]), x.at(&[1, k, 3, xx]));
            }
        }
        let back = concat_breadth_inverse(&s, 2, 10).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn encoder_layer_preserves_shape() {
        let mut r = rng(52);
        let params = small_params(3, 2, 2, 52);
        let x = rand_tensor(&[3, 2, 4, 4], &mut r);
        let mut tape = Tape::new();
        let mv = bind_model(&mut tape, &params);
        let xv = tape.constant(x.clone());
        let (d, s, u) = encoder_layer_tape(&mut tape, xv, &mv.layers[0]).unwrap();
        assert_eq!(tape.value(d).shape(), &[6, 4, 4]);
        assert_eq!(tape.value(s).shape(), &[2, 12, 4]);
        assert_eq!(tape.value(u).shape(), x.shape());
    }

    #[test]
    fn zeroed_layer_reduces_u_to_twice_input() {
        // MAB fusion zero -> attention blocks are the identity; merge and
        // residual bottlenecks set to channel-identity pass X through, so
        // U = X + X for nonnegative X.
        let mut r = rng(53);
        let mut params = small_params(2, 1, 2, 53);
        let layer = &mut params.layers[0];
        layer.dynamics = layer.dynamics.clone().with_zero_fusion();
        layer.semantics = layer.semantics.clone().with_zero_fusion();
        layer.merge = Bottleneck3d::channel_identity(4, 2);
        layer.residual = Bottleneck3d::channel_identity(2, 2);

        let x = rand_tensor(&[2, 2, 3, 3], &mut r).map(f64::abs);
        let mut tape = Tape::new();
        let mv = bind_model(&mut tape, &params);
        let xv = tape.constant(x.clone());
        let (_, _, u) = encoder_layer_tape(&mut tape, xv, &mv.layers[0]).unwrap();
        let expect = x.map(|v| 2.0 * v);
        assert!(tape.value(u).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn identity_second_layer_reproduces_single_layer_output() {
        // Second layer: MAB fusion zero, merge all-zero, residual
        // channel-identity => U2 = relu-passthrough of U1, which equals U1
        // wherever U1 >= 0.
        let mut params = small_params(2, 1, 2, 54);
        let l2 = &mut params.layers[1];
        l2.dynamics = l2.dynamics.clone().with_zero_fusion();
        l2.semantics = l2.semantics.clone().with_zero_fusion();
        l2.merge = Bottleneck3d::zeros(4, 2, None);
        l2.residual = Bottleneck3d::channel_identity(2, 2);

        let mut r = rng(55);
        let x = rand_tensor(&[2, 2, 3, 3], &mut r);

        let mut tape = Tape::new();
        let mv = bind_model(&mut tape, &params);
        let xv = tape.constant(x.clone());
        let (_, _, u1) = encoder_layer_tape(&mut tape, xv, &mv.layers[0]).unwrap();
        let two = encode_tape(&mut tape, xv, &mv).unwrap();
        let u1_t = tape.value(u1).clone();
        let expect = u1_t.map(|v| v.max(0.0));
        assert!(tape.value(two.merged).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn encode_decode_shape_contracts() {
        let mut r = rng(56);
        for &(m, n, c, h, w) in &[(1, 1, 1, 1, 1), (3, 2, 2, 4, 4), (2, 3, 1, 5, 2)] {
            let params = small_params(m, n, c, 560 + m as u64);
            let x = rand_tensor(&[m, c, h, w], &mut r);
            let b = encode(&x, &params).unwrap();
            assert_eq!(b.dynamics.shape(), &[c * m, h, w]);
            assert_eq!(b.semantics.shape(), &[c, m * h, w]);
            assert_eq!(b.merged.shape(), &[m, c, h, w]);
            let y = decode(&b.merged, &params).unwrap();
            assert_eq!(y.shape(), &[n, c, h, w]);
            assert!(y.all_finite());
        }
    }

    #[test]
    fn decoder_zero_mabs_equal_bottlenecks_alone() {
        let mut params = small_params(2, 2, 2, 57);
        params.decoder.dynamics = params.decoder.dynamics.clone().with_zero_fusion();
        params.decoder.semantics = params.decoder.semantics.clone().with_zero_fusion();
        let mut r = rng(58);
        let u = rand_tensor(&[2, 2, 3, 3], &mut r);

        let y = decode(&u, &params).unwrap();

        let mut tape = Tape::new();
        let mv = bind_model(&mut tape, &params);
        let uv = tape.constant(u.clone());
        let h1 = bottleneck3d_tape(&mut tape, uv, &mv.decoder.bn1).unwrap();
        let yhat = bottleneck3d_tape(&mut tape, h1, &mv.decoder.bn2).unwrap();
        assert!(y.max_abs_diff(tape.value(yhat)) < 1e-12);
    }

    #[test]
    fn encode_gradient_matches_finite_differences() {
        let params = small_params(2, 1, 2, 59);
        let mut r = rng(60);
        let x = rand_tensor(&[2, 2, 3, 3], &mut r);

        let mut tape = Tape::new();
        let mv = bind_model(&mut tape, &params);
        let xv = tape.param(x.clone());
        let lv = encode_tape(&mut tape, xv, &mv).unwrap();
        let root = tape.sum_all(lv.merged);
        tape.backward(root).unwrap();
        let gx = tape.param_grad(xv);

        let eval = |x: &Tensor| -> f64 { encode(x, &params).unwrap().merged.sum() };
        let step = 1e-5;
        for e in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[e] += step;
            let mut xm = x.clone();
            xm.data_mut()[e] -= step;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * step);
            let ad = gx.data()[e];
            let denom = ad.abs().max(fd.abs());
            if denom > 1e-6 {
                assert!((ad - fd).abs() / denom < 1e-4, "entry {e}: ad={ad} fd={fd}");
            }
        }
    }

    #[test]
    fn flatten_assign_roundtrip_and_alignment() {
        let params = small_params(2, 2, 2, 61);
        let flat = params.flatten();
        assert_eq!(flat.len(), params.num_trainable());

        let mut tape = Tape::new();
        let mv = bind_model(&mut tape, &params);
        let vars = mv.trainable_vars();
        let total: usize = vars.iter().map(|&v| tape.value(v).len()).sum();
        assert_eq!(total, flat.len());
        // Values along the two traversals agree elementwise.
        let mut from_vars = Vec::new();
        for &v in &vars {
            from_vars.extend_from_slice(tape.value(v).data());
        }
        assert_eq!(from_vars, flat);

        let mut params2 = small_params(2, 2, 2, 62);
        params2.assign_flat(&flat);
        assert_eq!(params2.flatten(), flat);
    }

    #[test]
    fn checkpoint_roundtrip_bitwise() {
        let params = small_params(3, 2, 2, 63);
        let dir = std::env::temp_dir().join(format!("mapsed-model-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        params.save(&path, "k = v\n").unwrap();
        let (loaded, echo) = ModelParams::load(&path).unwrap();
        assert_eq!(echo, "k = v\n");
        assert_eq!(loaded, params);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn identity_adapter_roundtrip_exact() {
        let params = small_params(2, 1, 2, 64);
        let mut r = rng(65);
        let x = rand_tensor(&[2, 2, 4, 4], &mut r);
        let enc = adapter_encode(&x, &params).unwrap();
        assert_eq!(enc, x);
        let dec = adapter_decode(&enc, &params).unwrap();
        assert_eq!(dec, x);
    }

    #[test]
    fn vae_adapter_shape_contract() {
        let mut r = rng(66);
        let vae = VaeParams::init(2, 4, &mut r);
        let params = small_params(2, 1, 2, 67).with_vae(vae);
        let x = rand_tensor(&[2, 2, 4, 4], &mut r).map(f64::abs);
        let enc = adapter_encode(&x, &params).unwrap();
        assert_eq!(enc.shape(), &[2, 2, 2, 2]);
        let dec = adapter_decode(&enc, &params).unwrap();
        assert_eq!(dec.shape(), x.shape());
        let full = predict(&x, &params).unwrap();
        assert_eq!(full.shape(), &[1, 2, 4, 4]);
    }

    #[test]
    fn vae_kl_analytic_values() {
        // KL(N(mu, s^2) || N(0,1)) per dim = 0.5 (mu^2 + s^2 - 1 - ln s^2).
        let kl = |mu: f64, logvar: f64| 0.5 * (mu * mu + logvar.exp() - 1.0 - logvar);
        assert_eq!(kl(0.0, 0.0), 0.0);
        assert_eq!(kl(1.0, 0.0), 0.5);
    }

    #[test]
    fn vae_pretrain_loss_decreases_and_reconstructs_constants() {
        let mut r = rng(68);
        let frames: Vec<Tensor> = (0..10).map(|_| Tensor::filled(&[1, 4, 4], 2.0)).collect();
        let cfg = VaePretrainConfig { epochs: 600, learning_rate: 5e-3, hidden: 4 };
        let (vae, curve) = vae_pretrain(&frames, &cfg, &mut r).unwrap();
        let head: f64 = curve[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = curve[curve.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "loss did not decrease: head {head} tail {tail}");

        let params = small_params(2, 1, 1, 69).with_vae(vae);
        let x = Tensor::filled(&[2, 1, 4, 4], 2.0);
        let enc = adapter_encode(&x, &params).unwrap();
        let dec = adapter_decode(&enc, &params).unwrap();
        let mae = dec.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).sum::<f64>()
            / x.len() as f64;
        assert!(mae < 0.05, "constant reconstruction MAE {mae}");
    }

    #[test]
    fn predict_is_finite_on_random_input() {
        let params = small_params(3, 2, 2, 70);
        let mut r = rng(71);
        let x = rand_tensor(&[3, 2, 5, 5], &mut r).map(|v| v.abs() * 3.0);
        let y = predict(&x, &params).unwrap();
        assert_eq!(y.shape(), &[2, 2, 5, 5]);
        assert!(y.all_finite());
    }
}
